//! CSV serialization of module results. Values are written as returned, with
//! the shortest representation that parses back to the same `f64`; absent
//! values are empty cells.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use twfe_core::diagnostics::{ResidualScatter, WeightGrid, WeightReport};
use twfe_core::robustness::RobustnessSweep;

pub const SWEEP_HEADER: [&str; 7] = [
    "label",
    "beta",
    "ci_low",
    "ci_high",
    "share_negative_treated",
    "n_obs",
    "n_treated",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn to_file<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<File>) -> Result<()>,
{
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut wtr = csv::Writer::from_writer(file);
    write(&mut wtr)?;
    wtr.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_histogram(path: &Path, report: &WeightReport) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["lower", "upper", "treated", "control"])?;
        for b in &report.histogram {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.treated.to_string(),
                b.control.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_weights(path: &Path, report: &WeightReport) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["unit", "period", "treated", "weight"])?;
        for o in &report.per_observation {
            w.write_record([
                o.unit.clone(),
                o.period.to_string(),
                u8::from(o.treated).to_string(),
                o.weight.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// One row per cell. Missing cells carry status `missing` and weight `NaN`.
pub fn write_grid(path: &Path, grid: &WeightGrid) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["unit", "adoption", "period", "status", "weight"])?;
        for row in &grid.rows {
            for (cell, period) in row.cells.iter().zip(&grid.periods) {
                w.write_record([
                    row.unit.clone(),
                    row.adoption.to_string(),
                    period.to_string(),
                    cell.status().to_string(),
                    cell.weight().unwrap_or(f64::NAN).to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn write_scatter_points(path: &Path, sc: &ResidualScatter) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["unit", "period", "treated", "dtilde", "ytilde"])?;
        for p in &sc.points {
            w.write_record([
                p.unit.clone(),
                p.period.to_string(),
                u8::from(p.treated).to_string(),
                p.dtilde.to_string(),
                p.ytilde.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_scatter_lines(path: &Path, sc: &ResidualScatter) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["group", "slope", "intercept"])?;
        for l in &sc.lines {
            w.write_record([l.group.to_string(), l.slope.to_string(), l.intercept.to_string()])?;
        }
        Ok(())
    })
}

pub fn write_scatter_smooth(path: &Path, sc: &ResidualScatter) -> Result<()> {
    to_file(path, |w| {
        w.write_record(["group", "bandwidth", "x", "y"])?;
        for c in &sc.smoothed {
            for (x, y) in &c.points {
                w.write_record([
                    c.group.to_string(),
                    c.bandwidth.to_string(),
                    x.to_string(),
                    y.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn sweep_csv(sweep: &RobustnessSweep) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(SWEEP_HEADER)?;
    for p in &sweep.points {
        wtr.write_record([
            p.label.clone(),
            p.beta.to_string(),
            opt(p.ci_low),
            opt(p.ci_high),
            p.share_negative_treated.to_string(),
            p.n_obs.to_string(),
            p.n_treated.to_string(),
        ])?;
    }
    let mut buf = wtr.into_inner().context("flushing sweep CSV")?;
    buf.flush()?;
    Ok(buf)
}
