use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use twfe_cli::{run, sha256_hex};
use twfe_core::diagnostics::weight_report_with_bins;
use twfe_core::robustness::SweepOptions;
use twfe_core::{
    fit_twfe, leave_one_unit_out, load_panel_csv, residual_scatter, sweep_end_year, weight_grid, Inference,
};

const BIN: &str = env!("CARGO_BIN_EXE_twfe");

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Simulates the example spec into `dir/panel.csv`.
fn simulated_panel(dir: &Path) -> PathBuf {
    let out = dir.join("panel.csv");
    let code = run([
        "twfe",
        "simulate",
        "--spec",
        &s(&workspace_file("data/example_spec.json")),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 0);
    out
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(run(["twfe", "estimate"]), 2);
    assert_eq!(run(["twfe", "frobnicate"]), 2);
    assert_eq!(run(["twfe", "estimate", "--data", "x.csv", "--level", "1.5"]), 2);
    assert_eq!(run(["twfe", "--help"]), 0);

    let out = Command::new(BIN).arg("estimate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--data"), "{stderr}");
    assert!(out.stdout.is_empty());
}

#[test]
fn data_errors_exit_one_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "unit,period,outcome,treated\nA,2000,1.0,0\nA,20x1,2.0,1\n").unwrap();
    let out = Command::new(BIN)
        .args(["estimate", "--data", &s(&bad)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("row 3") && stderr.contains("period"), "{stderr}");

    assert_eq!(
        run(["twfe", "estimate", "--data", &s(&dir.path().join("absent.csv"))]),
        1
    );
    assert_eq!(run(["twfe", "estimate", "--data", &s(&bad), "--outcome", "nope"]), 1);
}

#[test]
fn simulate_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = s(&workspace_file("data/example_spec.json"));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let status = Command::new(BIN)
            .args(["simulate", "--spec", &spec, "--seed", "7", "--out", &s(out)])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let (ba, bb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(sha256_hex(&ba), sha256_hex(&bb));
    assert_eq!(ba, bb);

    let c = dir.path().join("c.csv");
    assert_eq!(
        run(["twfe", "simulate", "--spec", &spec, "--seed", "8", "--out", &s(&c)]),
        0
    );
    assert_ne!(fs::read(&c).unwrap(), ba);
}

#[test]
fn estimate_report_is_reproducible_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated_panel(dir.path());
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    for r in [&r1, &r2] {
        assert_eq!(
            run([
                "twfe",
                "estimate",
                "--data",
                &s(&panel),
                "--no-timestamp",
                "--out",
                &s(r)
            ]),
            0
        );
    }
    // The output path is echoed in the config, so compare with it normalized.
    let text1 = fs::read_to_string(&r1).unwrap().replace(&s(&r1), "OUT");
    let text2 = fs::read_to_string(&r2).unwrap().replace(&s(&r2), "OUT");
    assert_eq!(text1, text2);

    let json: serde_json::Value = serde_json::from_str(&text1).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["config", "fit", "weights", "homogeneity", "version", "input_digest"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert!(json["config"].get("timestamp").is_none());
    assert_eq!(json["input_digest"], sha256_hex(&fs::read(&panel).unwrap()));

    let ds = load_panel_csv(&panel, &Default::default()).unwrap();
    let fit = fit_twfe(&ds, Inference::ClusterByUnit).unwrap();
    assert_eq!(json["fit"]["beta"].as_f64().unwrap(), fit.beta);
    assert_eq!(json["fit"]["se"].as_f64(), fit.se);
    assert_eq!(json["fit"]["n_treated"].as_u64().unwrap() as usize, fit.n_treated);

    let stamped = dir.path().join("r3.json");
    assert_eq!(
        run(["twfe", "estimate", "--data", &s(&panel), "--out", &s(&stamped)]),
        0
    );
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&stamped).unwrap()).unwrap();
    assert!(json["config"]["timestamp"].is_string());
}

#[test]
fn weight_csvs_hold_module_values() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated_panel(dir.path());
    let out = dir.path().join("w");
    assert_eq!(
        run([
            "twfe",
            "weights",
            "--data",
            &s(&panel),
            "--bins",
            "12",
            "--out-dir",
            &s(&out)
        ]),
        0
    );

    let ds = load_panel_csv(&panel, &Default::default()).unwrap();
    let fit = fit_twfe(&ds, Inference::Classical).unwrap();
    let report = weight_report_with_bins(&fit, 12).unwrap();

    let (header, rows) = read_csv(&out.join("histogram.csv"));
    assert_eq!(header, ["lower", "upper", "treated", "control"]);
    assert_eq!(rows.len(), 12);
    for (row, bin) in rows.iter().zip(&report.histogram) {
        assert_eq!(num(&row[0]), bin.lower);
        assert_eq!(num(&row[1]), bin.upper);
        assert_eq!(row[2].parse::<usize>().unwrap(), bin.treated);
        assert_eq!(row[3].parse::<usize>().unwrap(), bin.control);
    }

    let (_, rows) = read_csv(&out.join("weights.csv"));
    for (row, o) in rows.iter().zip(&report.per_observation) {
        assert_eq!(row[0], o.unit);
        assert_eq!(num(&row[3]).to_bits(), o.weight.to_bits());
    }

    let grid = weight_grid(&fit, &ds.implied_schedule()).unwrap();
    let (header, rows) = read_csv(&out.join("grid.csv"));
    assert_eq!(header, ["unit", "adoption", "period", "status", "weight"]);
    assert_eq!(rows.len(), grid.rows.len() * grid.periods.len());
    let cells = grid.rows.iter().flat_map(|r| r.cells.iter().map(move |c| (&r.unit, c)));
    for (row, (unit, cell)) in rows.iter().zip(cells) {
        assert_eq!(&row[0], unit);
        assert_eq!(row[3], cell.status());
        assert_eq!(num(&row[4]).to_bits(), cell.weight().unwrap().to_bits());
    }
}

#[test]
fn grid_marks_missing_cells_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    fs::write(
        &panel,
        "unit,period,outcome,treated\nA,1,1.0,0\nA,2,2.5,0\nA,3,2.0,0\nB,1,0.5,0\nB,2,4.0,1\nB,3,,1\nC,1,3.0,0\nC,2,3.5,0\nC,3,6.0,1\n",
    )
    .unwrap();
    let out = dir.path().join("w");
    assert_eq!(run(["twfe", "weights", "--data", &s(&panel), "--out-dir", &s(&out)]), 0);
    let (_, rows) = read_csv(&out.join("grid.csv"));
    let missing: Vec<_> = rows.iter().filter(|r| r[3] == "missing").collect();
    assert_eq!(missing.len(), 1);
    assert_eq!(
        (missing[0][0].as_str(), missing[0][2].as_str(), missing[0][4].as_str()),
        ("B", "3", "NaN")
    );
}

#[test]
fn scatter_csvs_hold_module_values() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated_panel(dir.path());
    let out = dir.path().join("s");
    assert_eq!(
        run([
            "twfe",
            "scatter",
            "--data",
            &s(&panel),
            "--grid",
            "9",
            "--out-dir",
            &s(&out)
        ]),
        0
    );
    let ds = load_panel_csv(&panel, &Default::default()).unwrap();
    let sc = residual_scatter(&fit_twfe(&ds, Inference::Classical).unwrap(), 0.8, 9).unwrap();

    let (_, rows) = read_csv(&out.join("scatter_points.csv"));
    assert_eq!(rows.len(), sc.points.len());
    for (row, p) in rows.iter().zip(&sc.points) {
        assert_eq!(num(&row[3]), p.dtilde);
        assert_eq!(num(&row[4]), p.ytilde);
    }
    let (_, rows) = read_csv(&out.join("scatter_lines.csv"));
    for (row, l) in rows.iter().zip(&sc.lines) {
        assert_eq!(row[0], l.group.to_string());
        assert_eq!(num(&row[1]), l.slope);
        assert_eq!(num(&row[2]), l.intercept);
    }
    let (_, rows) = read_csv(&out.join("scatter_smooth.csv"));
    let expected: Vec<(f64, f64)> = sc.smoothed.iter().flat_map(|c| c.points.iter().copied()).collect();
    assert_eq!(rows.len(), expected.len());
    for (row, (x, y)) in rows.iter().zip(expected) {
        assert_eq!((num(&row[2]), num(&row[3])), (x, y));
    }
}

#[test]
fn sweep_csvs_hold_module_values() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated_panel(dir.path());
    let ds = load_panel_csv(&panel, &Default::default()).unwrap();
    let opts = SweepOptions::new(Inference::ClusterByUnit);

    let end = dir.path().join("end.csv");
    assert_eq!(
        run([
            "twfe",
            "sweep-endyear",
            "--data",
            &s(&panel),
            "--first",
            "2003",
            "--out",
            &s(&end)
        ]),
        0
    );
    let sweep = sweep_end_year(&ds, 2003, 2007, &opts).unwrap();
    let (header, rows) = read_csv(&end);
    assert_eq!(
        header,
        [
            "label",
            "beta",
            "ci_low",
            "ci_high",
            "share_negative_treated",
            "n_obs",
            "n_treated"
        ]
    );
    assert_eq!(rows.len(), sweep.points.len());
    for (row, p) in rows.iter().zip(&sweep.points) {
        assert_eq!(row[0], p.label);
        assert_eq!(num(&row[1]), p.beta);
        assert_eq!(Some(num(&row[2])), p.ci_low);
        assert_eq!(Some(num(&row[3])), p.ci_high);
        assert_eq!(num(&row[4]), p.share_negative_treated);
        assert_eq!(row[5].parse::<usize>().unwrap(), p.n_obs);
    }

    let jk = dir.path().join("jk.csv");
    assert_eq!(
        run([
            "twfe",
            "jackknife",
            "--data",
            &s(&panel),
            "--cluster",
            "none",
            "--out",
            &s(&jk)
        ]),
        0
    );
    let sweep = leave_one_unit_out(&ds, &SweepOptions::new(Inference::Classical)).unwrap();
    let (_, rows) = read_csv(&jk);
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["A", "B", "C", "D"]);
    for (row, p) in rows.iter().zip(&sweep.points) {
        assert_eq!(num(&row[1]), p.beta);
    }

    let hz = dir.path().join("hz.csv");
    let schedule = s(&dir.path().join("schedule.csv"));
    fs::write(&schedule, "unit,adoption_period\nA,2002\nB,2004\nC,2006\nD,never\n").unwrap();
    assert_eq!(
        run([
            "twfe",
            "sweep-horizon",
            "--data",
            &s(&panel),
            "--adoption",
            &schedule,
            "--horizons",
            "0,1,2",
            "--out",
            &s(&hz)
        ]),
        0
    );
    let (_, rows) = read_csv(&hz);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1", "2"]);
}

#[test]
fn adoption_schedule_and_coding_flags_build_treatment() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    fs::write(
        &panel,
        "country,year,enrollment\nA,1,1.0\nA,2,2.0\nA,3,3.5\nB,1,2.0\nB,2,3.0\nB,3,4.0\nC,1,0.0\nC,2,2.0\nC,3,7.0\n",
    )
    .unwrap();
    let schedule = dir.path().join("s.csv");
    fs::write(&schedule, "unit,adoption_period\nA,2\nB,never\nC,3\n").unwrap();
    let base = [
        "twfe",
        "estimate",
        "--data",
        &s(&panel),
        "--unit",
        "country",
        "--time",
        "year",
        "--outcome",
        "enrollment",
    ];

    let report = |extra: &[&str]| -> serde_json::Value {
        let out = dir.path().join("r.json");
        let mut args: Vec<String> = base.iter().map(|a| a.to_string()).collect();
        args.extend([
            "--adoption".into(),
            s(&schedule),
            "--no-timestamp".into(),
            "--out".into(),
            s(&out),
        ]);
        args.extend(extra.iter().map(|a| a.to_string()));
        assert_eq!(run(args), 0);
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap()
    };
    assert_eq!(report(&[])["fit"]["n_treated"], 3);
    assert_eq!(report(&["--coding", "after-adoption"])["fit"]["n_treated"], 1);
    assert!(report(&[])["config"]["adoption_digest"].is_string());
}

#[test]
fn validate_reports_structural_problems() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    fs::write(
        &good,
        "unit,period,outcome,treated\nA,1,1,0\nA,2,2,0\nB,1,1,0\nB,2,3,1\n",
    )
    .unwrap();
    let out = dir.path().join("v.json");
    assert_eq!(run(["twfe", "validate", "--data", &s(&good), "--out", &s(&out)]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["is_valid"], true);
    assert_eq!(v["balance"], "balanced");

    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        "unit,period,outcome,treated\nA,1,1,0\nA,2,2,1\nA,3,2,0\nB,1,1,0\nB,1,3,0\nB,2,3,0\n",
    )
    .unwrap();
    assert_eq!(run(["twfe", "validate", "--data", &s(&bad), "--out", &s(&out)]), 1);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let codes: Vec<&str> = v["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["code"].as_str().unwrap())
        .collect();
    assert!(codes.contains(&"non_absorbing"), "{codes:?}");
    assert!(codes.contains(&"duplicate_key"), "{codes:?}");
}
