//! Long-format panel data: one row per (unit, period) with an outcome that may
//! be missing and an absorbing binary treatment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {message}")]
    Parse { row: u64, column: String, message: String },
    #[error("duplicate observation for unit `{unit}` at period {period}")]
    DuplicateKey { unit: String, period: i64 },
    #[error("unit `{0}` appears more than once in the adoption schedule")]
    DuplicateScheduleUnit(String),
    #[error("unit `{0}` is not in the adoption schedule")]
    UnknownUnit(String),
    #[error("non-finite outcome for unit `{unit}` at period {period}")]
    NonFiniteOutcome { unit: String, period: i64 },
}

/// A single unit-period row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub unit: String,
    pub period: i64,
    pub outcome: Option<f64>,
    pub treated: bool,
}

impl Observation {
    pub fn new(unit: impl Into<String>, period: i64, outcome: Option<f64>, treated: bool) -> Self {
        Self {
            unit: unit.into(),
            period,
            outcome,
            treated,
        }
    }
}

/// Immutable collection of observations with unique (unit, period) keys.
///
/// Units are kept in first-appearance order, periods in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<Observation>,
    units: Vec<String>,
    periods: Vec<i64>,
}

impl PanelDataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self, PanelError> {
        let mut seen = HashSet::with_capacity(observations.len());
        for obs in &observations {
            if let Some(y) = obs.outcome {
                if !y.is_finite() {
                    return Err(PanelError::NonFiniteOutcome {
                        unit: obs.unit.clone(),
                        period: obs.period,
                    });
                }
            }
            if !seen.insert((obs.unit.as_str(), obs.period)) {
                return Err(PanelError::DuplicateKey {
                    unit: obs.unit.clone(),
                    period: obs.period,
                });
            }
        }
        Ok(Self::from_unique(observations))
    }

    // Caller guarantees unique keys and finite outcomes.
    fn from_unique(observations: Vec<Observation>) -> Self {
        let mut units: Vec<String> = Vec::new();
        let mut unit_seen = HashSet::new();
        let mut periods = BTreeSet::new();
        for obs in &observations {
            if unit_seen.insert(obs.unit.as_str()) {
                units.push(obs.unit.clone());
            }
            periods.insert(obs.period);
        }
        Self {
            observations,
            units,
            periods: periods.into_iter().collect(),
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Rows with a non-missing outcome, in dataset order.
    pub fn estimation_rows(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(|o| o.outcome.is_some())
    }

    /// Keeps only rows matching `keep`. Units and periods are recomputed.
    pub fn filter<F>(&self, mut keep: F) -> PanelDataset
    where
        F: FnMut(&Observation) -> bool,
    {
        Self::from_unique(self.observations.iter().filter(|o| keep(o)).cloned().collect())
    }

    /// Replaces every outcome with `f(observation)`.
    pub fn map_outcomes<F>(&self, mut f: F) -> Result<PanelDataset, PanelError>
    where
        F: FnMut(&Observation) -> Option<f64>,
    {
        let observations = self
            .observations
            .iter()
            .map(|o| Observation {
                outcome: f(o),
                ..o.clone()
            })
            .collect();
        Self::new(observations)
    }

    /// True when every unit has a non-missing outcome in every period.
    pub fn is_balanced(&self) -> bool {
        let present = self.estimation_rows().count();
        present == self.units.len() * self.periods.len()
    }

    /// First treated period of each unit (in unit order), `None` if never treated.
    pub fn first_treated_periods(&self) -> Vec<(String, Option<i64>)> {
        let mut first: HashMap<&str, i64> = HashMap::new();
        for obs in self.observations.iter().filter(|o| o.treated) {
            first
                .entry(obs.unit.as_str())
                .and_modify(|p| *p = (*p).min(obs.period))
                .or_insert(obs.period);
        }
        self.units
            .iter()
            .map(|u| (u.clone(), first.get(u.as_str()).copied()))
            .collect()
    }

    /// Adoption schedule implied by the treatment column.
    pub fn implied_schedule(&self) -> AdoptionSchedule {
        AdoptionSchedule {
            entries: self
                .first_treated_periods()
                .into_iter()
                .map(|(u, p)| (u, p.map_or(Adoption::Never, Adoption::Period)))
                .collect(),
        }
    }
}

/// Column names used when reading or writing a panel CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    /// `None` means all rows start untreated, pending an adoption schedule.
    pub treatment: Option<String>,
}

impl ColumnSchema {
    pub fn new(unit: impl Into<String>, period: impl Into<String>, outcome: impl Into<String>) -> Self {
        Self {
            unit: unit.into(),
            period: period.into(),
            outcome: outcome.into(),
            treatment: None,
        }
    }

    pub fn with_treatment(mut self, column: impl Into<String>) -> Self {
        self.treatment = Some(column.into());
        self
    }
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self::new("unit", "period", "outcome").with_treatment("treated")
    }
}

fn open(path: &Path) -> Result<File, PanelError> {
    File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, PanelError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
}

pub fn load_panel_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<PanelDataset, PanelError> {
    read_panel_csv(open(path.as_ref())?, schema)
}

/// Parses a long-format panel. An empty outcome cell is a missing outcome.
pub fn read_panel_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<PanelDataset, PanelError> {
    let observations = read_panel_rows(reader, schema)?;
    let mut seen = HashSet::new();
    for o in &observations {
        if !seen.insert((o.unit.as_str(), o.period)) {
            return Err(PanelError::DuplicateKey {
                unit: o.unit.clone(),
                period: o.period,
            });
        }
    }
    Ok(PanelDataset::from_unique(observations))
}

/// Parses rows without the uniqueness check, for structural validation.
pub fn read_panel_rows<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Vec<Observation>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let unit_col = column_index(&headers, &schema.unit)?;
    let period_col = column_index(&headers, &schema.period)?;
    let outcome_col = column_index(&headers, &schema.outcome)?;
    let treat_col = schema
        .treatment
        .as_deref()
        .map(|name| column_index(&headers, name))
        .transpose()?;

    let mut observations = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let parse_err = |column: &str, message: String| PanelError::Parse {
            row,
            column: column.to_string(),
            message,
        };

        let unit = field(unit_col).to_string();
        let period: i64 = field(period_col).parse().map_err(|_| {
            parse_err(
                &schema.period,
                format!("expected integer period, found `{}`", field(period_col)),
            )
        })?;
        let raw_outcome = field(outcome_col);
        let outcome = if raw_outcome.is_empty() {
            None
        } else {
            let y: f64 = raw_outcome
                .parse()
                .map_err(|_| parse_err(&schema.outcome, format!("expected number, found `{raw_outcome}`")))?;
            if !y.is_finite() {
                return Err(parse_err(&schema.outcome, format!("non-finite value `{raw_outcome}`")));
            }
            Some(y)
        };
        let treated = match (treat_col, schema.treatment.as_deref()) {
            (Some(idx), Some(name)) => match field(idx) {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(name, format!("expected 0 or 1, found `{other}`"))),
            },
            _ => false,
        };
        observations.push(Observation {
            unit,
            period,
            outcome,
            treated,
        });
    }
    Ok(observations)
}

/// Writes the dataset in row order. Outcomes use the shortest representation
/// that parses back to the same `f64`.
pub fn write_panel_csv<W: Write>(dataset: &PanelDataset, writer: W, schema: &ColumnSchema) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let treat_name = schema.treatment.as_deref().unwrap_or("treated");
    wtr.write_record([schema.unit.as_str(), &schema.period, &schema.outcome, treat_name])?;
    for obs in dataset.observations() {
        let outcome = obs.outcome.map(|y| y.to_string()).unwrap_or_default();
        wtr.write_record([
            obs.unit.as_str(),
            &obs.period.to_string(),
            &outcome,
            if obs.treated { "1" } else { "0" },
        ])?;
    }
    wtr.flush().map_err(|source| PanelError::Io {
        path: "<output>".to_string(),
        source,
    })?;
    Ok(())
}

/// When a unit starts treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AdoptionRepr", into = "AdoptionRepr")]
pub enum Adoption {
    Period(i64),
    Never,
}

impl Adoption {
    pub fn period(self) -> Option<i64> {
        match self {
            Adoption::Period(p) => Some(p),
            Adoption::Never => None,
        }
    }
}

impl fmt::Display for Adoption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adoption::Period(p) => write!(f, "{p}"),
            Adoption::Never => f.write_str("never"),
        }
    }
}

impl std::str::FromStr for Adoption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("never") {
            return Ok(Adoption::Never);
        }
        s.parse()
            .map(Adoption::Period)
            .map_err(|_| format!("expected integer period or `never`, found `{s}`"))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AdoptionRepr {
    Period(i64),
    Token(String),
}

impl TryFrom<AdoptionRepr> for Adoption {
    type Error = String;

    fn try_from(repr: AdoptionRepr) -> Result<Self, Self::Error> {
        match repr {
            AdoptionRepr::Period(p) => Ok(Adoption::Period(p)),
            AdoptionRepr::Token(s) => s.parse(),
        }
    }
}

impl From<Adoption> for AdoptionRepr {
    fn from(a: Adoption) -> Self {
        match a {
            Adoption::Period(p) => AdoptionRepr::Period(p),
            Adoption::Never => AdoptionRepr::Token("never".to_string()),
        }
    }
}

/// How the adoption period itself is coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdoptionCoding {
    /// `D_it = 1` for `t >= adoption`.
    #[default]
    AdoptionPeriodTreated,
    /// `D_it = 1` for `t > adoption`.
    AfterAdoptionPeriod,
}

impl AdoptionCoding {
    pub fn is_treated(self, period: i64, adoption: Adoption) -> bool {
        match (self, adoption) {
            (_, Adoption::Never) => false,
            (AdoptionCoding::AdoptionPeriodTreated, Adoption::Period(a)) => period >= a,
            (AdoptionCoding::AfterAdoptionPeriod, Adoption::Period(a)) => period > a,
        }
    }
}

/// Unit → adoption period, in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdoptionSchedule {
    entries: Vec<(String, Adoption)>,
}

impl AdoptionSchedule {
    pub fn from_entries<I, S>(entries: I) -> Result<Self, PanelError>
    where
        I: IntoIterator<Item = (S, Adoption)>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (unit, adoption) in entries {
            let unit = unit.into();
            if !seen.insert(unit.clone()) {
                return Err(PanelError::DuplicateScheduleUnit(unit));
            }
            out.push((unit, adoption));
        }
        Ok(Self { entries: out })
    }

    pub fn get(&self, unit: &str) -> Option<Adoption> {
        self.entries.iter().find(|(u, _)| u == unit).map(|(_, a)| *a)
    }

    pub fn entries(&self) -> &[(String, Adoption)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn lookup(&self) -> HashMap<&str, Adoption> {
        self.entries.iter().map(|(u, a)| (u.as_str(), *a)).collect()
    }
}

pub fn load_schedule_csv(path: impl AsRef<Path>) -> Result<AdoptionSchedule, PanelError> {
    read_schedule_csv(open(path.as_ref())?)
}

/// Reads `unit,adoption_period` rows; `never` (any case) marks a never-treated unit.
pub fn read_schedule_csv<R: Read>(reader: R) -> Result<AdoptionSchedule, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let unit_col = column_index(&headers, "unit")?;
    let adopt_col = column_index(&headers, "adoption_period")?;
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let unit = record.get(unit_col).unwrap_or("").to_string();
        let adoption: Adoption = record
            .get(adopt_col)
            .unwrap_or("")
            .parse()
            .map_err(|message| PanelError::Parse {
                row,
                column: "adoption_period".to_string(),
                message,
            })?;
        entries.push((unit, adoption));
    }
    AdoptionSchedule::from_entries(entries)
}

pub fn write_schedule_csv<W: Write>(schedule: &AdoptionSchedule, writer: W) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["unit", "adoption_period"])?;
    for (unit, adoption) in schedule.entries() {
        wtr.write_record([unit.as_str(), &adoption.to_string()])?;
    }
    wtr.flush().map_err(|source| PanelError::Io {
        path: "<output>".to_string(),
        source,
    })?;
    Ok(())
}

/// Recodes treatment from the schedule with the adoption period counted as treated.
pub fn apply_adoption_schedule(
    dataset: &PanelDataset,
    schedule: &AdoptionSchedule,
) -> Result<PanelDataset, PanelError> {
    apply_adoption_schedule_with(dataset, schedule, AdoptionCoding::default())
}

pub fn apply_adoption_schedule_with(
    dataset: &PanelDataset,
    schedule: &AdoptionSchedule,
    coding: AdoptionCoding,
) -> Result<PanelDataset, PanelError> {
    let lookup = schedule.lookup();
    let observations = dataset
        .observations()
        .iter()
        .map(|obs| {
            let adoption = lookup
                .get(obs.unit.as_str())
                .copied()
                .ok_or_else(|| PanelError::UnknownUnit(obs.unit.clone()))?;
            Ok(Observation {
                treated: coding.is_treated(obs.period, adoption),
                ..obs.clone()
            })
        })
        .collect::<Result<Vec<_>, PanelError>>()?;
    Ok(PanelDataset::from_unique(observations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    NonAbsorbing,
    DuplicateKey,
    TooFewUnits,
    TooFewPeriods,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub unit: Option<String>,
    pub period: Option<i64>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub is_valid: bool,
    pub violations: Vec<Violation>,
    pub balance: Balance,
    /// First treated period → units adopting then, in unit order.
    pub timing_groups: BTreeMap<i64, Vec<String>>,
    pub never_treated: Vec<String>,
}

pub fn validate(dataset: &PanelDataset) -> ValidationReport {
    validate_observations(dataset.observations())
}

/// Structural checks over raw rows, which may contain duplicate keys.
pub fn validate_observations(observations: &[Observation]) -> ValidationReport {
    let mut violations = Vec::new();

    let mut units: Vec<&str> = Vec::new();
    let mut by_unit: HashMap<&str, Vec<&Observation>> = HashMap::new();
    let mut periods = BTreeSet::new();
    let mut keys = HashSet::new();
    for obs in observations {
        if !keys.insert((obs.unit.as_str(), obs.period)) {
            violations.push(Violation {
                code: ViolationCode::DuplicateKey,
                unit: Some(obs.unit.clone()),
                period: Some(obs.period),
                message: format!("unit `{}` has more than one row for period {}", obs.unit, obs.period),
            });
        }
        by_unit
            .entry(obs.unit.as_str())
            .or_insert_with(|| {
                units.push(obs.unit.as_str());
                Vec::new()
            })
            .push(obs);
        periods.insert(obs.period);
    }

    if units.len() < 2 {
        violations.push(Violation {
            code: ViolationCode::TooFewUnits,
            unit: None,
            period: None,
            message: format!("need at least 2 units, found {}", units.len()),
        });
    }
    if periods.len() < 2 {
        violations.push(Violation {
            code: ViolationCode::TooFewPeriods,
            unit: None,
            period: None,
            message: format!("need at least 2 periods, found {}", periods.len()),
        });
    }

    let mut timing_groups: BTreeMap<i64, Vec<String>> = BTreeMap::new();
    let mut never_treated = Vec::new();
    let mut complete = 0usize;
    for unit in &units {
        let mut rows = by_unit[unit].clone();
        rows.sort_by_key(|o| o.period);
        let mut first_treated = None;
        for obs in &rows {
            if obs.treated {
                first_treated.get_or_insert(obs.period);
            } else if first_treated.is_some() {
                violations.push(Violation {
                    code: ViolationCode::NonAbsorbing,
                    unit: Some(unit.to_string()),
                    period: Some(obs.period),
                    message: format!(
                        "unit `{unit}` is untreated at period {} after treatment began",
                        obs.period
                    ),
                });
            }
        }
        match first_treated {
            Some(p) => timing_groups.entry(p).or_default().push(unit.to_string()),
            None => never_treated.push(unit.to_string()),
        }
        let observed: BTreeSet<i64> = rows.iter().filter(|o| o.outcome.is_some()).map(|o| o.period).collect();
        complete += observed.len();
    }

    let balance = if complete == units.len() * periods.len() {
        Balance::Balanced
    } else {
        Balance::Unbalanced
    };
    ValidationReport {
        is_valid: violations.is_empty(),
        violations,
        balance,
        timing_groups,
        never_treated,
    }
}
