//! Subject-level trial records, CSV ingestion and calendar-time snapshots.
//!
//! A trial extract carries, for every enrollee, the calendar entry time `E`
//! and the follow-up observed at data lock `(X_lock, event)`. Because any
//! earlier analysis time `u` sees `X(u) = min(X_lock, (u - E)^+)`, the data
//! available at each interim look can be reconstructed exactly from a single
//! locked extract.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}`: non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: invalid arm `{value}` (expected 0 or 1)")]
    InvalidArm { row: usize, value: String },
    #[error("row {row}: invalid event indicator `{value}` (expected 0 or 1)")]
    InvalidEvent { row: usize, value: String },
    #[error("row {row}: negative time in `{column}` ({value})")]
    NegativeTime {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: non-finite value in `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: missing value in `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("subject `{id}` has {found} covariates, expected {expected}")]
    CovariateDimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("analysis time u = {u} exceeds data-lock maturity {lock}")]
    BeyondLock { u: f64, lock: f64 },
    #[error("data lock {lock} precedes observed follow-up ending at {latest}")]
    LockTooEarly { lock: f64, latest: f64 },
    #[error("no subjects enrolled before u = {0}")]
    EmptySnapshot(f64),
    #[error("invalid {name}: {value} (must be positive and finite)")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("subject `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Treatment arm; control is stratum 0, treatment stratum 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treatment];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treatment => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Arm> {
        match i {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treatment),
            _ => None,
        }
    }

    /// Treatment indicator `Z_W`.
    pub fn indicator(self) -> f64 {
        self.index() as f64
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a.index() as u8
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Arm::from_index(v as usize).ok_or_else(|| format!("invalid arm {v}"))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One enrollee as seen at data lock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    /// Calendar entry time `E`, years.
    pub entry_time: f64,
    /// Years on study at data lock.
    pub followup_time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: &str| DataError::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if !self.entry_time.is_finite() || self.entry_time < 0.0 {
            return Err(bad("entry time must be finite and >= 0"));
        }
        if !self.followup_time.is_finite() || self.followup_time < 0.0 {
            return Err(bad("follow-up time must be finite and >= 0"));
        }
        if self.covariates.iter().any(|z| !z.is_finite()) {
            return Err(bad("covariates must be finite"));
        }
        Ok(())
    }

    /// Calendar time at which this subject's follow-up ends in the extract.
    pub fn last_contact(&self) -> f64 {
        self.entry_time + self.followup_time
    }
}

/// Column map for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_arm")]
    pub arm: String,
    #[serde(default = "default_entry")]
    pub entry_time: String,
    #[serde(default = "default_followup")]
    pub followup_time: String,
    #[serde(default = "default_event")]
    pub event: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn default_id() -> String {
    "id".into()
}
fn default_arm() -> String {
    "arm".into()
}
fn default_entry() -> String {
    "entry_time".into()
}
fn default_followup() -> String {
    "followup_time".into()
}
fn default_event() -> String {
    "event".into()
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id: default_id(),
            arm: default_arm(),
            entry_time: default_entry(),
            followup_time: default_followup(),
            event: default_event(),
            covariates: Vec::new(),
        }
    }
}

impl CsvSchema {
    pub fn with_covariates<I, S>(covariates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            covariates: covariates.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }
}

/// Reads and validates subject records from a CSV file with a header row.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<Vec<SubjectRecord>, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Same as [`ingest_csv`] for any reader.
pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &CsvSchema,
) -> Result<Vec<SubjectRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let lookup: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let arm_col = col(&schema.arm)?;
    let entry_col = col(&schema.entry_time)?;
    let fu_col = col(&schema.followup_time)?;
    let event_col = col(&schema.event)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let row = i + 2;
        let cell = |idx: usize, name: &str| -> Result<&str, DataError> {
            match rec.get(idx) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("na") => Ok(v),
                _ => Err(DataError::MissingValue {
                    row,
                    column: name.to_string(),
                }),
            }
        };
        let number = |idx: usize, name: &str| -> Result<f64, DataError> {
            let raw = cell(idx, name)?;
            let v: f64 = raw.parse().map_err(|_| DataError::NonNumeric {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    row,
                    column: name.to_string(),
                });
            }
            Ok(v)
        };
        let time = |idx: usize, name: &str| -> Result<f64, DataError> {
            let v = number(idx, name)?;
            if v < 0.0 {
                return Err(DataError::NegativeTime {
                    row,
                    column: name.to_string(),
                    value: v,
                });
            }
            Ok(v)
        };

        let id = cell(id_col, &schema.id)?.to_string();
        let arm_raw = cell(arm_col, &schema.arm)?;
        let arm = match arm_raw.parse::<f64>() {
            Ok(0.0) => Arm::Control,
            Ok(1.0) => Arm::Treatment,
            _ => {
                return Err(DataError::InvalidArm {
                    row,
                    value: arm_raw.to_string(),
                })
            }
        };
        let entry_time = time(entry_col, &schema.entry_time)?;
        let followup_time = time(fu_col, &schema.followup_time)?;
        let ev_raw = cell(event_col, &schema.event)?;
        let event = match ev_raw.parse::<f64>() {
            Ok(0.0) => false,
            Ok(1.0) => true,
            _ => {
                return Err(DataError::InvalidEvent {
                    row,
                    value: ev_raw.to_string(),
                })
            }
        };
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| number(c, name))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(SubjectRecord {
            id,
            arm,
            entry_time,
            followup_time,
            event,
            covariates,
        });
    }
    Ok(out)
}

/// Locked trial extract: validated records plus the calendar time of the lock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    lock_time: f64,
    dim: usize,
}

impl Dataset {
    /// Builds a dataset whose lock time is the latest observed contact.
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self, DataError> {
        let dim = records.first().map_or(0, |r| r.covariates.len());
        for r in &records {
            r.validate()?;
            if r.covariates.len() != dim {
                return Err(DataError::CovariateDimension {
                    id: r.id.clone(),
                    expected: dim,
                    found: r.covariates.len(),
                });
            }
        }
        let lock_time = records
            .iter()
            .map(SubjectRecord::last_contact)
            .fold(0.0, f64::max);
        Ok(Self {
            records,
            lock_time,
            dim,
        })
    }

    /// Declares an explicit data-lock calendar time.
    pub fn with_lock_time(mut self, lock: f64) -> Result<Self, DataError> {
        // tolerate rounding in exported entry/follow-up pairs
        if !lock.is_finite() || lock < self.lock_time - 1e-9 {
            return Err(DataError::LockTooEarly {
                lock,
                latest: self.lock_time,
            });
        }
        self.lock_time = lock;
        Ok(self)
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn lock_time(&self) -> f64 {
        self.lock_time
    }

    pub fn covariate_dim(&self) -> usize {
        self.dim
    }

    /// The data observable at calendar time `u` with restriction time `tau`.
    pub fn snapshot(&self, u: f64, tau: f64) -> Result<Snapshot, DataError> {
        if !(u > 0.0 && u.is_finite()) {
            return Err(DataError::InvalidParameter {
                name: "u",
                value: u,
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DataError::InvalidParameter {
                name: "tau",
                value: tau,
            });
        }
        if u > self.lock_time + 1e-9 {
            return Err(DataError::BeyondLock {
                u,
                lock: self.lock_time,
            });
        }
        let subjects: Vec<SnapshotSubject> = self
            .records
            .iter()
            .filter(|r| r.entry_time < u)
            .map(|r| {
                let window = u - r.entry_time;
                SnapshotSubject {
                    arm: r.arm,
                    time: r.followup_time.min(window),
                    event: r.event && r.followup_time <= window,
                    covariates: r.covariates.clone(),
                }
            })
            .collect();
        if subjects.is_empty() {
            return Err(DataError::EmptySnapshot(u));
        }
        Snapshot::from_subjects(u, tau, subjects)
    }
}

/// One subject's observable data at an analysis time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSubject {
    pub arm: Arm,
    /// `X(u)`, years on study.
    pub time: f64,
    /// `delta(u)`.
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Right-censored data at calendar time `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    u: f64,
    tau: f64,
    subjects: Vec<SnapshotSubject>,
    counts: [usize; 2],
    dim: usize,
}

impl Snapshot {
    /// Wraps already-reconstructed subjects (used by resampling and tests).
    pub fn from_subjects(
        u: f64,
        tau: f64,
        subjects: Vec<SnapshotSubject>,
    ) -> Result<Self, DataError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DataError::InvalidParameter {
                name: "tau",
                value: tau,
            });
        }
        if !(u > 0.0) {
            return Err(DataError::InvalidParameter {
                name: "u",
                value: u,
            });
        }
        if subjects.is_empty() {
            return Err(DataError::EmptySnapshot(u));
        }
        let dim = subjects[0].covariates.len();
        let mut counts = [0usize; 2];
        for (k, s) in subjects.iter().enumerate() {
            if s.covariates.len() != dim {
                return Err(DataError::CovariateDimension {
                    id: format!("#{k}"),
                    expected: dim,
                    found: s.covariates.len(),
                });
            }
            if !(s.time >= 0.0 && s.time.is_finite()) || s.covariates.iter().any(|z| !z.is_finite())
            {
                return Err(DataError::InvalidRecord {
                    id: format!("#{k}"),
                    reason: "non-finite or negative value".into(),
                });
            }
            counts[s.arm.index()] += 1;
        }
        Ok(Self {
            u,
            tau,
            subjects,
            counts,
            dim,
        })
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Upper limit of survival time used for model fitting, `min(u, tau)`.
    pub fn t_max(&self) -> f64 {
        self.u.min(self.tau)
    }

    pub fn subjects(&self) -> &[SnapshotSubject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_arm(&self, arm: Arm) -> usize {
        self.counts[arm.index()]
    }

    pub fn covariate_dim(&self) -> usize {
        self.dim
    }

    pub fn events_in(&self, arm: Arm, t_max: f64) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.arm == arm && s.event && s.time <= t_max)
            .count()
    }

    /// Same subjects under a different restriction time.
    pub fn with_tau(&self, tau: f64) -> Result<Self, DataError> {
        Self::from_subjects(self.u, tau, self.subjects.clone())
    }

    /// All subjects in stratum 0 with the treatment indicator prepended to
    /// the covariates; the input layout for an unstratified Cox fit.
    pub fn pooled_with_treatment(&self) -> Snapshot {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let mut z = Vec::with_capacity(self.dim + 1);
                z.push(s.arm.indicator());
                z.extend_from_slice(&s.covariates);
                SnapshotSubject {
                    arm: Arm::Control,
                    time: s.time,
                    event: s.event,
                    covariates: z,
                }
            })
            .collect::<Vec<_>>();
        Snapshot {
            u: self.u,
            tau: self.tau,
            counts: [subjects.len(), 0],
            subjects,
            dim: self.dim + 1,
        }
    }

    /// Keeps only the covariate columns listed in `keep`.
    pub fn select_covariates(&self, keep: &[usize]) -> Snapshot {
        let subjects = self
            .subjects
            .iter()
            .map(|s| SnapshotSubject {
                covariates: keep.iter().map(|&j| s.covariates[j]).collect(),
                ..s.clone()
            })
            .collect();
        Snapshot {
            u: self.u,
            tau: self.tau,
            subjects,
            counts: self.counts,
            dim: keep.len(),
        }
    }

    /// Centers and scales every covariate column to mean 0, variance 1.
    /// Constant columns are only centered.
    pub fn standardized(&self) -> Snapshot {
        let n = self.n() as f64;
        let mut out = self.clone();
        for j in 0..self.dim {
            let mean = self.subjects.iter().map(|s| s.covariates[j]).sum::<f64>() / n;
            let var = self
                .subjects
                .iter()
                .map(|s| (s.covariates[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let scale = self
                .subjects
                .iter()
                .fold(0.0f64, |m, s| m.max(s.covariates[j].abs()));
            // a constant column leaves round-off residue in the variance
            let sd = if var.sqrt() > 1e-10 * scale {
                var.sqrt()
            } else {
                1.0
            };
            for s in &mut out.subjects {
                s.covariates[j] = (s.covariates[j] - mean) / sd;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, arm: Arm, e: f64, x: f64, event: bool) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            arm,
            entry_time: e,
            followup_time: x,
            event,
            covariates: vec![0.3],
        }
    }

    #[test]
    fn csv_row_maps_fields() {
        let text = "id,arm,entry_time,followup_time,event,z\ns1,1,0.5,2.0,1,0.3\n";
        let recs = read_csv(text.as_bytes(), &CsvSchema::with_covariates(["z"])).unwrap();
        assert_eq!(recs, vec![rec("s1", Arm::Treatment, 0.5, 2.0, true)]);
    }

    #[test]
    fn csv_rejects_bad_arm() {
        let text = "id,arm,entry_time,followup_time,event,z\ns1,2,0.5,2.0,1,0.3\n";
        let err = read_csv(text.as_bytes(), &CsvSchema::with_covariates(["z"])).unwrap_err();
        assert!(matches!(err, DataError::InvalidArm { row: 2, .. }), "{err}");
        assert!(err.to_string().contains("invalid arm"));
    }

    #[test]
    fn csv_diagnostics() {
        let schema = CsvSchema::with_covariates(["z"]);
        let missing = "id,arm,entry_time,followup_time,event\ns1,1,0.5,2.0,1\n";
        assert!(
            matches!(read_csv(missing.as_bytes(), &schema), Err(DataError::MissingColumn(c)) if c == "z")
        );
        let nonnum = "id,arm,entry_time,followup_time,event,z\ns1,1,abc,2.0,1,0.3\n";
        assert!(matches!(
            read_csv(nonnum.as_bytes(), &schema),
            Err(DataError::NonNumeric { row: 2, .. })
        ));
        let neg = "id,arm,entry_time,followup_time,event,z\ns1,1,0.5,-2.0,1,0.3\n";
        assert!(matches!(
            read_csv(neg.as_bytes(), &schema),
            Err(DataError::NegativeTime { .. })
        ));
        let na = "id,arm,entry_time,followup_time,event,z\ns1,1,0.5,2.0,1,NA\n";
        assert!(matches!(
            read_csv(na.as_bytes(), &schema),
            Err(DataError::MissingValue { .. })
        ));
        let ev = "id,arm,entry_time,followup_time,event,z\ns1,1,0.5,2.0,3,0.1\n";
        assert!(matches!(
            read_csv(ev.as_bytes(), &schema),
            Err(DataError::InvalidEvent { .. })
        ));
    }

    #[test]
    fn nine_covariate_file() {
        let names: Vec<String> = (1..=9).map(|k| format!("z{k}")).collect();
        let mut text = format!(
            "id,arm,entry_time,followup_time,event,{}\n",
            names.join(",")
        );
        text.push_str("a,0,0.1,1.0,0,1,2,3,4,5,6,7,8,9\n");
        let recs = read_csv(text.as_bytes(), &CsvSchema::with_covariates(names)).unwrap();
        assert_eq!(recs[0].covariates.len(), 9);
    }

    #[test]
    fn snapshot_censors_administratively() {
        let ds = Dataset::new(vec![rec("a", Arm::Treatment, 0.5, 2.0, true)]).unwrap();
        let s = ds.snapshot(1.0, 1.0).unwrap();
        assert_eq!(s.subjects()[0].time, 0.5);
        assert!(!s.subjects()[0].event);
    }

    #[test]
    fn snapshot_excludes_future_and_boundary_entrants() {
        let ds = Dataset::new(vec![
            rec("a", Arm::Control, 0.0, 3.0, false),
            rec("b", Arm::Treatment, 2.0, 1.0, true),
            rec("c", Arm::Treatment, 1.5, 1.0, true),
        ])
        .unwrap();
        let s = ds.snapshot(1.5, 1.0).unwrap();
        assert_eq!(s.n(), 1);
        assert_eq!((s.n_arm(Arm::Control), s.n_arm(Arm::Treatment)), (1, 0));
    }

    #[test]
    fn snapshot_full_followup() {
        let ds = Dataset::new(vec![rec("a", Arm::Control, 0.0, 1.0, true)])
            .unwrap()
            .with_lock_time(5.0)
            .unwrap();
        let s = ds.snapshot(5.0, 1.0).unwrap();
        assert_eq!(s.subjects()[0].time, 1.0);
        assert!(s.subjects()[0].event);
    }

    #[test]
    fn snapshot_errors() {
        let ds = Dataset::new(vec![rec("a", Arm::Control, 1.0, 1.0, true)]).unwrap();
        assert!(matches!(
            ds.snapshot(2.5, 1.0),
            Err(DataError::BeyondLock { .. })
        ));
        assert!(matches!(
            ds.snapshot(0.5, 1.0),
            Err(DataError::EmptySnapshot(_))
        ));
        assert!(matches!(
            ds.clone().with_lock_time(1.5),
            Err(DataError::LockTooEarly { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut b = rec("b", Arm::Control, 0.0, 1.0, true);
        b.covariates.push(1.0);
        let err = Dataset::new(vec![rec("a", Arm::Control, 0.0, 1.0, true), b]).unwrap_err();
        assert!(matches!(
            err,
            DataError::CovariateDimension {
                expected: 1,
                found: 2,
                ..
            }
        ));
    }

    #[test]
    fn standardizing_a_constant_column_only_centres_it() {
        let subjects = (0..7)
            .map(|i| SnapshotSubject {
                arm: if i % 2 == 0 {
                    Arm::Control
                } else {
                    Arm::Treatment
                },
                time: 0.5,
                event: true,
                covariates: vec![1.5275252316519468],
            })
            .collect();
        let snap = Snapshot::from_subjects(2.0, 1.0, subjects).unwrap();
        for s in snap.standardized().subjects() {
            assert!(s.covariates[0].abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_layout_prepends_indicator() {
        let ds = Dataset::new(vec![
            rec("a", Arm::Treatment, 0.0, 1.0, true),
            rec("b", Arm::Control, 0.0, 1.0, false),
        ])
        .unwrap();
        let p = ds.snapshot(1.0, 1.0).unwrap().pooled_with_treatment();
        assert_eq!(p.covariate_dim(), 2);
        assert_eq!(p.subjects()[0].covariates, vec![1.0, 0.3]);
        assert_eq!(p.n_arm(Arm::Control), 2);
    }
}
