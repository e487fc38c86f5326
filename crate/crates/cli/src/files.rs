//! File plumbing: JSON inputs, atomic writes, the state lock and CSV data.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rmstgst_core::trial_data::{ingest_csv, CsvSchema, Dataset};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

/// Reads a JSON configuration file; failures are configuration errors that
/// carry serde's line and field diagnostics.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_state<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::State(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::State(format!("unreadable state {}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Exclusive lock on a monitoring-state file, held for the life of the value.
pub struct StateLock {
    path: PathBuf,
}

impl StateLock {
    pub fn acquire(state: &Path) -> Result<Self, CliError> {
        let mut p = state.as_os_str().to_owned();
        p.push(".lock");
        let path = PathBuf::from(p);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::State(format!(
                    "state is locked by another process ({}); remove the lock file if it is stale",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// CSV column mapping from `--schema`, `--covariates`, or the header: when
/// neither is given every column other than the five core ones is a covariate.
pub fn resolve_schema(
    data: &Path,
    schema: Option<&Path>,
    covariates: &[String],
) -> Result<CsvSchema, CliError> {
    let mut s: CsvSchema = match schema {
        Some(p) => read_config(p)?,
        None => CsvSchema::default(),
    };
    if !covariates.is_empty() {
        s.covariates = covariates.to_vec();
    } else if schema.is_none() {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(data)
            .map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
        let headers = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?;
        let core = [&s.id, &s.arm, &s.entry_time, &s.followup_time, &s.event];
        s.covariates = headers
            .iter()
            .filter(|h| !core.iter().any(|c| c.as_str() == *h))
            .map(String::from)
            .collect();
    }
    Ok(s)
}

pub fn load_dataset(
    data: &Path,
    schema: &CsvSchema,
    lock_time: Option<f64>,
) -> Result<Dataset, CliError> {
    let records = ingest_csv(data, schema)?;
    let ds = Dataset::new(records)?;
    Ok(match lock_time {
        Some(t) => ds.with_lock_time(t)?,
        None => ds,
    })
}
