//! Result persistence: atomic file writes, run identifiers and the CSV row
//! schemas.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Writes `path` through a temporary file in the same directory that is
/// renamed into place only after `write` succeeds. On error nothing is left
/// at `path` (a previous version stays untouched).
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Short digest of (config, seed, discriminator, crate version).
pub fn run_id(config_digest_input: &str, seed: u64, discriminator: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_digest_input.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(discriminator.as_bytes());
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    hex::encode(&h.finalize()[..6])
}

/// Row of `run_id,variant,width,seed,split,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub variant: String,
    pub width: usize,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Row of `run_id,method,task_seen,task_eval,seed,accuracy` (tasks 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracyRow {
    pub run_id: String,
    pub method: String,
    pub task_seen: usize,
    pub task_eval: usize,
    pub seed: u64,
    pub accuracy: f64,
}

pub const METRIC_HEADER: &str = "run_id,variant,width,seed,split,metric,value";
pub const TASK_HEADER: &str = "run_id,method,task_seen,task_eval,seed,accuracy";

fn write_rows<T: Serialize>(w: &mut dyn Write, header: &str, rows: &[T]) -> Result<()> {
    // Header written by hand so empty tables still carry it.
    writeln!(w, "{header}")?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, |w| write_rows(w, METRIC_HEADER, rows))
}

pub fn write_task_csv(path: &Path, rows: &[TaskAccuracyRow]) -> Result<()> {
    write_atomic(path, |w| write_rows(w, TASK_HEADER, rows))
}

pub fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
