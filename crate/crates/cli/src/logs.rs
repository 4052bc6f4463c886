//! Append-only CSV logs with periodic flushing.
//!
//! Floats are written with Rust's shortest round-trip formatting, which
//! is deterministic, so reruns with identical seeds produce byte-equal
//! files. Wall-clock columns are confined to `train_log.csv` and the
//! dedicated timing files; every experiment's primary CSV stays
//! deterministic.

use crate::{CliError, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub struct CsvLog {
    writer: BufWriter<File>,
    path: String,
    rows_since_flush: usize,
    flush_every: usize,
}

impl CsvLog {
    pub fn create(path: &Path, header: &str, flush_every: usize) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Config(format!("cannot create {}: {e}", parent.display())))?;
        }
        let file = File::create(path)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
        let mut log = CsvLog {
            writer: BufWriter::new(file),
            path: path.display().to_string(),
            rows_since_flush: 0,
            flush_every: flush_every.max(1),
        };
        log.write_line(header)?;
        log.flush()?;
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.writer, "{line}")
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", self.path)))
    }

    /// Appends one row and flushes at the configured cadence so an
    /// interrupted run keeps its data.
    pub fn row(&mut self, fields: &[CsvField]) -> Result<()> {
        let line = fields
            .iter()
            .map(CsvField::render)
            .collect::<Vec<_>>()
            .join(",");
        self.write_line(&line)?;
        self.rows_since_flush += 1;
        if self.rows_since_flush >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.rows_since_flush = 0;
        self.writer
            .flush()
            .map_err(|e| CliError::Config(format!("cannot flush {}: {e}", self.path)))
    }
}

pub enum CsvField {
    Int(i64),
    UInt(u64),
    Float(f64),
    Str(String),
}

impl CsvField {
    fn render(&self) -> String {
        match self {
            CsvField::Int(v) => v.to_string(),
            CsvField::UInt(v) => v.to_string(),
            CsvField::Float(v) => format!("{v}"),
            CsvField::Str(s) => s.clone(),
        }
    }
}

impl Drop for CsvLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Reads a CSV produced by [`CsvLog`] back into header + rows of
/// strings. Used by commands that post-process their own outputs and by
/// tests.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

/// Column index lookup by name.
pub fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("missing CSV column {name}")))
}
