//! CSV ingestion.

use std::io::Read;
use std::path::Path;

use tabdiff_core::RawTable;

use crate::error::{CliError, Result};

pub const DEFAULT_MISSING: &[&str] = &["", "NaN", "nan"];

/// Reads a headed CSV file; cells equal to one of `missing` (after trimming)
/// become absent entries.
pub fn load_csv(path: &Path, missing: &[&str]) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, missing).map_err(|e| match e {
        CliError::Format { detail, .. } => CliError::format(path, detail),
        other => other,
    })
}

pub fn read_csv<R: Read>(reader: R, missing: &[&str]) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::format("<csv>", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::format("<csv>", "missing header row"));
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| CliError::format("<csv>", format!("line {line}: {e}")))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let cell = cell.trim();
                if missing.contains(&cell) {
                    return Ok(None);
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(CliError::format(
                        "<csv>",
                        format!("line {line}, column {}: `{cell}` is not a number", header[c]),
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(RawTable::new(header, rows)?)
}
