//! Annotation CSV: `sample_id,participant,verb,noun,action,split`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use transaction_core::data::Split;

use crate::error::{AppError, Result};

pub const HEADER: [&str; 6] = ["sample_id", "participant", "verb", "noun", "action", "split"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub sample_id: String,
    pub participant: String,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Row {
    sample_id: String,
    participant: String,
    verb: usize,
    noun: usize,
    action: usize,
    split: String,
}

pub fn encode(rows: &[Annotation]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for a in rows {
        w.serialize(Row {
            sample_id: a.sample_id.clone(),
            participant: a.participant.clone(),
            verb: a.verb,
            noun: a.noun,
            action: a.action,
            split: a.split.name().to_string(),
        })
        .map_err(|e| AppError::Data(format!("annotation {}: {e}", a.sample_id)))?;
    }
    if rows.is_empty() {
        w.write_record(HEADER).map_err(|e| AppError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| AppError::Data(e.to_string()))
}

pub fn decode(buf: &[u8], source: &str) -> Result<Vec<Annotation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(buf);
    let header = rdr
        .headers()
        .map_err(|e| AppError::Data(format!("{source} line 1: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(AppError::Data(format!(
            "{source} line 1: header must be `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            AppError::Data(format!("{source} line {line}: {}", csv_reason(&e)))
        })?;
        let line = out.len() + 2;
        let split = row
            .split
            .parse::<Split>()
            .map_err(|_| AppError::Data(format!("{source} line {line}: unknown split `{}`", row.split)))?;
        if row.sample_id.is_empty() {
            return Err(AppError::Data(format!("{source} line {line}: empty sample_id")));
        }
        out.push(Annotation {
            sample_id: row.sample_id,
            participant: row.participant,
            verb: row.verb,
            noun: row.noun,
            action: row.action,
            split,
        });
    }
    Ok(out)
}

fn csv_reason(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(f) => format!("field `{}`: {}", HEADER.get(f as usize).unwrap_or(&"?"), err.kind()),
            None => err.kind().to_string(),
        },
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        _ => e.to_string(),
    }
}

pub fn write(path: &Path, rows: &[Annotation]) -> Result<()> {
    std::fs::write(path, encode(rows)?).map_err(AppError::io(path))
}

pub fn read(path: &Path) -> Result<Vec<Annotation>> {
    let buf = std::fs::read(path).map_err(AppError::io(path))?;
    decode(&buf, &path.display().to_string())
}
