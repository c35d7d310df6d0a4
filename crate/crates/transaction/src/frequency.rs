//! Class-frequency tables: one `class_index<TAB>count` line per class.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{AppError, Result};

pub fn encode(counts: &[u64]) -> String {
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{i}\t{c}").unwrap();
    }
    out
}

/// Classes must appear exactly once each, in any order, covering `0..n`.
pub fn decode(text: &str, source: &str) -> Result<Vec<u64>> {
    let mut entries: Vec<(usize, u64)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| AppError::Data(format!("{source} line {}: {why}: `{line}`", n + 1));
        let (idx, count) = line.split_once('\t').ok_or_else(|| bad("expected `class_index<TAB>count`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad("bad class index"))?;
        let count: u64 = count.trim().parse().map_err(|_| bad("bad count"))?;
        entries.push((idx, count));
    }
    let mut counts = vec![None; entries.len()];
    for (idx, count) in entries {
        match counts.get_mut(idx) {
            Some(slot @ None) => *slot = Some(count),
            Some(Some(_)) => return Err(AppError::Data(format!("{source}: class {idx} listed twice"))),
            None => {
                return Err(AppError::Data(format!(
                    "{source}: class {idx} out of range for a table of {} lines",
                    counts.len()
                )))
            }
        }
    }
    Ok(counts.into_iter().map(|c| c.expect("every slot filled")).collect())
}

pub fn write(path: &Path, counts: &[u64]) -> Result<()> {
    std::fs::write(path, encode(counts)).map_err(AppError::io(path))
}

pub fn read(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
    decode(&text, &path.display().to_string())
}
