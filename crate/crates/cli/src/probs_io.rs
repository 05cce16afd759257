//! The probability-dump format the sidecar consumes and `run
//! --dump-val-probs` produces: a header carrying the class count, score
//! method, and record count, then one record of `C` probabilities plus a
//! label per line.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use citl_core::conformal::{NonconformityMethod, ProbabilityVector};

pub const PROBS_FORMAT: &str = "citl-probs";
pub const PROBS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbsHeader {
    pub format: String,
    pub version: u32,
    pub classes: usize,
    pub method: Option<NonconformityMethod>,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbsRecord {
    pub probs: Vec<f64>,
    pub label: usize,
}

pub fn write_dump(
    out: &mut impl Write,
    classes: usize,
    method: Option<NonconformityMethod>,
    rows: &[(ProbabilityVector, usize)],
) -> Result<()> {
    let header = ProbsHeader {
        format: PROBS_FORMAT.into(),
        version: PROBS_VERSION,
        classes,
        method,
        count: rows.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for (probs, label) in rows {
        let record = ProbsRecord {
            probs: probs.as_slice().to_vec(),
            label: *label,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// A dump row that failed the probability-vector invariant.
#[derive(Debug)]
pub struct Rejection {
    /// 1-based record index (excluding the header line).
    pub index: usize,
    pub reason: String,
}

pub struct ParsedDump {
    pub header: ProbsHeader,
    pub rows: Vec<(ProbabilityVector, usize)>,
    pub rejections: Vec<Rejection>,
}

/// Parse a dump, validating every row against the probability-vector
/// invariants. Invalid rows are collected, not dropped silently.
pub fn read_dump(input: &mut impl BufRead) -> Result<ParsedDump> {
    let mut first = String::new();
    if input.read_line(&mut first)? == 0 {
        bail!("empty probability dump");
    }
    let header: ProbsHeader =
        serde_json::from_str(first.trim_end()).context("bad probability dump header")?;
    if header.format != PROBS_FORMAT {
        bail!("unexpected dump format marker {:?}", header.format);
    }
    if header.version != PROBS_VERSION {
        bail!("unsupported dump version {}", header.version);
    }
    let mut rows = Vec::with_capacity(header.count);
    let mut rejections = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = idx + 1;
        let record: ProbsRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejections.push(Rejection {
                    index,
                    reason: format!("unparseable record: {e}"),
                });
                continue;
            }
        };
        if record.probs.len() != header.classes {
            rejections.push(Rejection {
                index,
                reason: format!(
                    "{} probabilities, header declares {}",
                    record.probs.len(),
                    header.classes
                ),
            });
            continue;
        }
        if record.label >= header.classes {
            rejections.push(Rejection {
                index,
                reason: format!("label {} out of range", record.label),
            });
            continue;
        }
        match ProbabilityVector::new(record.probs) {
            Ok(p) => rows.push((p, record.label)),
            Err(e) => rejections.push(Rejection {
                index,
                reason: e.to_string(),
            }),
        }
    }
    if rejections.is_empty() && rows.len() != header.count {
        bail!(
            "dump header declares {} records, file has {}",
            header.count,
            rows.len()
        );
    }
    Ok(ParsedDump {
        header,
        rows,
        rejections,
    })
}
