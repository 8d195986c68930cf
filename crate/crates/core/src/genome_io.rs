//! FASTA ingestion, windowing, reverse-complement augmentation and
//! train/validation splitting.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub seq: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strand {
    Forward,
    Reverse,
}

impl Strand {
    pub fn symbol(self) -> char {
        match self {
            Strand::Forward => '+',
            Strand::Reverse => '-',
        }
    }
}

/// A fixed-length slice of a record. `seq` is stored in the orientation
/// given by `strand`; `offset` always refers to the forward record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub record_id: String,
    pub offset: usize,
    pub seq: String,
    pub strand: Strand,
}

impl Window {
    /// Stable identifier used to key teacher caches: `record:offset:strand`.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.record_id, self.offset, self.strand.symbol())
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn reverse_complemented(&self) -> Window {
        Window {
            record_id: self.record_id.clone(),
            offset: self.offset,
            // windows are validated on construction
            seq: reverse_complement(&self.seq).expect("window holds valid DNA"),
            strand: match self.strand {
                Strand::Forward => Strand::Reverse,
                Strand::Reverse => Strand::Forward,
            },
        }
    }
}

fn normalize_base(b: u8) -> Option<u8> {
    match b.to_ascii_uppercase() {
        c @ (b'A' | b'C' | b'G' | b'T' | b'N') => Some(c),
        _ => None,
    }
}

/// Parses FASTA text. Lines may end in LF or CRLF; blank lines are ignored.
pub fn parse_fasta(bytes: &[u8]) -> Result<Vec<SequenceRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| HadError::MalformedFasta {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;

    let mut records: Vec<SequenceRecord> = Vec::new();
    let mut header_line = 0;
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            if let Some(prev) = records.last() {
                if prev.seq.is_empty() {
                    return Err(HadError::MalformedFasta {
                        line: header_line,
                        reason: format!("record {:?} has an empty sequence", prev.id),
                    });
                }
            }
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(HadError::MalformedFasta {
                    line: lineno,
                    reason: "empty header".into(),
                });
            }
            records.push(SequenceRecord {
                id,
                seq: String::new(),
            });
            header_line = lineno;
            continue;
        }
        let Some(rec) = records.last_mut() else {
            return Err(HadError::MalformedFasta {
                line: lineno,
                reason: "sequence data before the first '>' header".into(),
            });
        };
        rec.seq.reserve(line.len());
        for c in line.chars() {
            let pos = rec.seq.len();
            let base = u8::try_from(c)
                .ok()
                .and_then(normalize_base)
                .ok_or(HadError::IllegalBase { pos, base: c })?;
            rec.seq.push(base as char);
        }
    }
    match records.last() {
        None => Err(HadError::MalformedFasta {
            line: 1,
            reason: "no records".into(),
        }),
        Some(r) if r.seq.is_empty() => Err(HadError::MalformedFasta {
            line: header_line,
            reason: format!("record {:?} has an empty sequence", r.id),
        }),
        Some(_) => Ok(records),
    }
}

pub fn read_fasta(path: &Path) -> Result<Vec<SequenceRecord>> {
    let bytes = fs::read(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    parse_fasta(&bytes)
}

pub fn complement(base: u8) -> Option<u8> {
    Some(match base {
        b'A' => b'T',
        b'T' => b'A',
        b'C' => b'G',
        b'G' => b'C',
        b'N' => b'N',
        _ => return None,
    })
}

pub fn reverse_complement(seq: &str) -> Result<String> {
    let bytes = seq.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    for (i, &b) in bytes.iter().enumerate().rev() {
        out.push(complement(b).ok_or(HadError::IllegalBase {
            pos: i,
            base: b as char,
        })?);
    }
    // only ASCII bases were pushed
    Ok(String::from_utf8(out).expect("ascii"))
}

/// Cuts `record` into windows of `len` bases every `stride` bases. A trailing
/// fragment shorter than `len` is dropped.
pub fn window_sequence(record: &SequenceRecord, len: usize, stride: usize) -> Vec<Window> {
    assert!(len > 0 && stride > 0, "window length and stride must be positive");
    let n = record.seq.len();
    if n < len {
        return Vec::new();
    }
    (0..=n - len)
        .step_by(stride)
        .map(|offset| Window {
            record_id: record.id.clone(),
            offset,
            seq: record.seq[offset..offset + len].to_string(),
            strand: Strand::Forward,
        })
        .collect()
}

/// Deterministic shuffled split; the validation side gets
/// `round(val_fraction * n)` windows.
pub fn split_dataset(windows: Vec<Window>, val_fraction: f64, seed: u64) -> (Vec<Window>, Vec<Window>) {
    assert!(
        (0.0..1.0).contains(&val_fraction),
        "val_fraction must lie in [0, 1)"
    );
    let mut windows = windows;
    let n = windows.len();
    let mut r = rng::stream(seed, "split");
    windows.shuffle(&mut r);
    let n_val = ((val_fraction * n as f64).round() as usize).min(n);
    let train = windows.split_off(n_val);
    (train, windows)
}
