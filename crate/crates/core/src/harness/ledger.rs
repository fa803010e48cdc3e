//! Append-only line-delimited JSON with a CRC-32 per line.
//!
//! Each line is `<json>\t<crc32 of the json bytes, 8 lowercase hex>\n`. A
//! run that is killed mid-write leaves at most one torn final line, which
//! readers report separately from genuine corruption.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::RunRecord;

pub fn encode_line<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let crc = crc32fast::hash(json.as_bytes());
    Ok(format!("{json}\t{crc:08x}\n"))
}

pub fn decode_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    let bad = |detail: String| Error::Ledger {
        line: line_no,
        detail,
    };
    let (json, crc) = line
        .rsplit_once('\t')
        .ok_or_else(|| bad("missing checksum".into()))?;
    let expected =
        u32::from_str_radix(crc.trim_end(), 16).map_err(|_| bad(format!("malformed checksum '{crc}'")))?;
    let actual = crc32fast::hash(json.as_bytes());
    if actual != expected {
        return Err(bad(format!("checksum mismatch ({actual:08x} != {expected:08x})")));
    }
    serde_json::from_str(json).map_err(|e| bad(e.to_string()))
}

#[derive(Debug)]
pub struct LedgerScan<T> {
    pub records: Vec<T>,
    /// Length in bytes of the intact prefix.
    pub valid_len: usize,
    /// True when the last line was incomplete or failed its checksum.
    pub torn_tail: bool,
}

/// Parses a ledger, tolerating a torn final line but nothing else.
pub fn scan<T: DeserializeOwned>(text: &str) -> Result<LedgerScan<T>> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let is_last = lines.peek().is_none();
        if line.trim().is_empty() {
            offset += line.len();
            continue;
        }
        let complete = line.ends_with('\n');
        match decode_line(line.trim_end_matches('\n'), i + 1) {
            Ok(rec) if complete => {
                records.push(rec);
                offset += line.len();
            }
            Ok(_) | Err(_) if is_last => {
                return Ok(LedgerScan {
                    records,
                    valid_len: offset,
                    torn_tail: true,
                })
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => return Err(e),
        }
    }
    Ok(LedgerScan {
        records,
        valid_len: offset,
        torn_tail: false,
    })
}

/// Strict read: any damage, including a torn tail, is an error.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let s = scan(&text)?;
    if s.torn_tail {
        return Err(Error::Ledger {
            line: s.records.len() + 1,
            detail: format!("{} ends with a torn line", path.display()),
        });
    }
    Ok(s.records)
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    read(path)
}

/// Single-writer appender.
pub struct LedgerWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LedgerWriter {
    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LedgerWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            fs::remove_file(path)?;
        }
        Self::append_to(path)
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.out.write_all(encode_line(value)?.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Renders records as ledger text.
pub fn emit<T: Serialize>(records: &[T]) -> Result<String> {
    records.iter().map(encode_line).collect()
}

/// Checks that every record's temperature equals `lr * n`.
pub fn audit_temperatures(records: &[RunRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let expected = r.lr * r.n as f64;
        if (r.temperature - expected).abs() > 1e-12 * expected.abs().max(1.0) {
            return Err(Error::Ledger {
                line: i + 1,
                detail: format!("temperature {} != lr * n = {expected}", r.temperature),
            });
        }
    }
    Ok(())
}
