//! Append-only JSON-lines log backing the telemetry hub.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One ingested telemetry record as persisted by the hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredPoint {
    #[serde(rename = "node")]
    pub node_id: String,
    #[serde(rename = "rail")]
    pub rail_name: String,
    #[serde(rename = "ts_ns")]
    pub t_ns: u64,
    #[serde(rename = "i_a")]
    pub i_amps: f64,
    #[serde(rename = "v_v")]
    pub v_volts: f64,
    #[serde(rename = "e_j")]
    pub e_joules: f64,
    pub window_ns: u64,
    pub seq: u32,
    pub ingest_t_ns: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line} is corrupt: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// What reopening an existing log found.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recovery {
    pub points: usize,
    /// Incomplete or unparsable trailing lines removed.
    pub warnings: u64,
    pub truncated_bytes: u64,
}

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl Store {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
        move |source| StoreError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// Creates an empty log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Store, StoreError> {
        let file = File::create(path).map_err(Self::io(path))?;
        Ok(Store {
            path: path.to_owned(),
            writer: BufWriter::new(file),
        })
    }

    /// Opens (or creates) a log and returns every complete record in it.
    ///
    /// A final line that is unterminated or does not parse is cut off and
    /// counted as a warning. A bad line anywhere else is an error.
    pub fn open(path: &Path) -> Result<(Store, Vec<StoredPoint>, Recovery), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(Self::io(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(Self::io(path))?;
        let (points, mut recovery, good_len) = scan(&bytes, path)?;
        if good_len < bytes.len() {
            recovery.truncated_bytes = (bytes.len() - good_len) as u64;
            file.set_len(good_len as u64).map_err(Self::io(path))?;
        }
        Ok((
            Store {
                path: path.to_owned(),
                writer: BufWriter::new(file),
            },
            points,
            recovery,
        ))
    }

    /// Reads every complete record without modifying the file, so it is safe
    /// while another process appends.
    pub fn read(path: &Path) -> Result<(Vec<StoredPoint>, Recovery), StoreError> {
        let bytes = std::fs::read(path).map_err(Self::io(path))?;
        let (points, recovery, _) = scan(&bytes, path)?;
        Ok((points, recovery))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, point: &StoredPoint) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(point).expect("points always serialize");
        line.push(b'\n');
        self.writer.write_all(&line).map_err(Self::io(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.writer.flush().map_err(Self::io(&self.path))
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if let Err(e) = self.writer.flush() {
            log::error!("{}: flush on close failed: {e}", self.path.display());
        }
    }
}

fn scan(bytes: &[u8], path: &Path) -> Result<(Vec<StoredPoint>, Recovery, usize), StoreError> {
    let mut points = Vec::new();
    let mut recovery = Recovery::default();
    let mut good_len = 0usize;
    let mut pos = 0usize;
    let mut line_no = 0;
    while pos < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(n) => (&bytes[pos..pos + n], pos + n + 1, true),
            None => (&bytes[pos..], bytes.len(), false),
        };
        let is_last = next == bytes.len();
        match serde_json::from_slice::<StoredPoint>(line) {
            Ok(p) if terminated => {
                points.push(p);
                good_len = next;
            }
            _ if is_last => {
                recovery.warnings += 1;
                log::warn!(
                    "{}: discarding incomplete final line {line_no} ({} bytes)",
                    path.display(),
                    bytes.len() - pos
                );
                break;
            }
            Ok(_) => unreachable!("only the last line can be unterminated"),
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_owned(),
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
        pos = next;
    }
    recovery.points = points.len();
    recovery.truncated_bytes = (bytes.len() - good_len) as u64;
    Ok((points, recovery, good_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(seq: u32) -> StoredPoint {
        StoredPoint {
            node_id: "n1".into(),
            rail_name: "vdd_core".into(),
            t_ns: seq as u64 * 128_000,
            i_amps: 0.1 * seq as f64,
            v_volts: 0.85,
            e_joules: 1e-5 * seq as f64,
            window_ns: 128_000,
            seq,
            ingest_t_ns: seq as u64 * 128_000 + 5,
        }
    }

    #[test]
    fn line_format() {
        let text = serde_json::to_string(&point(1)).unwrap();
        assert_eq!(
            text,
            r#"{"node":"n1","rail":"vdd_core","ts_ns":128000,"i_a":0.1,"v_v":0.85,"e_j":0.00001,"window_ns":128000,"seq":1,"ingest_t_ns":128005}"#
        );
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        {
            let mut s = Store::create(&path).unwrap();
            for i in 1..=100 {
                s.append(&point(i)).unwrap();
            }
        }
        let (_, pts, rec) = Store::open(&path).unwrap();
        assert_eq!(pts, (1..=100).map(point).collect::<Vec<_>>());
        assert_eq!(rec.warnings, 0);
    }

    #[test]
    fn empty_file_reopens_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "").unwrap();
        let (_, pts, rec) = Store::open(&path).unwrap();
        assert!(pts.is_empty());
        assert_eq!(rec, Recovery::default());
    }

    #[test]
    fn half_written_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut text = String::new();
        for i in 1..=100 {
            text.push_str(&serde_json::to_string(&point(i)).unwrap());
            text.push('\n');
        }
        let full = text.len();
        let last_len = serde_json::to_string(&point(100)).unwrap().len() + 1;
        text.truncate(full - last_len / 2);
        std::fs::write(&path, &text).unwrap();

        let (mut s, pts, rec) = Store::open(&path).unwrap();
        assert_eq!(pts.len(), 99);
        assert_eq!(rec.warnings, 1);
        s.append(&point(100)).unwrap();
        drop(s);
        let (_, pts, rec) = Store::open(&path).unwrap();
        assert_eq!(pts.len(), 100);
        assert_eq!(rec.warnings, 0);
    }

    #[test]
    fn read_leaves_the_file_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let good = serde_json::to_string(&point(1)).unwrap();
        let text = format!("{good}\n{}", &good[..10]);
        std::fs::write(&path, &text).unwrap();
        let (pts, rec) = Store::read(&path).unwrap();
        assert_eq!(pts, vec![point(1)]);
        assert_eq!((rec.warnings, rec.truncated_bytes), (1, 10));
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    }

    #[test]
    fn corruption_before_the_tail_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let good = serde_json::to_string(&point(1)).unwrap();
        std::fs::write(&path, format!("{good}\ngarbage\n{good}\n")).unwrap();
        assert!(matches!(
            Store::open(&path),
            Err(StoreError::Corrupt { line: 2, .. })
        ));
    }
}
