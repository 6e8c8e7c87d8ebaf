//! Binary dataset files and single-channel CSV import.
//!
//! ```text
//! b"MTSDS01\0"
//! u32 n, u32 m, u32 t, u32 c          (little-endian)
//! n x u32 labels
//! n*m*t x f32 values, sample-major, then channel, then time
//! ```

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::params::Cursor;

pub const DATASET_MAGIC: &[u8; 8] = b"MTSDS01\0";

pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + ds.labels.len() * 4 + ds.samples.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len(), ds.channels, ds.length, ds.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &v in &ds.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_dataset(buf: &[u8], name: &str) -> Result<Dataset> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(8).map_err(|_| Error::Parse {
        offset: 0,
        message: "file shorter than the dataset magic".into(),
    })?;
    if magic != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad dataset magic".into(),
        });
    }
    let n = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let t = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let expected = 24 + 4 * n + 4 * n * m * t;
    if buf.len() != expected {
        return Err(Error::Parse {
            offset: buf.len().min(expected) as u64,
            message: format!("expected {expected} bytes for n={n} m={m} t={t}, found {}", buf.len()),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = cur.pos;
        let l = cur.u32()?;
        if l as usize >= c {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("label {l} not below class count {c}"),
            });
        }
        labels.push(l);
    }
    let samples = cur
        .take(4 * n * m * t)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Dataset::new(name, samples, labels, m, t, c)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(&buf, &name)
}

/// Single-channel CSV: one sample per line, values then the integer label.
pub fn import_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut length = None;
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::Parse {
            offset: line_offset,
            message: msg,
        };
        let (label, values) = fields.split_last().ok_or_else(|| bad("empty row".into()))?;
        let label: u32 = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        if values.is_empty() {
            return Err(bad("row has no values".into()));
        }
        match length {
            None => length = Some(values.len()),
            Some(t) if t != values.len() => {
                return Err(bad(format!("row has {} values, expected {t}", values.len())));
            }
            _ => {}
        }
        for v in values {
            samples.push(v.parse::<f32>().map_err(|_| bad(format!("bad value {v:?}")))?);
        }
        labels.push(label);
    }
    let length = length.ok_or(Error::Parse {
        offset: 0,
        message: "no rows".into(),
    })?;
    let classes = labels.iter().max().map_or(0, |&l| l as usize + 1);
    Dataset::new(name, samples, labels, 1, length, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Dataset {
        Dataset::new("d", (0..12).map(|v| v as f32 * 0.5 - 1.0).collect(), vec![0, 2], 2, 3, 3).unwrap()
    }

    #[test]
    fn round_trip_bit_identical() {
        let bytes = write_dataset(&ds());
        assert_eq!(&bytes[..8], DATASET_MAGIC);
        let back = read_dataset(&bytes, "d").unwrap();
        assert_eq!(back, ds());
        assert_eq!(write_dataset(&back), bytes);
    }

    #[test]
    fn truncated_names_lengths() {
        let mut bytes = write_dataset(&ds());
        bytes.pop();
        let err = read_dataset(&bytes, "d").unwrap_err().to_string();
        assert!(err.contains("expected 80 bytes"), "{err}");
        assert!(err.contains("found 79"), "{err}");
    }

    #[test]
    fn bad_magic_and_label() {
        let mut bytes = write_dataset(&ds());
        bytes[0] = b'X';
        assert!(matches!(read_dataset(&bytes, "d"), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = write_dataset(&ds());
        bytes[28..32].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_dataset(&bytes, "d"), Err(Error::Parse { offset: 28, .. })));
    }

    #[test]
    fn minimal_file_loads_but_cannot_split() {
        let one = Dataset::new("one", vec![1.0; 4], vec![0], 1, 4, 1).unwrap();
        let back = read_dataset(&write_dataset(&one), "one").unwrap();
        assert_eq!(back.len(), 1);
        assert!(matches!(
            super::super::split(back.len(), &Default::default()),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn csv_import() {
        let d = import_csv("1.0,2.0,3.0,1\n4,5,6,0\n", "c").unwrap();
        assert_eq!((d.len(), d.channels, d.length, d.classes), (2, 1, 3, 2));
        assert_eq!(d.samples, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(import_csv("1,2,0\n1,0\n", "c").is_err());
    }
}
