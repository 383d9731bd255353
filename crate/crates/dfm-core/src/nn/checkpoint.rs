//! Binary checkpoint format.
//!
//! Layout: magic `DFM1`, then one record per parameter: name length
//! (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each), then the
//! row-major values as f64 LE. Rank-0 records carry exactly one value and
//! are used for scalar hyperparameters. No trailer; records run to EOF.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Param;

pub const MAGIC: &[u8; 4] = b"DFM1";
/// Decode caps: a header that asks for more than this is malformed, not big.
pub const MAX_NAME_BYTES: usize = 64 * 1024;
pub const MAX_RANK: usize = 8;
pub const MAX_ELEMENTS: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter name is not UTF-8")]
    NameNotUtf8,
    #[error("{what} {got} exceeds cap {cap}")]
    CapExceeded {
        what: &'static str,
        got: usize,
        cap: usize,
    },
    #[error("duplicate parameter {0}")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode<'a>(entries: impl Iterator<Item = (&'a str, &'a Param)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, param) in entries {
        assert!(name.len() <= MAX_NAME_BYTES, "parameter name too long");
        assert!(param.shape.len() <= MAX_RANK, "parameter rank too large");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(param.shape.len() as u32).to_le_bytes());
        for &dim in &param.shape {
            out.extend_from_slice(&u32::try_from(dim).expect("dim fits u32").to_le_bytes());
        }
        for &value in &param.data {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.at < n {
            return Err(CheckpointError::Truncated(what));
        }
        let piece = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(piece)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("sliced to 4")))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Decodes a full checkpoint image. Returns parameters in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Param)>, CheckpointError> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut entries: Vec<(String, Param)> = Vec::new();
    while !cur.done() {
        let name_len = cur.u32("name length")? as usize;
        if name_len > MAX_NAME_BYTES {
            return Err(CheckpointError::CapExceeded {
                what: "name length",
                got: name_len,
                cap: MAX_NAME_BYTES,
            });
        }
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| CheckpointError::NameNotUtf8)?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::CapExceeded {
                what: "rank",
                got: rank,
                cap: MAX_RANK,
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims")? as usize);
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or(CheckpointError::CapExceeded {
                what: "element count",
                got: usize::MAX,
                cap: MAX_ELEMENTS,
            })?;
        let raw = cur.take(8 * elements, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked to 8")))
            .collect();
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        entries.push((name, Param { shape, data }));
    }
    Ok(entries)
}

pub fn save<'a>(
    path: &Path,
    entries: impl Iterator<Item = (&'a str, &'a Param)>,
) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode(entries))?)
}

pub fn load(path: &Path) -> Result<Vec<(String, Param)>, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Param)> {
        vec![
            (
                "a.weight".into(),
                Param {
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300],
                },
            ),
            (
                "meta.tau".into(),
                Param {
                    shape: vec![],
                    data: vec![1.0],
                },
            ),
        ]
    }

    #[test]
    fn round_trip_preserves_order_shapes_and_bits() {
        let entries = sample();
        let bytes = encode(entries.iter().map(|(n, p)| (n.as_str(), p)));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n0, p0), (n1, p1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(p0.shape, p1.shape);
            let bits0: Vec<u64> = p0.data.iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = p1.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode(b"XXXX"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(b"DF"), Err(CheckpointError::Truncated(_))));
        let entries = sample();
        let bytes = encode(entries.iter().map(|(n, p)| (n.as_str(), p)));
        for cut in [5, 9, 14, bytes.len() - 3] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))),
                "cut at {cut} should truncate"
            );
        }
    }

    #[test]
    fn rejects_oversized_headers_without_allocating() {
        // name length far beyond the cap
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::CapExceeded { what: "name length", .. })
        ));

        // element count overflowing usize via huge dims
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::CapExceeded { what: "element count", .. })
        ));
    }

    #[test]
    fn rejects_duplicate_names() {
        let p = Param {
            shape: vec![1],
            data: vec![0.5],
        };
        let entries = [("dup", &p), ("dup", &p)];
        let bytes = encode(entries.iter().map(|&(n, p)| (n, p)));
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::DuplicateName(_))
        ));
    }

    #[test]
    fn zero_dimension_is_valid_and_empty() {
        let p = Param {
            shape: vec![3, 0],
            data: vec![],
        };
        let bytes = encode([("empty", &p)].into_iter());
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1.shape, vec![3, 0]);
        assert!(back[0].1.data.is_empty());
    }
}
