//! IDX container codec: the big-endian format used by MNIST-style datasets.
//! Images are `0x00000803` (unsigned byte, 3 dims), labels `0x00000801`.
//! Parsers work on byte slices so untrusted input can be fed directly.

use std::path::Path;

use super::{Dataset, DataError, Label, Split};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Upper bound on total pixel bytes in one file (256 MiB) and on any single
/// dimension; both reject absurd headers before any allocation happens.
pub const MAX_PIXEL_BYTES: usize = 1 << 28;
pub const MAX_DIM: usize = 1 << 16;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    let end = at.checked_add(4).filter(|&e| e <= bytes.len());
    match end {
        Some(e) => Ok(u32::from_be_bytes(bytes[at..e].try_into().expect("4 bytes"))),
        None => Err(DataError::Format(format!("truncated before {what}"))),
    }
}

/// Decoded image file: `count` images of `rows x cols` raw bytes.
#[derive(Debug, PartialEq, Eq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn count(&self) -> usize {
        self.pixels.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages, DataError> {
    let magic = be_u32(bytes, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "image magic {magic:#010x}, want {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
        return Err(DataError::Format(format!(
            "image dimensions {rows}x{cols} out of range"
        )));
    }
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .filter(|&v| v <= MAX_PIXEL_BYTES)
        .ok_or_else(|| DataError::Format(format!("{n} images of {rows}x{cols} exceed the size cap")))?;
    let body = &bytes[16..];
    if body.len() != total {
        return Err(DataError::Format(format!(
            "image body holds {} bytes, header promises {total}",
            body.len()
        )));
    }
    Ok(RawImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "label magic {magic:#010x}, want {LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    if n > MAX_PIXEL_BYTES {
        return Err(DataError::Format(format!("{n} labels exceed the size cap")));
    }
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DataError::Format(format!(
            "label body holds {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert!(rows > 0 && cols > 0 && pixels.len().is_multiple_of(rows * cols));
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads paired image/label files into a single-channel dataset with pixels
/// scaled to `[0, 1]` by `/255`. Class count is the largest label plus one.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.count() != labels.len() {
        return Err(DataError::Format(format!(
            "{} images but {} labels",
            images.count(),
            labels.len()
        )));
    }
    let (rows, cols) = (images.rows, images.cols);
    let tensors = images
        .pixels
        .chunks_exact(rows * cols)
        .map(|img| {
            Tensor::detached(
                vec![1, rows, cols],
                img.iter().map(|&p| p as f64 / 255.0).collect(),
            )
        })
        .collect();
    let class_count = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    Dataset::new(
        tensors,
        labels.iter().map(|&l| Label::Class(l as usize)).collect(),
        split,
        class_count,
    )
}

pub fn save_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<(), DataError> {
    std::fs::write(images_path, encode_idx_images(rows, cols, pixels))?;
    std::fs::write(labels_path, encode_idx_labels(labels))?;
    Ok(())
}

/// Quantizes a single-channel class-labeled dataset to IDX byte buffers:
/// `round(p * 255)` clamped, the inverse of the `/255` load scaling up to
/// half a quantum. Returns `(rows, cols, pixels, labels)`.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(usize, usize, Vec<u8>, Vec<u8>), DataError> {
    let (c, rows, cols) = ds
        .image_shape()
        .ok_or_else(|| DataError::Format("cannot encode an empty dataset".into()))?;
    if c != 1 {
        return Err(DataError::Format(format!(
            "idx stores single-channel images, dataset has {c} channels"
        )));
    }
    if ds.class_count > 256 {
        return Err(DataError::Format(format!(
            "idx labels are bytes; {} classes do not fit",
            ds.class_count
        )));
    }
    let mut pixels = Vec::with_capacity(ds.len() * rows * cols);
    for img in &ds.images {
        pixels.extend(img.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut labels = Vec::with_capacity(ds.len());
    for l in &ds.labels {
        match l {
            Label::Class(cl) => labels.push(*cl as u8),
            Label::Mask(_) => {
                return Err(DataError::Format(
                    "idx labels are per-image classes; masks cannot be encoded".into(),
                ))
            }
        }
    }
    Ok((rows, cols, pixels, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_scaling_follows_the_255_rule() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&ip, &lp, 2, 2, &[0, 255, 128, 64], &[1]).unwrap();
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in ds.images[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_magic_is_rejected_per_role() {
        // An images header handed to the label parser and vice versa.
        let imgs = encode_idx_images(1, 1, &[7]);
        assert!(parse_idx_labels(&imgs).is_err());
        let lbls = encode_idx_labels(&[3]);
        assert!(parse_idx_images(&lbls).is_err());
    }

    #[test]
    fn truncation_and_oversize_are_rejected() {
        let full = encode_idx_images(2, 2, &[1, 2, 3, 4]);
        for cut in [0, 3, 7, 15, full.len() - 1] {
            assert!(parse_idx_images(&full[..cut]).is_err(), "cut at {cut}");
        }
        // Header promising more pixels than the cap, body absent.
        let mut huge = Vec::new();
        huge.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        huge.extend_from_slice(&u32::MAX.to_be_bytes());
        huge.extend_from_slice(&u32::MAX.to_be_bytes());
        huge.extend_from_slice(&u32::MAX.to_be_bytes());
        assert!(parse_idx_images(&huge).is_err());
        let trailing = [encode_idx_labels(&[1, 2]), vec![9]].concat();
        assert!(parse_idx_labels(&trailing).is_err(), "trailing bytes rejected");
    }

    #[test]
    fn round_trip_preserves_every_pixel() {
        let mut pixels = vec![0u8; 3 * 4 * 5];
        for (i, p) in pixels.iter_mut().enumerate() {
            *p = (i * 37 % 256) as u8;
        }
        let labels = [0u8, 4, 9];
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&ip, &lp, 4, 5, &pixels, &labels).unwrap();
        let back = parse_idx_images(&std::fs::read(&ip).unwrap()).unwrap();
        assert_eq!(back.pixels, pixels);
        assert_eq!(back.count(), 3);
        let ds = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.class_count, 10);
        assert_eq!(ds.split, Split::Test);
    }

    #[test]
    fn count_mismatch_between_files_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&ip, &lp, 1, 1, &[5, 6], &[0]).unwrap();
        assert!(load_idx(&ip, &lp, Split::Train).is_err());
    }

    #[test]
    fn quantized_dataset_survives_a_save_load_cycle() {
        let ds = crate::data::synth::make_synthetic_cls(6, 16, 16, 3, Split::Train).unwrap();
        let (rows, cols, pixels, labels) = dataset_to_idx(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&ip, &lp, rows, cols, &pixels, &labels).unwrap();
        let back = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.images.iter().zip(&back.images) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                // Half a quantum each way.
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12, "{x} vs {y}");
            }
        }
        assert_eq!(ds.labels.len(), back.labels.len());
    }

    #[test]
    fn masks_cannot_be_encoded_as_idx_labels() {
        let ds = crate::data::synth::make_synthetic_seg(2, 16, 16, 3, 1, Split::Train).unwrap();
        assert!(dataset_to_idx(&ds).is_err());
    }
}
