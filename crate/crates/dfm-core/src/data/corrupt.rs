//! Severity-parameterized image corruptions. The taxonomy follows the usual
//! robustness-benchmark categories; the formulas are deliberately simple and
//! documented per kind, since relative model comparisons — not absolute
//! corruption benchmarks — are the goal. Severity 0 is the identity for
//! every kind, and all outputs are clamped to `[0, 1]`.

use std::fmt;

use super::DataError;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianNoise,
    SpeckleNoise,
    BrightnessDown,
    ContrastDown,
    Pixelate,
    DefocusBlur,
    MotionBlur,
    JpegLikeBlock,
}

pub const ALL_KINDS: [CorruptionKind; 8] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::SpeckleNoise,
    CorruptionKind::BrightnessDown,
    CorruptionKind::ContrastDown,
    CorruptionKind::Pixelate,
    CorruptionKind::DefocusBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::JpegLikeBlock,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::BrightnessDown => "brightness_down",
            CorruptionKind::ContrastDown => "contrast_down",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::JpegLikeBlock => "jpeg_like_block",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl Corruption {
    /// Parses `kind:severity`, e.g. `pixelate:0.4`.
    pub fn parse(s: &str) -> Result<Self, DataError> {
        let (kind_str, sev_str) = s.split_once(':').ok_or_else(|| {
            DataError::Config(format!("corruption spec `{s}` is not kind:severity"))
        })?;
        let kind = CorruptionKind::from_name(kind_str).ok_or_else(|| {
            DataError::Config(format!(
                "unknown corruption `{kind_str}`; kinds: {}",
                ALL_KINDS.map(|k| k.name()).join(", ")
            ))
        })?;
        let severity: f64 = sev_str
            .parse()
            .map_err(|_| DataError::Config(format!("severity `{sev_str}` is not a number")))?;
        if !severity.is_finite() || severity < 0.0 {
            return Err(DataError::Config(format!(
                "severity must be finite and non-negative, got {severity}"
            )));
        }
        Ok(Corruption { kind, severity })
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Blur radius / window growth rule shared by the spatial kinds: size scales
/// linearly with severity so 0 is identity and 1 is clearly degraded.
fn spatial_extent(s: f64) -> usize {
    (3.0 * s).round() as usize
}

/// Applies one corruption to a `(C, H, W)` image in `[0, 1]`.
pub fn corrupt(x: &Tensor, c: &Corruption, seed: u64) -> Result<Tensor, DataError> {
    if x.shape().len() != 3 {
        return Err(DataError::Config(format!(
            "corrupt wants a (C, H, W) image, got {:?}",
            x.shape()
        )));
    }
    if c.severity == 0.0 {
        return Ok(x.clone());
    }
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = c.severity;
    let data = x.data();
    let out: Vec<f64> = match c.kind {
        CorruptionKind::GaussianNoise => {
            let mut noise = vec![0.0; data.len()];
            rng::fill_normal(&mut rng::stream(seed, "corrupt.gauss", 0), &mut noise, 0.0, s);
            data.iter().zip(&noise).map(|(a, e)| a + e).collect()
        }
        CorruptionKind::SpeckleNoise => {
            // Multiplicative noise: x * (1 + eps), eps ~ N(0, s^2).
            let mut noise = vec![0.0; data.len()];
            rng::fill_normal(&mut rng::stream(seed, "corrupt.speckle", 0), &mut noise, 0.0, s);
            data.iter().zip(&noise).map(|(a, e)| a * (1.0 + e)).collect()
        }
        CorruptionKind::BrightnessDown => data.iter().map(|a| a - s).collect(),
        CorruptionKind::ContrastDown => {
            let mean = data.iter().sum::<f64>() / data.len() as f64;
            data.iter().map(|a| mean + (a - mean) * (1.0 - s)).collect()
        }
        CorruptionKind::Pixelate => {
            // Downsample by block mean, then hold each block constant.
            let factor = (1.0 + 3.0 * s).round().max(1.0) as usize;
            let mut out = vec![0.0; data.len()];
            for c0 in 0..ch {
                let plane = &data[c0 * h * w..(c0 + 1) * h * w];
                for by in (0..h).step_by(factor) {
                    for bx in (0..w).step_by(factor) {
                        let (ye, xe) = ((by + factor).min(h), (bx + factor).min(w));
                        let mut sum = 0.0;
                        for y in by..ye {
                            for x in bx..xe {
                                sum += plane[y * w + x];
                            }
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f64;
                        for y in by..ye {
                            for x in bx..xe {
                                out[c0 * h * w + y * w + x] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::DefocusBlur => {
            // Uniform disc kernel with replicate edges; radius grows with s.
            let r = spatial_extent(s).max(1) as isize;
            let mut offs = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx <= r * r {
                        offs.push((dy, dx));
                    }
                }
            }
            let norm = 1.0 / offs.len() as f64;
            let mut out = vec![0.0; data.len()];
            for c0 in 0..ch {
                let plane = &data[c0 * h * w..(c0 + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for &(dy, dx) in &offs {
                            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            acc += plane[yy * w + xx];
                        }
                        out[c0 * h * w + y * w + x] = acc * norm;
                    }
                }
            }
            out
        }
        CorruptionKind::MotionBlur => {
            // Horizontal box blur with replicate edges; length grows with s.
            let r = spatial_extent(s).max(1) as isize;
            let norm = 1.0 / (2 * r + 1) as f64;
            let mut out = vec![0.0; data.len()];
            for c0 in 0..ch {
                let plane = &data[c0 * h * w..(c0 + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dx in -r..=r {
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            acc += plane[y * w + xx];
                        }
                        out[c0 * h * w + y * w + x] = acc * norm;
                    }
                }
            }
            out
        }
        CorruptionKind::JpegLikeBlock => {
            // 8x8 blocks: blend toward the block mean quantized to 8 levels.
            // Coarse blocks plus banded intensities stand in for codec loss
            // without claiming codec fidelity.
            let mut out = vec![0.0; data.len()];
            for c0 in 0..ch {
                let plane = &data[c0 * h * w..(c0 + 1) * h * w];
                for by in (0..h).step_by(8) {
                    for bx in (0..w).step_by(8) {
                        let (ye, xe) = ((by + 8).min(h), (bx + 8).min(w));
                        let mut sum = 0.0;
                        for y in by..ye {
                            for x in bx..xe {
                                sum += plane[y * w + x];
                            }
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f64;
                        let quantized = (mean * 7.0).round() / 7.0;
                        for y in by..ye {
                            for x in bx..xe {
                                let v = plane[y * w + x];
                                out[c0 * h * w + y * w + x] = (1.0 - s) * v + s * quantized;
                            }
                        }
                    }
                }
            }
            out
        }
    };
    Ok(Tensor::detached(
        x.shape().to_vec(),
        out.into_iter().map(clamp01).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        let data: Vec<f64> = (0..32).map(|i| (i as f64 / 31.0).powf(0.8)).collect();
        Tensor::detached(vec![2, 4, 4], data)
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind() {
        let x = image();
        for kind in ALL_KINDS {
            let c = Corruption { kind, severity: 0.0 };
            let y = corrupt(&x, &c, 3).unwrap();
            assert_eq!(y.data(), x.data(), "{kind} moved pixels at severity 0");
        }
    }

    #[test]
    fn outputs_stay_inside_the_unit_interval() {
        let x = image();
        for kind in ALL_KINDS {
            for severity in [0.25, 0.5, 1.0] {
                let y = corrupt(&x, &Corruption { kind, severity }, 9).unwrap();
                assert!(
                    y.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "{kind} escaped [0,1] at severity {severity}"
                );
            }
        }
    }

    #[test]
    fn brightness_down_full_severity_blacks_out_ones() {
        let x = Tensor::detached(vec![1, 2, 2], vec![1.0; 4]);
        let y = corrupt(
            &x,
            &Corruption { kind: CorruptionKind::BrightnessDown, severity: 1.0 },
            0,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixelate_factor_two_means_constant_blocks_at_their_mean() {
        // severity 1/3 makes the factor round(1 + 3s) = 2.
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let x = Tensor::detached(vec![1, 4, 4], data.clone());
        let y = corrupt(
            &x,
            &Corruption { kind: CorruptionKind::Pixelate, severity: 1.0 / 3.0 },
            0,
        )
        .unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let idx = [
                    (2 * by) * 4 + 2 * bx,
                    (2 * by) * 4 + 2 * bx + 1,
                    (2 * by + 1) * 4 + 2 * bx,
                    (2 * by + 1) * 4 + 2 * bx + 1,
                ];
                let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / 4.0;
                for &i in &idx {
                    assert!((y.data()[i] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn contrast_down_pulls_toward_the_mean() {
        let x = Tensor::detached(vec![1, 2, 2], vec![0.0, 1.0, 0.25, 0.75]);
        let mean = 0.5;
        let y = corrupt(
            &x,
            &Corruption { kind: CorruptionKind::ContrastDown, severity: 0.5 },
            0,
        )
        .unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((b - (mean + (a - mean) * 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_round_trips_and_rejects_garbage() {
        let c = Corruption::parse("defocus_blur:0.5").unwrap();
        assert_eq!(c.kind, CorruptionKind::DefocusBlur);
        assert_eq!(c.severity, 0.5);
        assert_eq!(Corruption::parse(&c.to_string()).unwrap(), c);
        for bad in [
            "defocus_blur",
            "defocus_blur:",
            "defocus_blur:abc",
            "defocus_blur:-1",
            "defocus_blur:inf",
            "smudge:0.5",
            ":0.5",
            "",
        ] {
            assert!(Corruption::parse(bad).is_err(), "`{bad}` should not parse");
        }
    }

    #[test]
    fn noise_kinds_are_seeded_deterministically() {
        let x = image();
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::SpeckleNoise] {
            let c = Corruption { kind, severity: 0.3 };
            let a = corrupt(&x, &c, 7).unwrap();
            let b = corrupt(&x, &c, 7).unwrap();
            let d = corrupt(&x, &c, 8).unwrap();
            assert_eq!(a.data(), b.data());
            assert_ne!(a.data(), d.data());
        }
    }
}
