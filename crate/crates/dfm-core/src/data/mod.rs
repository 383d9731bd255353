//! Datasets, perturbations, sampling regimes, and evaluation metrics.
//!
//! Two evaluation regimes exist and are mutually exclusive by design: additive
//! Gaussian input noise on the full dataset, or D clean examples per class.
//! The harness enforces that split; this module provides the pieces.

use std::rc::Rc;

use thiserror::Error;

use crate::rng;
use crate::tensor::{Target, Tensor};

pub mod corrupt;
pub mod idx;
pub mod metrics;
pub mod synth;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("class {class} has {have} instances, need {want}")]
    InsufficientClass { class: usize, have: usize, want: usize },
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Format(msg.into()))
}

/// Ground truth for one instance: a class index or a per-pixel mask stored
/// row-major at the image resolution.
#[derive(Debug, Clone)]
pub enum Label {
    Class(usize),
    Mask(Rc<Vec<usize>>),
}

impl Label {
    pub fn to_target(&self) -> Target {
        match self {
            Label::Class(c) => Target::Class(*c),
            Label::Mask(m) => Target::Mask(Rc::clone(m)),
        }
    }

    fn max_value(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            Label::Mask(m) => m.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A set of `(C, H, W)` images in `[0, 1]` with labels below `class_count`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<Label>,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    /// Validates the label range, image finiteness, and shape agreement.
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<Label>,
        split: Split,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return format_err(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            ));
        }
        if class_count == 0 {
            return format_err("class count must be positive");
        }
        let shape = images.first().map(|t| t.shape().to_vec());
        for (i, img) in images.iter().enumerate() {
            if img.shape().len() != 3 {
                return format_err(format!("image {i} has rank {}", img.shape().len()));
            }
            if Some(img.shape()) != shape.as_deref() {
                return format_err(format!("image {i} shape differs from image 0"));
            }
            if !img.all_finite() {
                return format_err(format!("image {i} contains non-finite pixels"));
            }
        }
        for (i, label) in labels.iter().enumerate() {
            if label.max_value() >= class_count {
                return format_err(format!(
                    "label {i} reaches class {} with only {class_count} classes",
                    label.max_value()
                ));
            }
            if let Label::Mask(m) = label {
                let want = images[i].shape()[1] * images[i].shape()[2];
                if m.len() != want {
                    return format_err(format!(
                        "mask {i} has {} pixels, image has {want}",
                        m.len()
                    ));
                }
            }
        }
        Ok(Dataset {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image dimensions `(C, H, W)`; zero-instance sets have no dimensions.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|t| (t.shape()[0], t.shape()[1], t.shape()[2]))
    }
}

/// Adds i.i.d. `N(0, sigma^2)` to every element. No clamping: the model sees
/// the raw corrupted values, which is what makes high-noise regimes hard.
pub fn add_gaussian_noise(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor, DataError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(DataError::Config(format!(
            "noise level must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut noise = vec![0.0; x.len()];
    rng::fill_normal(&mut rng::stream(seed, "noise", 0), &mut noise, 0.0, sigma);
    let data = x.data().iter().zip(&noise).map(|(a, e)| a + e).collect();
    Ok(Tensor::detached(x.shape().to_vec(), data))
}

/// Uniformly samples exactly `d` instances per class without replacement,
/// deterministic under the seed. Classification labels only.
pub fn few_shot_sample(ds: &Dataset, d: usize, seed: u64) -> Result<Dataset, DataError> {
    if d == 0 {
        return Err(DataError::Config("need at least one shot per class".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, label) in ds.labels.iter().enumerate() {
        match label {
            Label::Class(c) => by_class[*c].push(i),
            Label::Mask(_) => {
                return Err(DataError::Config(
                    "few-shot sampling is defined per class, not per mask".into(),
                ))
            }
        }
    }
    let mut picked = Vec::with_capacity(d * ds.class_count);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < d {
            return Err(DataError::InsufficientClass {
                class,
                have: members.len(),
                want: d,
            });
        }
        let order =
            rng::shuffled_indices(&mut rng::stream(seed, "fewshot", class as u64), members.len());
        picked.extend(order[..d].iter().map(|&j| members[j]));
    }
    Dataset::new(
        picked.iter().map(|&i| ds.images[i].clone()).collect(),
        picked.iter().map(|&i| ds.labels[i].clone()).collect(),
        ds.split,
        ds.class_count,
    )
}
