//! Evaluation metrics and the two statistical analyses the experiments rely
//! on: log-log power-law fits with a slope t-test, and pooled PCA over
//! prediction trajectories.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::DataError;
use crate::linalg::{eig_small, SmallMatrix};

/// Fraction of instances whose target is among the `k` largest logits.
/// Ties rank the lower class index first, so a target tying at the boundary
/// wins only against higher-indexed classes.
pub fn topk_accuracy(logits: &[Vec<f64>], targets: &[usize], k: usize) -> f64 {
    assert_eq!(logits.len(), targets.len(), "one target per logit row");
    assert!(k >= 1, "top-0 accuracy is meaningless");
    if logits.is_empty() {
        return 0.0;
    }
    let classes = logits[0].len();
    assert!(k <= classes, "k = {k} exceeds {classes} classes");
    let mut hits = 0usize;
    for (row, &target) in logits.iter().zip(targets) {
        let t = row[target];
        let better = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > t || (v == t && j < target))
            .count();
        if better < k {
            hits += 1;
        }
    }
    hits as f64 / logits.len() as f64
}

/// Mean over classes present in the ground truth of intersection-over-union,
/// accumulated across all mask pairs.
pub fn miou(preds: &[Vec<usize>], truths: &[Vec<usize>], classes: usize) -> f64 {
    assert_eq!(preds.len(), truths.len(), "one prediction per truth mask");
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut in_truth = vec![false; classes];
    for (p, t) in preds.iter().zip(truths) {
        assert_eq!(p.len(), t.len(), "mask sizes differ");
        for (&pv, &tv) in p.iter().zip(t) {
            assert!(pv < classes && tv < classes);
            in_truth[tv] = true;
            if pv == tv {
                inter[pv] += 1;
                union[pv] += 1;
            } else {
                union[pv] += 1;
                union[tv] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..classes {
        if in_truth[c] {
            sum += inter[c] as f64 / union[c] as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Probability that a uniformly chosen positive outranks a uniformly chosen
/// negative, ties counting one half. Computed by the rank-sum identity; the
/// tests cross-check against literal pair counting.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, DataError> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DataError::Config(
            "auc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks across tie groups (1-based ranks).
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Macro one-vs-rest AUC over softmax probabilities. Classes missing either
/// positives or negatives are skipped; all-skipped is an error.
pub fn auc_macro_ovr(
    logits: &[Vec<f64>],
    targets: &[usize],
    classes: usize,
) -> Result<f64, DataError> {
    assert_eq!(logits.len(), targets.len());
    let probs: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..classes {
        let labels: Vec<bool> = targets.iter().map(|&t| t == c).collect();
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        sum += auc(&scores, &labels)?;
        used += 1;
    }
    if used == 0 {
        return Err(DataError::Config(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(sum / used as f64)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PowerlawFit {
    /// Exponent of the fitted `acc = e^intercept * D^slope`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Two-sided p-value of the slope's t-statistic (df = n - 2).
    pub p_value: f64,
    pub used_points: usize,
    /// Points discarded for non-positive accuracy or D.
    pub dropped_points: usize,
}

/// Ordinary least squares on `(log D, log accuracy)`. Non-positive values
/// cannot be logged and are dropped; at least three points must survive.
pub fn powerlaw_fit(d_values: &[f64], accuracies: &[f64]) -> Result<PowerlawFit, DataError> {
    assert_eq!(d_values.len(), accuracies.len());
    let pts: Vec<(f64, f64)> = d_values
        .iter()
        .zip(accuracies)
        .filter(|(&d, &a)| d > 0.0 && a > 0.0 && d.is_finite() && a.is_finite())
        .map(|(&d, &a)| (d.ln(), a.ln()))
        .collect();
    let dropped = d_values.len() - pts.len();
    let n = pts.len();
    if n < 3 {
        return Err(DataError::Config(format!(
            "power-law fit needs at least 3 positive points, kept {n} of {}",
            d_values.len()
        )));
    }
    let nf = n as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(DataError::Config(
            "power-law fit needs at least two distinct D values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = pts
        .iter()
        .map(|&(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    // A flat or perfectly colinear set is a perfect fit by convention.
    let r_squared = if syy <= f64::MIN_POSITIVE {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    let df = nf - 2.0;
    let se = (ss_res / df / sxx).sqrt();
    let p_value = if se <= 0.0 {
        0.0
    } else {
        let t = (slope / se).abs();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        2.0 * (1.0 - dist.cdf(t))
    };
    Ok(PowerlawFit {
        slope,
        intercept,
        r_squared,
        p_value,
        used_points: n,
        dropped_points: dropped,
    })
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// Top-2 principal directions, unit length, rows of length L.
    pub components: [Vec<f64>; 2],
    /// Eigenvalues (variance explained) of the two components.
    pub explained: [f64; 2],
    /// Each input trajectory projected into the shared 2-D basis.
    pub paths: Vec<Vec<(f64, f64)>>,
}

/// Pools every per-step vector across instances, centers the pool, extracts
/// the top-2 principal directions of the pooled covariance, and projects each
/// trajectory with that single shared transform.
pub fn pca_trajectories(trajectories: &[Vec<Vec<f64>>]) -> Result<PcaProjection, DataError> {
    if trajectories.len() < 2 {
        return Err(DataError::Config("pca needs at least 2 trajectories".into()));
    }
    let dim = trajectories
        .first()
        .and_then(|t| t.first())
        .map(|v| v.len())
        .unwrap_or(0);
    if dim < 2 {
        return Err(DataError::Config(
            "pca needs vectors of dimension at least 2".into(),
        ));
    }
    let mut pool: Vec<&[f64]> = Vec::new();
    for traj in trajectories {
        if traj.len() < 2 {
            return Err(DataError::Config("each trajectory needs at least 2 steps".into()));
        }
        for v in traj {
            if v.len() != dim {
                return Err(DataError::Config("trajectory vectors differ in dimension".into()));
            }
            pool.push(v);
        }
    }
    let m = pool.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in &pool {
        for (mu, x) in mean.iter_mut().zip(*v) {
            *mu += x / m;
        }
    }
    let cov = SmallMatrix::from_fn(dim, |i, j| {
        pool.iter()
            .map(|v| (v[i] - mean[i]) * (v[j] - mean[j]))
            .sum::<f64>()
            / m
    })?;
    let pairs = eig_small(&cov)?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        pairs.values[b]
            .re
            .partial_cmp(&pairs.values[a].re)
            .expect("finite eigenvalues")
    });
    let top = pairs.values[order[0]].re;
    if top <= 0.0 || !top.is_finite() {
        return Err(DataError::Config("zero-variance pool has no principal directions".into()));
    }
    let component = |j: usize| -> Vec<f64> {
        let v = pairs.vector(order[j]);
        let norm = v.iter().map(|z| z.re * z.re).sum::<f64>().sqrt();
        v.iter().map(|z| z.re / norm).collect()
    };
    let components = [component(0), component(1)];
    let explained = [pairs.values[order[0]].re, pairs.values[order[1]].re.max(0.0)];
    let project = |v: &[f64]| -> (f64, f64) {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        (
            c.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
            c.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
        )
    };
    let paths = trajectories
        .iter()
        .map(|traj| traj.iter().map(|v| project(v)).collect())
        .collect();
    Ok(PcaProjection {
        components,
        explained,
        paths,
    })
}
