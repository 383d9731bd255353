//! Brute-force oracles for every metric: literal enumeration, explicit
//! normal equations, numerically integrated t-tails, and a test-local Jacobi
//! eigensolver. Nothing here calls back into the implementation under test.

use dfm_core::data::metrics::{
    auc, auc_macro_ovr, miou, pca_trajectories, powerlaw_fit, softmax, topk_accuracy,
};
use dfm_core::rng;
use proptest::prelude::*;

// ---------------------------------------------------------------------------
// top-k

/// Oracle: sort class indices by (logit desc, index asc) and look for the
/// target in the first k.
fn topk_oracle(logits: &[Vec<f64>], targets: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &t) in logits.iter().zip(targets) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });
        if idx[..k].contains(&t) {
            hits += 1;
        }
    }
    hits as f64 / targets.len() as f64
}

#[test]
fn topk_matches_enumeration_on_handmade_ties() {
    let logits = vec![
        vec![0.5, 0.5, 0.5, 0.1],
        vec![0.1, 0.9, 0.9, 0.2],
        vec![0.3, 0.3, 0.3, 0.3],
    ];
    let targets = [2, 2, 3];
    for k in 1..=4 {
        assert_eq!(
            topk_accuracy(&logits, &targets, k),
            topk_oracle(&logits, &targets, k),
            "k = {k}"
        );
    }
    // Hand enumeration of the three instances at k = 2: instance 0 ranks
    // classes 0,1 above target 2 (ties, lower index first) -> miss; instance
    // 1 ranks 1,2 -> hit; instance 2 ranks 0,1 -> miss.
    assert_eq!(topk_accuracy(&logits, &targets, 2), 1.0 / 3.0);
}

// ---------------------------------------------------------------------------
// mIoU

/// Oracle: build the confusion counts per class with literal set logic.
fn miou_oracle(preds: &[Vec<usize>], truths: &[Vec<usize>], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let mut in_truth = false;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, t) in preds.iter().zip(truths) {
            for (&pv, &tv) in p.iter().zip(t) {
                in_truth |= tv == c;
                if pv == c && tv == c {
                    inter += 1;
                }
                if pv == c || tv == c {
                    union += 1;
                }
            }
        }
        if in_truth {
            present += 1;
            total += inter as f64 / union as f64;
        }
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

#[test]
fn miou_matches_the_confusion_matrix_oracle() {
    // 2-class 2x2 hand case: prediction gets 3 of 4 pixels right.
    let p = vec![vec![0, 1, 1, 1]];
    let t = vec![vec![0, 1, 1, 0]];
    // class 0: inter 1, union 2; class 1: inter 2, union 3.
    let hand = (1.0 / 2.0 + 2.0 / 3.0) / 2.0;
    assert_eq!(miou(&p, &t, 2), hand);
    assert_eq!(miou(&p, &t, 2), miou_oracle(&p, &t, 2));

    // A class absent from truth but present in prediction must not count.
    let p = vec![vec![2, 2, 0, 1]];
    let t = vec![vec![0, 0, 0, 1]];
    assert_eq!(miou(&p, &t, 3), miou_oracle(&p, &t, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Contract: miou equals per-class set enumeration on small random mask
    /// pairs. Prediction: exact equality — both sides are integer-ratio
    /// sums. Failure would indicate confusion bookkeeping drift.
    #[test]
    fn falsify_miou_against_enumeration(
        seed in 0u64..500,
        masks in 1usize..4,
        classes in 2usize..5,
    ) {
        let mut r = rng::stream(seed, "miou", 0);
        use rand::Rng;
        let gen = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..masks)
                .map(|_| (0..9).map(|_| r.gen_range(0..classes)).collect())
                .collect()
        };
        let p = gen(&mut r);
        let t = gen(&mut r);
        prop_assert_eq!(miou(&p, &t, classes), miou_oracle(&p, &t, classes));
    }

    /// Contract: rank-sum AUC equals literal pair counting with half-credit
    /// ties. Prediction: exact equality on dyadic scores. Failure means the
    /// tie-averaging of ranks is wrong.
    #[test]
    fn falsify_auc_against_pair_counting(
        seed in 0u64..500,
        n in 2usize..12,
    ) {
        let mut r = rng::stream(seed, "auc", 0);
        use rand::Rng;
        // Quantized scores force ties; dyadic values keep arithmetic exact.
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen::<bool>()).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < n);
        let mut num = 0.0;
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, &l)| l) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, &l)| !l) {
                num += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        let oracle = num / (pos * (n - pos)) as f64;
        prop_assert_eq!(auc(&scores, &labels).unwrap(), oracle);
    }
}

#[test]
fn auc_six_point_tie_case_matches_hand_count() {
    // Positives score {0.9, 0.5, 0.3}, negatives {0.5, 0.2, 0.1}.
    // Pairs: 0.9 beats all three (3). 0.5 ties 0.5 (0.5) and beats two (2).
    // 0.3 beats 0.2, 0.1 (2). Total 7.5 of 9.
    let scores = [0.9, 0.5, 0.3, 0.5, 0.2, 0.1];
    let labels = [true, true, true, false, false, false];
    assert_eq!(auc(&scores, &labels).unwrap(), 7.5 / 9.0);
}

#[test]
fn macro_ovr_auc_averages_per_class_scores() {
    // Three classes, 6 instances; compute each one-vs-rest AUC by pair
    // counting on softmax probabilities and average.
    let logits = vec![
        vec![2.0, 0.0, 0.0],
        vec![1.5, 0.5, 0.0],
        vec![0.0, 2.0, 0.5],
        vec![0.2, 1.0, 0.3],
        vec![0.0, 0.1, 1.8],
        vec![0.5, 0.0, 1.0],
    ];
    let targets = [0usize, 0, 1, 1, 2, 2];
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
    let mut want = 0.0;
    #[allow(clippy::needless_range_loop)] // c is a class id, not a slice cursor
    for c in 0..3 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &ti) in targets.iter().enumerate() {
            if ti != c {
                continue;
            }
            for (j, &tj) in targets.iter().enumerate() {
                if tj == c {
                    continue;
                }
                let (sp, sn) = (probs[i][c], probs[j][c]);
                num += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
                pairs += 1.0;
            }
        }
        want += num / pairs;
    }
    want /= 3.0;
    let got = auc_macro_ovr(&logits, &targets, 3).unwrap();
    assert!((got - want).abs() < 1e-15);
}

// ---------------------------------------------------------------------------
// power-law fit

/// Oracle slope/intercept from the explicit 2x2 normal equations.
fn normal_equations(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy * sxx - sx * sxy) / det;
    (slope, intercept)
}

/// Student-t tail integrated numerically with Simpson's rule; gamma by the
/// Lanczos approximation. Independent of any statistics library.
fn t_two_sided_p(t: f64, df: f64) -> f64 {
    fn ln_gamma(x: f64) -> f64 {
        // Coefficients verbatim from the Lanczos g=7, n=9 table.
        #[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
        const G: [f64; 9] = [
            0.999_999_999_999_809_93,
            676.520_368_121_885_1,
            -1259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, &g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
    let coef = (ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln())
    .exp();
    let pdf = |u: f64| coef * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0);
    let (a, b, steps) = (t.abs(), t.abs() + 200.0, 400_000usize);
    let h = (b - a) / steps as f64;
    let mut acc = pdf(a) + pdf(b);
    for i in 1..steps {
        let u = a + i as f64 * h;
        acc += pdf(u) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * (acc * h / 3.0)
}

#[test]
fn powerlaw_matches_normal_equations_and_integrated_p_value() {
    // Noisy synthetic power law: y = 1.3 * D^0.42 with log-space jitter.
    let d: Vec<f64> = (0..10).map(|i| 2.0f64.powi(i)).collect();
    let mut noise = vec![0.0; 10];
    rng::fill_normal(&mut rng::stream(17, "plaw", 0), &mut noise, 0.0, 0.05);
    let acc: Vec<f64> = d
        .iter()
        .zip(&noise)
        .map(|(&x, &e)| 1.3 * x.powf(0.42) * e.exp())
        .collect();
    let fit = powerlaw_fit(&d, &acc).unwrap();

    let xs: Vec<f64> = d.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = acc.iter().map(|y| y.ln()).collect();
    let (slope_o, intercept_o) = normal_equations(&xs, &ys);
    assert!((fit.slope - slope_o).abs() < 1e-10);
    assert!((fit.intercept - intercept_o).abs() < 1e-10);

    // Slope recovered within 2 standard errors of the truth.
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (y - (intercept_o + slope_o * x)).powi(2))
        .sum();
    let se = (ss_res / (n - 2.0) / sxx).sqrt();
    assert!(
        (fit.slope - 0.42).abs() < 2.0 * se,
        "slope {} strayed beyond 2 SE ({se}) from 0.42",
        fit.slope
    );

    // p-value against the numerically integrated t-tail.
    let t_stat = (fit.slope / se).abs();
    let p_oracle = t_two_sided_p(t_stat, n - 2.0);
    assert!(
        (fit.p_value - p_oracle).abs() < 1e-6,
        "p {} vs integrated oracle {p_oracle}",
        fit.p_value
    );
    assert!(fit.p_value < 0.01, "a strong power law must test significant");
    assert!(fit.r_squared > 0.90);
}

// ---------------------------------------------------------------------------
// PCA

/// Test-local Jacobi eigensolver for small symmetric matrices.
fn jacobi_eig(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..200 {
        let (mut p, mut q, mut biggest) = (0, 1, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if a[i * n + j].abs() > biggest {
                    biggest = a[i * n + j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if biggest < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / a[p * n + q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..n {
            let (akp, akq) = (a[k * n + p], a[k * n + q]);
            a[k * n + p] = c * akp - s * akq;
            a[k * n + q] = s * akp + c * akq;
        }
        for k in 0..n {
            let (apk, aqk) = (a[p * n + k], a[q * n + k]);
            a[p * n + k] = c * apk - s * aqk;
            a[q * n + k] = s * apk + c * aqk;
        }
        for k in 0..n {
            let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
            v[k * n + p] = c * vkp - s * vkq;
            v[k * n + q] = s * vkp + c * vkq;
        }
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    (values, v)
}

#[test]
fn pca_matches_a_jacobi_covariance_oracle() {
    // 4 trajectories x 5 steps of 3-dim vectors = 20 pooled points.
    let mut trajs = Vec::new();
    for i in 0..4u64 {
        let mut steps = Vec::new();
        for j in 0..5u64 {
            let mut v = vec![0.0; 3];
            rng::fill_normal(&mut rng::stream(90, "pca", i * 5 + j), &mut v, 0.0, 1.0);
            // Anisotropic stretch so the component order is unambiguous.
            v[0] *= 3.0;
            v[1] *= 1.5;
            steps.push(v);
        }
        trajs.push(steps);
    }
    let got = pca_trajectories(&trajs).unwrap();

    // Oracle: covariance by hand, Jacobi eigendecomposition, projection.
    let pool: Vec<&Vec<f64>> = trajs.iter().flatten().collect();
    let m = pool.len() as f64;
    let mean: Vec<f64> = (0..3)
        .map(|k| pool.iter().map(|v| v[k]).sum::<f64>() / m)
        .collect();
    let mut cov = vec![0.0; 9];
    for v in &pool {
        for i in 0..3 {
            for j in 0..3 {
                cov[i * 3 + j] += (v[i] - mean[i]) * (v[j] - mean[j]) / m;
            }
        }
    }
    let (values, vectors) = jacobi_eig(cov, 3);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    for (rank, &col) in order[..2].iter().enumerate() {
        let oracle_axis: Vec<f64> = (0..3).map(|r| vectors[r * 3 + col]).collect();
        // Up to sign, the component must match the oracle eigenvector.
        let dot: f64 = got.components[rank]
            .iter()
            .zip(&oracle_axis)
            .map(|(a, b)| a * b)
            .sum();
        for (g, o) in got.components[rank].iter().zip(&oracle_axis) {
            assert!(
                (g - dot.signum() * o).abs() < 1e-10,
                "component {rank} deviates from the Jacobi oracle"
            );
        }
        assert!((got.explained[rank] - values[col]).abs() < 1e-10);
    }
    // Projections are inner products with the shared centered basis.
    for (ti, traj) in trajs.iter().enumerate() {
        for (si, v) in traj.iter().enumerate() {
            let c: Vec<f64> = v.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let want0: f64 = c.iter().zip(&got.components[0]).map(|(a, b)| a * b).sum();
            let want1: f64 = c.iter().zip(&got.components[1]).map(|(a, b)| a * b).sum();
            let (g0, g1) = got.paths[ti][si];
            assert!((g0 - want0).abs() < 1e-12 && (g1 - want1).abs() < 1e-12);
        }
    }
}
