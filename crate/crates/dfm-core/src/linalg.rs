//! Dense linear algebra on small matrices.
//!
//! Everything here is sized for channel-space operators (order <= 64):
//! modified Gram-Schmidt QR, a real eigensolver, and the matrix exponential
//! with an eigen path plus a scaling-and-squaring series fallback.
//!
//! Complex arithmetic stays inside this module; every exported matrix is
//! real, with the imaginary residual of the eigen path checked against a
//! bound before it is dropped.

use num_complex::Complex64;
use thiserror::Error;

pub const MAX_ORDER: usize = 64;

/// Entry magnitude below which exp overflows f64 range: e^709 is the edge.
const EXP_OVERFLOW_BOUND: f64 = 700.0;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix order {0} exceeds supported maximum {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("matrix order must be positive")]
    EmptyMatrix,
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("rank deficient: column {column} pivot {pivot:.3e} below threshold {threshold:.3e}")]
    RankDeficient {
        column: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("eigensolver did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("matrix exponential overflow: scale*norm = {0:.3e}")]
    ExpOverflow(f64),
    #[error("matrix exponential requires scale >= 0, got {0}")]
    NegativeScale(f64),
}

/// Row-major square matrix of order n <= 64.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SmallMatrix {
    pub fn zeros(n: usize) -> Result<Self, LinalgError> {
        if n == 0 {
            return Err(LinalgError::EmptyMatrix);
        }
        if n > MAX_ORDER {
            return Err(LinalgError::OrderTooLarge(n));
        }
        Ok(SmallMatrix { n, a: vec![0.0; n * n] })
    }

    pub fn identity(n: usize) -> Result<Self, LinalgError> {
        let mut m = Self::zeros(n)?;
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn diag(entries: &[f64]) -> Result<Self, LinalgError> {
        let mut m = Self::zeros(entries.len())?;
        for (i, &x) in entries.iter().enumerate() {
            m.a[i * entries.len() + i] = x;
        }
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_vec(n: usize, a: Vec<f64>) -> Result<Self, LinalgError> {
        if n == 0 || a.len() != n * n {
            return Err(LinalgError::EmptyMatrix);
        }
        if n > MAX_ORDER {
            return Err(LinalgError::OrderTooLarge(n));
        }
        let m = SmallMatrix { n, a };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, LinalgError> {
        let mut m = Self::zeros(n)?;
        for i in 0..n {
            for j in 0..n {
                m.a[i * n + j] = f(i, j);
            }
        }
        m.check_finite()?;
        Ok(m)
    }

    fn check_finite(&self) -> Result<(), LinalgError> {
        if self.a.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(LinalgError::NonFinite)
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn transpose(&self) -> SmallMatrix {
        let n = self.n;
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = self.a[i * n + j];
            }
        }
        SmallMatrix { n, a: t }
    }

    pub fn mul(&self, rhs: &SmallMatrix) -> SmallMatrix {
        assert_eq!(self.n, rhs.n, "order mismatch");
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aik * rhs.a[k * n + j];
                }
            }
        }
        SmallMatrix { n, a: out }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.n, v.len(), "order mismatch");
        self.a
            .chunks_exact(self.n.max(1))
            .map(|row| row.iter().zip(v).map(|(a, x)| a * x).sum())
            .collect()
    }

    pub fn add(&self, rhs: &SmallMatrix) -> SmallMatrix {
        assert_eq!(self.n, rhs.n, "order mismatch");
        let a = self.a.iter().zip(&rhs.a).map(|(x, y)| x + y).collect();
        SmallMatrix { n: self.n, a }
    }

    pub fn sub(&self, rhs: &SmallMatrix) -> SmallMatrix {
        assert_eq!(self.n, rhs.n, "order mismatch");
        let a = self.a.iter().zip(&rhs.a).map(|(x, y)| x - y).collect();
        SmallMatrix { n: self.n, a }
    }

    pub fn scale(&self, s: f64) -> SmallMatrix {
        SmallMatrix {
            n: self.n,
            a: self.a.iter().map(|x| x * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.a.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| self.a[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn fro_norm(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Max-abs deviation of MᵀM from the identity.
    pub fn orthogonality_residual(&self) -> f64 {
        let gram = self.transpose().mul(self);
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.a[i * n + j] - target).abs());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for SmallMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SmallMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }
}

/// Eigendecomposition result. `vectors` is row-major n x n; column j is the
/// eigenvector for `values[j]`. Values are sorted by descending real part
/// with complex-conjugate pairs adjacent, positive imaginary part first.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: Vec<Complex64>,
    pub vectors: Vec<Complex64>,
    n: usize,
}

impl EigenPair {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn vector(&self, j: usize) -> Vec<Complex64> {
        (0..self.n).map(|i| self.vectors[i * self.n + j]).collect()
    }

    /// max over pairs of the max-abs entry of A*v - lambda*v.
    pub fn residual(&self, a: &SmallMatrix) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let mut av = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    av += a[(i, k)] * self.vectors[k * n + j];
                }
                worst = worst.max((av - self.values[j] * self.vectors[i * n + j]).norm());
            }
        }
        worst
    }
}

/// QR factorization by modified Gram-Schmidt with the positive-diagonal-R
/// convention, which makes Q unique for a full-rank input.
pub fn gram_schmidt_qr(u: &SmallMatrix) -> Result<(SmallMatrix, SmallMatrix), LinalgError> {
    u.check_finite()?;
    let n = u.n;
    let threshold = 1e-12 * u.fro_norm();
    let mut q = SmallMatrix::zeros(n)?;
    let mut r = SmallMatrix::zeros(n)?;

    // Working copy of the j-th column, orthogonalized against settled columns
    // one at a time (the "modified" ordering).
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| u[(i, j)]).collect();
        for i in 0..j {
            let mut dot = 0.0;
            for k in 0..n {
                dot += q[(k, i)] * v[k];
            }
            r[(i, j)] = dot;
            for k in 0..n {
                v[k] -= dot * q[(k, i)];
            }
        }
        let pivot = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if pivot < threshold || pivot == 0.0 {
            return Err(LinalgError::RankDeficient {
                column: j,
                pivot,
                threshold,
            });
        }
        r[(j, j)] = pivot;
        for k in 0..n {
            q[(k, j)] = v[k] / pivot;
        }
    }
    Ok((q, r))
}

// ---------------------------------------------------------------------------
// Eigensolver. Ported from the public-domain JAMA EigenvalueDecomposition
// (tred2 / tql2 / orthes / hqr2), which itself derives from the EISPACK Algol
// procedures by Bowdler, Martin, Reinsch, and Wilkinson. Iteration caps added
// so non-convergence is an error instead of a hang.
// ---------------------------------------------------------------------------

const TQL2_MAX_ITER: usize = 60;
const HQR2_MAX_ITER: usize = 120;

struct EigWork {
    n: usize,
    d: Vec<f64>,
    e: Vec<f64>,
    v: Vec<f64>,
    h: Vec<f64>,
    ort: Vec<f64>,
}

impl EigWork {
    #[inline]
    fn v(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n + j]
    }
    #[inline]
    fn vm(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.v[i * self.n + j]
    }
    #[inline]
    fn h(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.n + j]
    }
    #[inline]
    fn hm(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.h[i * self.n + j]
    }

    // Householder reduction of a symmetric matrix (in v) to tridiagonal form.
    fn tred2(&mut self) {
        let n = self.n;
        for j in 0..n {
            self.d[j] = self.v(n - 1, j);
        }

        for i in (1..n).rev() {
            let mut scale = 0.0;
            let mut h = 0.0;
            for k in 0..i {
                scale += self.d[k].abs();
            }
            if scale == 0.0 {
                self.e[i] = self.d[i - 1];
                for j in 0..i {
                    self.d[j] = self.v(i - 1, j);
                    *self.vm(i, j) = 0.0;
                    *self.vm(j, i) = 0.0;
                }
            } else {
                for k in 0..i {
                    self.d[k] /= scale;
                    h += self.d[k] * self.d[k];
                }
                let mut f = self.d[i - 1];
                let mut g = h.sqrt();
                if f > 0.0 {
                    g = -g;
                }
                self.e[i] = scale * g;
                h -= f * g;
                self.d[i - 1] = f - g;
                for j in 0..i {
                    self.e[j] = 0.0;
                }

                for j in 0..i {
                    f = self.d[j];
                    *self.vm(j, i) = f;
                    g = self.e[j] + self.v(j, j) * f;
                    for k in (j + 1)..i {
                        g += self.v(k, j) * self.d[k];
                        self.e[k] += self.v(k, j) * f;
                    }
                    self.e[j] = g;
                }
                f = 0.0;
                for j in 0..i {
                    self.e[j] /= h;
                    f += self.e[j] * self.d[j];
                }
                let hh = f / (h + h);
                for j in 0..i {
                    self.e[j] -= hh * self.d[j];
                }
                for j in 0..i {
                    f = self.d[j];
                    g = self.e[j];
                    for k in j..i {
                        *self.vm(k, j) -= f * self.e[k] + g * self.d[k];
                    }
                    self.d[j] = self.v(i - 1, j);
                    *self.vm(i, j) = 0.0;
                }
            }
            self.d[i] = h;
        }

        // Accumulate transformations.
        for i in 0..(n - 1) {
            *self.vm(n - 1, i) = self.v(i, i);
            *self.vm(i, i) = 1.0;
            let h = self.d[i + 1];
            if h != 0.0 {
                for k in 0..=i {
                    self.d[k] = self.v(k, i + 1) / h;
                }
                for j in 0..=i {
                    let mut g = 0.0;
                    for k in 0..=i {
                        g += self.v(k, i + 1) * self.v(k, j);
                    }
                    for k in 0..=i {
                        *self.vm(k, j) -= g * self.d[k];
                    }
                }
            }
            for k in 0..=i {
                *self.vm(k, i + 1) = 0.0;
            }
        }
        for j in 0..n {
            self.d[j] = self.v(n - 1, j);
            *self.vm(n - 1, j) = 0.0;
        }
        *self.vm(n - 1, n - 1) = 1.0;
        self.e[0] = 0.0;
    }

    // Symmetric tridiagonal QL with implicit shifts.
    fn tql2(&mut self) -> Result<(), LinalgError> {
        let n = self.n;
        for i in 1..n {
            self.e[i - 1] = self.e[i];
        }
        self.e[n - 1] = 0.0;

        let mut f = 0.0f64;
        let mut tst1 = 0.0f64;
        let eps = 2.0f64.powi(-52);
        for l in 0..n {
            tst1 = tst1.max(self.d[l].abs() + self.e[l].abs());
            let mut m = l;
            while m < n {
                if self.e[m].abs() <= eps * tst1 {
                    break;
                }
                m += 1;
            }

            if m > l {
                let mut iter = 0;
                loop {
                    iter += 1;
                    if iter > TQL2_MAX_ITER {
                        return Err(LinalgError::NoConvergence(TQL2_MAX_ITER));
                    }

                    let mut g = self.d[l];
                    let mut p = (self.d[l + 1] - g) / (2.0 * self.e[l]);
                    let mut r = p.hypot(1.0);
                    if p < 0.0 {
                        r = -r;
                    }
                    self.d[l] = self.e[l] / (p + r);
                    self.d[l + 1] = self.e[l] * (p + r);
                    let dl1 = self.d[l + 1];
                    let mut h = g - self.d[l];
                    for i in (l + 2)..n {
                        self.d[i] -= h;
                    }
                    f += h;

                    p = self.d[m];
                    let mut c = 1.0;
                    let mut c2 = c;
                    let mut c3 = c;
                    let el1 = self.e[l + 1];
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for i in (l..m).rev() {
                        c3 = c2;
                        c2 = c;
                        s2 = s;
                        g = c * self.e[i];
                        h = c * p;
                        r = p.hypot(self.e[i]);
                        self.e[i + 1] = s * r;
                        s = self.e[i] / r;
                        c = p / r;
                        p = c * self.d[i] - s * g;
                        self.d[i + 1] = h + s * (c * g + s * self.d[i]);

                        for k in 0..n {
                            h = self.v(k, i + 1);
                            *self.vm(k, i + 1) = s * self.v(k, i) + c * h;
                            *self.vm(k, i) = c * self.v(k, i) - s * h;
                        }
                    }
                    p = -s * s2 * c3 * el1 * self.e[l] / dl1;
                    self.e[l] = s * p;
                    self.d[l] = c * p;

                    if self.e[l].abs() <= eps * tst1 {
                        break;
                    }
                }
            }
            self.d[l] += f;
            self.e[l] = 0.0;
        }
        Ok(())
    }

    // Householder reduction of a general matrix (in h) to Hessenberg form,
    // accumulating the transformation in v.
    // Loop bounds kept in the reference implementation's `m + 1 <= high`
    // form; the off-by-one rewrites are exactly where ports of this
    // routine historically went wrong.
    #[allow(clippy::int_plus_one)]
    fn orthes(&mut self) {
        let n = self.n;
        let low = 0usize;
        let high = n - 1;

        let mut m = low + 1;
        while m + 1 <= high {
            let mut scale = 0.0;
            for i in m..=high {
                scale += self.h(i, m - 1).abs();
            }
            if scale != 0.0 {
                let mut h = 0.0;
                for i in (m..=high).rev() {
                    self.ort[i] = self.h(i, m - 1) / scale;
                    h += self.ort[i] * self.ort[i];
                }
                let mut g = h.sqrt();
                if self.ort[m] > 0.0 {
                    g = -g;
                }
                h -= self.ort[m] * g;
                self.ort[m] -= g;

                for j in m..n {
                    let mut f = 0.0;
                    for i in (m..=high).rev() {
                        f += self.ort[i] * self.h(i, j);
                    }
                    f /= h;
                    for i in m..=high {
                        *self.hm(i, j) -= f * self.ort[i];
                    }
                }

                for i in 0..=high {
                    let mut f = 0.0;
                    for j in (m..=high).rev() {
                        f += self.ort[j] * self.h(i, j);
                    }
                    f /= h;
                    for j in m..=high {
                        *self.hm(i, j) -= f * self.ort[j];
                    }
                }
                self.ort[m] *= scale;
                *self.hm(m, m - 1) = scale * g;
            }
            m += 1;
        }

        for i in 0..n {
            for j in 0..n {
                *self.vm(i, j) = if i == j { 1.0 } else { 0.0 };
            }
        }

        let mut m = high.saturating_sub(1);
        while m >= low + 1 {
            if self.h(m, m - 1) != 0.0 {
                for i in (m + 1)..=high {
                    self.ort[i] = self.h(i, m - 1);
                }
                for j in m..=high {
                    let mut g = 0.0;
                    for i in m..=high {
                        g += self.ort[i] * self.v(i, j);
                    }
                    // Double division avoids possible underflow.
                    g = (g / self.ort[m]) / self.h(m, m - 1);
                    for i in m..=high {
                        *self.vm(i, j) += g * self.ort[i];
                    }
                }
            }
            m -= 1;
        }
    }

    // Hessenberg (in h) to real Schur form with Francis double shifts,
    // then backsubstitution for eigenvectors, accumulated into v.
    #[allow(clippy::too_many_lines, unused_assignments)]
    fn hqr2(&mut self) -> Result<(), LinalgError> {
        let nn = self.n;
        let low = 0isize;
        let high = nn as isize - 1;
        let eps = 2.0f64.powi(-52);
        let mut exshift = 0.0f64;
        let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut t;
        let mut w;
        let mut x;
        let mut y;

        let mut norm = 0.0f64;
        for i in 0..nn {
            for j in i.saturating_sub(1)..nn {
                norm += self.h(i, j).abs();
            }
        }

        let mut en = high;
        let mut iter = 0usize;
        while en >= low {
            let n = en as usize;

            // Look for a single small sub-diagonal element.
            let mut l = n;
            while l > 0 {
                s = self.h(l - 1, l - 1).abs() + self.h(l, l).abs();
                if s == 0.0 {
                    s = norm;
                }
                if self.h(l, l - 1).abs() < eps * s {
                    break;
                }
                l -= 1;
            }

            if l == n {
                // One real root found.
                *self.hm(n, n) += exshift;
                self.d[n] = self.h(n, n);
                self.e[n] = 0.0;
                en -= 1;
                iter = 0;
            } else if l + 1 == n {
                // A pair of roots found.
                w = self.h(n, n - 1) * self.h(n - 1, n);
                p = (self.h(n - 1, n - 1) - self.h(n, n)) / 2.0;
                q = p * p + w;
                z = q.abs().sqrt();
                *self.hm(n, n) += exshift;
                *self.hm(n - 1, n - 1) += exshift;
                x = self.h(n, n);

                if q >= 0.0 {
                    // Real pair.
                    z = if p >= 0.0 { p + z } else { p - z };
                    self.d[n - 1] = x + z;
                    self.d[n] = self.d[n - 1];
                    if z != 0.0 {
                        self.d[n] = x - w / z;
                    }
                    self.e[n - 1] = 0.0;
                    self.e[n] = 0.0;
                    x = self.h(n, n - 1);
                    s = x.abs() + z.abs();
                    p = x / s;
                    q = z / s;
                    r = (p * p + q * q).sqrt();
                    p /= r;
                    q /= r;

                    for j in (n - 1)..nn {
                        z = self.h(n - 1, j);
                        *self.hm(n - 1, j) = q * z + p * self.h(n, j);
                        *self.hm(n, j) = q * self.h(n, j) - p * z;
                    }
                    for i in 0..=n {
                        z = self.h(i, n - 1);
                        *self.hm(i, n - 1) = q * z + p * self.h(i, n);
                        *self.hm(i, n) = q * self.h(i, n) - p * z;
                    }
                    for i in 0..nn {
                        z = self.v(i, n - 1);
                        *self.vm(i, n - 1) = q * z + p * self.v(i, n);
                        *self.vm(i, n) = q * self.v(i, n) - p * z;
                    }
                } else {
                    // Complex pair.
                    self.d[n - 1] = x + p;
                    self.d[n] = x + p;
                    self.e[n - 1] = z;
                    self.e[n] = -z;
                }
                en -= 2;
                iter = 0;
            } else {
                // No convergence yet: form a shift and run a double QR sweep.
                x = self.h(n, n);
                y = 0.0;
                w = 0.0;
                if (l as isize) < en {
                    y = self.h(n - 1, n - 1);
                    w = self.h(n, n - 1) * self.h(n - 1, n);
                }

                if iter == 10 {
                    // Wilkinson's original ad hoc shift.
                    exshift += x;
                    for i in (low as usize)..=n {
                        *self.hm(i, i) -= x;
                    }
                    s = self.h(n, n - 1).abs() + self.h(n - 1, n - 2).abs();
                    x = 0.75 * s;
                    y = x;
                    w = -0.4375 * s * s;
                }

                if iter == 30 {
                    // MATLAB's ad hoc shift.
                    s = (y - x) / 2.0;
                    s = s * s + w;
                    if s > 0.0 {
                        s = s.sqrt();
                        if y < x {
                            s = -s;
                        }
                        s = x - w / ((y - x) / 2.0 + s);
                        for i in (low as usize)..=n {
                            *self.hm(i, i) -= s;
                        }
                        exshift += s;
                        x = 0.964;
                        y = x;
                        w = x;
                    }
                }

                iter += 1;
                if iter > HQR2_MAX_ITER {
                    return Err(LinalgError::NoConvergence(HQR2_MAX_ITER));
                }

                // Look for two consecutive small sub-diagonal elements.
                let mut m = n - 2;
                loop {
                    z = self.h(m, m);
                    r = x - z;
                    s = y - z;
                    p = (r * s - w) / self.h(m + 1, m) + self.h(m, m + 1);
                    q = self.h(m + 1, m + 1) - z - r - s;
                    r = self.h(m + 2, m + 1);
                    s = p.abs() + q.abs() + r.abs();
                    p /= s;
                    q /= s;
                    r /= s;
                    if m == l {
                        break;
                    }
                    if self.h(m, m - 1).abs() * (q.abs() + r.abs())
                        < eps
                            * (p.abs()
                                * (self.h(m - 1, m - 1).abs()
                                    + z.abs()
                                    + self.h(m + 1, m + 1).abs()))
                    {
                        break;
                    }
                    m -= 1;
                }

                for i in (m + 2)..=n {
                    *self.hm(i, i - 2) = 0.0;
                    if i > m + 2 {
                        *self.hm(i, i - 3) = 0.0;
                    }
                }

                // Double QR step on rows l..=n and columns m..=n.
                for k in m..n {
                    let notlast = k != n - 1;
                    if k != m {
                        p = self.h(k, k - 1);
                        q = self.h(k + 1, k - 1);
                        r = if notlast { self.h(k + 2, k - 1) } else { 0.0 };
                        x = p.abs() + q.abs() + r.abs();
                        if x != 0.0 {
                            p /= x;
                            q /= x;
                            r /= x;
                        }
                    }
                    if x == 0.0 {
                        break;
                    }

                    s = (p * p + q * q + r * r).sqrt();
                    if p < 0.0 {
                        s = -s;
                    }
                    if s != 0.0 {
                        if k != m {
                            *self.hm(k, k - 1) = -s * x;
                        } else if l != m {
                            *self.hm(k, k - 1) = -self.h(k, k - 1);
                        }
                        p += s;
                        x = p / s;
                        y = q / s;
                        z = r / s;
                        q /= p;
                        r /= p;

                        for j in k..nn {
                            p = self.h(k, j) + q * self.h(k + 1, j);
                            if notlast {
                                p += r * self.h(k + 2, j);
                                *self.hm(k + 2, j) -= p * z;
                            }
                            *self.hm(k, j) -= p * x;
                            *self.hm(k + 1, j) -= p * y;
                        }

                        for i in 0..=n.min(k + 3) {
                            p = x * self.h(i, k) + y * self.h(i, k + 1);
                            if notlast {
                                p += z * self.h(i, k + 2);
                                *self.hm(i, k + 2) -= p * r;
                            }
                            *self.hm(i, k) -= p;
                            *self.hm(i, k + 1) -= p * q;
                        }

                        for i in 0..nn {
                            p = x * self.v(i, k) + y * self.v(i, k + 1);
                            if notlast {
                                p += z * self.v(i, k + 2);
                                *self.vm(i, k + 2) -= p * r;
                            }
                            *self.vm(i, k) -= p;
                            *self.vm(i, k + 1) -= p * q;
                        }
                    }
                }
            }
        }

        // Backsubstitute to find vectors of the upper triangular form.
        if norm == 0.0 {
            return Ok(());
        }

        for n in (0..nn).rev() {
            p = self.d[n];
            q = self.e[n];

            if q == 0.0 {
                // Real vector.
                let mut l = n;
                *self.hm(n, n) = 1.0;
                for i in (0..n).rev() {
                    w = self.h(i, i) - p;
                    r = 0.0;
                    for j in l..=n {
                        r += self.h(i, j) * self.h(j, n);
                    }
                    if self.e[i] < 0.0 {
                        z = w;
                        s = r;
                    } else {
                        l = i;
                        if self.e[i] == 0.0 {
                            *self.hm(i, n) = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                        } else {
                            // Solve the 2x2 real block.
                            x = self.h(i, i + 1);
                            y = self.h(i + 1, i);
                            q = (self.d[i] - p) * (self.d[i] - p) + self.e[i] * self.e[i];
                            t = (x * s - z * r) / q;
                            *self.hm(i, n) = t;
                            *self.hm(i + 1, n) = if x.abs() > z.abs() {
                                (-r - w * t) / x
                            } else {
                                (-s - y * t) / z
                            };
                        }

                        // Overflow control.
                        t = self.h(i, n).abs();
                        if (eps * t) * t > 1.0 {
                            for j in i..=n {
                                *self.hm(j, n) /= t;
                            }
                        }
                    }
                }
            } else if q < 0.0 {
                // Complex vector, stored across columns n-1 and n.
                let mut l = n - 1;

                if self.h(n, n - 1).abs() > self.h(n - 1, n).abs() {
                    *self.hm(n - 1, n - 1) = q / self.h(n, n - 1);
                    *self.hm(n - 1, n) = -(self.h(n, n) - p) / self.h(n, n - 1);
                } else {
                    let (cr, ci) = cdiv(0.0, -self.h(n - 1, n), self.h(n - 1, n - 1) - p, q);
                    *self.hm(n - 1, n - 1) = cr;
                    *self.hm(n - 1, n) = ci;
                }
                *self.hm(n, n - 1) = 0.0;
                *self.hm(n, n) = 1.0;
                for i in (0..n.saturating_sub(1)).rev() {
                    let mut ra = 0.0;
                    let mut sa = 0.0;
                    for j in l..=n {
                        ra += self.h(i, j) * self.h(j, n - 1);
                        sa += self.h(i, j) * self.h(j, n);
                    }
                    w = self.h(i, i) - p;

                    if self.e[i] < 0.0 {
                        z = w;
                        r = ra;
                        s = sa;
                    } else {
                        l = i;
                        if self.e[i] == 0.0 {
                            let (cr, ci) = cdiv(-ra, -sa, w, q);
                            *self.hm(i, n - 1) = cr;
                            *self.hm(i, n) = ci;
                        } else {
                            // Solve the complex 2x2 block.
                            x = self.h(i, i + 1);
                            y = self.h(i + 1, i);
                            let mut vr =
                                (self.d[i] - p) * (self.d[i] - p) + self.e[i] * self.e[i] - q * q;
                            let vi = (self.d[i] - p) * 2.0 * q;
                            if vr == 0.0 && vi == 0.0 {
                                vr = eps
                                    * norm
                                    * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                            }
                            let (cr, ci) =
                                cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                            *self.hm(i, n - 1) = cr;
                            *self.hm(i, n) = ci;
                            if x.abs() > z.abs() + q.abs() {
                                let h_in1 = self.h(i, n - 1);
                                let h_in = self.h(i, n);
                                *self.hm(i + 1, n - 1) = (-ra - w * h_in1 + q * h_in) / x;
                                *self.hm(i + 1, n) = (-sa - w * h_in - q * h_in1) / x;
                            } else {
                                let (cr, ci) = cdiv(
                                    -r - y * self.h(i, n - 1),
                                    -s - y * self.h(i, n),
                                    z,
                                    q,
                                );
                                *self.hm(i + 1, n - 1) = cr;
                                *self.hm(i + 1, n) = ci;
                            }
                        }

                        // Overflow control.
                        t = self.h(i, n - 1).abs().max(self.h(i, n).abs());
                        if (eps * t) * t > 1.0 {
                            for j in i..=n {
                                *self.hm(j, n - 1) /= t;
                                *self.hm(j, n) /= t;
                            }
                        }
                    }
                }
            }
        }

        // Back transformation to eigenvectors of the original matrix.
        for j in (0..nn).rev() {
            for i in 0..nn {
                z = 0.0;
                for k in 0..=j {
                    z += self.v(i, k) * self.h(k, j);
                }
                *self.vm(i, j) = z;
            }
        }
        Ok(())
    }
}

// Complex scalar division (xr + i*xi) / (yr + i*yi) without overflow.
fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

/// Eigendecomposition of a real square matrix.
pub fn eig_small(a: &SmallMatrix) -> Result<EigenPair, LinalgError> {
    a.check_finite()?;
    let n = a.n;

    let symmetric = (0..n).all(|i| (0..n).all(|j| a[(i, j)] == a[(j, i)]));

    let mut work = EigWork {
        n,
        d: vec![0.0; n],
        e: vec![0.0; n],
        v: a.a.clone(),
        h: a.a.clone(),
        ort: vec![0.0; n],
    };

    if symmetric {
        work.tred2();
        work.tql2()?;
    } else if n > 1 {
        work.orthes();
        work.hqr2()?;
    } else {
        work.d[0] = a[(0, 0)];
        work.v[0] = 1.0;
    }

    // Assemble complex values/vectors from the packed real storage: a pair
    // (d[j] +/- i*e[j]) stores Re(vec) in column j and Im(vec) in column j+1.
    let mut values = vec![Complex64::new(0.0, 0.0); n];
    let mut vectors = vec![Complex64::new(0.0, 0.0); n * n];
    let mut j = 0;
    while j < n {
        if work.e[j] == 0.0 {
            values[j] = Complex64::new(work.d[j], 0.0);
            for i in 0..n {
                vectors[i * n + j] = Complex64::new(work.v(i, j), 0.0);
            }
            j += 1;
        } else {
            values[j] = Complex64::new(work.d[j], work.e[j].abs());
            values[j + 1] = values[j].conj();
            for i in 0..n {
                let v = Complex64::new(work.v(i, j), work.v(i, j + 1));
                vectors[i * n + j] = v;
                vectors[i * n + j + 1] = v.conj();
            }
            j += 2;
        }
    }

    sort_and_normalize(n, &mut values, &mut vectors);
    Ok(EigenPair { values, vectors, n })
}

// Sort eigenpairs by descending real part keeping conjugate pairs adjacent
// (positive imaginary part first), then fix each vector's scale: unit 2-norm
// with the largest-modulus component rotated onto the positive real axis.
fn sort_and_normalize(n: usize, values: &mut [Complex64], vectors: &mut [Complex64]) {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut j = 0;
    while j < n {
        if values[j].im != 0.0 && j + 1 < n && values[j + 1] == values[j].conj() {
            groups.push(vec![j, j + 1]);
            j += 2;
        } else {
            groups.push(vec![j]);
            j += 1;
        }
    }
    groups.sort_by(|a, b| {
        values[b[0]]
            .re
            .partial_cmp(&values[a[0]].re)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let perm: Vec<usize> = groups.into_iter().flatten().collect();

    let old_values = values.to_vec();
    let old_vectors = vectors.to_vec();
    for (dst, &src) in perm.iter().enumerate() {
        values[dst] = old_values[src];
        for i in 0..n {
            vectors[i * n + dst] = old_vectors[i * n + src];
        }
    }

    let mut col = 0;
    while col < n {
        let conjugate_partner = values[col].im > 0.0;
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        let mut norm_sq = 0.0f64;
        for i in 0..n {
            let m = vectors[i * n + col].norm();
            norm_sq += m * m;
            if m > best_mag {
                best_mag = m;
                best = i;
            }
        }
        let norm = norm_sq.sqrt();
        if norm > 0.0 && best_mag > 0.0 {
            let phase = vectors[best * n + col].conj() / best_mag;
            let factor = phase / norm;
            for i in 0..n {
                vectors[i * n + col] *= factor;
                if conjugate_partner {
                    vectors[i * n + col + 1] = vectors[i * n + col].conj();
                }
            }
        }
        col += if conjugate_partner { 2 } else { 1 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpPath {
    /// scale == 0, exact identity.
    Identity,
    Eigen,
    Series,
}

/// Result of a matrix exponential with its evaluation diagnostics.
#[derive(Debug, Clone)]
pub struct ExpReport {
    pub value: SmallMatrix,
    pub path: ExpPath,
    /// Largest dropped imaginary part relative to the largest real entry.
    /// Zero for the identity and series paths, which never leave the reals.
    pub imag_residual: f64,
}

/// e^{scale*A} for a real square matrix, scale >= 0.
pub fn matrix_exp(a: &SmallMatrix, scale: f64) -> Result<SmallMatrix, LinalgError> {
    matrix_exp_detailed(a, scale).map(|r| r.value)
}

/// Like `matrix_exp` but reports which evaluation path produced the result.
pub fn matrix_exp_detailed(a: &SmallMatrix, scale: f64) -> Result<ExpReport, LinalgError> {
    a.check_finite()?;
    if scale < 0.0 || !scale.is_finite() {
        return Err(LinalgError::NegativeScale(scale));
    }
    if scale == 0.0 {
        return Ok(ExpReport {
            value: SmallMatrix::identity(a.n)?,
            path: ExpPath::Identity,
            imag_residual: 0.0,
        });
    }
    let magnitude = scale * a.norm_inf();
    if magnitude > EXP_OVERFLOW_BOUND {
        return Err(LinalgError::ExpOverflow(magnitude));
    }

    if let Some((value, imag_residual)) = exp_eigen_path(a, scale) {
        return Ok(ExpReport {
            value,
            path: ExpPath::Eigen,
            imag_residual,
        });
    }
    Ok(ExpReport {
        value: exp_series(a, scale),
        path: ExpPath::Series,
        imag_residual: 0.0,
    })
}

/// Series-only evaluation (scaling and squaring), skipping the eigen path.
/// For matrices that are known to defeat it — block-triangular augmented
/// systems have repeated eigenvalues, so their eigenvector matrix is
/// defective and the residual gate would reject it anyway.
pub fn matrix_exp_series(a: &SmallMatrix, scale: f64) -> Result<SmallMatrix, LinalgError> {
    a.check_finite()?;
    if scale < 0.0 || !scale.is_finite() {
        return Err(LinalgError::NegativeScale(scale));
    }
    let magnitude = scale * a.norm_inf();
    if magnitude > EXP_OVERFLOW_BOUND {
        return Err(LinalgError::ExpOverflow(magnitude));
    }
    Ok(exp_series(a, scale))
}

// Eigen path: V * diag(e^{scale*lambda}) * V^{-1}, evaluated by a complex
// solve. Returns None when the decomposition is not trustworthy (defective
// matrix, poor residual, ill-conditioned V, or imaginary leakage), in which
// case the caller falls back to the series.
fn exp_eigen_path(a: &SmallMatrix, scale: f64) -> Option<(SmallMatrix, f64)> {
    let n = a.n;
    let pair = eig_small(a).ok()?;
    let norm = a.max_abs().max(1e-300);
    if pair.residual(a) > 1e-8 * norm {
        return None;
    }

    // M = V * diag(e^{scale*lambda}); then solve X * V = M as Vᵀ Xᵀ = Mᵀ.
    let mut vt = vec![Complex64::new(0.0, 0.0); n * n];
    let mut mt = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let v = pair.vectors[i * n + j];
            vt[j * n + i] = v;
            mt[j * n + i] = v * (pair.values[j] * scale).exp();
        }
    }
    complex_solve_in_place(&mut vt, &mut mt, n)?;

    // mt now holds Xᵀ.
    let mut out = SmallMatrix::zeros(n).ok()?;
    let mut max_im = 0.0f64;
    let mut max_re = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let x = mt[j * n + i];
            out[(i, j)] = x.re;
            max_im = max_im.max(x.im.abs());
            max_re = max_re.max(x.re.abs());
        }
    }
    let imag_residual = max_im / max_re.max(f64::MIN_POSITIVE);
    if out.check_finite().is_err() || imag_residual >= 1e-9 {
        return None;
    }
    Some((out, imag_residual))
}

// Gaussian elimination with partial pivoting on A X = B; X replaces B.
// Returns None on a pivot too small to trust.
fn complex_solve_in_place(a: &mut [Complex64], b: &mut [Complex64], n: usize) -> Option<()> {
    let scale = a.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(1e-300);
    for col in 0..n {
        let mut piv = col;
        let mut piv_mag = a[col * n + col].norm();
        for r in (col + 1)..n {
            let m = a[r * n + col].norm();
            if m > piv_mag {
                piv = r;
                piv_mag = m;
            }
        }
        if piv_mag < 1e-13 * scale {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                b.swap(col * n + j, piv * n + j);
            }
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in col..n {
                let v = a[col * n + j];
                a[r * n + j] -= f * v;
            }
            for j in 0..n {
                let v = b[col * n + j];
                b[r * n + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..n {
            let mut s = b[col * n + j];
            for k in (col + 1)..n {
                s -= a[col * n + k] * b[k * n + j];
            }
            b[col * n + j] = s / d;
        }
    }
    Some(())
}

// Scaling-and-squaring truncated Taylor series. The argument is halved until
// its norm is <= 0.5, where 25 terms reach well below f64 resolution, then
// squared back up.
fn exp_series(a: &SmallMatrix, scale: f64) -> SmallMatrix {
    let n = a.n;
    let b = a.scale(scale);
    let norm = b.norm_inf();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let c = b.scale(0.5f64.powi(squarings as i32));

    let mut result = SmallMatrix::identity(n).expect("order already validated");
    let mut term = SmallMatrix::identity(n).expect("order already validated");
    for k in 1..=25u32 {
        term = term.mul(&c).scale(1.0 / k as f64);
        result = result.add(&term);
    }
    for _ in 0..squarings {
        result = result.mul(&result);
    }
    result
}
