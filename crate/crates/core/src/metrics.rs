//! Representation-similarity metrics and a Fréchet distance between fitted
//! Gaussians.
//!
//! Kernels are linear (`K_ij = ⟨φ_i, φ_j⟩`). HSIC centres each row of both
//! kernels by its own mean, `K_ij − E_l K_il`, and divides the cross-sum by
//! `(n−1)²`. CKNNA replaces HSIC by the same sum restricted to mutual
//! k-nearest-neighbour pairs, keeping the `(n−1)²` normalizer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance ridge added before the matrix square root in [`toy_fid`].
pub const FID_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub k: usize,
    pub n: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { k: 10, n: 1024 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k >= self.n {
            return Err(Error::config("metrics.k", format!("need 2 <= k < n, got k={} n={}", self.k, self.n)));
        }
        Ok(())
    }
}

/// Symmetric `n × n` inner-product matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub source: String,
}

impl KernelMatrix {
    /// Gram matrix of row-major `n × d` features.
    pub fn linear(features: &[f64], d: usize, source: impl Into<String>) -> Result<Self> {
        if d == 0 || features.len() % d != 0 {
            return Err(Error::Shape {
                op: "kernel",
                left: vec![features.len()],
                right: vec![d],
            });
        }
        let n = features.len() / d;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = (0..d).map(|c| features[i * d + c] * features[j * d + c]).sum();
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Ok(Self {
            n,
            values,
            source: source.into(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// `K_ij − E_l K_il`.
    fn row_centered(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = self.values.clone();
        for row in out.chunks_mut(n) {
            let m = row.iter().sum::<f64>() / n as f64;
            row.iter_mut().for_each(|x| *x -= m);
        }
        out
    }

    /// Indices of the `k` largest entries in row `i`, excluding `i`; ties go
    /// to the lower index.
    pub fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        idx.sort_by(|&a, &b| self.get(i, b).total_cmp(&self.get(i, a)).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

fn check_pair(op: &'static str, k: &KernelMatrix, l: &KernelMatrix) -> Result<()> {
    if k.n != l.n {
        return Err(Error::Shape {
            op,
            left: vec![k.n, k.n],
            right: vec![l.n, l.n],
        });
    }
    if k.n < 2 {
        return Err(Error::Argument(format!("{op} needs n >= 2")));
    }
    Ok(())
}

fn masked_cross(k: &KernelMatrix, l: &KernelMatrix, mask: Option<&[bool]>) -> f64 {
    let (kc, lc) = (k.row_centered(), l.row_centered());
    let n = k.n;
    let mut s = 0.0;
    for idx in 0..n * n {
        if mask.is_none_or(|m| m[idx]) {
            s += kc[idx] * lc[idx];
        }
    }
    s / ((n - 1) * (n - 1)) as f64
}

pub fn hsic(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    check_pair("hsic", k, l)?;
    Ok(masked_cross(k, l, None))
}

/// Self-similarity below this fraction of the uncentred kernel energy is
/// rounding residue of the centring, not signal.
const DEGENERATE_REL: f64 = 1e-12;

fn energy(k: &KernelMatrix) -> f64 {
    k.values.iter().map(|x| x * x).sum::<f64>() / ((k.n - 1) * (k.n - 1)) as f64
}

fn ratio(op: &str, cross: f64, (kk, k): (f64, &KernelMatrix), (ll, l): (f64, &KernelMatrix)) -> Result<f64> {
    if !(kk > DEGENERATE_REL * energy(k) && ll > DEGENERATE_REL * energy(l)) {
        return Err(Error::Degenerate(format!(
            "{op}: self-similarity is not positive ({kk}, {ll})"
        )));
    }
    Ok(cross / (kk * ll).sqrt())
}

pub fn cka(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    check_pair("cka", k, l)?;
    ratio(
        "cka",
        masked_cross(k, l, None),
        (masked_cross(k, k, None), k),
        (masked_cross(l, l, None), l),
    )
}

/// `α(i,j) = 1[i ≠ j ∧ j ∈ knn_K(i) ∧ j ∈ knn_L(i)]`, row-major.
fn mutual_knn_mask(k: &KernelMatrix, l: &KernelMatrix, nn: usize) -> Vec<bool> {
    let n = k.n;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let mut in_k = vec![false; n];
        for j in k.knn(i, nn) {
            in_k[j] = true;
        }
        for j in l.knn(i, nn) {
            if in_k[j] && j != i {
                mask[i * n + j] = true;
            }
        }
    }
    mask
}

/// Mutual-kNN-restricted alignment of two kernels.
pub fn align(k: &KernelMatrix, l: &KernelMatrix, nn: usize) -> Result<f64> {
    check_pair("align", k, l)?;
    if nn == 0 || nn >= k.n {
        return Err(Error::Argument(format!("need 1 <= k < n, got k={nn} n={}", k.n)));
    }
    Ok(masked_cross(k, l, Some(&mutual_knn_mask(k, l, nn))))
}

/// CKNNA between row-major feature sets `a: n × d_a` and `b: n × d_b`.
pub fn cknna(a: &[f64], d_a: usize, b: &[f64], d_b: usize, nn: usize) -> Result<f64> {
    let k = KernelMatrix::linear(a, d_a, "a")?;
    let l = KernelMatrix::linear(b, d_b, "b")?;
    cknna_kernels(&k, &l, nn)
}

pub fn cknna_kernels(k: &KernelMatrix, l: &KernelMatrix, nn: usize) -> Result<f64> {
    let cross = align(k, l, nn)?;
    ratio("cknna", cross, (align(k, k, nn)?, k), (align(l, l, nn)?, l))
}

/// Sample mean and unbiased covariance of row-major `n × d` data.
pub fn fit_gaussian(x: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len() / d;
    let m = DMatrix::from_row_slice(n, d, x);
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    (mean, cov)
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{½} Σ₂ Σ₁^{½})^{½})`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape {
            op: "frechet_distance",
            left: vec![d, cov1.nrows()],
            right: vec![mu2.len(), cov2.nrows()],
        });
    }
    let s1 = sym_sqrt(&((cov1 + cov1.transpose()) * 0.5));
    let m = &s1 * cov2 * &s1;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "frechet_distance" });
    }
    Ok(value.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two row-major feature sets,
/// each covariance ridged by [`FID_RIDGE`].
pub fn toy_fid(real: &[f64], generated: &[f64], d: usize) -> Result<f64> {
    let (n, m) = (real.len() / d, generated.len() / d);
    if n < 2 || m < 2 || real.len() % d != 0 || generated.len() % d != 0 {
        return Err(Error::Argument(format!("toy_fid needs >= 2 rows of width {d} per set")));
    }
    let (mu1, c1) = fit_gaussian(real, d);
    let (mu2, c2) = fit_gaussian(generated, d);
    let ridge = DMatrix::identity(d, d) * FID_RIDGE;
    frechet_distance(&mu1, &(c1 + &ridge), &mu2, &(c2 + ridge))
}
