//! Stochastic-interpolant forward process `z_t = α_t z₀ + σ_t ε`, its
//! velocity target, conversion from velocity to score, a closed-form
//! Gaussian reference field and the Euler–Maruyama reverse-time sampler.
//!
//! # Velocity to score
//!
//! At fixed `t` the two linear relations
//!
//! ```text
//! z = α z₀ + σ ε
//! v = α̇ z₀ + σ̇ ε
//! ```
//!
//! (holding for conditional expectations given `z_t = z`) eliminate `z₀`:
//! `α̇ z − α v = (α̇ σ − α σ̇) E[ε | z]`. The marginal score of `z_t` is
//! `∇ log p_t(z) = −E[ε | z] / σ`, hence
//!
//! ```text
//! s(z, t) = −(α̇ z − α v) / (σ (α̇ σ − α σ̇))
//! ```
//!
//! which for the linear path (`α̇ = −1`, `σ̇ = 1`, `α̇σ − ασ̇ = −1`) is
//! `s = −(z + (1 − t) v) / t`.
//!
//! # Reverse-time SDE
//!
//! With diffusion coefficient `w_t`, the process
//! `dz = [v(z,t) − ½ w_t s(z,t)] dt + √w_t dW̄` run from `t = 1` down to
//! `t = 0` has the same marginals as the interpolant. An Euler–Maruyama step
//! of size `h` from `t` to `t − h` is
//! `z ← z − h (v − ½ w_t s) + √(w_t h) ξ`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// `α_t = 1 − t`, `σ_t = t`.
    #[default]
    Linear,
    /// `α_t = cos(πt/2)`, `σ_t = sin(πt/2)`.
    Trigonometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InterpolantPath {
    pub kind: PathKind,
}

impl InterpolantPath {
    pub fn linear() -> Self {
        Self { kind: PathKind::Linear }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Linear => 1.0 - t,
            PathKind::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Linear => t,
            PathKind::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn dalpha(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Linear => -1.0,
            PathKind::Trigonometric => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn dsigma(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::Linear => 1.0,
            PathKind::Trigonometric => std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            op: "interpolant",
            detail: format!("t = {t} outside [0, 1]"),
        })
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

/// `α_t z₀ + σ_t ε`.
pub fn forward_sample(z0: &[f64], eps: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<f64>> {
    check_len("forward_sample", z0, eps)?;
    check_time(t)?;
    let (a, s) = (path.alpha(t), path.sigma(t));
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
}

/// `α̇_t z₀ + σ̇_t ε`.
pub fn velocity_target(z0: &[f64], eps: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<f64>> {
    check_len("velocity_target", z0, eps)?;
    check_time(t)?;
    let (da, ds) = (path.dalpha(t), path.dsigma(t));
    Ok(z0.iter().zip(eps).map(|(z, e)| da * z + ds * e).collect())
}

/// Score of the `z_t` marginal implied by a velocity prediction.
pub fn score_from_velocity(z: &[f64], v: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<f64>> {
    check_len("score_from_velocity", z, v)?;
    if !(t > 0.0) || t > 1.0 {
        return Err(Error::Domain {
            op: "score_from_velocity",
            detail: format!("score is singular at t = {t}; need 0 < t <= 1"),
        });
    }
    let (a, s, da, ds) = (path.alpha(t), path.sigma(t), path.dalpha(t), path.dsigma(t));
    let denom = s * (da * s - a * ds);
    Ok(z.iter().zip(v).map(|(zi, vi)| -(da * zi - a * vi) / denom).collect())
}

/// Data distribution `z₀ ~ N(μ, Σ)` whose interpolant velocity and score are
/// known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape {
                op: "gaussian_oracle",
                left: vec![d, d],
                right: vec![cov.len()],
            });
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        if (&m - m.transpose()).amax() > 1e-12 || Cholesky::new(m).is_none() {
            return Err(Error::Degenerate("oracle covariance is not symmetric positive definite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        Self {
            mean: vec![0.0; d],
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    /// Cholesky factor of `Cov[z_t] = α² Σ + σ² I`.
    fn marginal(&self, t: f64, path: &InterpolantPath) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let (a, s) = (path.alpha(t), path.sigma(t));
        let d = self.dim();
        let c = self.sigma_matrix() * (a * a) + DMatrix::identity(d, d) * (s * s);
        Cholesky::new(c).ok_or_else(|| Error::Degenerate(format!("marginal covariance singular at t = {t}")))
    }

    /// Row-major `n × d` batch of `C⁻¹ (z − α μ)`.
    fn whitened(&self, z: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<DVector<f64>>> {
        let d = self.dim();
        if z.len() % d != 0 {
            return Err(Error::Shape {
                op: "gaussian_oracle",
                left: vec![z.len()],
                right: vec![d],
            });
        }
        check_time(t)?;
        let chol = self.marginal(t, path)?;
        let a = path.alpha(t);
        Ok(z
            .chunks(d)
            .map(|row| {
                let r = DVector::from_iterator(d, row.iter().zip(&self.mean).map(|(zi, mi)| zi - a * mi));
                chol.solve(&r)
            })
            .collect())
    }

    /// Exact `E[ż_t | z_t = z]`. With `C = α²Σ + σ²I` and
    /// `y = C⁻¹(z − αμ)`, joint-Gaussian conditioning gives
    /// `E[z₀|z] = μ + αΣy` and `E[ε|z] = σy`, so
    /// `v = α̇(μ + αΣy) + σ̇σy`.
    pub fn velocity(&self, z: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<f64>> {
        let ys = self.whitened(z, t, path)?;
        let (a, s, da, ds) = (path.alpha(t), path.sigma(t), path.dalpha(t), path.dsigma(t));
        let sig = self.sigma_matrix();
        let mu = DVector::from_column_slice(&self.mean);
        let mut out = Vec::with_capacity(z.len());
        for y in ys {
            let e_z0 = &mu + &sig * &y * a;
            let v = e_z0 * da + y * (s * ds);
            out.extend(v.iter());
        }
        Ok(out)
    }

    /// `∇ log p_t(z) = −C⁻¹ (z − α μ)`.
    pub fn score(&self, z: &[f64], t: f64, path: &InterpolantPath) -> Result<Vec<f64>> {
        let ys = self.whitened(z, t, path)?;
        Ok(ys.into_iter().flat_map(|y| y.iter().map(|x| -x).collect::<Vec<_>>()).collect())
    }

    /// Exact moments of the distribution at `t = 0`.
    pub fn sample_clean(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let chol = Cholesky::new(self.sigma_matrix()).expect("validated SPD");
        let l = chol.l();
        let mut r = rng::stream(seed, streams::DATA);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let e = DVector::from_vec(rng::normals(&mut r, d));
            let x = &l * e;
            out.extend(x.iter().zip(&self.mean).map(|(xi, mi)| xi + mi));
        }
        out
    }
}

/// Free-function form of [`GaussianOracle::velocity`].
pub fn gaussian_oracle_velocity(z: &[f64], t: f64, oracle: &GaussianOracle, path: &InterpolantPath) -> Result<Vec<f64>> {
    oracle.velocity(z, t, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionRule {
    /// `w_t = σ_t`.
    #[default]
    Sigma,
    /// `w_t ≡ 0`: the probability-flow ODE.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_min: f64,
    pub diffusion: DiffusionRule,
    pub seed: u64,
    /// Negative-control hook: reverses the sign of the score term in the
    /// drift. Never set outside of tests and `verify`.
    #[serde(skip)]
    pub flip_score_sign: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 250,
            t_min: 0.04,
            diffusion: DiffusionRule::Sigma,
            seed: 0,
            flip_score_sign: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::config("sampler.n_steps", "must be >= 2"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config("sampler.t_min", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Uniform grid from `1` down to `t_min` with `n_steps` points.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        (0..n)
            .map(|i| 1.0 + (self.t_min - 1.0) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Integrates the reverse-time SDE from `z₁ ~ N(0, I)` at `t = 1` down to
/// `t_min` on a uniform grid, then takes one deterministic Euler step with
/// the velocity alone from `t_min` to `0`. Chain `i` draws all of its noise
/// from its own stream, so results do not depend on batching. Returns
/// row-major `n × dim` samples.
pub fn em_sample<F>(
    mut velocity_fn: F,
    cfg: &SamplerConfig,
    path: &InterpolantPath,
    n: usize,
    dim: usize,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut chains: Vec<rng::Rng> = (0..n)
        .map(|i| rng::stream(cfg.seed, streams::SAMPLER + i as u64))
        .collect();
    let mut z: Vec<f64> = chains.iter_mut().flat_map(|r| rng::normals(r, dim)).collect();
    let grid = cfg.grid();
    let score_sign = if cfg.flip_score_sign { -1.0 } else { 1.0 };

    for (step, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let h = t - t_next;
        let v = velocity_fn(&z, t)?;
        if v.len() != z.len() {
            return Err(Error::Shape {
                op: "em_sample",
                left: vec![z.len()],
                right: vec![v.len()],
            });
        }
        let wt = match cfg.diffusion {
            DiffusionRule::Sigma => path.sigma(t),
            DiffusionRule::Zero => 0.0,
        };
        let s = score_from_velocity(&z, &v, t.max(cfg.t_min), path)?;
        let noise_scale = (wt * h).sqrt();
        for (c, chain) in chains.iter_mut().enumerate() {
            for j in 0..dim {
                let k = c * dim + j;
                let drift = v[k] - 0.5 * wt * score_sign * s[k];
                z[k] += -h * drift + noise_scale * rng::normal(chain);
            }
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::SamplerDivergence { step });
        }
    }

    let v = velocity_fn(&z, cfg.t_min)?;
    for (zi, vi) in z.iter_mut().zip(&v) {
        *zi -= cfg.t_min * vi;
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::SamplerDivergence { step: grid.len() - 1 });
    }
    Ok(z)
}

/// Sample mean and (unbiased) covariance of row-major `n × d` data.
pub fn moments(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for row in x.chunks(d) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    (mean, cov)
}
