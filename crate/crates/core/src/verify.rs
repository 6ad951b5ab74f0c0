//! Brute-force checks of the augmented-space score identities on small
//! discrete worlds, plus training-path consistency checks.
//!
//! A world is a finite set of clean latents `z₀⁽ᵐ⁾` with prior `p_m` and a
//! many-to-one label map `r(m)`. With `p(z_t | z₀) = N(α_t z₀, σ_t² I)`:
//!
//! ```text
//! p(z_t)          = Σ_m p_m N_m(z_t)
//! p(z_t, r)       = Σ_{m: r(m)=r} p_m N_m(z_t)
//! p(m, r | z_t)   = p_m N_m / p(z_t)            (r = r(m))
//! p(m | z_t, r)   = p_m N_m / p(z_t, r)
//! p(r | z_t)      = p(z_t, r) / p(z_t)
//! ∇ log N_m       = (α z₀⁽ᵐ⁾ − z_t) / σ²
//! ```
//!
//! Every score is a difference of `∇ log N_m` and a posterior average of
//! it, so all of them are computed exactly by enumeration.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::interpolant::{self, em_sample, moments, GaussianOracle, InterpolantPath, SamplerConfig};
use crate::nn::{Mlp, ParamSet};
use crate::objectives::{nt_xent, total_loss, AlignWeight, AlignmentConfig, Batch, PhasePlan};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng;
use crate::tensor::Tape;
use crate::trainer::Corpus;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteToyWorld {
    pub dim: usize,
    /// Row-major `M × dim`.
    pub latents: Vec<f64>,
    pub prior: Vec<f64>,
    /// Label of each latent.
    pub labels: Vec<usize>,
    pub path: InterpolantPath,
}

/// Scores at one `(z_t, t)` for one latent `m` (and its label).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTriple {
    pub joint: Vec<f64>,
    pub conditional_generation: Vec<f64>,
    pub representation_inference: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl DiscreteToyWorld {
    pub fn new(dim: usize, latents: Vec<f64>, prior: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let m = prior.len();
        if dim == 0 || latents.len() != m * dim || labels.len() != m || m == 0 {
            return Err(Error::Argument("world arrays have inconsistent sizes".into()));
        }
        if prior.iter().any(|&p| !(p > 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Argument("prior must be positive and sum to 1".into()));
        }
        Ok(Self {
            dim,
            latents,
            prior,
            labels,
            path: InterpolantPath::linear(),
        })
    }

    /// Four latents on a square; the first two share a label.
    pub fn four() -> Self {
        Self::new(
            2,
            vec![2.0, 0.0, 0.0, 2.0, -2.0, 0.0, 0.0, -2.0],
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0, 0, 1, 2],
        )
        .expect("valid world")
    }

    pub fn single() -> Self {
        Self::new(2, vec![1.0, -0.5], vec![1.0], vec![0]).expect("valid world")
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    fn latent(&self, m: usize) -> &[f64] {
        &self.latents[m * self.dim..(m + 1) * self.dim]
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain {
                op: "discrete_world",
                detail: format!("t = {t} outside (0, 1)"),
            });
        }
        Ok(())
    }

    /// `log p_m + log N(z; α z₀⁽ᵐ⁾, σ² I)`.
    fn log_joint_m(&self, z: &[f64], t: f64, m: usize) -> f64 {
        let (a, s) = (self.path.alpha(t), self.path.sigma(t));
        let sq: f64 = z.iter().zip(self.latent(m)).map(|(zi, x)| (zi - a * x).powi(2)).sum();
        self.prior[m].ln() - sq / (2.0 * s * s) - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * s * s).ln()
    }

    pub fn log_marginal(&self, z: &[f64], t: f64) -> f64 {
        log_sum_exp((0..self.len()).map(|m| self.log_joint_m(z, t, m)))
    }

    /// `log p(z_t, r)`.
    pub fn log_marginal_r(&self, z: &[f64], t: f64, r: usize) -> f64 {
        log_sum_exp(
            (0..self.len())
                .filter(|&m| self.labels[m] == r)
                .map(|m| self.log_joint_m(z, t, m)),
        )
    }

    pub fn log_posterior(&self, z: &[f64], t: f64, m: usize) -> f64 {
        self.log_joint_m(z, t, m) - self.log_marginal(z, t)
    }

    pub fn log_conditional(&self, z: &[f64], t: f64, m: usize) -> f64 {
        self.log_joint_m(z, t, m) - self.log_marginal_r(z, t, self.labels[m])
    }

    pub fn log_label_posterior(&self, z: &[f64], t: f64, r: usize) -> f64 {
        self.log_marginal_r(z, t, r) - self.log_marginal(z, t)
    }

    fn grad_log_n(&self, z: &[f64], t: f64, m: usize) -> Vec<f64> {
        let (a, s) = (self.path.alpha(t), self.path.sigma(t));
        z.iter().zip(self.latent(m)).map(|(zi, x)| (a * x - zi) / (s * s)).collect()
    }

    /// Posterior-weighted average of `∇ log N_m` over `members`.
    fn mean_grad(&self, z: &[f64], t: f64, members: &[usize]) -> Vec<f64> {
        let logs: Vec<f64> = members.iter().map(|&m| self.log_joint_m(z, t, m)).collect();
        let norm = log_sum_exp(logs.iter().copied());
        let mut out = vec![0.0; self.dim];
        for (&m, l) in members.iter().zip(&logs) {
            let w = (l - norm).exp();
            for (o, g) in out.iter_mut().zip(self.grad_log_n(z, t, m)) {
                *o += w * g;
            }
        }
        out
    }

    /// `∇ log p(z_t)`.
    pub fn marginal_score(&self, z: &[f64], t: f64) -> Vec<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.mean_grad(z, t, &all)
    }

    fn members(&self, r: usize) -> Vec<usize> {
        (0..self.len()).filter(|&m| self.labels[m] == r).collect()
    }

    /// The three scores of latent `m`, each computed from its own
    /// enumeration.
    pub fn scores(&self, z: &[f64], t: f64, m: usize) -> Result<ScoreTriple> {
        self.check_t(t)?;
        if self.log_posterior(z, t, m) < -700.0 {
            return Err(Error::Degenerate(format!("latent {m} has no posterior mass at {z:?}")));
        }
        let gn = self.grad_log_n(z, t, m);
        let marginal = self.marginal_score(z, t);
        let given_r = self.mean_grad(z, t, &self.members(self.labels[m]));
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
        Ok(ScoreTriple {
            joint: sub(&gn, &marginal),
            conditional_generation: sub(&gn, &given_r),
            representation_inference: sub(&given_r, &marginal),
        })
    }

    /// Central-difference versions of the three scores, from the log
    /// densities alone.
    pub fn scores_fd(&self, z: &[f64], t: f64, m: usize, h: f64) -> Result<ScoreTriple> {
        self.check_t(t)?;
        let r = self.labels[m];
        let grad = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
            (0..self.dim)
                .map(|i| {
                    let mut p = z.to_vec();
                    p[i] += h;
                    let up = f(&p);
                    p[i] = z[i] - h;
                    (up - f(&p)) / (2.0 * h)
                })
                .collect()
        };
        Ok(ScoreTriple {
            joint: grad(&|x| self.log_posterior(x, t, m)),
            conditional_generation: grad(&|x| self.log_conditional(x, t, m)),
            representation_inference: grad(&|x| self.log_label_posterior(x, t, r)),
        })
    }

    /// Points of the `per_axis × per_axis` grid over `[lo, hi]²` (or the
    /// line for one-dimensional worlds).
    pub fn grid(&self, per_axis: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
        let axis: Vec<f64> = (0..per_axis)
            .map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64)
            .collect();
        let mut pts: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..self.dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    /// Evenly spaced subset of the standard 50-per-axis grid over `[−6, 6]`.
    pub fn sample_grid(&self, count: usize) -> Vec<Vec<f64>> {
        let full = self.grid(50, -6.0, 6.0);
        let stride = (full.len() / count).max(1);
        full.into_iter().skip(stride / 2).step_by(stride).take(count).collect()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionGap {
    /// `max |joint − (conditional + inference)|` over all points and latents.
    pub analytic: f64,
    /// Same identity with every score replaced by a central difference.
    pub finite_difference: f64,
    /// `max |fd − analytic|` over all three scores, relative to
    /// `max(1, |analytic|)`.
    pub fd_vs_analytic: f64,
    pub evaluations: usize,
}

/// Checks `∇ log p(z₀, r | z_t) = ∇ log p(z₀ | z_t, r) + ∇ log p(r | z_t)`
/// at every point, `t`, and latent with posterior mass.
pub fn joint_score_decomposition_check(
    world: &DiscreteToyWorld,
    ts: &[f64],
    points: &[Vec<f64>],
    fd_step: f64,
) -> Result<DecompositionGap> {
    let mut gap = DecompositionGap {
        analytic: 0.0,
        finite_difference: 0.0,
        fd_vs_analytic: 0.0,
        evaluations: 0,
    };
    for &t in ts {
        for z in points {
            for m in 0..world.len() {
                let s = match world.scores(z, t, m) {
                    Ok(s) => s,
                    Err(Error::Degenerate(_)) => continue,
                    Err(e) => return Err(e),
                };
                let fd = world.scores_fd(z, t, m, fd_step)?;
                let sum = |x: &ScoreTriple| -> Vec<f64> {
                    x.conditional_generation
                        .iter()
                        .zip(&x.representation_inference)
                        .map(|(a, b)| a + b)
                        .collect()
                };
                gap.analytic = gap.analytic.max(max_abs_diff(&s.joint, &sum(&s)));
                gap.finite_difference = gap.finite_difference.max(max_abs_diff(&fd.joint, &sum(&fd)));
                for (a, n) in [
                    (&s.joint, &fd.joint),
                    (&s.conditional_generation, &fd.conditional_generation),
                    (&s.representation_inference, &fd.representation_inference),
                ] {
                    for (x, y) in a.iter().zip(n.iter()) {
                        gap.fd_vs_analytic = gap.fd_vs_analytic.max((x - y).abs() / x.abs().max(1.0));
                    }
                }
                gap.evaluations += 1;
            }
        }
    }
    if gap.evaluations == 0 {
        return Err(Error::Degenerate("no latent had posterior mass at any point".into()));
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalGap {
    /// `max |Σ_r p(z_t, r) − p(z_t)|`.
    pub marginal: f64,
    /// `max_r |Σ_{m: r(m)=r} p(m | z_t, r) − 1|`.
    pub posterior_normalization: f64,
}

/// Sums the label-joint densities over labels and compares with the
/// marginal, both evaluated as plain (not log-space) sums.
pub fn marginal_consistency_check(world: &DiscreteToyWorld, t: f64, points: &[Vec<f64>]) -> Result<MarginalGap> {
    world.check_t(t)?;
    let mut gap = MarginalGap {
        marginal: 0.0,
        posterior_normalization: 0.0,
    };
    for z in points {
        let dens: Vec<f64> = (0..world.len()).map(|m| world.log_joint_m(z, t, m).exp()).collect();
        let marginal: f64 = dens.iter().sum();
        let by_label: f64 = world
            .label_set()
            .iter()
            .map(|&r| (0..world.len()).filter(|&m| world.labels[m] == r).map(|m| dens[m]).sum::<f64>())
            .sum();
        gap.marginal = gap.marginal.max((by_label - marginal).abs());
        for r in world.label_set() {
            let members = world.members(r);
            if world.log_marginal_r(z, t, r) < -700.0 {
                continue;
            }
            let total: f64 = members.iter().map(|&m| world.log_conditional(z, t, m).exp()).sum();
            gap.posterior_normalization = gap.posterior_normalization.max((total - 1.0).abs());
        }
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionGaps {
    /// Tabulated regressors: max reconstruction error of the joint score.
    pub lookup: f64,
    /// RMS error of `f_L2R + f_R2G` against the joint score, over the RMS
    /// norm of the joint score.
    pub mlp_sum: f64,
    /// Largest RMS error of either regressor against its own target, same
    /// normalization.
    pub mlp_component: f64,
    /// Same with the two regressor outputs assigned to the other target.
    pub swapped_component: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub t: f64,
    pub per_axis: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            t: 0.5,
            per_axis: 50,
            hidden: 32,
            steps: 2000,
            batch: 256,
            lr: 3e-3,
            seed: 0,
        }
    }
}

struct Regressor {
    params: ParamSet,
    mlp: Mlp,
}

impl Regressor {
    fn new(input: usize, hidden: usize, output: usize, r: &mut rng::Rng) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "reg", &[input, hidden, hidden, output], r);
        Self { params, mlp }
    }

    fn predict(&self, x: &[f64], input: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let xv = tape.constant(&[x.len() / input, input], x.to_vec())?;
        let y = self.mlp.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).to_vec())
    }

    /// Mean-squared-error fit with minibatches drawn from `r`.
    fn fit(&mut self, x: &[f64], y: &[f64], input: usize, cfg: &RegressionConfig, r: &mut rng::Rng) -> Result<()> {
        let out = y.len() / (x.len() / input);
        let n = x.len() / input;
        let adam = AdamConfig {
            lr: cfg.lr,
            clip_norm: None,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(&self.params, adam);
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
            let xb: Vec<f64> = idx.iter().flat_map(|&i| x[i * input..(i + 1) * input].to_vec()).collect();
            let yb: Vec<f64> = idx.iter().flat_map(|&i| y[i * out..(i + 1) * out].to_vec()).collect();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, |_| true)?;
            let xv = tape.constant(&[cfg.batch, input], xb)?;
            let pred = self.mlp.forward(&mut tape, &bound, xv)?;
            let target = tape.constant(&[cfg.batch, out], yb)?;
            let d = tape.sub(pred, target)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.mean(sq)?;
            tape.backward(loss)?;
            opt.step(&mut self.params, &bound.grads(&tape), |_| true)?;
        }
        Ok(())
    }
}

fn rms_gap(pred: &[f64], target: &[f64], scale: f64) -> f64 {
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    mse.sqrt() / scale
}

/// Fits the representation-inference score with `f_L2R(z, onehot r)` and
/// the conditional-generation score with `f_R2G(z, onehot m)` as two
/// independent regressions on the grid, then measures how well their sum
/// reconstructs the joint score. A lookup table gives the exact-regressor
/// baseline; assigning each fitted regressor to the other target is the
/// negative control.
pub fn l2r_r2g_idealized_regression_check(world: &DiscreteToyWorld, cfg: &RegressionConfig) -> Result<RegressionGaps> {
    let t = cfg.t;
    let labels = world.label_set().len();
    let d = world.dim;
    let mut xs_l2r = Vec::new();
    let mut xs_r2g = Vec::new();
    let (mut joint, mut cg, mut ri) = (Vec::new(), Vec::new(), Vec::new());
    let mut lookup: f64 = 0.0;
    for z in world.grid(cfg.per_axis, -6.0, 6.0) {
        for m in 0..world.len() {
            let s = match world.scores(&z, t, m) {
                Ok(s) => s,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            // Lookup regressors return the tabulated targets verbatim.
            let sum: Vec<f64> = s
                .conditional_generation
                .iter()
                .zip(&s.representation_inference)
                .map(|(a, b)| a + b)
                .collect();
            lookup = lookup.max(max_abs_diff(&sum, &s.joint));
            let zin: Vec<f64> = z.iter().map(|v| v / 6.0).collect();
            xs_l2r.extend(&zin);
            xs_l2r.extend((0..labels).map(|r| if r == world.labels[m] { 1.0 } else { 0.0 }));
            xs_r2g.extend(&zin);
            xs_r2g.extend((0..world.len()).map(|k| if k == m { 1.0 } else { 0.0 }));
            joint.extend(s.joint);
            cg.extend(s.conditional_generation);
            ri.extend(s.representation_inference);
        }
    }
    let scale = (joint.iter().map(|v| v * v).sum::<f64>() / joint.len() as f64).sqrt().max(1e-12);
    let mut r = rng::stream(cfg.seed, 0);
    let (in_l, in_r) = (d + labels, d + world.len());
    let mut l2r = Regressor::new(in_l, cfg.hidden, d, &mut r);
    let mut r2g = Regressor::new(in_r, cfg.hidden, d, &mut r);
    l2r.fit(&xs_l2r, &ri, in_l, cfg, &mut r)?;
    r2g.fit(&xs_r2g, &cg, in_r, cfg, &mut r)?;
    let p_l = l2r.predict(&xs_l2r, in_l)?;
    let p_r = r2g.predict(&xs_r2g, in_r)?;
    let sum: Vec<f64> = p_l.iter().zip(&p_r).map(|(a, b)| a + b).collect();
    Ok(RegressionGaps {
        lookup,
        mlp_sum: rms_gap(&sum, &joint, scale),
        mlp_component: rms_gap(&p_l, &ri, scale).max(rms_gap(&p_r, &cg, scale)),
        swapped_component: rms_gap(&p_l, &cg, scale).max(rms_gap(&p_r, &ri, scale)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupBoundaryReport {
    /// Warmup objective as evaluated by the training step.
    pub trainer_loss: f64,
    /// Alignment loss recomputed from the full forward pass at `t = 0`.
    pub direct_loss: f64,
    pub gap: f64,
    /// `(t, alignment loss on z_t)` for decreasing `t`.
    pub noisy: Vec<(f64, f64)>,
    /// `|L(t) − L(0)|` is non-increasing as `t` decreases.
    pub monotone: bool,
    /// `|L(0.01) − L(0)| / L(0)`.
    pub small_t_relative: f64,
}

pub const BOUNDARY_TIMES: [f64; 4] = [0.2, 0.1, 0.05, 0.01];

/// Compares the warmup objective with a direct evaluation at `t = 0` and
/// tracks the alignment loss on noisy inputs as `t → 0`. Uses a fixed batch
/// of `n` corpus rows and one shared noise draw.
pub fn warmup_boundary_check(
    model: &Backbone,
    corpus: &Corpus,
    align: &AlignmentConfig,
    n: usize,
    seed: u64,
) -> Result<WarmupBoundaryReport> {
    let n = n.min(corpus.n);
    let idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0);
    let batch = Batch {
        z0: corpus.latents(&idx),
        eps: rng::normals(&mut r, n * corpus.latent_dim),
        t: vec![0.0; n],
        teacher: corpus.embeddings(&idx),
    };
    let plan = PhasePlan {
        warmup_steps: 1,
        full_steps: 0,
        batch_size: n,
    };
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_| false)?;
    let trainer_loss = total_loss(
        &mut tape,
        &bound,
        model,
        &batch,
        &plan,
        &AlignWeight::Constant { value: 1.0 },
        align,
        &InterpolantPath::linear(),
        0,
    )?
    .report
    .loss_total;

    let path = InterpolantPath::linear();
    let align_at = |t: f64| -> Result<f64> {
        let d = corpus.latent_dim;
        let mut zt = Vec::with_capacity(n * d);
        for i in 0..n {
            zt.extend(interpolant::forward_sample(
                &batch.z0[i * d..(i + 1) * d],
                &batch.eps[i * d..(i + 1) * d],
                t,
                &path,
            )?);
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_| false)?;
        let z = tape.constant(&[n, d], zt)?;
        let f = model.forward_with_tap(&mut tape, &bound, z, &vec![t; n])?;
        let e = model.project(&mut tape, &bound, f.l2r)?;
        let teacher = tape.constant(&[n, corpus.rep_dim], batch.teacher.clone())?;
        let l = nt_xent(&mut tape, e, teacher, align.temperature)?;
        Ok(tape.tensor(l).item())
    };
    let direct_loss = align_at(0.0)?;
    let noisy: Vec<(f64, f64)> = BOUNDARY_TIMES
        .iter()
        .map(|&t| align_at(t).map(|l| (t, l)))
        .collect::<Result<_>>()?;
    let dev: Vec<f64> = noisy.iter().map(|(_, l)| (l - direct_loss).abs()).collect();
    let monotone = dev.windows(2).all(|w| w[1] <= w[0]);
    let small_t_relative = dev[dev.len() - 1] / direct_loss.abs();
    Ok(WarmupBoundaryReport {
        trainer_loss,
        direct_loss,
        gap: (trainer_loss - direct_loss).abs(),
        noisy,
        monotone,
        small_t_relative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOracleReport {
    pub mean_error: f64,
    pub cov_frobenius_error: f64,
}

/// Samples an analytic Gaussian through its exact velocity and compares
/// the sample moments with the target.
pub fn sampler_oracle_check(oracle: &GaussianOracle, cfg: &SamplerConfig, n: usize) -> Result<SamplerOracleReport> {
    let path = InterpolantPath::linear();
    let d = oracle.dim();
    let samples = em_sample(|z, t| oracle.velocity(z, t, &path), cfg, &path, n, d)?;
    let (mean, cov) = moments(&samples, d);
    let mean_error = mean.iter().zip(&oracle.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cov_frobenius_error = cov
        .iter()
        .zip(&oracle.cov)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(SamplerOracleReport {
        mean_error,
        cov_frobenius_error,
    })
}

/// One line of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    fn above(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value > threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<38} {:>6} {:>14} {:>12}\n", "check", "status", "value", "threshold");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<38} {:>6} {:>14.6e} {:>12.3e}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    /// Negative control: run the sampler check with the score term's sign
    /// reversed. The suite must then fail.
    pub flip_score_sign: bool,
}

/// The oracle suite behind `erw verify`: everything here is analytic or
/// enumerated and independent of any trained artifact.
pub fn run_oracle_suite(options: VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let four = DiscreteToyWorld::four();
    let ts = [0.1, 0.5, 0.9];
    let pts20 = four.sample_grid(20);

    let g = joint_score_decomposition_check(&four, &ts, &pts20, 1e-5)?;
    checks.push(CheckResult::at_most(
        "score_decomposition_gap_analytic",
        g.analytic,
        1e-10,
        format!("{} (point, t, latent) triples", g.evaluations),
    ));
    checks.push(CheckResult::at_most("score_decomposition_gap_finite_difference", g.finite_difference, 1e-6, "step 1e-5"));
    checks.push(CheckResult::at_most("score_decomposition_fd_vs_analytic", g.fd_vs_analytic, 1e-6, "step 1e-5"));

    // Central differences are second order; a tenfold smaller step should
    // cut the truncation error about a hundredfold while roundoff is still
    // negligible.
    let coarse = joint_score_decomposition_check(&four, &ts, &pts20, 1e-2)?;
    let fine = joint_score_decomposition_check(&four, &ts, &pts20, 1e-3)?;
    let ratio = coarse.fd_vs_analytic / fine.fd_vs_analytic.max(f64::MIN_POSITIVE);
    checks.push(CheckResult::above(
        "score_decomposition_fd_convergence_ratio",
        ratio,
        30.0,
        format!("error at h=1e-2 {:.3e}, at h=1e-3 {:.3e}", coarse.fd_vs_analytic, fine.fd_vs_analytic),
    ));

    let single = DiscreteToyWorld::single();
    let mut worst: f64 = 0.0;
    for z in single.sample_grid(20) {
        let s = single.scores(&z, 0.5, 0)?;
        worst = worst.max(s.representation_inference.iter().fold(0.0, |a, v| a.max(v.abs())));
        worst = worst.max(max_abs_diff(&s.joint, &s.conditional_generation));
    }
    checks.push(CheckResult::at_most("single_latent_inference_score_zero", worst, 1e-12, "M = 1"));

    let pts50 = four.sample_grid(50);
    let mut marginal: f64 = 0.0;
    let mut normalization: f64 = 0.0;
    for &t in &ts {
        let m = marginal_consistency_check(&four, t, &pts50)?;
        marginal = marginal.max(m.marginal);
        normalization = normalization.max(m.posterior_normalization);
    }
    checks.push(CheckResult::at_most("marginal_consistency", marginal, 1e-12, "50 points, 3 times"));
    checks.push(CheckResult::at_most("conditional_posterior_normalization", normalization, 1e-12, ""));

    let reg = l2r_r2g_idealized_regression_check(&four, &RegressionConfig::default())?;
    checks.push(CheckResult::at_most("regression_lookup_gap", reg.lookup, 1e-10, "tabulated regressors"));
    checks.push(CheckResult::at_most("regression_mlp_sum_gap", reg.mlp_sum, 0.1, "relative RMS"));
    checks.push(CheckResult::above(
        "regression_swap_control",
        reg.swapped_component / reg.mlp_component.max(f64::MIN_POSITIVE),
        10.0,
        format!("fitted {:.3e}, swapped {:.3e}", reg.mlp_component, reg.swapped_component),
    ));

    let oracle = GaussianOracle::new(vec![3.0, 0.0], vec![1.0, 0.0, 0.0, 0.25])?;
    let sampler = SamplerConfig {
        flip_score_sign: options.flip_score_sign,
        ..SamplerConfig::default()
    };
    let s = sampler_oracle_check(&oracle, &sampler, 4096);
    let (mean_err, cov_err) = match s {
        Ok(s) => (s.mean_error, s.cov_frobenius_error),
        Err(Error::SamplerDivergence { .. }) => (f64::INFINITY, f64::INFINITY),
        Err(e) => return Err(e),
    };
    checks.push(CheckResult::at_most("sampler_oracle_mean", mean_err, 0.05, "4096 samples, 250 steps"));
    checks.push(CheckResult::at_most("sampler_oracle_covariance", cov_err, 0.1, "Frobenius"));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_world_identities() {
        let w = DiscreteToyWorld::four();
        let pts = w.sample_grid(20);
        assert_eq!(pts.len(), 20);
        let g = joint_score_decomposition_check(&w, &[0.1, 0.5, 0.9], &pts, 1e-5).unwrap();
        assert!(g.analytic <= 1e-10, "{g:?}");
        assert!(g.finite_difference <= 1e-6, "{g:?}");
        assert!(g.fd_vs_analytic <= 1e-6, "{g:?}");
    }

    #[test]
    fn single_world_has_no_inference_score() {
        let w = DiscreteToyWorld::single();
        for z in w.sample_grid(10) {
            let s = w.scores(&z, 0.3, 0).unwrap();
            assert!(s.representation_inference.iter().all(|v| v.abs() <= 1e-12));
            assert_eq!(s.joint, s.conditional_generation);
        }
    }

    #[test]
    fn marginals_agree() {
        let w = DiscreteToyWorld::four();
        let g = marginal_consistency_check(&w, 0.5, &w.sample_grid(50)).unwrap();
        assert!(g.marginal <= 1e-12 && g.posterior_normalization <= 1e-12, "{g:?}");
    }

    #[test]
    fn invalid_inputs() {
        let w = DiscreteToyWorld::four();
        assert!(w.scores(&[0.0, 0.0], 0.0, 0).is_err());
        assert!(w.scores(&[0.0, 0.0], 1.0, 0).is_err());
        assert!(DiscreteToyWorld::new(2, vec![0.0; 4], vec![0.5, 0.6], vec![0, 1]).is_err());
        // Far from latent 3 at small t: no posterior mass.
        assert!(matches!(w.scores(&[6.0, 6.0], 0.01, 3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grid_covers_range() {
        let w = DiscreteToyWorld::four();
        let g = w.grid(50, -6.0, 6.0);
        assert_eq!(g.len(), 2500);
        assert_eq!(g[0], vec![-6.0, -6.0]);
        assert_eq!(g[2499], vec![6.0, 6.0]);
    }
}
