//! Training objectives and their step-dependent weights.
//!
//! Both phases share one alignment term, NT-Xent between the projected
//! student features and the frozen teacher embedding of the clean sample.
//! During warmup the student sees clean latents (`t = 0`) with weight 1;
//! during joint training it sees the same noisy `z_t` as the velocity loss and
//! is weighted by `λ(k) = c₀ exp(−k/τ)`, with `k` counted from the start of
//! joint training.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::interpolant::{self, InterpolantPath};
use crate::nn::Bound;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

/// `λ(k) = c₀ exp(−k/τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub c0: f64,
    pub tau: f64,
}

impl LambdaSchedule {
    pub fn new(c0: f64, tau: f64) -> Result<Self> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::config("schedule.c0", "must be positive"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config("schedule.tau", "must be positive"));
        }
        Ok(Self { c0, tau })
    }

    pub fn at(&self, k: u64) -> f64 {
        self.c0 * (-(k as f64) / self.tau).exp()
    }
}

/// How the alignment term is weighted during joint training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignWeight {
    Decay { c0: f64, tau: f64 },
    Constant { value: f64 },
}

impl AlignWeight {
    pub fn at(&self, k: u64) -> f64 {
        match *self {
            AlignWeight::Decay { c0, tau } => LambdaSchedule { c0, tau }.at(k),
            AlignWeight::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhasePlan {
    pub warmup_steps: u64,
    pub full_steps: u64,
    pub batch_size: usize,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            warmup_steps: 2000,
            full_steps: 8000,
            batch_size: 256,
        }
    }
}

impl PhasePlan {
    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.full_steps
    }

    /// Phase of global step `k` and the step index within that phase.
    pub fn locate(&self, k: u64) -> (Phase, u64) {
        if k < self.warmup_steps {
            (Phase::Warmup, k)
        } else {
            (Phase::Joint, k - self.warmup_steps)
        }
    }
}

/// Weight of the alignment term at global step `k`: 1 during warmup (where
/// inputs are forced to `t = 0`), `λ` of the joint-phase step afterwards.
/// The time argument is accepted for symmetry with the loss definition; the
/// weight does not depend on it within a phase.
pub fn s_weight(k: u64, _t: f64, plan: &PhasePlan, weight: &AlignWeight) -> f64 {
    match plan.locate(k) {
        (Phase::Warmup, _) => 1.0,
        (Phase::Joint, j) => weight.at(j),
    }
}

/// Mean over batch and coordinates of `(v_pred − target)²`.
pub fn diffusion_loss(tape: &mut Tape, v_pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(v_pred).to_vec();
    let t = tape.leaf(Tensor::new(shape, target.to_vec())?);
    let diff = tape.sub(v_pred, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

fn check_unit_rows(op: &'static str, tape: &Tape, v: Var) -> Result<(usize, usize)> {
    let (n, d) = tape.tensor(v).dims2()?;
    for (i, row) in tape.value(v).chunks(d).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain {
                op,
                detail: format!("row {i} has norm {norm}, expected unit rows"),
            });
        }
    }
    Ok((n, d))
}

/// Softmax cross-entropy of each student row against all teacher rows, the
/// matching row being the positive:
/// `−(1/n) Σᵢ log softmax_j(⟨sᵢ, rⱼ⟩/τ)[i]`.
pub fn nt_xent(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    let (n, d) = check_unit_rows("nt_xent", tape, student)?;
    let (n2, d2) = check_unit_rows("nt_xent", tape, teacher)?;
    if (n, d) != (n2, d2) {
        return Err(Error::Shape {
            op: "nt_xent",
            left: vec![n, d],
            right: vec![n2, d2],
        });
    }
    if n < 2 {
        return Err(Error::Argument("nt_xent needs at least two rows for negatives".into()));
    }
    let rt = tape.transpose(teacher)?;
    let sim = tape.matmul(student, rt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let lsm = tape.log_softmax_rows(logits)?;
    let pos = tape.diag(lsm)?;
    let m = tape.mean(pos)?;
    tape.scale(m, -1.0)
}

/// [`nt_xent`] on plain row-major arrays.
pub fn nt_xent_value(student: &[f64], teacher: &[f64], dim: usize, temperature: f64) -> Result<f64> {
    let n = student.len() / dim;
    let mut tape = Tape::new();
    let s = tape.constant(&[n, dim], student.to_vec())?;
    let r = tape.constant(&[teacher.len() / dim, dim], teacher.to_vec())?;
    let l = nt_xent(&mut tape, s, r, temperature)?;
    Ok(tape.tensor(l).item())
}

/// One training batch. In warmup `eps` and `t` are unused (inputs are the
/// clean latents at `t = 0`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub z0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: Vec<f64>,
    /// Teacher embeddings of the clean samples, row-major `n × rep_dim`.
    pub teacher: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: Phase,
    pub loss_diffusion: f64,
    pub loss_align: f64,
    pub lambda: f64,
    pub loss_total: f64,
}

/// The scalar loss recorded on a tape, ready for `backward`.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
}

/// Records the training loss for global step `k` on `tape`.
///
/// * Warmup: `L_total = L_align` on clean latents through the warmup span
///   and the head only.
/// * Joint: `L_total = L_diffusion + λ(k)·L_align`, with per-sample `t`,
///   alignment read at `proj_tap`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &Backbone,
    batch: &Batch,
    plan: &PhasePlan,
    weight: &AlignWeight,
    align: &AlignmentConfig,
    path: &InterpolantPath,
    k: u64,
) -> Result<LossGraph> {
    let n = batch.len();
    let cfg = &model.config;
    if batch.z0.len() != n * cfg.latent_dim || batch.teacher.len() != n * cfg.rep_dim {
        return Err(Error::Shape {
            op: "total_loss",
            left: vec![batch.z0.len(), batch.teacher.len()],
            right: vec![n * cfg.latent_dim, n * cfg.rep_dim],
        });
    }
    let teacher = tape.constant(&[n, cfg.rep_dim], batch.teacher.clone())?;
    let (phase, _) = plan.locate(k);
    let lambda = s_weight(k, 0.0, plan, weight);
    match phase {
        Phase::Warmup => {
            let z = tape.constant(&[n, cfg.latent_dim], batch.z0.clone())?;
            let feats = model.forward_l2r(tape, bound, z, &vec![0.0; n])?;
            let emb = model.project(tape, bound, feats)?;
            let la = nt_xent(tape, emb, teacher, align.temperature)?;
            let loss_align = tape.tensor(la).item();
            Ok(LossGraph {
                total: la,
                report: LossReport {
                    step: k,
                    phase,
                    loss_diffusion: 0.0,
                    loss_align,
                    lambda,
                    loss_total: loss_align,
                },
            })
        }
        Phase::Joint => {
            let d = cfg.latent_dim;
            let mut zt = Vec::with_capacity(n * d);
            let mut target = Vec::with_capacity(n * d);
            for i in 0..n {
                let (z0, e) = (&batch.z0[i * d..(i + 1) * d], &batch.eps[i * d..(i + 1) * d]);
                zt.extend(interpolant::forward_sample(z0, e, batch.t[i], path)?);
                target.extend(interpolant::velocity_target(z0, e, batch.t[i], path)?);
            }
            let z = tape.constant(&[n, d], zt)?;
            let f = model.forward_with_tap(tape, bound, z, &batch.t)?;
            let ld = diffusion_loss(tape, f.v_pred, &target)?;
            let emb = model.project(tape, bound, f.tap)?;
            let la = nt_xent(tape, emb, teacher, align.temperature)?;
            let weighted = tape.scale(la, lambda)?;
            let total = tape.add(ld, weighted)?;
            let loss_diffusion = tape.tensor(ld).item();
            let loss_align = tape.tensor(la).item();
            Ok(LossGraph {
                total,
                report: LossReport {
                    step: k,
                    phase,
                    loss_diffusion,
                    loss_align,
                    lambda,
                    loss_total: tape.tensor(total).item(),
                },
            })
        }
    }
}
