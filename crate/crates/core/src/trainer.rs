//! Two-phase training loop.
//!
//! Arms share one step budget:
//!
//! * `plain`: joint training only, alignment weight 0.
//! * `repa`: joint training only, constant alignment weight `c₀`.
//! * `erw`: `round(warmup_frac · budget)` warmup steps on the L2R span, then
//!   joint training with `λ(k) = c₀ exp(−k/τ)` for the rest.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::interpolant::{em_sample, InterpolantPath, SamplerConfig};
use crate::metrics;
use crate::nn::ParamId;
use crate::objectives::{total_loss, AlignWeight, AlignmentConfig, Batch, LossReport, Phase, PhasePlan};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{self, streams};
use crate::teacher::Prepared;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Plain,
    Repa,
    Erw,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Plain, Arm::Repa, Arm::Erw];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Plain => "plain",
            Arm::Repa => "repa",
            Arm::Erw => "erw",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Arm::Plain),
            "repa" => Ok(Arm::Repa),
            "erw" => Ok(Arm::Erw),
            other => Err(Error::Argument(format!("unknown arm `{other}` (plain|repa|erw)"))),
        }
    }
}

/// Held-out evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_heldout: usize,
    pub n_samples: usize,
    pub sampler: SamplerConfig,
    pub cknna_k: usize,
    /// Held-out points used for CKNNA (the kernel is quadratic in this).
    pub cknna_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_heldout: 4096,
            n_samples: 4096,
            sampler: SamplerConfig::default(),
            cknna_k: 10,
            cknna_n: 512,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.n_samples < 2 {
            return Err(Error::config("eval.n_samples", "must be >= 2"));
        }
        if self.n_heldout < 2 {
            return Err(Error::config("eval.n_heldout", "must be >= 2"));
        }
        let n = self.cknna_n.min(self.n_heldout);
        if self.cknna_k < 2 || self.cknna_k >= n {
            return Err(Error::config(
                "eval.cknna_k",
                format!("need 2 <= k < min(cknna_n, n_heldout) = {n}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub budget_steps: u64,
    /// Share of the budget spent in warmup by the `erw` arm.
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub c0: f64,
    /// Decay constant of `λ`; `None` means a third of the joint-phase steps.
    pub tau: Option<f64>,
    pub align: AlignmentConfig,
    pub adam: AdamConfig,
    /// Keep Adam moments across the phase boundary instead of resetting.
    pub carry_optimizer: bool,
    /// Held-out metrics every this many steps (and always after the last
    /// step); 0 evaluates only at the end.
    pub metric_every: u64,
    /// Model checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Check that warmup leaves R2G gradients at zero every this many
    /// warmup steps; 0 disables.
    pub decoupling_check_every: u64,
    pub eval: EvalConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            budget_steps: 10_000,
            warmup_frac: 0.2,
            batch_size: 256,
            c0: 0.5,
            tau: None,
            align: AlignmentConfig::default(),
            adam: AdamConfig::default(),
            carry_optimizer: false,
            metric_every: 250,
            checkpoint_every: 0,
            decoupling_check_every: 1,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("trainer.warmup_frac", "must lie in [0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("trainer.batch_size", "must be >= 2 (in-batch negatives)"));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::config("trainer.c0", "must be positive"));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config("trainer.tau", "must be positive"));
            }
        }
        if !(self.align.temperature > 0.0) {
            return Err(Error::config("trainer.align.temperature", "must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("trainer.adam.lr", "must be positive"));
        }
        self.eval.validate()
    }

    /// Step split used by `arm`; every arm spends exactly `budget_steps`.
    pub fn plan(&self, arm: Arm) -> PhasePlan {
        let warmup = match arm {
            Arm::Erw => (self.warmup_frac * self.budget_steps as f64).round() as u64,
            Arm::Plain | Arm::Repa => 0,
        };
        PhasePlan {
            warmup_steps: warmup,
            full_steps: self.budget_steps - warmup,
            batch_size: self.batch_size,
        }
    }

    pub fn weight(&self, arm: Arm) -> AlignWeight {
        match arm {
            Arm::Plain => AlignWeight::Constant { value: 0.0 },
            Arm::Repa => AlignWeight::Constant { value: self.c0 },
            Arm::Erw => {
                let full = self.plan(arm).full_steps;
                AlignWeight::Decay {
                    c0: self.c0,
                    tau: self.tau.unwrap_or((full as f64 / 3.0).max(1.0)),
                }
            }
        }
    }
}

/// Training pairs: latents of the clean points and teacher embeddings of
/// the same points.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub n: usize,
    pub latent_dim: usize,
    pub rep_dim: usize,
    pub z0: Vec<f64>,
    pub reps: Vec<f64>,
}

impl Corpus {
    pub fn new(prepared: &Prepared, data: &ToyDataset) -> Result<Self> {
        Ok(Self {
            n: data.len(),
            latent_dim: prepared.codec.latent_dim,
            rep_dim: prepared.teacher.rep_dim,
            z0: prepared.codec.encode(&data.points),
            reps: prepared.teacher.embed(&data.points)?,
        })
    }

    fn rows(&self, src: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| src[i * width..(i + 1) * width].iter().copied()).collect()
    }

    pub fn latents(&self, idx: &[usize]) -> Vec<f64> {
        self.rows(&self.z0, self.latent_dim, idx)
    }

    pub fn embeddings(&self, idx: &[usize]) -> Vec<f64> {
        self.rows(&self.reps, self.rep_dim, idx)
    }
}

/// Fixed held-out set and the evaluation procedures run against it.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub config: EvalConfig,
    pub heldout: Corpus,
    prepared: Prepared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: u64,
    pub cknna: f64,
    pub toy_fid: f64,
}

impl Evaluator {
    pub fn new(prepared: &Prepared, heldout: &ToyDataset, config: EvalConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            heldout: Corpus::new(prepared, heldout)?,
            prepared: prepared.clone(),
        })
    }

    /// CKNNA between the features at `proj_tap` on clean held-out latents
    /// (`t = 0`) and the teacher embeddings of the same points.
    pub fn cknna(&self, model: &Backbone) -> Result<f64> {
        let n = self.config.cknna_n.min(self.heldout.n);
        let idx: Vec<usize> = (0..n).collect();
        let feats = model.features_at(&self.heldout.latents(&idx), 0.0, model.config.proj_tap)?;
        metrics::cknna(
            &feats,
            model.config.width,
            &self.heldout.embeddings(&idx),
            self.heldout.rep_dim,
            self.config.cknna_k,
        )
    }

    /// Samples `n_samples` latents with the model, decodes them and embeds
    /// them with the teacher. Row-major `n × rep_dim`.
    pub fn generated_embeddings(&self, model: &Backbone, seed: u64) -> Result<Vec<f64>> {
        let z = self.sample(model, seed)?;
        self.prepared.teacher.embed(&self.prepared.codec.decode(&z))
    }

    /// Latent samples from the model's reverse SDE.
    pub fn sample(&self, model: &Backbone, seed: u64) -> Result<Vec<f64>> {
        let sampler = SamplerConfig { seed, ..self.config.sampler };
        em_sample(
            |z, t| model.velocity(z, t),
            &sampler,
            &InterpolantPath::linear(),
            self.config.n_samples,
            model.config.latent_dim,
        )
    }

    pub fn toy_fid(&self, model: &Backbone, seed: u64) -> Result<f64> {
        let gen = self.generated_embeddings(model, seed)?;
        metrics::toy_fid(&self.heldout.reps, &gen, self.heldout.rep_dim)
    }

    pub fn report(&self, model: &Backbone, step: u64, seed: u64) -> Result<MetricReport> {
        Ok(MetricReport {
            step,
            cknna: self.cknna(model)?,
            toy_fid: self.toy_fid(model, seed)?,
        })
    }

    /// Mean cosine between the warmup-span projection of clean held-out
    /// latents and their teacher embeddings.
    pub fn warmup_alignment(&self, model: &Backbone) -> Result<f64> {
        let n = self.heldout.n;
        let idx: Vec<usize> = (0..n).collect();
        let feats = model.features_at(&self.heldout.latents(&idx), 0.0, model.config.l2r_end())?;
        let proj = model.project_values(&feats)?;
        let d = self.heldout.rep_dim;
        let total: f64 = proj
            .chunks(d)
            .zip(self.heldout.reps.chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        Ok(total / n as f64)
    }
}

/// Everything recorded by one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub arm: Arm,
    pub seed: u64,
    pub config: TrainerConfig,
    pub plan: PhasePlan,
    pub losses: Vec<LossReport>,
    pub metrics: Vec<MetricReport>,
    pub phase_seconds: [f64; 2],
    /// R2G parameter hash before and after warmup. Equal by construction;
    /// a mismatch aborts the run.
    pub r2g_hash: Option<(String, String)>,
    pub optimizer_steps: u64,
    pub decoupling_checks: u64,
}

impl TrainRun {
    pub fn final_metrics(&self) -> Option<&MetricReport> {
        self.metrics.last()
    }

    /// `metrics.csv` rows: one per step, metric columns empty when not
    /// evaluated at that step.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(METRICS_HEADER)?;
        let mut m = self.metrics.iter().peekable();
        for r in &self.losses {
            let (cknna, fid) = match m.peek() {
                Some(x) if x.step == r.step => {
                    let x = m.next().expect("peeked");
                    (x.cknna.to_string(), x.toy_fid.to_string())
                }
                _ => (String::new(), String::new()),
            };
            w.write_record([
                r.step.to_string(),
                r.phase.as_str().to_string(),
                r.loss_diffusion.to_string(),
                r.loss_align.to_string(),
                r.lambda.to_string(),
                cknna,
                fid,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 7] = ["step", "phase", "loss_diffusion", "loss_align", "lambda", "cknna", "toy_fid"];

/// Mutable state threaded through the phases.
pub struct TrainState {
    pub model: Backbone,
    pub opt: OptimizerState,
    pub run: TrainRun,
    batch_rng: rng::Rng,
    checkpoint_dir: Option<PathBuf>,
}

impl TrainState {
    pub fn new(model: Backbone, arm: Arm, seed: u64, config: &TrainerConfig) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(&model.params, config.adam);
        Ok(Self {
            model,
            opt,
            run: TrainRun {
                arm,
                seed,
                config: config.clone(),
                plan: config.plan(arm),
                losses: Vec::new(),
                metrics: Vec::new(),
                phase_seconds: [0.0; 2],
                r2g_hash: None,
                optimizer_steps: 0,
                decoupling_checks: 0,
            },
            batch_rng: rng::stream(seed, streams::BATCH),
            checkpoint_dir: None,
        })
    }

    /// Write `step_<k>.erwm` files into `dir` at the configured cadence.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn draw(&mut self, corpus: &Corpus, n: usize, noisy: bool) -> Batch {
        let idx: Vec<usize> = (0..n).map(|_| self.batch_rng.random_range(0..corpus.n)).collect();
        let (eps, t) = if noisy {
            let eps = rng::normals(&mut self.batch_rng, n * corpus.latent_dim);
            let t = (0..n).map(|_| self.batch_rng.random::<f64>()).collect();
            (eps, t)
        } else {
            (vec![0.0; n * corpus.latent_dim], vec![0.0; n])
        };
        Batch {
            z0: corpus.latents(&idx),
            eps,
            t,
            teacher: corpus.embeddings(&idx),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        corpus: &Corpus,
        plan: &PhasePlan,
        weight: &AlignWeight,
        k: u64,
        tracked: &BTreeSet<ParamId>,
        trainable: &BTreeSet<ParamId>,
        check: Option<&BTreeSet<ParamId>>,
    ) -> Result<()> {
        let (phase, _) = plan.locate(k);
        let batch = self.draw(corpus, plan.batch_size, phase == Phase::Joint);
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, |id| tracked.contains(&id))?;
        let graph = total_loss(
            &mut tape,
            &bound,
            &self.model,
            &batch,
            plan,
            weight,
            &self.run.config.align,
            &InterpolantPath::linear(),
            k,
        )?;
        tape.backward(graph.total)?;
        let grads = bound.grads(&tape);
        if let Some(r2g) = check {
            for id in r2g {
                if grads[id.0].as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                    return Err(Error::Contract(format!(
                        "warmup step {k} produced a gradient on R2G parameter {}",
                        self.model.params.get(*id).name
                    )));
                }
            }
            self.run.decoupling_checks += 1;
        }
        self.opt
            .step(&mut self.model.params, &grads, |id| trainable.contains(&id))
            .map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { step: k as usize },
                other => other,
            })?;
        self.run.optimizer_steps += 1;
        self.run.losses.push(graph.report);
        Ok(())
    }

    fn after_step(&mut self, k: u64, evaluator: Option<&Evaluator>) -> Result<()> {
        let cfg = &self.run.config;
        let last = k + 1 == self.run.plan.total_steps();
        if let Some(ev) = evaluator {
            if last || (cfg.metric_every > 0 && (k + 1) % cfg.metric_every == 0) {
                let m = ev.report(&self.model, k, self.run.seed)?;
                self.run.metrics.push(m);
            }
        }
        if let Some(dir) = &self.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                self.model.save(&dir.join(format!("step_{}.erwm", k + 1)))?;
            }
        }
        Ok(())
    }
}

/// Warmup: the L2R span and head learn to match the teacher on clean
/// latents. Blocks before the span enter as constants, blocks after it are
/// not evaluated, and only L2R parameters are updated. Fails if any R2G
/// gradient is non-zero at a checked step or if the R2G hash moves.
pub fn run_phase1(state: &mut TrainState, corpus: &Corpus, evaluator: Option<&Evaluator>) -> Result<()> {
    let plan = state.run.plan;
    let started = Instant::now();
    let (l2r, r2g) = state.model.partition_params();
    let prefix = state.model.prefix_ids();
    let tracked: BTreeSet<ParamId> = state.model.trainable().difference(&prefix).copied().collect();
    let before = state.model.hash_of(&r2g);
    let every = state.run.config.decoupling_check_every;
    let weight = state.run.config.weight(state.run.arm);
    for k in 0..plan.warmup_steps {
        let check = (every > 0 && k % every == 0).then_some(&r2g);
        state.step(corpus, &plan, &weight, k, &tracked, &l2r, check)?;
        state.after_step(k, evaluator)?;
    }
    let after = state.model.hash_of(&r2g);
    if before != after {
        return Err(Error::Contract("warmup modified R2G parameters".into()));
    }
    state.run.r2g_hash = Some((before, after));
    state.run.phase_seconds[0] = started.elapsed().as_secs_f64();
    Ok(())
}

/// Joint training of every parameter on the full objective.
pub fn run_phase2(state: &mut TrainState, corpus: &Corpus, evaluator: Option<&Evaluator>) -> Result<()> {
    let plan = state.run.plan;
    let started = Instant::now();
    if plan.warmup_steps > 0 && !state.run.config.carry_optimizer {
        state.opt.reset();
    }
    let all = state.model.trainable();
    let weight = state.run.config.weight(state.run.arm);
    for k in plan.warmup_steps..plan.total_steps() {
        state.step(corpus, &plan, &weight, k, &all, &all, None)?;
        state.after_step(k, evaluator)?;
    }
    state.run.phase_seconds[1] = started.elapsed().as_secs_f64();
    Ok(())
}

/// Runs both phases of `arm` on a freshly initialized model.
pub fn train(
    model: Backbone,
    arm: Arm,
    seed: u64,
    config: &TrainerConfig,
    corpus: &Corpus,
    evaluator: Option<&Evaluator>,
    checkpoint_dir: Option<&Path>,
) -> Result<(Backbone, TrainRun)> {
    if corpus.latent_dim != model.config.latent_dim || corpus.rep_dim != model.config.rep_dim {
        return Err(Error::Shape {
            op: "train",
            left: vec![corpus.latent_dim, corpus.rep_dim],
            right: vec![model.config.latent_dim, model.config.rep_dim],
        });
    }
    let mut state = TrainState::new(model, arm, seed, config)?;
    if let Some(dir) = checkpoint_dir {
        state = state.with_checkpoints(dir);
    }
    run_phase1(&mut state, corpus, evaluator)?;
    run_phase2(&mut state, corpus, evaluator)?;
    Ok((state.model, state.run))
}
