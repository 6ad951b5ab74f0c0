//! Run configuration, cached teacher/codec preparation, and multi-seed
//! experiments over arms and ablation axes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::LatentCodec;
use crate::data::{DatasetSpec, ToyDataset};
use crate::error::{Error, Result};
use crate::interpolant::SamplerConfig;
use crate::teacher::{teacher_pretrain, Prepared, TeacherConfig};
use crate::trainer::{train, Arm, Corpus, EvalConfig, Evaluator, TrainRun, TrainerConfig};

/// Every built-in dataset is planar.
const DATA_DIM: usize = 2;

/// Everything needed to reproduce a run directory from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    /// Seed of the training set, the held-out set and the teacher. Kept
    /// apart from the run seeds so every arm sees the same data.
    pub data_seed: u64,
    pub teacher: TeacherConfig,
    pub backbone: BackboneConfig,
    pub trainer: TrainerConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "mixture".into(),
            dataset: DatasetSpec::GaussianMixture {
                n: 4096,
                classes: 8,
                spread: 0.3,
            },
            data_seed: 0,
            teacher: TeacherConfig::default(),
            backbone: BackboneConfig::default(),
            trainer: TrainerConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reduced sizes for a single laptop core: width 32, batch 64, 1024
    /// evaluation samples over 100 sampler steps. Step budget, schedule and
    /// optimizer match the defaults.
    pub fn desk() -> Self {
        let mut cfg = Self {
            name: "mixture-desk".into(),
            ..Self::default()
        };
        cfg.backbone.width = 32;
        cfg.backbone.head_hidden = 32;
        cfg.trainer.batch_size = 64;
        cfg.trainer.metric_every = 0;
        cfg.trainer.eval = EvalConfig {
            n_heldout: 2048,
            n_samples: 1024,
            sampler: SamplerConfig {
                n_steps: 100,
                ..SamplerConfig::default()
            },
            cknna_k: 10,
            cknna_n: 512,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file name"));
        }
        self.dataset.validate()?;
        self.teacher.validate()?;
        self.backbone.validate()?;
        self.trainer.validate()?;
        if self.backbone.latent_dim < DATA_DIM {
            return Err(Error::config(
                "backbone.latent_dim",
                format!("must be >= data dimension {DATA_DIM}"),
            ));
        }
        if self.backbone.rep_dim != self.teacher.rep_dim {
            return Err(Error::config(
                "backbone.rep_dim",
                format!("must equal teacher.rep_dim = {}", self.teacher.rep_dim),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: format!("{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Content hash of everything that determines the teacher and codec.
    pub fn prep_hash(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "data_seed": self.data_seed,
            "latent_dim": self.backbone.latent_dim,
            "teacher": self.teacher,
        });
        Sha256::digest(key.to_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Fits the codec and trains the teacher, or loads both from
/// `cache_dir/prep-<hash>.erwt`. With `allow_prep = false` a cache miss is an
/// error.
pub fn prepare(cfg: &RunConfig, cache_dir: Option<&Path>, allow_prep: bool) -> Result<Prepared> {
    let file = cache_dir.map(|d| d.join(format!("prep-{}.erwt", cfg.prep_hash())));
    if let Some(f) = &file {
        if f.exists() {
            return Prepared::load(f);
        }
    }
    if !allow_prep {
        return Err(Error::Checkpoint(match &file {
            Some(f) => format!("no cached teacher at {}", f.display()),
            None => "preparation disabled and no cache directory given".into(),
        }));
    }
    let data = cfg.dataset.generate(cfg.data_seed)?;
    let codec = LatentCodec::fit(&data, cfg.backbone.latent_dim)?;
    let (teacher, _) = teacher_pretrain(&data, &cfg.teacher, cfg.data_seed)?;
    let prepared = Prepared { codec, teacher };
    if let Some(f) = &file {
        std::fs::create_dir_all(f.parent().expect("cache file has a parent"))?;
        prepared.save(f)?;
    }
    Ok(prepared)
}

/// Prepared data, training corpus and held-out evaluator for one config.
pub struct Lab {
    pub config: RunConfig,
    pub prepared: Prepared,
    pub train_set: ToyDataset,
    pub corpus: Corpus,
    pub evaluator: Evaluator,
}

impl Lab {
    pub fn new(config: RunConfig, prepared: Prepared) -> Result<Self> {
        config.validate()?;
        let train_set = config.dataset.generate(config.data_seed)?;
        let heldout = config
            .dataset
            .generate_heldout(config.trainer.eval.n_heldout, config.data_seed)?;
        let corpus = Corpus::new(&prepared, &train_set)?;
        let evaluator = Evaluator::new(&prepared, &heldout, config.trainer.eval)?;
        Ok(Self {
            config,
            prepared,
            train_set,
            corpus,
            evaluator,
        })
    }

    pub fn open(config: RunConfig, cache_dir: Option<&Path>, allow_prep: bool) -> Result<Self> {
        config.validate()?;
        let prepared = prepare(&config, cache_dir, allow_prep)?;
        Self::new(config, prepared)
    }

    /// Trains one arm from a fresh model initialized with `seed`.
    pub fn run(&self, arm: Arm, seed: u64, checkpoint_dir: Option<&Path>) -> Result<(Backbone, TrainRun)> {
        let model = Backbone::new(self.config.backbone.clone(), seed)?;
        train(
            model,
            arm,
            seed,
            &self.config.trainer,
            &self.corpus,
            Some(&self.evaluator),
            checkpoint_dir,
        )
    }

    pub fn with_config(&self, config: RunConfig) -> Result<Self> {
        Self::new(config, self.prepared.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub toy_fid: f64,
    pub cknna: f64,
    pub final_loss_diffusion: f64,
    pub final_loss_align: f64,
    /// Held-out cosine between the warmed-up span's projection and the
    /// teacher, measured on the final model.
    pub l2r_alignment: f64,
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ArmResult>,
    pub median_toy_fid: BTreeMap<Arm, f64>,
    pub median_cknna: BTreeMap<Arm, f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ComparisonTable {
    pub fn fid(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.seed == seed)
            .map(|r| r.toy_fid)
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>6} {:>10} {:>8} {:>9}", "arm", "seed", "toy_fid", "cknna", "l2r_cos")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:>6} {:>10.5} {:>8.4} {:>9.4}",
                r.arm, r.seed, r.toy_fid, r.cknna, r.l2r_alignment
            )?;
        }
        for (arm, m) in &self.median_toy_fid {
            writeln!(f, "median {arm}: toy_fid {m:.5} cknna {:.4}", self.median_cknna[arm])?;
        }
        Ok(())
    }
}

/// Every arm over the configured seeds with identical step budgets.
pub fn run_experiment(lab: &Lab, arms: &[Arm]) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for &arm in arms {
        for &seed in &lab.config.seeds {
            let (model, run) = lab.run(arm, seed, None)?;
            rows.push(summarize(lab, &model, &run)?);
        }
    }
    let mut median_toy_fid = BTreeMap::new();
    let mut median_cknna = BTreeMap::new();
    for &arm in arms {
        let of = |f: fn(&ArmResult) -> f64| median(&rows.iter().filter(|r| r.arm == arm).map(f).collect::<Vec<_>>());
        median_toy_fid.insert(arm, of(|r| r.toy_fid));
        median_cknna.insert(arm, of(|r| r.cknna));
    }
    Ok(ComparisonTable {
        rows,
        median_toy_fid,
        median_cknna,
    })
}

fn summarize(lab: &Lab, model: &Backbone, run: &TrainRun) -> Result<ArmResult> {
    let m = run
        .final_metrics()
        .ok_or_else(|| Error::Contract("run finished without a final evaluation".into()))?;
    let last = run
        .losses
        .last()
        .ok_or_else(|| Error::Contract("run recorded no steps".into()))?;
    Ok(ArmResult {
        arm: run.arm,
        seed: run.seed,
        toy_fid: m.toy_fid,
        cknna: m.cknna,
        final_loss_diffusion: last.loss_diffusion,
        final_loss_align: last.loss_align,
        l2r_alignment: lab.evaluator.warmup_alignment(model)?,
        optimizer_steps: run.optimizer_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ErwDepth,
    /// First warmed-up block (placement of the warmup span).
    ErwStart,
    ProjTap,
    C0,
    WarmupFrac,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::ErwDepth,
        SweepAxis::ErwStart,
        SweepAxis::ProjTap,
        SweepAxis::C0,
        SweepAxis::WarmupFrac,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ErwDepth => "erw_depth",
            SweepAxis::ErwStart => "erw_start",
            SweepAxis::ProjTap => "proj_tap",
            SweepAxis::C0 => "c0",
            SweepAxis::WarmupFrac => "warmup_frac",
        }
    }

    fn integral(self) -> bool {
        matches!(self, SweepAxis::ErwDepth | SweepAxis::ErwStart | SweepAxis::ProjTap)
    }

    /// `cfg` with this axis set to `value`, validated.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let field = self.as_str();
        if self.integral() && (value < 0.0 || value.fract() != 0.0) {
            return Err(Error::config(field, format!("{value} is not a non-negative integer")));
        }
        let mut out = cfg.clone();
        match self {
            SweepAxis::ErwDepth => out.backbone.erw_depth = value as usize,
            SweepAxis::ErwStart => out.backbone.erw_start = value as usize,
            SweepAxis::ProjTap => out.backbone.proj_tap = value as usize,
            SweepAxis::C0 => out.trainer.c0 = value,
            SweepAxis::WarmupFrac => out.trainer.warmup_frac = value,
        }
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config("axis", format!("unknown axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub toy_fid: f64,
    pub cknna: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["axis", "value", "seed", "toy_fid", "cknna"];

/// One `arm` run per value per seed. Rows come back sorted by
/// `(value, seed)`. All values are validated before any training starts.
pub fn sweep(lab: &Lab, arm: Arm, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let configs: Vec<(f64, RunConfig)> = values
        .iter()
        .map(|&v| axis.apply(&lab.config, v).map(|c| (v, c)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in configs {
        let sub = lab.with_config(cfg)?;
        for &seed in &sub.config.seeds {
            let (_, run) = sub.run(arm, seed, None)?;
            let m = run
                .final_metrics()
                .ok_or_else(|| Error::Contract("run finished without a final evaluation".into()))?;
            rows.push(SweepRow {
                axis,
                value,
                seed,
                toy_fid: m.toy_fid,
                cknna: m.cknna,
            });
        }
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

/// Median `toy_fid` per swept value, in ascending value order.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if out.iter().all(|(v, _)| *v != r.value) {
            let fids: Vec<f64> = rows.iter().filter(|x| x.value == r.value).map(|x| x.toy_fid).collect();
            out.push((r.value, median(&fids)));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            r.toy_fid.to_string(),
            r.cknna.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Default cache location: `$ERW_CACHE_DIR`, else `.erw-cache`.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os("ERW_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".erw-cache"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = RunConfig::default();
        cfg.backbone.rep_dim = 8;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "backbone.rep_dim"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "seeds"));
        assert!(RunConfig::desk().validate().is_ok());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"nmae": "x"}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seeds": [7]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.backbone, BackboneConfig::default());
    }

    #[test]
    fn prep_hash_tracks_inputs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.trainer.c0 = 0.9;
        assert_eq!(a.prep_hash(), b.prep_hash());
        b.teacher.jitter = 0.1;
        assert_ne!(a.prep_hash(), b.prep_hash());
    }

    #[test]
    fn axes() {
        let cfg = RunConfig::default();
        for a in SweepAxis::ALL {
            assert_eq!(a.as_str().parse::<SweepAxis>().unwrap(), a);
        }
        assert_eq!(SweepAxis::ErwStart.apply(&cfg, 2.0).unwrap().backbone.l2r_end(), 4);
        assert!(SweepAxis::ErwStart.apply(&cfg, 3.0).is_err());
        assert!(SweepAxis::ErwDepth.apply(&cfg, 1.5).is_err());
        assert!(SweepAxis::WarmupFrac.apply(&cfg, 1.5).is_err());
        assert!("depth".parse::<SweepAxis>().is_err());
    }
}
