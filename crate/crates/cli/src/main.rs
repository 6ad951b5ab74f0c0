use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use erw_core::backbone::Backbone;
use erw_core::checkpoint::file_hash;
use erw_core::experiment::{default_cache_dir, sweep, sweep_medians, write_sweep_csv, Lab, RunConfig, SweepAxis};
use erw_core::trainer::Arm;
use erw_core::verify::{run_oracle_suite, VerifyOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "erw", version, about = "Representation-warmup lab for flow-matching models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Prep {
    /// Fail instead of training a teacher when the cache has none.
    #[arg(long)]
    no_prep: bool,
}

impl Prep {
    fn lab(&self, cfg: RunConfig) -> Result<Lab> {
        Ok(Lab::open(cfg, Some(&default_cache_dir()), !self.no_prep)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm and write config.json, metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "erw")]
        arm: Arm,
        /// Defaults to the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<out_dir>/<name>-<arm>-s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        prep: Prep,
    },
    /// Sample a trained run and write eval.json.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Sampler seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        prep: Prep,
    },
    /// Run the oracle checks; exits nonzero if any fails.
    Verify {
        /// Directory for verify_report.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Negative control: reverse the score sign in the sampler check.
        #[arg(long, hide = true)]
        flip_score_sign: bool,
    },
    /// One run per value per seed along an ablation axis; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// erw_depth, erw_start, proj_tap, c0 or warmup_frac.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "erw")]
        arm: Arm,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        prep: Prep,
    },
    /// Write generated points, decoded to data space, as CSV.
    Sample {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<run_dir>/samples.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        prep: Prep,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("invalid config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

const MODEL_FILE: &str = "model.erwm";
const RUN_FILE: &str = "run.json";

fn train(config: Option<&Path>, arm: Arm, seed: Option<u64>, out: Option<PathBuf>, prep: &Prep) -> Result<()> {
    let mut cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    cfg.seeds = vec![seed];
    let dir = out.unwrap_or_else(|| cfg.out_dir.join(format!("{}-{arm}-s{seed}", cfg.name)));
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.json"))?;
    let lab = prep.lab(cfg)?;
    let ckpt = dir.join("checkpoints");
    if lab.config.trainer.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt)?;
    }
    let (model, run) = lab.run(arm, seed, (lab.config.trainer.checkpoint_every > 0).then_some(ckpt.as_path()))?;
    run.write_metrics_csv(&dir.join("metrics.csv"))?;
    model.save(&dir.join(MODEL_FILE))?;
    let summary = json!({
        "arm": arm,
        "seed": seed,
        "optimizer_steps": run.optimizer_steps,
        "warmup_steps": run.plan.warmup_steps,
        "phase_seconds": run.phase_seconds,
        "r2g_hash": run.r2g_hash,
        "final": run.final_metrics(),
    });
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    if let Some(m) = run.final_metrics() {
        println!("{arm} seed {seed}: toy_fid {:.5} cknna {:.4}", m.toy_fid, m.cknna);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

struct TrainedRun {
    lab: Lab,
    model: Backbone,
    seed: u64,
    model_path: PathBuf,
}

fn open_run(dir: &Path, prep: &Prep, n_samples: Option<usize>) -> Result<TrainedRun> {
    let mut cfg = RunConfig::load(&dir.join("config.json")).context("run directory has no valid config.json")?;
    if let Some(n) = n_samples {
        cfg.trainer.eval.n_samples = n;
    }
    let model_path = dir.join(MODEL_FILE);
    if !model_path.exists() {
        bail!("missing checkpoint {}", model_path.display());
    }
    let model = Backbone::load(&model_path, cfg.backbone.clone())?;
    let seed = cfg.seeds[0];
    Ok(TrainedRun {
        lab: prep.lab(cfg)?,
        model,
        seed,
        model_path,
    })
}

fn eval(dir: &Path, n_samples: Option<usize>, seed: Option<u64>, prep: &Prep) -> Result<()> {
    let run = open_run(dir, prep, n_samples)?;
    let seed = seed.unwrap_or(run.seed);
    let ev = &run.lab.evaluator;
    let report = json!({
        "toy_fid": ev.toy_fid(&run.model, seed)?,
        "cknna": ev.cknna(&run.model)?,
        "n": ev.config.n_samples,
        "seed": seed,
        "checkpoint_hash": file_hash(&run.model_path)?,
    });
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(dir.join("eval.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

fn sample(dir: &Path, n: usize, seed: Option<u64>, out: Option<PathBuf>, prep: &Prep) -> Result<()> {
    let run = open_run(dir, prep, Some(n))?;
    let seed = seed.unwrap_or(run.seed);
    let z = run.lab.evaluator.sample(&run.model, seed)?;
    let x = run.lab.prepared.codec.decode(&z);
    let path = out.unwrap_or_else(|| dir.join("samples.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["x", "y"])?;
    for p in x.chunks(2) {
        w.write_record([p[0].to_string(), p[1].to_string()])?;
    }
    w.flush()?;
    println!("wrote {n} samples to {}", path.display());
    Ok(())
}

fn verify(out: &Path, flip_score_sign: bool) -> Result<bool> {
    let report = run_oracle_suite(VerifyOptions { flip_score_sign })?;
    print!("{}", report.table());
    std::fs::create_dir_all(out)?;
    let path = out.join("verify_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{} ({})", if report.passed { "all checks passed" } else { "FAILED" }, path.display());
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            arm,
            seed,
            out,
            prep,
        } => train(config.as_deref(), arm, seed, out, &prep)?,
        Command::Eval {
            run_dir,
            n_samples,
            seed,
            prep,
        } => eval(&run_dir, n_samples, seed, &prep)?,
        Command::Verify { out, flip_score_sign } => return verify(&out, flip_score_sign),
        Command::Sweep {
            config,
            axis,
            values,
            arm,
            out,
            prep,
        } => {
            let cfg = load_config(config.as_deref())?;
            for v in &values {
                axis.apply(&cfg, *v)?;
            }
            let lab = prep.lab(cfg)?;
            let rows = sweep(&lab, arm, axis, &values)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&rows, &path)?;
            for (v, m) in sweep_medians(&rows) {
                println!("{axis}={v}: median toy_fid {m:.5}");
            }
            println!("wrote {}", path.display());
        }
        Command::Sample {
            run_dir,
            n,
            seed,
            out,
            prep,
        } => sample(&run_dir, n, seed, out, &prep)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
