#![allow(dead_code)]

use std::ops::Range;

use erw_core::backbone::{Backbone, BackboneConfig};
use erw_core::interpolant::{forward_sample, velocity_target, InterpolantPath};
use erw_core::nn::Bound;
use erw_core::objectives::{total_loss, AlignWeight, AlignmentConfig, Batch, PhasePlan};
use erw_core::rng;
use erw_core::tensor::{grad_check_many, Elementwise, Tape, Tensor, Var};
use erw_core::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

pub fn unit_rows(r: &mut rng::Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v = rng::normals(r, n * d);
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn small_config() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        width: 8,
        erw_depth: 1,
        proj_tap: 2,
        head_hidden: 8,
        rep_dim: 4,
        time_dim: 4,
        ..Default::default()
    }
}

/// Depth-2 model with the zero-initialized output map moved off zero so
/// every path carries gradient.
pub fn small_model(seed: u64) -> Backbone {
    let mut model = Backbone::new(small_config(), seed).unwrap();
    let mut r = rng::stream(seed, 9);
    for id in model.output_ids() {
        for x in model.params.get_mut(id).values.iter_mut() {
            *x = 0.3 * rng::normal(&mut r);
        }
    }
    model
}

pub fn random_batch(model: &Backbone, n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, 0);
    let d = model.config.latent_dim;
    Batch {
        z0: rng::normals(&mut r, n * d),
        eps: rng::normals(&mut r, n * d),
        t: (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        teacher: unit_rows(&mut r, n, model.config.rep_dim),
    }
}

pub fn plan() -> PhasePlan {
    PhasePlan {
        warmup_steps: 5,
        full_steps: 10,
        batch_size: 6,
    }
}

/// Small mixture, briefly trained teacher and a width-8 backbone: enough to
/// exercise the trainer contracts in milliseconds per run.
pub fn tiny_config() -> erw_core::experiment::RunConfig {
    use erw_core::data::DatasetSpec;
    let mut cfg = erw_core::experiment::RunConfig {
        name: "tiny".into(),
        dataset: DatasetSpec::GaussianMixture {
            n: 256,
            classes: 4,
            spread: 0.3,
        },
        seeds: vec![0, 1],
        ..Default::default()
    };
    cfg.teacher.steps = 30;
    cfg.teacher.batch_size = 64;
    cfg.teacher.quality_gate = None;
    cfg.backbone.width = 8;
    cfg.backbone.head_hidden = 8;
    cfg.trainer.budget_steps = 50;
    cfg.trainer.batch_size = 16;
    cfg.trainer.metric_every = 25;
    cfg.trainer.eval.n_heldout = 64;
    cfg.trainer.eval.n_samples = 64;
    cfg.trainer.eval.cknna_n = 64;
    cfg.trainer.eval.sampler.n_steps = 10;
    cfg
}

pub fn tiny_lab() -> erw_core::experiment::Lab {
    erw_core::experiment::Lab::open(tiny_config(), None, true).unwrap()
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn positive(tape: &mut Tape, x: Var) -> Result<Var> {
    // exp keeps log/sqrt inputs in their domain for any perturbation.
    tape.exp(x)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -1.7)),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |t, v| t.mul_row(v[0], v[1])),
        ("silu", vec![vec![3, 4]], |t, v| t.silu(v[0])),
        ("exp", vec![vec![3, 4]], |t, v| t.exp(v[0])),
        ("log", vec![vec![3, 4]], |t, v| {
            let p = positive(t, v[0])?;
            t.log(p)
        }),
        ("sqrt", vec![vec![3, 4]], |t, v| {
            let p = positive(t, v[0])?;
            t.sqrt(p)
        }),
        ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax_rows(v[0])),
        ("log_softmax_rows", vec![vec![3, 4]], |t, v| t.log_softmax_rows(v[0])),
        ("normalize_rows", vec![vec![3, 4]], |t, v| t.normalize_rows(v[0])),
        ("diag", vec![vec![4, 4]], |t, v| t.diag(v[0])),
        ("elementwise_mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.elementwise(Elementwise::Mul, &[v[0], v[1]])
        }),
        ("elementwise_silu", vec![vec![2, 3]], |t, v| t.elementwise(Elementwise::Silu, &[v[0]])),
    ]
}

/// `Σ W ⊙ op(x)` with a fixed random `W`, so every output coordinate
/// contributes to the checked gradient with a different weight.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(&shape, rng::normals(&mut rng::stream(seed, 1), n.max(1)))?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub fn grad_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(seed, 0);
    shapes
        .iter()
        .map(|s| Tensor::new(s.clone(), rng::normals(&mut r, s.iter().product())).unwrap())
        .collect()
}

/// Worst relative gradient error per op over `seeds`.
pub fn op_grad_errors(seeds: Range<u64>) -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, op)| {
            let worst = seeds.clone().fold(0.0f64, |worst, seed| {
                let err = grad_check_many(
                    |tape, v| {
                        let out = op(tape, v)?;
                        weighted(tape, out, seed)
                    },
                    &grad_inputs(&shapes, seed),
                    GRAD_STEP,
                )
                .unwrap();
                worst.max(err)
            });
            (name, worst)
        })
        .collect()
}

/// Worst relative gradient error of the total loss on a depth-2 backbone,
/// at a warmup step and at a joint-phase step.
pub fn full_loss_grad_errors(seeds: Range<u64>) -> [f64; 2] {
    let align = AlignmentConfig::default();
    let path = InterpolantPath::linear();
    let weight = AlignWeight::Decay { c0: 0.5, tau: 3.0 };
    let mut worst = [0.0f64; 2];
    for seed in seeds {
        let model = small_model(seed);
        let batch = random_batch(&model, 6, seed + 1000);
        // k = 2 is inside warmup, k = 7 in the joint phase.
        for (slot, k) in [(0, 2), (1, 7)] {
            let err = grad_check_many(
                |tape, vars| {
                    let bound = Bound::from_vars(vars.to_vec());
                    let g = total_loss(tape, &bound, &model, &batch, &plan(), &weight, &align, &path, k)?;
                    Ok(g.total)
                },
                &model.params.tensors().unwrap(),
                GRAD_STEP,
            )
            .unwrap();
            worst[slot] = worst[slot].max(err);
        }
    }
    worst
}

/// Worst error of the central difference of `forward_sample` in `t` against
/// `velocity_target`, over a fixed set of points and times.
pub fn ddt_error(path: &InterpolantPath, h: f64) -> f64 {
    let mut r = rng::stream(42, 0);
    let mut worst: f64 = 0.0;
    for i in 1..20 {
        let t = i as f64 / 20.0;
        let z0 = rng::normals(&mut r, 3);
        let eps = rng::normals(&mut r, 3);
        let up = forward_sample(&z0, &eps, t + h, path).unwrap();
        let down = forward_sample(&z0, &eps, t - h, path).unwrap();
        let v = velocity_target(&z0, &eps, t, path).unwrap();
        for k in 0..3 {
            worst = worst.max(((up[k] - down[k]) / (2.0 * h) - v[k]).abs());
        }
    }
    worst
}
