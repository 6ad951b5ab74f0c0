//! End-to-end acceptance suite. Each test prints one line of the form
//! `criterion N PASS|FAIL: ...`; run with `--nocapture` to see them all.
//! The tests take a shared lock so wall-clock limits are measured without
//! contention from the others.

mod common;

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use erw_core::backbone::Backbone;
use erw_core::experiment::{median, run_experiment, sweep, Lab, RunConfig, SweepAxis};
use erw_core::interpolant::{GaussianOracle, InterpolantPath, PathKind, SamplerConfig};
use erw_core::metrics::{cka, cknna, frechet_distance, toy_fid, KernelMatrix};
use erw_core::objectives::LambdaSchedule;
use erw_core::rng;
use erw_core::teacher::knn_accuracy;
use erw_core::trainer::{run_phase1, Arm, TrainState};
use erw_core::verify::{
    joint_score_decomposition_check, marginal_consistency_check, sampler_oracle_check, DiscreteToyWorld,
};
use nalgebra::{DMatrix, DVector};

static GATE: Mutex<()> = Mutex::new(());
static DESK: OnceLock<Lab> = OnceLock::new();

fn desk() -> &'static Lab {
    DESK.get_or_init(|| Lab::open(RunConfig::desk(), None, true).unwrap())
}

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n}: {detail}");
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let ops = common::op_grad_errors(0..100);
    let [warmup, joint] = common::full_loss_grad_errors(0..100);
    let secs = started.elapsed().as_secs_f64();
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let pass = worst <= common::GRAD_TOL && warmup <= common::GRAD_TOL && joint <= common::GRAD_TOL && secs < 60.0;
    report(
        1,
        pass,
        format!(
            "{} ops, worst {worst:.2e} ({worst_op}); losses warmup {warmup:.2e} joint {joint:.2e}; {secs:.1}s",
            ops.len()
        ),
    );
}

#[test]
fn criterion_02_interpolant_identities() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let path = InterpolantPath::linear();
    let mut r = rng::stream(7, 0);
    let mut exact = true;
    for _ in 0..100 {
        let z0 = rng::normals(&mut r, 3);
        let eps = rng::normals(&mut r, 3);
        exact &= erw_core::interpolant::forward_sample(&z0, &eps, 0.0, &path).unwrap() == z0;
        exact &= erw_core::interpolant::forward_sample(&z0, &eps, 1.0, &path).unwrap() == eps;
    }
    let trig = InterpolantPath {
        kind: PathKind::Trigonometric,
    };
    let (coarse, fine) = (common::ddt_error(&trig, 1e-3), common::ddt_error(&trig, 1e-4));
    let ratio = coarse / fine;
    let linear = common::ddt_error(&path, 1e-3).max(common::ddt_error(&path, 1e-4));
    let pass = exact && (80.0..120.0).contains(&ratio) && linear < 1e-10;
    report(
        2,
        pass,
        format!("boundaries exact {exact}; d/dt error ratio {ratio:.1} (h 1e-3 vs 1e-4); linear path {linear:.1e}"),
    );
}

#[test]
fn criterion_03_sampler_oracle() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let oracle = GaussianOracle::new(vec![3.0, 0.0], vec![1.0, 0.0, 0.0, 0.25]).unwrap();
    let cfg = SamplerConfig::default();
    let started = Instant::now();
    let r = sampler_oracle_check(&oracle, &cfg, 4096).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass = cfg.n_steps == 250
        && cfg.t_min == 0.04
        && r.mean_error <= 0.05
        && r.cov_frobenius_error <= 0.1
        && secs < 30.0;
    report(
        3,
        pass,
        format!(
            "mean error {:.4}, covariance error {:.4}, {} steps, {secs:.1}s",
            r.mean_error, r.cov_frobenius_error, cfg.n_steps
        ),
    );
}

#[test]
fn criterion_04_score_decomposition() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let w = DiscreteToyWorld::four();
    let pts = w.sample_grid(20);
    let g = joint_score_decomposition_check(&w, &[0.1, 0.5, 0.9], &pts, 1e-5).unwrap();
    let m = [0.1, 0.5, 0.9]
        .iter()
        .map(|&t| marginal_consistency_check(&w, t, &pts).unwrap())
        .fold(0.0f64, |a, m| a.max(m.marginal).max(m.posterior_normalization));
    let pass = g.analytic <= 1e-10 && g.finite_difference <= 1e-6 && m <= 1e-12;
    report(
        4,
        pass,
        format!(
            "analytic gap {:.1e}, finite-difference gap {:.1e}, marginal gap {m:.1e}, {} evaluations",
            g.analytic, g.finite_difference, g.evaluations
        ),
    );
}

#[test]
fn criterion_05_metric_identities() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let f = rng::normals(&mut rng::stream(11, 0), 64 * 5);
    let k = KernelMatrix::linear(&f, 5, "f").unwrap();
    let cka_self = (cka(&k, &k).unwrap() - 1.0).abs();
    let cknna_self = (cknna(&f, 5, &f, 5, 6).unwrap() - 1.0).abs();

    // Mutual-kNN alignment over every ordered pair, neighbours by full sort.
    let brute = |a: &[f64], b: &[f64], d: usize, kk: usize| -> f64 {
        let n = a.len() / d;
        let dot = |x: &[f64], i: usize, j: usize| (0..d).map(|c| x[i * d + c] * x[j * d + c]).sum::<f64>();
        let nn = |x: &[f64], i: usize| -> Vec<usize> {
            let mut o: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            o.sort_by(|&p, &q| dot(x, i, q).total_cmp(&dot(x, i, p)).then(p.cmp(&q)));
            o.truncate(kk);
            o
        };
        let mut s = 0.0;
        for i in 0..n {
            let (na, nb) = (nn(a, i), nn(b, i));
            let ea = (0..n).map(|l| dot(a, i, l)).sum::<f64>() / n as f64;
            let eb = (0..n).map(|l| dot(b, i, l)).sum::<f64>() / n as f64;
            for j in 0..n {
                if j != i && na.contains(&j) && nb.contains(&j) {
                    s += (dot(a, i, j) - ea) * (dot(b, i, j) - eb);
                }
            }
        }
        s
    };
    let mut brute_gap: f64 = 0.0;
    for seed in 0..10 {
        let a = rng::normals(&mut rng::stream(seed, 0), 12 * 3);
        let b: Vec<f64> = a
            .iter()
            .zip(rng::normals(&mut rng::stream(seed, 1), 12 * 3))
            .map(|(x, e)| x + 0.3 * e)
            .collect();
        let slow = brute(&a, &b, 3, 3) / (brute(&a, &a, 3, 3) * brute(&b, &b, 3, 3)).sqrt();
        brute_gap = brute_gap.max((cknna(&a, 3, &b, 3, 3).unwrap() - slow).abs());
    }

    let one_d = frechet_distance(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::identity(1, 1),
        &DVector::from_vec(vec![3.0]),
        &DMatrix::identity(1, 1),
    )
    .unwrap();
    let two_d = frechet_distance(
        &DVector::zeros(2),
        &DMatrix::identity(2, 2),
        &DVector::zeros(2),
        &(DMatrix::identity(2, 2) * 4.0),
    )
    .unwrap();
    // Equal spreads, means 0 and 3.
    let shifted = toy_fid(&[-1.0, 1.0], &[2.0, 4.0], 1).unwrap();
    let fid_gap = (one_d - 9.0).abs().max((two_d - 2.0).abs()).max((shifted - 9.0).abs());

    let pass = cka_self <= 1e-10 && cknna_self <= 1e-9 && brute_gap <= 1e-10 && fid_gap <= 1e-6;
    report(
        5,
        pass,
        format!(
            "|cka-1| {cka_self:.1e}, |cknna-1| {cknna_self:.1e}, brute-force gap {brute_gap:.1e}, toy_fid closed-form gap {fid_gap:.1e}"
        ),
    );
}

#[test]
fn criterion_06_schedule() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let s = LambdaSchedule::new(0.5, 3000.0).unwrap();
    let start = (s.at(0) - 0.5).abs();
    let at_tau = (s.at(3000) - 0.5 / std::f64::consts::E).abs();
    let desk = RunConfig::desk();
    let full = desk.trainer.budget_steps - (desk.trainer.warmup_frac * desk.trainer.budget_steps as f64).round() as u64;
    let d = LambdaSchedule::new(desk.trainer.c0, full as f64 / 3.0).unwrap();
    let decreasing = (0..100_000u64).all(|k| s.at(k + 1) < s.at(k) && d.at(k + 1) < d.at(k));
    let pass = start <= 1e-12 && at_tau <= 1e-12 && decreasing;
    report(
        6,
        pass,
        format!("|λ(0)-c0| {start:.1e}, |λ(τ)-c0/e| {at_tau:.1e}, strictly decreasing over 1e5 steps {decreasing}"),
    );
}

#[test]
fn criterion_07_decoupling() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let mut pass = true;
    let mut checks = 0;
    for (start, depth, tap) in [(0, 2, 4), (1, 2, 3)] {
        let mut cfg = common::tiny_config();
        cfg.backbone.depth = 4;
        cfg.backbone.erw_start = start;
        cfg.backbone.erw_depth = depth;
        cfg.backbone.proj_tap = tap;
        let lab = Lab::open(cfg, None, true).unwrap();
        let model = Backbone::new(lab.config.backbone.clone(), 0).unwrap();
        let (_, r2g) = model.partition_params();
        let before = model.hash_of(&r2g);
        let mut state = TrainState::new(model, Arm::Erw, 0, &lab.config.trainer).unwrap();
        // The trainer aborts if any R2G gradient is nonzero.
        let ok = run_phase1(&mut state, &lab.corpus, None).is_ok();
        let (a, b) = state.run.r2g_hash.clone().unwrap();
        pass &= ok
            && a == before
            && b == before
            && state.model.hash_of(&r2g) == before
            && state.run.decoupling_checks == state.run.plan.warmup_steps;
        checks += state.run.decoupling_checks;
    }
    report(
        7,
        pass,
        format!("{checks} warmup steps with zero R2G gradient and unchanged R2G hash"),
    );
}

#[test]
fn criterion_08_desk_efficiency() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let lab = desk();
    let started = Instant::now();
    let table = run_experiment(lab, &Arm::ALL).unwrap();
    let secs = started.elapsed().as_secs_f64();
    println!("{table}");
    let (erw, plain, repa) = (
        table.median_toy_fid[&Arm::Erw],
        table.median_toy_fid[&Arm::Plain],
        table.median_toy_fid[&Arm::Repa],
    );
    let soft = lab
        .config
        .seeds
        .iter()
        .filter(|&&s| table.fid(Arm::Erw, s).unwrap() <= table.fid(Arm::Repa, s).unwrap())
        .count();
    let pass = erw < plain && secs < 900.0;
    report(
        8,
        pass,
        format!(
            "median toy_fid erw {erw:.4} vs plain {plain:.4} (repa {repa:.4}); soft erw <= repa in {soft}/{} seeds ({}); {secs:.0}s",
            lab.config.seeds.len(),
            if soft >= 3 { "PASS" } else { "FAIL" }
        ),
    );
}

#[test]
fn criterion_09_placement() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let lab = desk();
    let starts = [0.0, 1.0, 2.0];
    let rows = sweep(lab, Arm::Erw, SweepAxis::ErwStart, &starts).unwrap();
    let fid = |v: f64, s: u64| rows.iter().find(|r| r.value == v && r.seed == s).unwrap().toy_fid;
    let medians: Vec<f64> = starts
        .iter()
        .map(|&v| median(&rows.iter().filter(|r| r.value == v).map(|r| r.toy_fid).collect::<Vec<_>>()))
        .collect();
    let soft = lab
        .config
        .seeds
        .iter()
        .filter(|&&s| fid(0.0, s) <= fid(1.0, s).min(fid(2.0, s)))
        .count();
    let pass = medians[0] <= medians[1] && medians[0] <= medians[2];
    report(
        9,
        pass,
        format!(
            "median toy_fid by start 0/1/2: {:.4} / {:.4} / {:.4}; soft start 0 best in {soft}/{} seeds ({})",
            medians[0],
            medians[1],
            medians[2],
            lab.config.seeds.len(),
            if soft >= 3 { "PASS" } else { "FAIL" }
        ),
    );
}

#[test]
fn criterion_10_warmup_quality() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let lab = desk();
    let cosines: Vec<f64> = lab
        .config
        .seeds
        .iter()
        .map(|&seed| {
            let model = Backbone::new(lab.config.backbone.clone(), seed).unwrap();
            let mut state = TrainState::new(model, Arm::Erw, seed, &lab.config.trainer).unwrap();
            run_phase1(&mut state, &lab.corpus, None).unwrap();
            lab.evaluator.warmup_alignment(&state.model).unwrap()
        })
        .collect();
    let worst = cosines.iter().copied().fold(f64::INFINITY, f64::min);

    let cfg = &lab.config;
    let heldout = cfg.dataset.generate_heldout(cfg.trainer.eval.n_heldout, cfg.data_seed).unwrap();
    let teacher = &lab.prepared.teacher;
    let reference = teacher.embed(&lab.train_set.points).unwrap();
    let query = teacher.embed(&heldout.points).unwrap();
    let knn = knn_accuracy(
        &reference,
        &lab.train_set.labels,
        &query,
        &heldout.labels,
        cfg.teacher.rep_dim,
        cfg.teacher.knn_k,
    );
    let pass = worst > 0.8 && knn > 0.9;
    report(
        10,
        pass,
        format!(
            "post-warmup held-out cosine min {worst:.3} over {} seeds (mean {:.3}); teacher held-out kNN accuracy {knn:.3}",
            cosines.len(),
            cosines.iter().sum::<f64>() / cosines.len() as f64
        ),
    );
}
