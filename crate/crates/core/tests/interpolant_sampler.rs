mod common;

use std::time::Instant;

use erw_core::interpolant::{
    em_sample, forward_sample, moments, score_from_velocity, DiffusionRule, GaussianOracle,
    InterpolantPath, PathKind, SamplerConfig,
};
use erw_core::rng;
use erw_core::Error;
use proptest::prelude::*;

const TRIG: InterpolantPath = InterpolantPath {
    kind: PathKind::Trigonometric,
};

#[test]
fn velocity_is_time_derivative_of_the_path() {
    // Curved path: truncation error drops a hundredfold per decade of h.
    let (coarse, fine) = (common::ddt_error(&TRIG, 1e-3), common::ddt_error(&TRIG, 1e-4));
    let ratio = coarse / fine;
    assert!((80.0..120.0).contains(&ratio), "{coarse} {fine} {ratio}");
    // Straight path: the difference quotient is exact up to roundoff.
    let lin = InterpolantPath::linear();
    assert!(common::ddt_error(&lin, 1e-3) < 1e-11);
    assert!(common::ddt_error(&lin, 1e-4) < 1e-10);
}

#[test]
fn boundary_conditions_are_exact() {
    let mut r = rng::stream(1, 0);
    for path in [InterpolantPath::linear(), TRIG] {
        for _ in 0..50 {
            let z0 = rng::normals(&mut r, 4);
            let eps = rng::normals(&mut r, 4);
            assert_eq!(forward_sample(&z0, &eps, 0.0, &path).unwrap(), z0);
            if path.kind == PathKind::Linear {
                assert_eq!(forward_sample(&z0, &eps, 1.0, &path).unwrap(), eps);
            } else {
                // cos(π/2) is 6e-17 in floating point.
                let end = forward_sample(&z0, &eps, 1.0, &path).unwrap();
                assert!(end.iter().zip(&eps).all(|(a, b)| (a - b).abs() <= 1e-15));
            }
        }
    }
}

fn oracle() -> GaussianOracle {
    GaussianOracle::new(vec![3.0, 0.0], vec![1.0, 0.0, 0.0, 0.25]).unwrap()
}

fn sample_oracle(cfg: &SamplerConfig, n: usize) -> erw_core::Result<Vec<f64>> {
    let o = oracle();
    let path = InterpolantPath::linear();
    em_sample(|z, t| o.velocity(z, t, &path), cfg, &path, n, 2)
}

#[test]
fn gaussian_oracle_moments_are_recovered() {
    let started = Instant::now();
    let x = sample_oracle(&SamplerConfig::default(), 4096).unwrap();
    let (mean, cov) = moments(&x, 2);
    let o = oracle();
    for k in 0..2 {
        assert!((mean[k] - o.mean[k]).abs() <= 0.05, "{mean:?}");
    }
    let frob = cov.iter().zip(&o.cov).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(frob <= 0.1, "{cov:?}");
    assert!(started.elapsed().as_secs() < 30);
}

#[test]
fn flipped_score_sign_breaks_the_sampler() {
    let cfg = SamplerConfig {
        flip_score_sign: true,
        ..SamplerConfig::default()
    };
    match sample_oracle(&cfg, 4096) {
        Err(Error::SamplerDivergence { .. }) => {}
        Ok(x) => {
            let (_, cov) = moments(&x, 2);
            let frob = cov.iter().zip(&oracle().cov).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(frob > 0.1, "{cov:?}");
        }
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn probability_flow_variant_also_matches() {
    let cfg = SamplerConfig {
        diffusion: DiffusionRule::Zero,
        ..SamplerConfig::default()
    };
    let x = sample_oracle(&cfg, 2048).unwrap();
    let (mean, cov) = moments(&x, 2);
    assert!((mean[0] - 3.0).abs() < 0.1 && mean[1].abs() < 0.1, "{mean:?}");
    assert!((cov[0] - 1.0).abs() < 0.15 && (cov[3] - 0.25).abs() < 0.05, "{cov:?}");
}

#[test]
fn chains_do_not_depend_on_batch_size() {
    let cfg = SamplerConfig {
        n_steps: 30,
        seed: 5,
        ..SamplerConfig::default()
    };
    let big = sample_oracle(&cfg, 16).unwrap();
    let small = sample_oracle(&cfg, 4).unwrap();
    assert_eq!(&big[..8], &small[..]);
    assert_eq!(sample_oracle(&cfg, 16).unwrap(), big);
    let other = sample_oracle(&SamplerConfig { seed: 6, ..cfg }, 16).unwrap();
    assert_ne!(other, big);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_score_matches_score_from_velocity(seed in 0u64..10_000, t in 0.05f64..0.95) {
        let o = oracle();
        let path = InterpolantPath::linear();
        let z = rng::normals(&mut rng::stream(seed, 0), 2);
        let v = o.velocity(&z, t, &path).unwrap();
        let a = o.score(&z, t, &path).unwrap();
        let b = score_from_velocity(&z, &v, t, &path).unwrap();
        for k in 0..2 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-9 * (1.0 + a[k].abs()));
        }
    }
}
