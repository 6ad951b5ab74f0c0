//! Synthetic labelled point clouds.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Radius of the circle carrying the mixture component means.
pub const MIXTURE_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub name: String,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    /// Row-major `n × dim`.
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` gathered into a fresh row-major buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.point(i).iter().copied()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// `classes` isotropic Gaussians with means evenly spaced on a circle of
/// radius 4 and standard deviation `spread`. Point `i` belongs to component
/// `i mod classes`.
pub fn make_gaussian_mixture(n: usize, classes: usize, spread: f64, seed: u64) -> Result<ToyDataset> {
    if classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Argument(format!("n = {n} is smaller than classes = {classes}")));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Argument(format!("spread must be positive, got {spread}")));
    }
    mixture_with_stream(n, classes, spread, seed, streams::DATA)
}

fn mixture_with_stream(n: usize, classes: usize, spread: f64, seed: u64, stream: u64) -> Result<ToyDataset> {
    let mut rng = rng::stream(seed, stream);
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = 2.0 * PI * c as f64 / classes as f64;
        points.push(MIXTURE_RADIUS * angle.cos() + spread * rng::normal(&mut rng));
        points.push(MIXTURE_RADIUS * angle.sin() + spread * rng::normal(&mut rng));
        labels.push(c);
    }
    Ok(ToyDataset {
        name: format!("mixture-c{classes}-s{spread}"),
        seed,
        dim: 2,
        classes,
        points,
        labels,
    })
}

/// Uniform samples on the "black" squares of a `cells × cells` board tiling
/// `[-2, 2]²`; a square `(ix, iy)` is occupied when `ix + iy` is even. The
/// label is the column parity `ix mod 2`, which splits occupied squares into
/// two equally sized classes.
pub fn make_checkerboard(n: usize, cells: usize, seed: u64) -> Result<ToyDataset> {
    checkerboard_with_stream(n, cells, seed, streams::DATA)
}

fn checkerboard_with_stream(n: usize, cells: usize, seed: u64, stream: u64) -> Result<ToyDataset> {
    if cells < 2 || cells % 2 != 0 {
        return Err(Error::Argument(format!("cells must be even and >= 2, got {cells}")));
    }
    if n == 0 {
        return Err(Error::Argument("n must be positive".into()));
    }
    let occupied = occupied_cells(cells);
    let width = 4.0 / cells as f64;
    let mut rng = rng::stream(seed, stream);
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (ix, iy) = occupied[rng.random_range(0..occupied.len())];
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        points.push(-2.0 + (ix as f64 + u) * width);
        points.push(-2.0 + (iy as f64 + v) * width);
        labels.push(ix % 2);
    }
    Ok(ToyDataset {
        name: format!("checkerboard-{cells}"),
        seed,
        dim: 2,
        classes: 2,
        points,
        labels,
    })
}

/// Occupied `(column, row)` squares of the board in row-major order.
pub fn occupied_cells(cells: usize) -> Vec<(usize, usize)> {
    (0..cells)
        .flat_map(|iy| (0..cells).map(move |ix| (ix, iy)))
        .filter(|(ix, iy)| (ix + iy) % 2 == 0)
        .collect()
}

/// Which square of the board a point falls in.
pub fn cell_of(point: &[f64], cells: usize) -> (usize, usize) {
    let width = 4.0 / cells as f64;
    let idx = |x: f64| (((x + 2.0) / width).floor().max(0.0) as usize).min(cells - 1);
    (idx(point[0]), idx(point[1]))
}

/// Declarative dataset description used by run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    GaussianMixture { n: usize, classes: usize, spread: f64 },
    Checkerboard { n: usize, cells: usize },
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<ToyDataset> {
        match *self {
            DatasetSpec::GaussianMixture { n, classes, spread } => make_gaussian_mixture(n, classes, spread, seed),
            DatasetSpec::Checkerboard { n, cells } => make_checkerboard(n, cells, seed),
        }
    }

    /// An independent draw of `n` points from the same distribution, used
    /// for held-out evaluation.
    pub fn generate_heldout(&self, n: usize, seed: u64) -> Result<ToyDataset> {
        self.validate()?;
        match *self {
            DatasetSpec::GaussianMixture { classes, spread, .. } => {
                mixture_with_stream(n, classes, spread, seed, streams::HELDOUT)
            }
            DatasetSpec::Checkerboard { cells, .. } => checkerboard_with_stream(n, cells, seed, streams::HELDOUT),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DatasetSpec::GaussianMixture { n, classes, spread } => {
                if classes < 2 {
                    return Err(Error::config("dataset.classes", "must be >= 2"));
                }
                if n < classes {
                    return Err(Error::config("dataset.n", "must be >= classes"));
                }
                if !(spread > 0.0) {
                    return Err(Error::config("dataset.spread", "must be positive"));
                }
            }
            DatasetSpec::Checkerboard { n, cells } => {
                if n == 0 {
                    return Err(Error::config("dataset.n", "must be positive"));
                }
                if cells < 2 || cells % 2 != 0 {
                    return Err(Error::config("dataset.cells", "must be even and >= 2"));
                }
            }
        }
        Ok(())
    }
}
