//! Frozen representation teacher.
//!
//! A small MLP trained contrastively on jittered pairs `(x, x + jitter·ξ)`,
//! then frozen. Outputs are unit vectors so alignment can use cosine
//! similarity directly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Array, TEACHER_MAGIC};
use crate::codec::LatentCodec;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamSet};
use crate::objectives::nt_xent;
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{self, streams};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub rep_dim: usize,
    pub jitter: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Neighbour count for the held-out classification gate.
    pub knn_k: usize,
    /// Minimum held-out k-NN accuracy; `None` skips the gate.
    pub quality_gate: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            rep_dim: 16,
            jitter: 0.3,
            steps: 1500,
            batch_size: 256,
            lr: 1e-3,
            temperature: 0.1,
            knn_k: 10,
            quality_gate: Some(0.9),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("teacher.hidden", "must be >= 1"));
        }
        if self.rep_dim == 0 {
            return Err(Error::config("teacher.rep_dim", "must be >= 1"));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("teacher.jitter", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("teacher.batch_size", "must be >= 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("teacher.lr", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("teacher.temperature", "must be positive"));
        }
        if self.knn_k == 0 {
            return Err(Error::config("teacher.knn_k", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    pub dim: usize,
    pub hidden: usize,
    pub rep_dim: usize,
    pub seed: u64,
    params: ParamSet,
    mlp: Mlp,
    frozen_hash: String,
}

/// Diagnostics gathered when the teacher is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub knn_accuracy: f64,
    pub fisher_ratio: f64,
    pub min_dim_variance: f64,
    pub final_loss: f64,
    pub hash: String,
}

impl TeacherEncoder {
    fn build(dim: usize, hidden: usize, rep_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, streams::TEACHER);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "teacher", &[dim, hidden, hidden, rep_dim], &mut r);
        let frozen_hash = params.hash();
        Self {
            dim,
            hidden,
            rep_dim,
            seed,
            params,
            mlp,
            frozen_hash,
        }
    }

    /// Unit-norm embeddings of row-major `n × dim` points.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() % self.dim != 0 {
            return Err(Error::Shape {
                op: "teacher_embed",
                left: vec![x.len()],
                right: vec![self.dim],
            });
        }
        let n = x.len() / self.dim;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let xv = tape.constant(&[n, self.dim], x.to_vec())?;
        let e = self.mlp.forward(&mut tape, &bound, xv)?;
        let e = tape.normalize_rows(e)?;
        Ok(tape.value(e).to_vec())
    }

    /// Hash recorded at freeze time.
    pub fn frozen_hash(&self) -> &str {
        &self.frozen_hash
    }

    /// Hash of the current parameters.
    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn arrays(&self) -> Vec<Array> {
        let meta = vec![
            self.dim as f64,
            self.hidden as f64,
            self.rep_dim as f64,
            (self.seed & 0xffff_ffff) as f64,
            (self.seed >> 32) as f64,
        ];
        let mut a = vec![(vec![meta.len()], meta)];
        a.extend(self.params.arrays());
        a
    }

    fn from_arrays(arrays: &[Array]) -> Result<Self> {
        let meta = arrays
            .first()
            .filter(|(s, v)| s == &[5] && v.len() == 5)
            .ok_or_else(|| Error::Checkpoint("missing teacher metadata".into()))?;
        let m = &meta.1;
        let seed = m[3] as u64 | ((m[4] as u64) << 32);
        let mut t = Self::build(m[0] as usize, m[1] as usize, m[2] as usize, seed);
        t.params.load_arrays(&arrays[1..])?;
        t.frozen_hash = t.params.hash();
        Ok(t)
    }
}

fn jittered(x: &[f64], jitter: f64, r: &mut rng::Rng) -> Vec<f64> {
    x.iter().map(|v| v + jitter * rng::normal(r)).collect()
}

/// Trains the teacher on `data` without labels and freezes it. Labels are
/// used afterwards only for the held-out k-NN gate: a seeded 80/20 split of
/// `data` where the 80% part is the reference set.
pub fn teacher_pretrain(data: &ToyDataset, cfg: &TeacherConfig, seed: u64) -> Result<(TeacherEncoder, TeacherReport)> {
    cfg.validate()?;
    if data.len() < 10 {
        return Err(Error::Argument("teacher needs at least 10 points".into()));
    }
    let mut teacher = TeacherEncoder::build(data.dim, cfg.hidden, cfg.rep_dim, seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&teacher.params, adam);
    let mut r = rng::stream(seed, streams::TEACHER + 1);
    let batch = cfg.batch_size.min(data.len());
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..data.len())).collect();
        let x = data.gather(&idx);
        let a = jittered(&x, cfg.jitter, &mut r);
        let b = jittered(&x, cfg.jitter, &mut r);
        let mut tape = Tape::new();
        let bound = teacher.params.bind(&mut tape, |_| true)?;
        let va = tape.constant(&[batch, data.dim], a)?;
        let vb = tape.constant(&[batch, data.dim], b)?;
        let ea = teacher.mlp.forward(&mut tape, &bound, va)?;
        let ea = tape.normalize_rows(ea)?;
        let eb = teacher.mlp.forward(&mut tape, &bound, vb)?;
        let eb = tape.normalize_rows(eb)?;
        let ab = nt_xent(&mut tape, ea, eb, cfg.temperature)?;
        let ba = nt_xent(&mut tape, eb, ea, cfg.temperature)?;
        let sum = tape.add(ab, ba)?;
        let loss = tape.scale(sum, 0.5)?;
        final_loss = tape.tensor(loss).item();
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        opt.step(&mut teacher.params, &grads, |_| true)?;
    }
    teacher.frozen_hash = teacher.params.hash();

    let emb = teacher.embed(&data.points)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut split_rng = rng::stream(seed, streams::TEACHER + 2);
    for i in (1..order.len()).rev() {
        order.swap(i, split_rng.random_range(0..=i));
    }
    let cut = data.len() * 4 / 5;
    let pick = |ids: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let e = ids.iter().flat_map(|&i| emb[i * cfg.rep_dim..(i + 1) * cfg.rep_dim].to_vec()).collect();
        (e, ids.iter().map(|&i| data.labels[i]).collect())
    };
    let (ref_e, ref_l) = pick(&order[..cut]);
    let (q_e, q_l) = pick(&order[cut..]);
    let knn_accuracy = knn_accuracy(&ref_e, &ref_l, &q_e, &q_l, cfg.rep_dim, cfg.knn_k);
    let report = TeacherReport {
        knn_accuracy,
        fisher_ratio: fisher_ratio(&emb, &data.labels, cfg.rep_dim),
        min_dim_variance: dim_variances(&emb, cfg.rep_dim).into_iter().fold(f64::INFINITY, f64::min),
        final_loss,
        hash: teacher.frozen_hash.clone(),
    };
    if let Some(threshold) = cfg.quality_gate {
        if !(knn_accuracy > threshold) {
            return Err(Error::TeacherQuality {
                accuracy: knn_accuracy,
                threshold,
            });
        }
    }
    Ok((teacher, report))
}

/// Majority vote among the `k` most similar reference rows (inner product,
/// ties to the lower index). Vote ties go to the label of the nearest tied
/// neighbour.
pub fn knn_accuracy(
    reference: &[f64],
    ref_labels: &[usize],
    query: &[f64],
    query_labels: &[usize],
    dim: usize,
    k: usize,
) -> f64 {
    let classes = ref_labels.iter().chain(query_labels).max().map_or(0, |m| m + 1);
    let mut correct = 0;
    for (qi, q) in query.chunks(dim).enumerate() {
        let mut sims: Vec<(f64, usize)> = reference
            .chunks(dim)
            .enumerate()
            .map(|(j, r)| (q.iter().zip(r).map(|(a, b)| a * b).sum(), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let nearest = &sims[..k.min(sims.len())];
        let mut votes = vec![0usize; classes];
        for &(_, j) in nearest {
            votes[ref_labels[j]] += 1;
        }
        let best = *votes.iter().max().unwrap_or(&0);
        let label = nearest
            .iter()
            .map(|&(_, j)| ref_labels[j])
            .find(|&l| votes[l] == best)
            .unwrap_or(0);
        if label == query_labels[qi] {
            correct += 1;
        }
    }
    correct as f64 / query_labels.len().max(1) as f64
}

/// Between-class scatter over within-class scatter (both as traces, with
/// per-point weighting).
pub fn fisher_ratio(emb: &[f64], labels: &[usize], dim: usize) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut class_mean = vec![vec![0.0; dim]; classes];
    let mut count = vec![0usize; classes];
    for (row, &l) in emb.chunks(dim).zip(labels) {
        count[l] += 1;
        for j in 0..dim {
            mean[j] += row[j] / n;
            class_mean[l][j] += row[j];
        }
    }
    for (m, &c) in class_mean.iter_mut().zip(&count) {
        m.iter_mut().for_each(|x| *x /= c.max(1) as f64);
    }
    let between: f64 = (0..classes)
        .map(|c| count[c] as f64 * (0..dim).map(|j| (class_mean[c][j] - mean[j]).powi(2)).sum::<f64>())
        .sum();
    let within: f64 = emb
        .chunks(dim)
        .zip(labels)
        .map(|(row, &l)| (0..dim).map(|j| (row[j] - class_mean[l][j]).powi(2)).sum::<f64>())
        .sum();
    between / within
}

pub fn dim_variances(x: &[f64], dim: usize) -> Vec<f64> {
    let n = (x.len() / dim) as f64;
    (0..dim)
        .map(|j| {
            let m = x.iter().skip(j).step_by(dim).sum::<f64>() / n;
            x.iter().skip(j).step_by(dim).map(|v| (v - m).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Codec and teacher stored together in one `ERWT` file.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub codec: LatentCodec,
    pub teacher: TeacherEncoder,
}

impl Prepared {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut arrays = self.codec.arrays();
        arrays.extend(self.teacher.arrays());
        checkpoint::write(path, TEACHER_MAGIC, &arrays)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let arrays = checkpoint::read(path, TEACHER_MAGIC)?;
        if arrays.len() < 3 {
            return Err(Error::Checkpoint("teacher file holds too few arrays".into()));
        }
        Ok(Self {
            codec: LatentCodec::from_arrays(&arrays[0], &arrays[1])?,
            teacher: TeacherEncoder::from_arrays(&arrays[2..])?,
        })
    }
}
