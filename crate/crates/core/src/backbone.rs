//! Residual-MLP velocity network.
//!
//! ```text
//! h₀      = z·W_in + b_in
//! h_{k+1} = h_k + g_k ⊙ (silu(h_k·W1_k + b1_k + e(t)·Wt_k)·W2_k + b2_k)
//! v       = h_depth·W_out + b_out
//! ```
//!
//! `e(t)` is a fixed sinusoidal embedding of the time. Blocks
//! `[erw_start, erw_start + erw_depth)` together with the projection head
//! form the latent-to-representation (L2R) parameter set; the stem belongs to
//! block 0. All remaining blocks and the output map form the
//! representation-to-generation (R2G) set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamId, ParamSet};
use crate::rng::{self, streams};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    /// Number of blocks warmed up against the teacher.
    pub erw_depth: usize,
    /// First warmed-up block; 0 places the warmup span at the front.
    pub erw_start: usize,
    /// Block whose output feeds the projection head during joint training.
    pub proj_tap: usize,
    pub latent_dim: usize,
    pub rep_dim: usize,
    pub time_dim: usize,
    pub head_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 128,
            erw_depth: 2,
            erw_start: 0,
            proj_tap: 4,
            latent_dim: 2,
            rep_dim: 16,
            time_dim: 16,
            head_hidden: 128,
        }
    }
}

impl BackboneConfig {
    /// Index of the block whose output the warmup aligns.
    pub fn l2r_end(&self) -> usize {
        self.erw_start + self.erw_depth
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backbone.depth", self.depth),
            ("backbone.width", self.width),
            ("backbone.erw_depth", self.erw_depth),
            ("backbone.latent_dim", self.latent_dim),
            ("backbone.rep_dim", self.rep_dim),
            ("backbone.head_hidden", self.head_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config("backbone.time_dim", "must be even and >= 2"));
        }
        if self.l2r_end() > self.proj_tap {
            return Err(Error::config(
                "backbone.proj_tap",
                format!("must be >= erw_start + erw_depth = {}", self.l2r_end()),
            ));
        }
        if self.proj_tap > self.depth {
            return Err(Error::config("backbone.proj_tap", format!("must be <= depth = {}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    inner: Linear,
    /// `time_dim × width`, no bias (`inner.bias` covers it).
    time: ParamId,
    outer: Linear,
    gain: ParamId,
}

impl Block {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.inner.ids().to_vec();
        v.push(self.time);
        v.extend(self.outer.ids());
        v.push(self.gain);
        v
    }
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub v_pred: Var,
    /// Output of block `proj_tap`.
    pub tap: Var,
    /// Output of block `erw_start + erw_depth`.
    pub l2r: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
    stem: Linear,
    blocks: Vec<Block>,
    out: Linear,
    head: Mlp,
}

/// `[sin(f_k t), cos(f_k t)]` with `f_k = 10^{k/(half−1)}`, row-major
/// `n × dim`. Frequencies stay low so features near `t = 0` are close to
/// the clean-input features seen during warmup.
pub fn time_embedding(t: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        10f64.powf(frac)
    };
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        out.extend((0..half).map(|k| (freq(k) * ti).sin()));
        out.extend((0..half).map(|k| (freq(k) * ti).cos()));
    }
    out
}

impl Backbone {
    /// Variance-scaled random init for block affines, unit gains and a
    /// zero output map (so the initial velocity prediction is zero).
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, streams::INIT);
        let mut params = ParamSet::new();
        let w = config.width;
        let stem = Linear::new(&mut params, "stem", config.latent_dim, w, 1.0, &mut r);
        let residual_gain = 1.0 / (config.depth as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|b| {
                let inner = Linear::new(&mut params, &format!("block{b}.inner"), w, w, 1.0, &mut r);
                let std = 1.0 / (config.time_dim as f64).sqrt();
                let tw = rng::normals(&mut r, config.time_dim * w).into_iter().map(|x| x * std).collect();
                let time = params.add(format!("block{b}.time.weight"), &[config.time_dim, w], tw);
                let outer = Linear::new(&mut params, &format!("block{b}.outer"), w, w, residual_gain, &mut r);
                let gain = params.add(format!("block{b}.gain"), &[w], vec![1.0; w]);
                Block { inner, time, outer, gain }
            })
            .collect();
        let out = Linear::zeros(&mut params, "out", w, config.latent_dim);
        let head = Mlp::new(
            &mut params,
            "head",
            &[w, config.head_hidden, config.head_hidden, config.rep_dim],
            &mut r,
        );
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            out,
            head,
        })
    }

    pub fn trainable(&self) -> BTreeSet<ParamId> {
        self.params.ids().collect()
    }

    fn block_ids(&self, range: std::ops::Range<usize>) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks[range].iter().flat_map(Block::ids)
    }

    /// `(l2r, r2g)` parameter sets; disjoint and covering every trainable.
    pub fn partition_params(&self) -> (BTreeSet<ParamId>, BTreeSet<ParamId>) {
        let c = &self.config;
        let mut l2r: BTreeSet<ParamId> = self.block_ids(c.erw_start..c.l2r_end()).collect();
        l2r.extend(self.head.ids());
        let mut r2g: BTreeSet<ParamId> = self.block_ids(0..c.erw_start).collect();
        r2g.extend(self.block_ids(c.l2r_end()..c.depth));
        r2g.extend(self.out.ids());
        if c.erw_start == 0 {
            l2r.extend(self.stem.ids());
        } else {
            r2g.extend(self.stem.ids());
        }
        (l2r, r2g)
    }

    /// Ids of the blocks that precede the warmup span (and the stem when the
    /// span does not start at block 0).
    pub fn prefix_ids(&self) -> BTreeSet<ParamId> {
        let mut s: BTreeSet<ParamId> = self.block_ids(0..self.config.erw_start).collect();
        if self.config.erw_start > 0 {
            s.extend(self.stem.ids());
        }
        s
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids()
    }

    pub fn output_ids(&self) -> [ParamId; 2] {
        self.out.ids()
    }

    pub fn time_weight_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.time).collect()
    }

    fn block_forward(&self, tape: &mut Tape, bound: &Bound, b: &Block, h: Var, temb: Var) -> Result<Var> {
        let u = b.inner.forward(tape, bound, h)?;
        let te = tape.matmul(temb, bound.var(b.time))?;
        let u = tape.add(u, te)?;
        let a = tape.silu(u)?;
        let r = b.outer.forward(tape, bound, a)?;
        let r = tape.mul_row(r, bound.var(b.gain))?;
        tape.add(h, r)
    }

    /// Runs the stem and the first `upto` blocks; returns every hidden state
    /// `h_0..=h_upto`.
    fn trunk(&self, tape: &mut Tape, bound: &Bound, z: Var, t: &[f64], upto: usize) -> Result<Vec<Var>> {
        let (n, d) = match tape.shape(z) {
            [n, d] => (*n, *d),
            s => {
                return Err(Error::Shape {
                    op: "backbone",
                    left: s.to_vec(),
                    right: vec![t.len(), self.config.latent_dim],
                })
            }
        };
        if d != self.config.latent_dim || n != t.len() {
            return Err(Error::Shape {
                op: "backbone",
                left: vec![n, d],
                right: vec![t.len(), self.config.latent_dim],
            });
        }
        if let Some(bad) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain {
                op: "backbone",
                detail: format!("t = {bad} outside [0, 1]"),
            });
        }
        let temb = tape.constant(&[n, self.config.time_dim], time_embedding(t, self.config.time_dim))?;
        let mut hs = Vec::with_capacity(upto + 1);
        let mut h = self.stem.forward(tape, bound, z)?;
        hs.push(h);
        for b in &self.blocks[..upto] {
            h = self.block_forward(tape, bound, b, h, temb)?;
            hs.push(h);
        }
        Ok(hs)
    }

    /// Full pass: velocity prediction plus the hidden states at
    /// `erw_start + erw_depth` and `proj_tap`, from the same computation.
    pub fn forward_with_tap(&self, tape: &mut Tape, bound: &Bound, z: Var, t: &[f64]) -> Result<Forward> {
        let hs = self.trunk(tape, bound, z, t, self.config.depth)?;
        let v_pred = self.out.forward(tape, bound, hs[self.config.depth])?;
        Ok(Forward {
            v_pred,
            tap: hs[self.config.proj_tap],
            l2r: hs[self.config.l2r_end()],
        })
    }

    /// Truncated pass through the warmup span only: the output of block
    /// `erw_start + erw_depth`. Later blocks are not evaluated.
    pub fn forward_l2r(&self, tape: &mut Tape, bound: &Bound, z: Var, t: &[f64]) -> Result<Var> {
        let hs = self.trunk(tape, bound, z, t, self.config.l2r_end())?;
        Ok(hs[self.config.l2r_end()])
    }

    /// Projection head followed by row normalization.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let e = self.head.forward(tape, bound, features)?;
        tape.normalize_rows(e)
    }

    /// Velocity prediction for a row-major `n × latent_dim` batch at a
    /// common time `t`, without gradient tracking.
    pub fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let n = z.len() / self.config.latent_dim;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let zv = tape.constant(&[n, self.config.latent_dim], z.to_vec())?;
        let f = self.forward_with_tap(&mut tape, &bound, zv, &vec![t; n])?;
        Ok(tape.value(f.v_pred).to_vec())
    }

    /// Hidden state after `block` blocks (`0` = stem output), row-major
    /// `n × width`.
    pub fn features_at(&self, z: &[f64], t: f64, block: usize) -> Result<Vec<f64>> {
        if block > self.config.depth {
            return Err(Error::Argument(format!("block {block} > depth {}", self.config.depth)));
        }
        let n = z.len() / self.config.latent_dim;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let zv = tape.constant(&[n, self.config.latent_dim], z.to_vec())?;
        let hs = self.trunk(&mut tape, &bound, zv, &vec![t; n], block)?;
        Ok(tape.value(hs[block]).to_vec())
    }

    /// Unit-norm head embedding of the given hidden features.
    pub fn project_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        let n = features.len() / self.config.width;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let f = tape.constant(&[n, self.config.width], features.to_vec())?;
        let e = self.project(&mut tape, &bound, f)?;
        Ok(tape.value(e).to_vec())
    }

    pub fn hash_of(&self, ids: &BTreeSet<ParamId>) -> String {
        self.params.hash_of(ids.iter().copied())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write(path, MODEL_MAGIC, &self.params.arrays())
    }

    /// Loads parameters into a model built from `config`.
    pub fn load(path: &std::path::Path, config: BackboneConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let arrays = checkpoint::read(path, MODEL_MAGIC)?;
        model.params.load_arrays(&arrays)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
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

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig { proj_tap: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = BackboneConfig { proj_tap: 7, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { erw_depth: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn initial_velocity_is_zero() {
        let m = Backbone::new(BackboneConfig::default(), 1).unwrap();
        let v = m.velocity(&[0.3, -0.2, 1.0, 2.0], 0.4).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_velocity() {
        let mut m = Backbone::new(small(), 2).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).values.iter_mut().for_each(|x| *x = 0.0);
        }
        let v = m.velocity(&[1.0, 2.0], 0.7).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn partition_definition() {
        let m = Backbone::new(BackboneConfig::default(), 0).unwrap();
        let (l2r, r2g) = m.partition_params();
        assert!(l2r.is_disjoint(&r2g));
        let total = l2r.len() + r2g.len();
        assert_eq!(total, m.trainable().len());
        let names: Vec<&str> = l2r.iter().map(|&id| m.params.get(id).name.as_str()).collect();
        assert!(names.iter().all(|n| n.starts_with("block0")
            || n.starts_with("block1")
            || n.starts_with("head")
            || n.starts_with("stem")));
        assert!(names.iter().any(|n| n.starts_with("block1")));

        let full = Backbone::new(BackboneConfig { erw_depth: 6, proj_tap: 6, ..Default::default() }, 0).unwrap();
        let (_, r2g) = full.partition_params();
        let names: BTreeSet<&str> = r2g.iter().map(|&id| full.params.get(id).name.as_str()).collect();
        assert_eq!(names, BTreeSet::from(["out.weight", "out.bias"]));
    }

    #[test]
    fn tap_at_depth_is_pre_output_representation() {
        let cfg = BackboneConfig { proj_tap: 6, ..Default::default() };
        let m = Backbone::new(cfg, 3).unwrap();
        let z = vec![0.1, 0.2, -0.3, 0.4];
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, |_| false).unwrap();
        let zv = tape.constant(&[2, 2], z.clone()).unwrap();
        let f = m.forward_with_tap(&mut tape, &bound, zv, &[0.5, 0.5]).unwrap();
        assert_eq!(tape.value(f.tap), m.features_at(&z, 0.5, 6).unwrap().as_slice());
    }

    #[test]
    fn projection_is_unit_norm() {
        let m = Backbone::new(BackboneConfig::default(), 4).unwrap();
        let z = vec![0.5, -1.0, 2.0, 0.0, -0.7, 0.3];
        let f = m.features_at(&z, 0.0, 2).unwrap();
        let e = m.project_values(&f).unwrap();
        for row in e.chunks(16) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let scaled: Vec<f64> = f.iter().map(|x| 3.0 * x).collect();
        let e2 = m.project_values(&scaled).unwrap();
        assert_ne!(e, e2);
    }

    #[test]
    fn zero_time_weights_make_forward_time_independent() {
        let mut m = Backbone::new(BackboneConfig::default(), 5).unwrap();
        for id in m.time_weight_ids() {
            m.params.get_mut(id).values.iter_mut().for_each(|x| *x = 0.0);
        }
        let z = vec![0.4, -0.1, 1.2, 0.8];
        assert_eq!(m.features_at(&z, 0.2, 6).unwrap(), m.features_at(&z, 0.8, 6).unwrap());
    }

    #[test]
    fn representation_scale_is_healthy_at_depth() {
        let m = Backbone::new(BackboneConfig::default(), 6).unwrap();
        let mut r = rng::stream(9, 0);
        let z = rng::normals(&mut r, 512 * 2);
        let h = m.features_at(&z, 0.5, 6).unwrap();
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        let std = (h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h.len() as f64).sqrt();
        assert!((0.1..=10.0).contains(&std), "std {std}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Backbone::new(small(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, |_| false).unwrap();
        let z = tape.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(m.forward_with_tap(&mut tape, &bound, z, &[0.5]).is_err());
        let z = tape.constant(&[1, 2], vec![0.0; 2]).unwrap();
        assert!(m.forward_with_tap(&mut tape, &bound, z, &[1.5]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Backbone::new(small(), 8).unwrap();
        m.save(&path).unwrap();
        let back = Backbone::load(&path, small()).unwrap();
        assert_eq!(back.params, m.params);
    }
}
