//! Parameter storage and the small affine/MLP building blocks shared by the
//! teacher encoder, the backbone and its projection head.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

/// Tape handles for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    tracked: Vec<bool>,
}

impl Bound {
    /// Handles for parameters already recorded on a tape (in [`ParamId`]
    /// order), all tracked.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        let tracked = vec![true; vars.len()];
        Self { vars, tracked }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every tracked parameter; `None` for untracked ones and
    /// for tracked ones that are not ancestors of the last backward root.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .zip(&self.tracked)
            .map(|(&v, &t)| if t { tape.grad(v).map(<[f64]>::to_vec) } else { None })
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }

    /// Records every parameter on the tape. Parameters for which `tracked`
    /// is false enter as constants and never receive gradients.
    pub fn bind(&self, tape: &mut Tape, tracked: impl Fn(ParamId) -> bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut flags = Vec::with_capacity(self.entries.len());
        for (i, p) in self.entries.iter().enumerate() {
            let t = tracked(ParamId(i));
            let v = if t {
                tape.param(&p.shape, p.values.clone())?
            } else {
                tape.constant(&p.shape, p.values.clone())?
            };
            vars.push(v);
            flags.push(t);
        }
        Ok(Bound { vars, tracked: flags })
    }

    /// Every parameter as a standalone tensor, for gradient checks.
    pub fn tensors(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|p| Tensor::new(p.shape.clone(), p.values.clone()))
            .collect()
    }

    /// Hex SHA-256 over names, shapes and the exact bit patterns of the
    /// selected parameters.
    pub fn hash_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = &self.entries[id.0];
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.hash_of(self.ids())
    }

    /// Arrays in insertion order, for checkpointing.
    pub fn arrays(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|p| (p.shape.clone(), p.values.clone()))
            .collect()
    }

    /// Overwrites values from arrays produced by [`ParamSet::arrays`] on an
    /// identically structured set.
    pub fn load_arrays(&mut self, arrays: &[(Vec<usize>, Vec<f64>)]) -> Result<()> {
        if arrays.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.entries.len(),
                arrays.len()
            )));
        }
        for (p, (shape, values)) in self.entries.iter_mut().zip(arrays) {
            if &p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name, p.shape, shape
                )));
            }
            p.values.clone_from(values);
        }
        Ok(())
    }
}

/// Dense layer `y = x·W + b` with `W: fan_in × fan_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `N(0, gain²/fan_in)`, zero bias.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng::normals(rng, fan_in * fan_out)
            .into_iter()
            .map(|x| x * std)
            .collect();
        let weight = params.add(format!("{name}.weight"), &[fan_in, fan_out], w);
        let bias = params.add(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), &[fan_in, fan_out], vec![0.0; fan_in * fan_out]);
        let bias = params.add(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(xw, bound.var(self.bias))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with SiLU between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i + 1 < self.layers.len() {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::ids).collect()
    }
}
