//! Adam with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// Global L2 norm over the gradients that are present.
pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One update of every parameter accepted by `trainable` that has a
    /// gradient. Gradients are clipped to the configured global norm (over
    /// the trainable set) before entering the moment estimates. Returns the
    /// pre-clip norm.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradient slots for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let step_index = self.step as usize + 1;
        let active: Vec<Option<&Vec<f64>>> = grads
            .iter()
            .enumerate()
            .map(|(i, g)| if trainable(ParamId(i)) { g.as_ref() } else { None })
            .collect();
        let mut sq = 0.0;
        for g in active.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { step: step_index });
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in active.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.get_mut(ParamId(i)).values;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
        Ok(norm)
    }
}
