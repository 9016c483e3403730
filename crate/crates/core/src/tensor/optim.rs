use std::collections::BTreeMap;

use super::graph::Gradients;
use super::{ParamStore, Result, TensorError};

/// Momentum SGD with L2 weight decay
/// (`g ← g + wd·w; v ← μ·v + g; w ← w − lr·v`), with optional clipping of
/// the global gradient norm before decay is added.
#[derive(Clone, Debug)]
pub struct Sgd {
    names: Vec<String>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// Optimizer over the given parameter names.
    pub fn new(names: Vec<String>, momentum: f64, weight_decay: f64) -> Self {
        Self { names, momentum, weight_decay, clip_norm: None, velocity: BTreeMap::new() }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if let Some(name) = self.names.iter().find(|n| !grads.contains_key(*n)) {
            return Err(TensorError::Usage(format!("no gradient for parameter `{name}`")));
        }
        self.step_present(params, grads, lr)
    }

    /// Like [`Sgd::step`], but parameters without a gradient are left
    /// untouched, velocity included. Used when each step trains a sub-network
    /// of a larger store.
    pub fn step_present(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let scale = match self.clip_norm {
            Some(max) => {
                let sq: f64 = self.names.iter().filter_map(|n| grads.get(n)).flatten().map(|g| g * g).sum();
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for name in &self.names {
            let Some(g) = grads.get(name) else { continue };
            let w = params
                .get_mut(name)
                .ok_or_else(|| TensorError::Usage(format!("unknown parameter `{name}`")))?;
            if g.len() != w.numel() {
                return Err(TensorError::Shape {
                    op: "sgd_step",
                    detail: format!("{name}: grad {} vs param {}", g.len(), w.numel()),
                });
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let (mu, wd) = (self.momentum, self.weight_decay);
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = scale * gi + wd * *wi;
                *vi = mu * *vi + d;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One plain SGD step over every gradient entry; see [`Sgd`] for the
/// stateful version used in training loops.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(grads.keys().cloned().collect(), momentum, weight_decay).step(params, grads, lr)
}
