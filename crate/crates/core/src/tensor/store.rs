use std::collections::BTreeMap;

use super::graph::{BnBatchStats, Graph, Mode, Var};
use super::{Result, Tensor, TensorError};

/// Named tensors: weights, BN affine parameters and BN running statistics.
///
/// Running statistics are stored under names ending in `.running_mean` /
/// `.running_var`; everything else is trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// View of one BatchNorm layer's state.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mode: Mode,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| TensorError::Usage(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| !Self::is_buffer(n)).cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Inserts a fresh BatchNorm record (γ=1, β=0, mean 0, var 1).
    pub fn insert_bn(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0));
    }

    pub fn bn_state(&self, prefix: &str, mode: Mode) -> Result<BnState> {
        let get = |s: &str| self.require(&format!("{prefix}.{s}")).map(|t| t.data().to_vec());
        Ok(BnState {
            gamma: get("gamma")?,
            beta: get("beta")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            mode,
        })
    }

    /// Binds a named parameter onto a graph.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.require(name)?))
    }

    /// Applies a BatchNorm layer whose record lives under `prefix`.
    pub fn batch_norm(&self, g: &mut Graph, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gamma = self.bind(g, &format!("{prefix}.gamma"))?;
        let beta = self.bind(g, &format!("{prefix}.beta"))?;
        let mean = self.require(&format!("{prefix}.running_mean"))?;
        let var = self.require(&format!("{prefix}.running_var"))?;
        g.batch_norm(x, gamma, beta, mean.data(), var.data(), eps, prefix)
    }

    /// Folds observed batch statistics into the running statistics:
    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn update_bn_stats(&mut self, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{}.{suffix}", s.prefix);
                let t = self
                    .tensors
                    .get_mut(&name)
                    .ok_or_else(|| TensorError::Usage(format!("missing BN buffer `{name}`")))?;
                if t.numel() != batch.len() {
                    return Err(TensorError::Shape {
                        op: "update_bn_stats",
                        detail: format!("{name}: {} vs {}", t.numel(), batch.len()),
                    });
                }
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }

    /// Sum of |x| over all trainable tensors whose name starts with `prefix`.
    pub fn l1_norm_with_prefix(&self, prefix: &str) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && !Self::is_buffer(n))
            .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    /// True when both stores hold the same names with bit-identical data.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}
