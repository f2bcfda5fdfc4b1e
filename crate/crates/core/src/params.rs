use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor. Decides weight decay and whether the optimizer touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    GateWeight,
    GateBias,
    /// Running normalization statistics; updated by forward passes, not by SGD.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    /// Normalization affine parameters and gate biases are excluded from decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias | ParamKind::GateWeight)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.len()).sum()
    }

    /// Flat f64 copy of every stored value in registration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().map(|v| v.f64())).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.entries.iter().map(|e| e.value.len()).sum();
        if total != flat.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter count {} does not match model ({total})",
                flat.len()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            for (dst, &src) in e.value.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = T::of(src);
            }
            off += n;
        }
        Ok(())
    }

    /// Layout signature: names and sizes, used to validate checkpoints.
    pub fn layout(&self) -> Vec<(String, usize)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.len())).collect()
    }
}

/// Gradient per parameter, `None` where the parameter was not reached.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub(crate) fn new(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    /// No gradient for any parameter of `store`.
    pub fn empty(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, |g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
    }
}
