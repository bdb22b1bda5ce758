use std::collections::BTreeMap;

use rand::Rng;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, gradient-tracked parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a `rows × cols` weight drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::new(vec![rows, cols], data).expect("shape matches data");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter gradient in `grads` into the matching accumulator.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors
                .get_mut(id.0)
                .ok_or_else(|| Error::contract("gradient refers to unknown parameter"))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Flattened copy of all parameter values in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Flattened copy of all gradients; missing accumulators read as zero.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Overwrites all values from a flat vector laid out as in [`Self::flat_values`].
    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(
                "ParamStore::set_flat_values",
                format!("expected {} values, got {}", self.numel(), values.len()),
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let k = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + k]);
            offset += k;
        }
        Ok(())
    }

    /// Name → tensor map, used by checkpoints.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Replaces values from a name → tensor map; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, network expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = named
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim(
                    "ParamStore::load_named",
                    format!("{name}: {:?} vs {:?}", src.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
