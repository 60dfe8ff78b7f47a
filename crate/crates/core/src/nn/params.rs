use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
    pub step: u64,
}

/// Named parameters with paired gradient and Adam moment arrays.
///
/// Iteration order is insertion order. Each store carries a process-unique id
/// so a [`Tape`](crate::nn::Tape) can route gradients back to the store that
/// owns a parameter.
#[derive(Debug)]
pub struct ParameterStore {
    uid: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` already registered")));
        }
        let shape = value.shape().to_vec();
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.clone(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            step: 0,
        });
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Little-endian bytes of every parameter value, in insertion order.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, grad: &[f64]) {
        let g = self.entries[index].grad.data_mut();
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }
}
