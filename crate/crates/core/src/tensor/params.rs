use std::collections::HashMap;

use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a trainable tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor.with_requires_grad(true));
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients recorded on `g` for each binding into the store.
    pub fn accumulate(&mut self, g: &Graph<T>, bindings: &[(ParamId, Var)]) -> Result<()> {
        for &(id, var) in bindings {
            if let Some(grad) = g.grad(var) {
                self.tensors[id.0].accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Squared L2 norm of all gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::lit(factor);
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    /// FNV-1a digest over names, shapes and the exact bit patterns of the data.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrites a tensor's data, checking the shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::shape("assign", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Lazily places parameters from a store onto a graph.
///
/// When the binder is not trainable every parameter enters as a constant, so
/// no gradient is ever computed for it.
pub struct Binder<'a, T: Float> {
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Float> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.variable(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters that were bound as differentiable leaves.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        if !self.trainable {
            return Vec::new();
        }
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}
