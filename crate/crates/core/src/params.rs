//! Named parameter storage and gradient buffers produced by a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds a tape's gradients into the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (i, g) in grads.dense.iter().enumerate() {
            if let Some(g) = g {
                for (dst, &src) in self.tensors[i].grad_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        for rows in &grads.sparse {
            let t = &mut self.tensors[rows.param.0];
            let d = t.cols();
            let grad = t.grad_mut();
            for (k, &r) in rows.rows.iter().enumerate() {
                let src = &rows.values[k * d..(k + 1) * d];
                for (dst, &s) in grad[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
    }

    /// Euclidean norm of every parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter()
            .map(|(_, name, t)| {
                let n = t.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                (name.to_string(), n)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Row-sparse gradient contribution to an embedding table.
#[derive(Clone, Debug)]
pub struct SparseRows<T> {
    pub param: ParamId,
    pub rows: Vec<usize>,
    pub values: Vec<T>,
}

/// Parameter gradients collected by one tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) dense: Vec<Option<Vec<T>>>,
    pub(crate) sparse: Vec<SparseRows<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            dense: vec![None; num_params],
            sparse: Vec::new(),
        }
    }

    pub(crate) fn dense_mut(&mut self, id: ParamId, len: usize) -> &mut [T] {
        self.dense[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Dense view of one parameter's gradient (sparse rows included).
    pub fn to_dense(&self, id: ParamId, shape_len: usize, cols: usize) -> Vec<T> {
        let mut out = self.dense[id.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); shape_len]);
        for rows in self.sparse.iter().filter(|r| r.param == id) {
            for (k, &r) in rows.rows.iter().enumerate() {
                for c in 0..cols {
                    out[r * cols + c] += rows.values[k * cols + c];
                }
            }
        }
        out
    }
}
