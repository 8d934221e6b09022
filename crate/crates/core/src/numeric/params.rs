use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named trainable tensors with gradient buffers and Adam moment estimates.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    pub(crate) adam_steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let n = value.len();
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_owned(),
            grad: Tensor::zeros(value.shape()),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        self.index.insert(name.to_owned(), id);
        Ok(ParamId(id))
    }

    /// Registers a tensor filled with `N(0, scale²)` samples.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * scale;
        }
        self.insert(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
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

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        let e = &mut self.entries[id.0];
        (&e.value, &mut e.grad)
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor, &mut [f64], &mut [f64]) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.first_moment, &mut e.second_moment)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Moves every parameter of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for e in other.entries {
            self.insert(&e.name, e.value)?;
        }
        Ok(())
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                out.insert(&e.name, e.value.clone())
                    .expect("names are unique in the source store");
            }
        }
        out
    }

    /// Overwrites values from `other` for every name present in both.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for e in &mut self.entries {
            if let Some(&j) = other.index.get(&e.name) {
                if other.entries[j].value.shape() == e.value.shape() {
                    e.value = other.entries[j].value.clone();
                }
            }
        }
    }
}

/// Fully-connected layer `y = W x + b` whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    /// Registers `{prefix}.w` (out×in) and `{prefix}.b` (out). Weights are
    /// drawn from `N(0, scale²)`, biases start at zero.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_normal(&format!("{prefix}.w"), &[out_dim, in_dim], scale, rng)?;
        let bias = store.insert(&format!("{prefix}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks up an already registered layer, checking shapes.
    pub fn bind(store: &ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.require(&format!("{prefix}.w"))?;
        let bias = store.require(&format!("{prefix}.b"))?;
        if store.value(weight).shape() != [out_dim, in_dim] {
            return Err(Error::shape(
                "bind",
                format!("{prefix}.w of shape [{out_dim}, {in_dim}]"),
                format!("{:?}", store.value(weight).shape()),
            ));
        }
        if store.value(bias).shape() != [out_dim] {
            return Err(Error::shape(
                "bind",
                format!("{prefix}.b of shape [{out_dim}]"),
                format!("{:?}", store.value(bias).shape()),
            ));
        }
        Ok(Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        affine(store.value(self.weight), store.value(self.bias), x)
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` and returns `∂L/∂x`.
    pub fn backward(&self, store: &mut ParamStore, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let dx = {
            let (w, gw) = store.value_and_grad_mut(self.weight);
            affine_backward(w, x, dy, gw)
        };
        for (g, d) in store.grad_mut(self.bias).data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        dx
    }
}

/// `W x + b`.
pub fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.shape().len() != 2 {
        return Err(Error::shape("affine", "matrix weight", format!("{:?}", w.shape())));
    }
    if w.cols() != x.len() {
        return Err(Error::shape("affine", format!("input length {}", w.cols()), x.len()));
    }
    if b.len() != w.rows() {
        return Err(Error::shape("affine", format!("bias length {}", w.rows()), b.len()));
    }
    Ok((0..w.rows())
        .map(|r| dot(w.row(r), x) + b.data()[r])
        .collect())
}

/// Accumulates `dy xᵀ` into `gw` and returns `Wᵀ dy`.
pub fn affine_backward(w: &Tensor, x: &[f64], dy: &[f64], gw: &mut Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut dx = vec![0.0; cols];
    let g = gw.data_mut();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let wrow = w.row(r);
        let grow = &mut g[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] += d * x[c];
            dx[c] += d * wrow[c];
        }
    }
    dx
}
