//! Named trainable tensors, and the per-layer handles that index into them.

use crate::error::{Error, Result};
use crate::tensor::{Fill, Real, Tape, Tensor, Var};
use crate::util::seed_from_str;

use super::conv::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for one forward pass over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Routes parameter `id` to another node, e.g. a probe leaf in a
    /// gradient check.
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Uniform in `±1/sqrt(fan_in)`, seeded from `(seed, name)`.
    pub fn add_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::create(shape, Fill::Uniform { bound, seed: seed_from_str(seed, name) })?;
        self.add(name, t)
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

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Schema {
                field: self.names[id.0].clone(),
                reason: format!("shape {:?} expected, got {:?}", cur.shape(), value.shape()),
            });
        }
        self.tensors[id.0] = value.with_requires_grad(true);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Records every parameter as a constant; nothing is kept for backward.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Copies leaf gradients from a finished backward pass into the stored
    /// tensors, replacing any previous gradient.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            t.zero_grad();
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::lit(factor);
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>().with_requires_grad(true)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// `weight [C_out, C_in]`, `bias [C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl LinearParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        let weight = store.add_fan_in(&format!("{name}.weight"), &[c_out, c_in], c_in, seed)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?;
        Ok(LinearParams { weight, bias, c_in, c_out })
    }

    pub fn vars(&self, b: &Bound) -> LinearVars {
        LinearVars { weight: b.var(self.weight), bias: b.var(self.bias) }
    }
}

/// `weight [C_out, C_in / groups, k, k]`, `bias [C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub geom: ConvGeometry,
}

impl ConvParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeometry,
        seed: u64,
    ) -> Result<Self> {
        if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
            return Err(Error::Contract(format!(
                "conv `{name}`: channels {c_in}->{c_out} not divisible by groups {}",
                geom.groups
            )));
        }
        let fan_in = c_in / geom.groups * k * k;
        let weight = store.add_fan_in(&format!("{name}.weight"), &[c_out, c_in / geom.groups, k, k], fan_in, seed)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?;
        Ok(ConvParams { weight, bias, c_in, c_out, k, geom })
    }

    pub fn is_depthwise(&self) -> bool {
        self.geom.groups == self.c_in && self.geom.groups == self.c_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)?)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim])?)?;
        Ok(LayerNormParams { gamma, beta, dim })
    }
}
