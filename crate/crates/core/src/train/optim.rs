//! AdamW and plain SGD, both with decoupled weight decay.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// One AdamW update of `params` in place. `t` is the 1-based step count.
pub fn adamw_step<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, h: &AdamHyper) {
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let c1 = T::one() - T::lit(h.beta1.powi(t as i32));
    let c2 = T::one() - T::lit(h.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(h.lr), T::lit(h.eps));
    let decay = T::one() - T::lit(h.lr * h.weight_decay);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        params[i] = params[i] * decay - lr * step;
    }
}

/// `p <- p (1 - lr wd) - lr g`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: f64, weight_decay: f64) {
    let (lr_t, decay) = (T::lit(lr), T::one() - T::lit(lr * weight_decay));
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p * decay - lr_t * g;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("optimizer must be adamw or sgd, got `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Optimizer state over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: AdamHyper, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::AdamW => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, hyper, step: 0, m, v }
    }

    /// Applies the gradients stored on the tensors; tensors without a
    /// gradient are treated as having a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        for (i, t) in store.tensors_mut().enumerate() {
            let g = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            if g.len() != t.numel() {
                return Err(Error::Contract(format!("gradient length {} for tensor of {}", g.len(), t.numel())));
            }
            match self.kind {
                OptimizerKind::AdamW => adamw_step(t.data_mut(), &g, &mut self.m[i], &mut self.v[i], self.step, &self.hyper),
                OptimizerKind::Sgd => sgd_step(t.data_mut(), &g, self.hyper.lr, self.hyper.weight_decay),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_without_decay_keep_params() {
        let mut p = vec![0.3f64, -2.0, 5.0];
        let orig = p.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let h = AdamHyper { weight_decay: 0.0, ..Default::default() };
        for t in 1..5 {
            adamw_step(&mut p, &[0.0; 3], &mut m, &mut v, t, &h);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![1.0f64, -4.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let h = AdamHyper { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        adamw_step(&mut p, &[0.0; 2], &mut m, &mut v, 1, &h);
        assert_eq!(p, vec![0.95, -3.8]);
        let mut q = vec![2.0f64];
        sgd_step(&mut q, &[1.0], 0.1, 0.5);
        assert!((q[0] - (2.0 * 0.95 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2.
        let mut x = vec![-2.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let h = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        for t in 1..=200 {
            let g = [2.0 * (x[0] - 3.0)];
            adamw_step(&mut x, &g, &mut m, &mut v, t, &h);
        }
        assert!((x[0] - 3.0).abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn zero_lr_is_a_no_op_on_store() {
        use crate::tensor::Tensor;
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::from_f64(&[2], &[1.5, -0.25]).unwrap()).unwrap();
        s.get_mut(id).accumulate_grad(&[3.0, -7.0]).unwrap();
        let before = s.get(id).clone();
        for kind in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, AdamHyper { lr: 0.0, ..Default::default() }, &s);
            opt.apply(&mut s).unwrap();
            assert_eq!(s.get(id).data(), before.data());
        }
    }
}
