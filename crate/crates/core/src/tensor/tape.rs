use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded operation.
///
/// Implementations hold the input [`Var`]s they were built from plus any
/// forward-pass state they need (argmax indices, dropout masks, ...).
pub trait BackwardOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Propagate `ctx.grad()` (the gradient w.r.t. this node's output) into
    /// the gradients of the inputs via `sink`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>);
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn BackwardOp<T>>>,
}

pub struct BackwardCtx<'a, T: Real> {
    nodes: &'a [Node<T>],
    out: usize,
    grad: &'a [T],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> &'a Tensor<T> {
        &self.nodes[self.out].value
    }

    pub fn grad(&self) -> &'a [T] {
        self.grad
    }
}

/// Write access to input gradient buffers during a backward step.
pub struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialized (on first touch) gradient buffer for `v`, or `None`
    /// when `v` does not require grad.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.wants(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.slot(v) {
            buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x);
        }
    }
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. A tape supports a single backward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.with_requires_grad(false),
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records the result of an operation over `inputs`. The backward rule is
    /// dropped when no input requires grad.
    pub fn push<O: BackwardOp<T> + 'static>(&mut self, value: Tensor<T>, inputs: &[Var], op: O) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { Some(Box::new(op)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad matches node shape"))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively over every use of a node. Calling this a second time on
    /// the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar [1] loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_deref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                out: i,
                grad: &g,
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            op.backward(&ctx, &mut sink);
        }
        self.grads = grads;
        Ok(())
    }
}
