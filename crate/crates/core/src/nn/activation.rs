use crate::error::Result;
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential:
/// with `n = e^x (e^x + 2)`, `tanh(ln(1 + e^x)) = n / (n + 2)`.
fn mish_parts<T: Real>(x: T) -> (T, T) {
    if x > T::lit(20.0) {
        return (T::one(), sigmoid(x));
    }
    let e = x.exp();
    let n = e * (e + T::lit(2.0));
    (n / (n + T::lit(2.0)), e / (T::one() + e))
}

/// `x * tanh(softplus(x))`.
pub fn mish_scalar<T: Real>(x: T) -> T {
    x * mish_parts(x).0
}

/// d/dx mish = tanh(sp) + x * sech^2(sp) * sigmoid(x).
pub fn mish_grad_scalar<T: Real>(x: T) -> T {
    let (t, s) = mish_parts(x);
    t + x * (T::one() - t * t) * s
}

struct Mish {
    x: Var,
}

impl<T: Real> BackwardOp<T> for Mish {
    fn name(&self) -> &'static str {
        "mish"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let xs = ctx.value(self.x).data();
        if let Some(gx) = sink.slot(self.x) {
            for ((d, &g), &x) in gx.iter_mut().zip(ctx.grad()).zip(xs) {
                *d += g * mish_grad_scalar(x);
            }
        }
    }
}

pub fn mish<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xt = tape.value(x);
    let value = Tensor::new(xt.shape(), xt.data().iter().map(|&v| mish_scalar(v)).collect())?;
    Ok(tape.push(value, &[x], Mish { x }))
}
