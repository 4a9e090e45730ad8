use crate::error::{contract_err, Result};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    x: Var,
    axis: usize,
}

impl<T: Real> BackwardOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let y = ctx.output();
        let (outer, n, inner) = split(y.shape(), self.axis);
        let (yv, g) = (y.data(), ctx.grad());
        if let Some(dx) = sink.slot(self.x) {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g[at(k)] * yv[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] += yv[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let xt = tape.value(x);
    if axis >= xt.rank() {
        return Err(contract_err!("softmax axis {axis} out of range for {:?}", xt.shape()));
    }
    let (outer, n, inner) = split(xt.shape(), axis);
    let xv = xt.data();
    let mut out = vec![T::zero(); xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xv[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..n {
                let e = (xv[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    let value = Tensor::new(xt.shape(), out)?;
    Ok(tape.push(value, &[x], Softmax { x, axis }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Fill};
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        let mut t = Tape::<f64>::new();
        let one = t.leaf(Tensor::from_f64(&[3, 1], &[5.0, -2.0, 0.1]).unwrap());
        let y = softmax(&mut t, one, 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0]);
        let z = t.leaf(Tensor::zeros(&[2]).unwrap());
        let y = softmax(&mut t, z, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shift_invariance() {
        let mut t = Tape::<f64>::new();
        let x = Tensor::create(&[4, 7], Fill::Uniform { bound: 3.0, seed: 3 }).unwrap();
        let shifted = Tensor::new(&[4, 7], x.data().iter().map(|v| v + 100.0).collect()).unwrap();
        let a = t.leaf(x);
        let b = t.leaf(shifted);
        let ya = softmax(&mut t, a, 1).unwrap();
        let yb = softmax(&mut t, b, 1).unwrap();
        assert!(t.value(ya).max_abs_diff(t.value(yb)).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_middle_axis() {
        let x = Tensor::create(&[2, 3, 4], Fill::Uniform { bound: 2.0, seed: 5 }).unwrap();
        let r = Tensor::create(&[2, 3, 4], Fill::Uniform { bound: 1.0, seed: 6 }).unwrap();
        for axis in 0..3 {
            let f = |tape: &mut Tape<f64>, v: Var| {
                let y = softmax(tape, v, axis)?;
                let rv = tape.constant(r.clone());
                let y = ops::mul(tape, y, rv)?;
                ops::sum(tape, y)
            };
            assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(vals in proptest::collection::vec(-500.0f64..500.0, 12)) {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(&[3, 4], vals).unwrap());
            let y = softmax(&mut t, x, 1).unwrap();
            for row in t.value(y).data().chunks(4) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
