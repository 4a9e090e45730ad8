use crate::error::{shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

struct MaxPool2 {
    x: Var,
    argmax: Vec<u32>,
}

impl<T: Real> BackwardOp<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.slot(self.x) {
            for (&i, &g) in self.argmax.iter().zip(ctx.grad()) {
                dx[i as usize] += g;
            }
        }
    }
}

/// 2x2 non-overlapping max pooling. Ties go to the first window element in
/// row-major order.
pub fn maxpool2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xt = tape.value(x);
    let [b, c, h, w] = xt.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xv = xt.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + 2 * y * w + 2 * xx;
                for cand in [best + 1, best + w, best + w + 1] {
                    if xv[cand] > xv[best] {
                        best = cand;
                    }
                }
                out.push(xv[best]);
                argmax.push(best as u32);
            }
        }
    }
    let value = Tensor::new(&[b, c, ho, wo], out)?;
    Ok(tape.push(value, &[x], MaxPool2 { x, argmax }))
}

struct Upsample2 {
    x: Var,
}

impl<T: Real> BackwardOp<T> for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let [_, _, h, w] = ctx.value(self.x).dims4().expect("rank-4 by construction");
        let g = ctx.grad();
        if let Some(dx) = sink.slot(self.x) {
            for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xt = tape.value(x);
    let [b, c, h, w] = xt.dims4()?;
    let mut out = Vec::with_capacity(b * c * 4 * h * w);
    for plane in xt.data().chunks(h * w) {
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            out.extend(row.iter().flat_map(|&v| [v, v]));
        }
    }
    let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
    Ok(tape.push(value, &[x], Upsample2 { x }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Fill};
    use proptest::prelude::*;

    #[test]
    fn pool_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap().with_requires_grad(true));
        let y = maxpool2(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);
        let s = ops::sum(&mut t, y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let c = t.leaf(Tensor::full(&[2, 3, 4, 6], 7.0).unwrap().with_requires_grad(true));
        let y = maxpool2(&mut t, c).unwrap();
        assert_eq!(t.shape(y), &[2, 3, 2, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 7.0));
        let s = ops::sum(&mut t, y).unwrap();
        t.backward(s).unwrap();
        // Ties route to the window's first element.
        let g = t.grad(c).unwrap();
        assert_eq!(g.iter().sum::<f64>(), 36.0);
        assert_eq!(&g[..6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(&g[6..12], &[0.0; 6]);

        let odd = t.leaf(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
        assert!(matches!(maxpool2(&mut t, odd), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn upsample_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(&[1, 1, 1, 1], &[5.0]).unwrap());
        let y = upsample2(&mut t, x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[5.0; 4]);
    }

    #[test]
    fn gradients() {
        let x = Tensor::create(&[2, 2, 4, 6], Fill::Uniform { bound: 1.0, seed: 2 }).unwrap();
        let r = Tensor::create(&[2, 2, 2, 3], Fill::Uniform { bound: 1.0, seed: 3 }).unwrap();
        let f = |tape: &mut Tape<f64>, v: Var| {
            let y = maxpool2(tape, v)?;
            let rv = tape.constant(r.clone());
            let y = ops::mul(tape, y, rv)?;
            ops::sum(tape, y)
        };
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-4);
        let r2 = Tensor::create(&[2, 2, 8, 12], Fill::Uniform { bound: 1.0, seed: 4 }).unwrap();
        let f = |tape: &mut Tape<f64>, v: Var| {
            let y = upsample2(tape, v)?;
            let rv = tape.constant(r2.clone());
            let y = ops::mul(tape, y, rv)?;
            ops::sum(tape, y)
        };
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-4);
    }

    proptest! {
        #[test]
        fn pool_inverts_upsample(b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(Tensor::create(&[b, c, h, w], Fill::Uniform { bound: 1.0, seed }).unwrap());
            let up = upsample2(&mut t, x).unwrap();
            prop_assert_eq!(t.shape(up), &[b, c, 2 * h, 2 * w][..]);
            let back = maxpool2(&mut t, up).unwrap();
            prop_assert_eq!(t.value(back), t.value(x));
        }
    }
}
