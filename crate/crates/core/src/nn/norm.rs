use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

struct LayerNorm<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> BackwardOp<T> for LayerNorm<T> {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = ctx.value(self.x).data();
        let gamma = ctx.value(self.gamma).data();
        let g = ctx.grad();
        let d = gamma.len();
        let inv_d = T::one() / T::lit(d as f64);
        if let Some(dg) = sink.slot(self.gamma) {
            for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                for j in 0..d {
                    dg[j] += gr[j] * (xr[j] - self.mean[r]) * self.rstd[r];
                }
            }
        }
        if let Some(db) = sink.slot(self.beta) {
            for gr in g.chunks(d) {
                db.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
            }
        }
        if let Some(dx) = sink.slot(self.x) {
            for (r, ((xr, gr), dxr)) in x.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                let (mu, rs) = (self.mean[r], self.rstd[r]);
                let mut sum_dh = T::zero();
                let mut sum_dh_xh = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gamma[j];
                    sum_dh += dh;
                    sum_dh_xh += dh * (xr[j] - mu) * rs;
                }
                let (m1, m2) = (sum_dh * inv_d, sum_dh_xh * inv_d);
                for j in 0..d {
                    let xh = (xr[j] - mu) * rs;
                    dxr[j] += rs * (gr[j] * gamma[j] - m1 - xh * m2);
                }
            }
        }
    }
}

/// Normalizes over the trailing dims matching `gamma`'s shape, then applies
/// the affine `gamma * x_hat + beta`.
pub fn layernorm<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(contract_err!("layernorm eps must be positive, got {eps}"));
    }
    let xs = tape.value(x).shape();
    let gs = tape.value(gamma).shape();
    if gs != tape.value(beta).shape() || gs.len() > xs.len() || !xs.ends_with(gs) {
        return Err(shape_err!(
            "layernorm gamma {gs:?} / beta {:?} do not match trailing dims of {xs:?}",
            tape.value(beta).shape()
        ));
    }
    let xt = tape.value(x);
    let gamma_v = tape.value(gamma).data();
    let beta_v = tape.value(beta).data();
    let d = gamma_v.len();
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(eps);
    let rows = xt.numel() / d;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(xt.numel());
    for xr in xt.data().chunks(d) {
        let mu = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        out.extend((0..d).map(|j| (xr[j] - mu) * rs * gamma_v[j] + beta_v[j]));
        mean.push(mu);
        rstd.push(rs);
    }
    let value = Tensor::new(xt.shape(), out)?;
    Ok(tape.push(value, &[x, gamma, beta], LayerNorm { x, gamma, beta, mean, rstd }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Fill};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Fill::Uniform { bound: 2.0, seed }).unwrap()
    }

    #[test]
    fn unit_affine_standardizes_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand(&[3, 4, 16], 1));
        let g = t.leaf(Tensor::full(&[16], 1.0).unwrap());
        let b = t.leaf(Tensor::zeros(&[16]).unwrap());
        let y = layernorm(&mut t, x, g, b, 1e-5).unwrap();
        for row in t.value(y).data().chunks(16) {
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_rows_map_to_beta() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[2, 5], 3.0).unwrap());
        let g = t.leaf(Tensor::full(&[5], 2.0).unwrap());
        let b = t.leaf(Tensor::from_f64(&[5], &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = layernorm(&mut t, x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn eps_must_be_positive() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand(&[2, 3], 1));
        let g = t.leaf(Tensor::full(&[3], 1.0).unwrap());
        let b = t.leaf(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(layernorm(&mut t, x, g, b, 0.0), Err(crate::Error::Contract(_))));
        let g4 = t.leaf(Tensor::full(&[4], 1.0).unwrap());
        assert!(matches!(layernorm(&mut t, x, g4, b, 1e-5), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradient_all_inputs() {
        let xs = rand(&[3, 6], 2);
        let gs = rand(&[6], 3);
        let bs = rand(&[6], 4);
        let r = rand(&[3, 6], 5);
        for which in 0..3 {
            let f = |tape: &mut Tape<f64>, v: Var| {
                let mut vars = [xs.clone(), gs.clone(), bs.clone()].map(|t| tape.constant(t));
                vars[which] = v;
                let y = layernorm(tape, vars[0], vars[1], vars[2], 1e-5)?;
                let rv = tape.constant(r.clone());
                let y = ops::mul(tape, y, rv)?;
                ops::sum(tape, y)
            };
            let target = [&xs, &gs, &bs][which];
            assert!(finite_diff_check(f, target, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn layernorm_after_add_gradient() {
        let a = rand(&[4, 8], 6);
        let other = rand(&[4, 8], 7);
        let r = rand(&[4, 8], 8);
        let f = |tape: &mut Tape<f64>, v: Var| {
            let o = tape.constant(other.clone());
            let s = ops::add(tape, v, o)?;
            let g = tape.constant(Tensor::full(&[8], 1.5)?);
            let b = tape.constant(Tensor::full(&[8], -0.5)?);
            let y = layernorm(tape, s, g, b, 1e-5)?;
            let rv = tape.constant(r.clone());
            let y = ops::mul(tape, y, rv)?;
            ops::sum(tape, y)
        };
        assert!(finite_diff_check(f, &a, 1e-5).unwrap() < 1e-4);
    }
}
