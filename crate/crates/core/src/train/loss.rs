//! Per-channel binary cross-entropy plus soft-Dice, fused into one op.

use crate::error::{contract_err, shape_err, Result};
use crate::nn::{sigmoid, softplus};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

/// `(bce, dice)` of one channel, pooled over batch and pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelTerms {
    pub bce: f64,
    pub dice: f64,
}

fn check<T: Real>(logits: &Tensor<T>, masks: &Tensor<T>) -> Result<[usize; 4]> {
    if logits.shape() != masks.shape() {
        return Err(shape_err!("logits {:?} vs masks {:?}", logits.shape(), masks.shape()));
    }
    let dims = logits.dims4()?;
    if masks.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(contract_err!("masks must contain only 0 and 1"));
    }
    Ok(dims)
}

/// Indices of channel `c` in an NCHW buffer.
fn channel(dims: [usize; 4], c: usize) -> impl Iterator<Item = usize> {
    let [n, ch, h, w] = dims;
    let hw = h * w;
    (0..n).flat_map(move |b| {
        let start = (b * ch + c) * hw;
        start..start + hw
    })
}

/// Sums for channel `c`: (bce sum, sum p*y, sum p, sum y).
fn sums<T: Real>(x: &[T], y: &[T], dims: [usize; 4], c: usize) -> (T, T, T, T) {
    let z = T::zero();
    channel(dims, c).fold((z, z, z, z), |(b, py, sp, sy), i| {
        let p = sigmoid(x[i]);
        (b + softplus(x[i]) - x[i] * y[i], py + p * y[i], sp + p, sy + y[i])
    })
}

pub fn loss_terms<T: Real>(logits: &Tensor<T>, masks: &Tensor<T>) -> Result<Vec<ChannelTerms>> {
    let dims = check(logits, masks)?;
    let per = (dims[0] * dims[2] * dims[3]) as f64;
    Ok((0..dims[1])
        .map(|c| {
            let (b, py, sp, sy) = sums(logits.data(), masks.data(), dims, c);
            let s = T::lit(DICE_SMOOTH);
            let dice = (T::lit(2.0) * py + s) / (sp + sy + s);
            ChannelTerms { bce: b.to_f64().unwrap_or(f64::NAN) / per, dice: dice.to_f64().unwrap_or(f64::NAN) }
        })
        .collect())
}

struct BceDice<T> {
    logits: Var,
    masks: Tensor<T>,
}

impl<T: Real> BackwardOp<T> for BceDice<T> {
    fn name(&self) -> &'static str {
        "bce_dice"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let xt = ctx.value(self.logits);
        let (x, y) = (xt.data(), self.masks.data());
        let dims = xt.dims4().expect("checked in forward");
        let g = ctx.grad()[0];
        let n = T::lit((dims[0] * dims[2] * dims[3]) as f64);
        let cinv = T::one() / T::lit(dims[1] as f64);
        let s = T::lit(DICE_SMOOTH);
        let two = T::lit(2.0);
        let Some(dx) = sink.slot(self.logits) else { return };
        for c in 0..dims[1] {
            let (_, py, sp, sy) = sums(x, y, dims, c);
            let den = sp + sy + s;
            let num = two * py + s;
            for i in channel(dims, c) {
                let p = sigmoid(x[i]);
                let d_dice_dp = two * y[i] / den - num / (den * den);
                dx[i] += g * cinv * ((p - y[i]) / n - d_dice_dp * p * (T::one() - p));
            }
        }
    }
}

/// Mean over channels of `BCE_c + 1 - Dice_c`, where channel `c` pools the
/// whole batch. `logits`, `masks`: `[B, C, H, W]`.
pub fn bce_dice_loss<T: Real>(tape: &mut Tape<T>, logits: Var, masks: &Tensor<T>) -> Result<Var> {
    let terms = loss_terms(tape.value(logits), masks)?;
    let total: f64 = terms.iter().map(|t| t.bce + 1.0 - t.dice).sum::<f64>() / terms.len() as f64;
    let value = Tensor::new(&[1], vec![T::lit(total)])?;
    Ok(tape.push(value, &[logits], BceDice { logits, masks: masks.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Fill};

    fn mask(seed: u64) -> Tensor<f64> {
        let r: Tensor<f64> = Tensor::create(&[2, 5, 3, 4], Fill::Uniform { bound: 1.0, seed }).unwrap();
        Tensor::new(r.shape(), r.data().iter().map(|&v| if v > 0.2 { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    fn eval(logits: &Tensor<f64>, m: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let l = bce_dice_loss(&mut tape, x, m).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn perfect_logits_give_small_loss() {
        let m = mask(1);
        let logits = Tensor::new(m.shape(), m.data().iter().map(|&v| if v > 0.5 { 10.0 } else { -10.0 }).collect()).unwrap();
        assert!(eval(&logits, &m) < 0.01);
    }

    #[test]
    fn zero_logits_give_ln2_bce() {
        let m = mask(2);
        for t in loss_terms(&Tensor::zeros(m.shape()).unwrap(), &m).unwrap() {
            assert!((t.bce - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let y = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        // p = 0.5 everywhere: dice = (2 * 0.5 + 1) / (2 + 1 + 1).
        assert!((eval(&x, &y) - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_binary_masks() {
        let mut m = mask(3);
        m.data_mut()[0] = 0.5;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(m.shape()).unwrap());
        assert!(matches!(bce_dice_loss(&mut tape, x, &m), Err(crate::Error::Contract(_))));
        let x = tape.constant(Tensor::zeros(&[2, 5, 3, 3]).unwrap());
        assert!(matches!(bce_dice_loss(&mut tape, x, &mask(1)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = mask(4);
        let x = Tensor::create(&[2, 5, 3, 4], Fill::Uniform { bound: 3.0, seed: 5 }).unwrap();
        let err = finite_diff_check(|t, v| bce_dice_loss(t, v, &m), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
