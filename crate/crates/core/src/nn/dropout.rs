use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

/// Forward-pass mode. Training mode carries the seed every stochastic layer
/// derives its randomness from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

struct Dropout<T> {
    x: Var,
    mask: Vec<T>,
}

impl<T: Real> BackwardOp<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.slot(self.x) {
            for ((d, &g), &m) in dx.iter_mut().zip(ctx.grad()).zip(&self.mask) {
                *d += g * m;
            }
        }
    }
}

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Identity in eval mode.
pub fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, mode: Mode) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract_err!("dropout rate must lie in [0, 1), got {rate}"));
    }
    let seed = match mode {
        Mode::Train { seed } if rate > 0.0 => seed,
        _ => return Ok(x),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::lit(1.0 / (1.0 - rate));
    let xt = tape.value(x);
    let mask: Vec<T> = (0..xt.numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out = xt.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let value = Tensor::new(xt.shape(), out)?;
    Ok(tape.push(value, &[x], Dropout { x, mask }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Fill};

    #[test]
    fn identity_cases() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::create(&[4, 4], Fill::Uniform { bound: 1.0, seed: 1 }).unwrap());
        for mode in [Mode::Eval, Mode::Train { seed: 3 }] {
            let y = dropout(&mut t, x, 0.0, mode).unwrap();
            assert_eq!(t.value(y), t.value(x));
        }
        let y = dropout(&mut t, x, 0.5, Mode::Eval).unwrap();
        assert_eq!(t.value(y), t.value(x));
        assert!(matches!(dropout(&mut t, x, 1.0, Mode::Eval), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn seeded_masks() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[64], 1.0).unwrap());
        let a = dropout(&mut t, x, 0.3, Mode::Train { seed: 9 }).unwrap();
        let b = dropout(&mut t, x, 0.3, Mode::Train { seed: 9 }).unwrap();
        let c = dropout(&mut t, x, 0.3, Mode::Train { seed: 10 }).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert_ne!(t.value(a), t.value(c));
        let scale = 1.0 / 0.7;
        assert!(t.value(a).data().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-12));
    }

    #[test]
    fn expectation_preserved_over_seeds() {
        // Monte-Carlo over 20 seeds on a 10k-element tensor.
        let x = Tensor::<f64>::create(&[10_000], Fill::Uniform { bound: 1.0, seed: 4 })
            .unwrap()
            .data()
            .iter()
            .map(|v| v + 2.0)
            .collect::<Vec<_>>();
        let input_mean = x.iter().sum::<f64>() / x.len() as f64;
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(Tensor::new(&[10_000], x).unwrap());
        let mut total = 0.0;
        for seed in 0..20 {
            let y = dropout(&mut t, xv, 0.5, Mode::Train { seed }).unwrap();
            total += t.value(y).sum() / 10_000.0;
        }
        let out_mean = total / 20.0;
        assert!((out_mean - input_mean).abs() / input_mean < 0.05, "{out_mean} vs {input_mean}");
    }

    #[test]
    fn fixed_mask_gradient() {
        let x = Tensor::create(&[3, 5], Fill::Uniform { bound: 1.0, seed: 6 }).unwrap();
        let f = |tape: &mut Tape<f64>, v: Var| {
            let y = dropout(tape, v, 0.4, Mode::Train { seed: 2 })?;
            let y = ops::mul(tape, y, y)?;
            ops::sum(tape, y)
        };
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-4);
    }
}
