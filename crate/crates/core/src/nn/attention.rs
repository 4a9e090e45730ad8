use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{ops, Real, Tape, Var};

use super::linear::linear;
use super::params::LinearVars;
use super::softmax::softmax;

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

/// `[B, S, D] -> [B, heads, S, D / heads]`
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, s, d] = <[usize; 3]>::try_from(tape.shape(x)).map_err(|_| shape_err!("expected rank-3 tokens"))?;
    let x = ops::reshape(tape, x, &[b, s, heads, d / heads])?;
    ops::permute(tape, x, &[0, 2, 1, 3])
}

/// Queries from `q_tokens [B, N, D]`, keys and values from
/// `kv_tokens [B, L, D_kv]`. Returns `[B, N, D]`.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_tokens: Var,
    kv_tokens: Var,
    heads: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let qs = tape.shape(q_tokens).to_vec();
    let ks = tape.shape(kv_tokens).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
        return Err(shape_err!("attention expects [B, N, D] and [B, L, D_kv], got {qs:?} and {ks:?}"));
    }
    let d = qs[2];
    if heads == 0 || d % heads != 0 {
        return Err(contract_err!("model dim {d} is not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let q = linear(tape, q_tokens, p.q)?;
    let k = linear(tape, kv_tokens, p.k)?;
    let v = linear(tape, kv_tokens, p.v)?;
    if tape.shape(k)[2] != d || tape.shape(v)[2] != d {
        return Err(shape_err!("key/value projections must map to {d} channels"));
    }
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let scores = ops::bmm(tape, q, k, true)?;
    let scores = ops::scale(tape, scores, T::lit(1.0 / (dh as f64).sqrt()))?;
    let weights = softmax(tape, scores, 3)?;
    let ctx = ops::bmm(tape, weights, v, false)?;
    let ctx = ops::permute(tape, ctx, &[0, 2, 1, 3])?;
    let ctx = ops::reshape(tape, ctx, &[qs[0], qs[1], d])?;
    linear(tape, ctx, p.o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Fill, Tensor};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Fill::Uniform { bound: 1.0, seed }).unwrap()
    }

    fn random_vars(t: &mut Tape<f64>, d: usize, dkv: usize, seed: u64) -> AttentionVars {
        let mut lin = |cin: usize, s: u64| LinearVars {
            weight: t.leaf(rand(&[d, cin], seed * 10 + s)),
            bias: t.leaf(rand(&[d], seed * 10 + s + 5)),
        };
        AttentionVars { q: lin(d, 1), k: lin(dkv, 2), v: lin(dkv, 3), o: lin(d, 4) }
    }

    fn identity_vars(t: &mut Tape<f64>, d: usize) -> AttentionVars {
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let mut lin = || LinearVars {
            weight: t.leaf(Tensor::new(&[d, d], eye.clone()).unwrap()),
            bias: t.leaf(Tensor::zeros(&[d]).unwrap()),
        };
        AttentionVars { q: lin(), k: lin(), v: lin(), o: lin() }
    }

    #[test]
    fn single_key_output_is_query_independent() {
        let mut t = Tape::<f64>::new();
        let p = random_vars(&mut t, 8, 12, 1);
        let kv = t.leaf(rand(&[2, 1, 12], 2));
        let qa = t.leaf(rand(&[2, 6, 8], 3));
        let qb = t.leaf(rand(&[2, 6, 8], 4));
        let ya = multi_head_attention(&mut t, qa, kv, 4, &p).unwrap();
        let yb = multi_head_attention(&mut t, qb, kv, 4, &p).unwrap();
        let (ya, yb) = (t.value(ya).data(), t.value(yb).data());
        for s in 0..2 {
            let first = &ya[s * 48..s * 48 + 8];
            for n in 0..6 {
                let row = &ya[s * 48 + n * 8..s * 48 + (n + 1) * 8];
                row.iter().zip(first).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
            }
        }
        ya.iter().zip(yb).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
    }

    #[test]
    fn dominant_key_saturates() {
        let mut t = Tape::<f64>::new();
        let p = identity_vars(&mut t, 8);
        let q = t.leaf(Tensor::full(&[1, 3, 8], 1.0).unwrap());
        let mut keys = rand(&[1, 4, 8], 7).into_data().iter().map(|v| v * 0.1).collect::<Vec<_>>();
        keys[2 * 8..3 * 8].iter_mut().for_each(|v| *v = 50.0);
        let kv = t.leaf(Tensor::new(&[1, 4, 8], keys).unwrap());
        let y = multi_head_attention(&mut t, q, kv, 2, &p).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 50.0).abs() / 50.0 < 0.01, "{v}");
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut t = Tape::<f64>::new();
        let p = random_vars(&mut t, 6, 6, 1);
        let q = t.leaf(rand(&[1, 2, 6], 2));
        assert!(matches!(multi_head_attention(&mut t, q, q, 4, &p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gradients_for_queries_and_keys() {
        let qs = rand(&[2, 5, 8], 11);
        let kvs = rand(&[2, 3, 6], 12);
        let r = rand(&[2, 5, 8], 13);
        for which in 0..2 {
            let f = |tape: &mut Tape<f64>, v: Var| {
                let p = random_vars(tape, 8, 6, 3);
                let mut io = [tape.constant(qs.clone()), tape.constant(kvs.clone())];
                io[which] = v;
                let y = multi_head_attention(tape, io[0], io[1], 2, &p)?;
                let rv = tape.constant(r.clone());
                let y = ops::mul(tape, y, rv)?;
                ops::sum(tape, y)
            };
            assert!(finite_diff_check(f, [&qs, &kvs][which], 1e-5).unwrap() < 1e-4);
        }
    }
}
