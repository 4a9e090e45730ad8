//! Composite blocks: the convolutional stage, the shifted-MLP block and the
//! bottleneck text-fusion block.

use crate::error::{shape_err, Result};
use crate::nn::{
    channel_linear, conv2d, cyclic_shift, dropout, dwconv, group_offsets, layernorm, mish, multi_head_attention,
    AttentionVars, Bound, ConvGeometry, ConvParams, LayerNormParams, LinearParams, Mode, ParamStore, ShiftAxis,
};
use crate::tensor::{ops, Real, Tape, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

fn conv<T: Real>(tape: &mut Tape<T>, b: &Bound, p: &ConvParams, x: Var) -> Result<Var> {
    conv2d(tape, x, b.var(p.weight), Some(b.var(p.bias)), p.geom)
}

/// conv3x3 (pad 1) -> Mish -> conv1x1.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv: ConvParams,
    pub pointwise: ConvParams,
}

impl ConvStage {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_mid: usize, c_out: usize, seed: u64) -> Result<Self> {
        Ok(ConvStage {
            conv: ConvParams::new(store, &format!("{name}.conv"), c_in, c_mid, 3, ConvGeometry::SAME3, seed)?,
            pointwise: ConvParams::new(store, &format!("{name}.pointwise"), c_mid, c_out, 1, ConvGeometry::POINTWISE, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = conv(tape, b, &self.conv, x)?;
        let y = mish(tape, y)?;
        conv(tape, b, &self.pointwise, y)
    }
}

/// Width shift -> token linear (C -> C') -> DWConv -> Mish -> dropout ->
/// height shift -> token linear (C' -> C). The height shift acts on the C'
/// hidden channels.
#[derive(Clone, Debug)]
pub struct ShiftedMlpBlock {
    pub lin1: LinearParams,
    pub dw: ConvParams,
    pub lin2: LinearParams,
    pub dropout: f64,
    pub width_offsets: Vec<i64>,
    pub height_offsets: Vec<i64>,
    pub hidden: usize,
}

impl ShiftedMlpBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        shift_groups: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(ShiftedMlpBlock {
            lin1: LinearParams::new(store, &format!("{name}.lin1"), channels, hidden, seed)?,
            dw: ConvParams::new(store, &format!("{name}.dw"), hidden, hidden, 3, ConvGeometry::depthwise(hidden), seed)?,
            lin2: LinearParams::new(store, &format!("{name}.lin2"), hidden, channels, seed)?,
            dropout,
            width_offsets: group_offsets(channels, shift_groups),
            height_offsets: group_offsets(hidden, shift_groups),
            hidden,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let c = tape.value(x).dims4()?[1];
        if c != self.lin1.c_in {
            return Err(shape_err!("shifted-MLP block expects {} channels, got {c}", self.lin1.c_in));
        }
        let y = cyclic_shift(tape, x, ShiftAxis::Width, &self.width_offsets)?;
        let y = channel_linear(tape, y, self.lin1.vars(b))?;
        let y = dwconv(tape, y, b.var(self.dw.weight), Some(b.var(self.dw.bias)), self.dw.geom)?;
        let y = mish(tape, y)?;
        let y = dropout(tape, y, self.dropout, mode)?;
        let y = cyclic_shift(tape, y, ShiftAxis::Height, &self.height_offsets)?;
        channel_linear(tape, y, self.lin2.vars(b))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn vars(&self, b: &Bound) -> AttentionVars {
        AttentionVars { q: self.q.vars(b), k: self.k.vars(b), v: self.v.vars(b), o: self.o.vars(b) }
    }
}

/// Visual bottleneck tokens attend to text tokens; the result is added back
/// to the tokens and layer-normalized over channels.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

/// Fusion outputs. `attended` is the pre-residual attention output
/// `[B, h*w, C]`; `fused` is the normalized map `[B, C, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOut {
    pub attended: Var,
    pub fused: Var,
}

impl FusionBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, embed_dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let lin = |store: &mut ParamStore<T>, part: &str, c_in: usize| {
            LinearParams::new(store, &format!("{name}.attn.{part}"), c_in, channels, seed)
        };
        let attn = AttentionParams {
            q: lin(store, "q", channels)?,
            k: lin(store, "k", embed_dim)?,
            v: lin(store, "v", embed_dim)?,
            o: lin(store, "o", channels)?,
            heads,
        };
        Ok(FusionBlock { attn, norm: LayerNormParams::new(store, &format!("{name}.norm"), channels)? })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, v6: Var, embed: Var) -> Result<FusionOut> {
        let [n, c, h, w] = tape.value(v6).dims4()?;
        let es = tape.shape(embed).to_vec();
        if es.len() != 3 || es[0] != n || es[2] != self.attn.k.c_in {
            return Err(shape_err!(
                "text embedding must be [{n}, L, {}], got {es:?}",
                self.attn.k.c_in
            ));
        }
        let tokens = ops::permute(tape, v6, &[0, 2, 3, 1])?;
        let tokens = ops::reshape(tape, tokens, &[n, h * w, c])?;
        let attended = multi_head_attention(tape, tokens, embed, self.attn.heads, &self.attn.vars(b))?;
        let sum = ops::add(tape, attended, tokens)?;
        let r = layernorm(tape, sum, b.var(self.norm.gamma), b.var(self.norm.beta), LAYERNORM_EPS)?;
        let r = ops::reshape(tape, r, &[n, h, w, c])?;
        let fused = ops::permute(tape, r, &[0, 3, 1, 2])?;
        Ok(FusionOut { attended, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;
    use crate::tensor::{finite_diff_check, Fill, Tensor};
    use proptest::prelude::*;

    fn rand<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
        Tensor::create(shape, Fill::Uniform { bound: 1.0, seed }).unwrap()
    }

    fn zero_all<T: Real>(store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape).unwrap()).unwrap();
        }
    }

    fn eye(n: usize) -> Tensor<f64> {
        let mut v = vec![0.0; n * n];
        (0..n).for_each(|i| v[i * n + i] = 1.0);
        Tensor::new(&[n, n], v).unwrap()
    }

    /// Weighted sum against a fixed random tensor, so every output element
    /// contributes a distinct gradient.
    fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let r = tape.constant(rand(tape.shape(y), seed));
        let y = ops::mul(tape, y, r)?;
        ops::sum(tape, y)
    }

    /// Max relative gradient error w.r.t. the input and each listed param.
    fn check_block<F>(store: &ParamStore<f64>, x: &Tensor<f64>, ids: &[ParamId], fwd: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
    {
        let mut worst = finite_diff_check(
            |tape: &mut Tape<f64>, v: Var| {
                let b = store.bind(tape);
                let y = fwd(tape, &b, v)?;
                probe(tape, y, 77)
            },
            x,
            1e-5,
        )
        .unwrap();
        for &id in ids {
            let err = finite_diff_check(
                |tape: &mut Tape<f64>, v: Var| {
                    let mut b = store.bind(tape);
                    b.set(id, v);
                    let xv = tape.constant(x.clone());
                    let y = fwd(tape, &b, xv)?;
                    probe(tape, y, 77)
                },
                store.get(id),
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn conv_stage_contracts() {
        let mut store = ParamStore::<f32>::new();
        let stage = ConvStage::new(&mut store, "s", 16, 32, 32, 1).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(rand(&[2, 16, 64, 64], 2));
        let y = stage.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 32, 64, 64]);

        zero_all(&mut store);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(rand(&[1, 16, 8, 8], 3));
        let y = stage.forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.leaf(rand(&[1, 8, 8, 8], 3));
        assert!(matches!(stage.forward(&mut tape, &b, bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv_stage_gradient() {
        let mut store = ParamStore::<f64>::new();
        let stage = ConvStage::new(&mut store, "s", 2, 3, 2, 5).unwrap();
        let bias = rand(&[3], 6);
        store.set(stage.conv.bias, bias).unwrap();
        let x = rand(&[1, 2, 5, 4], 7);
        let ids = [stage.conv.weight, stage.conv.bias, stage.pointwise.weight, stage.pointwise.bias];
        let err = check_block(&store, &x, &ids, |t, b, v| stage.forward(t, b, v));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn shifted_mlp_zero_weights_give_zero() {
        let mut store = ParamStore::<f32>::new();
        let blk = ShiftedMlpBlock::new(&mut store, "m", 8, 16, 5, 0.1, 1).unwrap();
        zero_all(&mut store);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(rand(&[2, 8, 4, 4], 2));
        let y = blk.forward(&mut tape, &b, x, Mode::Train { seed: 3 }).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_mlp_collapses_to_mish() {
        let c = 6;
        let mut store = ParamStore::<f64>::new();
        let mut blk = ShiftedMlpBlock::new(&mut store, "m", c, c, 5, 0.0, 1).unwrap();
        blk.width_offsets = vec![0; c];
        blk.height_offsets = vec![0; c];
        store.set(blk.lin1.weight, eye(c)).unwrap();
        store.set(blk.lin2.weight, eye(c)).unwrap();
        let mut k = vec![0.0; c * 9];
        (0..c).for_each(|i| k[i * 9 + 4] = 1.0);
        store.set(blk.dw.weight, Tensor::new(&[c, 1, 3, 3], k).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(rand(&[2, c, 5, 5], 4));
        let y = blk.forward(&mut tape, &b, x, Mode::Train { seed: 1 }).unwrap();
        let m = mish(&mut tape, x).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(m)).unwrap() < 1e-12);
    }

    #[test]
    fn shifted_mlp_gradient_eval_mode() {
        let mut store = ParamStore::<f64>::new();
        let blk = ShiftedMlpBlock::new(&mut store, "m", 3, 6, 5, 0.1, 9).unwrap();
        store.set(blk.lin1.bias, rand(&[6], 1)).unwrap();
        store.set(blk.dw.bias, rand(&[6], 2)).unwrap();
        let x = rand(&[2, 3, 4, 5], 3);
        let ids = [blk.lin1.weight, blk.lin1.bias, blk.dw.weight, blk.dw.bias, blk.lin2.weight, blk.lin2.bias];
        let err = check_block(&store, &x, &ids, |t, b, v| blk.forward(t, b, v, Mode::Eval));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let blk = ShiftedMlpBlock::new(&mut store, "m", 8, 16, 5, 0.1, 1).unwrap();
        let fusion = FusionBlock::new(&mut store, "f", 8, 12, 4, 1).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let x = tape.leaf(rand(&[2, 8, 4, 4], 2));
            let e = tape.leaf(rand(&[2, 1, 12], 3));
            let y = blk.forward(&mut tape, &b, x, Mode::Eval).unwrap();
            let out = fusion.forward(&mut tape, &b, y, e).unwrap();
            tape.value(out.fused).clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    fn fusion_setup(c: usize, e: usize, seed: u64) -> (ParamStore<f64>, FusionBlock) {
        let mut store = ParamStore::<f64>::new();
        let blk = FusionBlock::new(&mut store, "f", c, e, 4, seed).unwrap();
        for (i, p) in [blk.attn.q, blk.attn.k, blk.attn.v, blk.attn.o].iter().enumerate() {
            store.set(p.bias, rand(&[c], seed + i as u64)).unwrap();
        }
        store.set(blk.norm.gamma, rand(&[c], seed + 10)).unwrap();
        store.set(blk.norm.beta, rand(&[c], seed + 11)).unwrap();
        (store, blk)
    }

    #[test]
    fn fusion_zero_output_projection_is_layernorm() {
        let (mut store, blk) = fusion_setup(8, 12, 1);
        store.set(blk.attn.o.weight, Tensor::zeros(&[8, 8]).unwrap()).unwrap();
        store.set(blk.attn.o.bias, Tensor::zeros(&[8]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v6 = tape.leaf(rand(&[2, 8, 3, 2], 5));
        let e = tape.leaf(rand(&[2, 1, 12], 6));
        let out = blk.fusion_and_reference(&mut tape, &b, v6, e);
        assert_eq!(out.0, out.1);
    }

    impl FusionBlock {
        fn fusion_and_reference(&self, tape: &mut Tape<f64>, b: &Bound, v6: Var, e: Var) -> (Tensor<f64>, Tensor<f64>) {
            let [n, c, h, w] = tape.value(v6).dims4().unwrap();
            let out = self.forward(tape, b, v6, e).unwrap();
            let t = ops::permute(tape, v6, &[0, 2, 3, 1]).unwrap();
            let ln = layernorm(tape, t, b.var(self.norm.gamma), b.var(self.norm.beta), LAYERNORM_EPS).unwrap();
            let ln = ops::permute(tape, ln, &[0, 3, 1, 2]).unwrap();
            assert_eq!(tape.shape(ln), &[n, c, h, w]);
            (tape.value(out.fused).clone(), tape.value(ln).clone())
        }
    }

    #[test]
    fn fusion_single_key_attention_is_constant_over_positions() {
        for seed in 0..5 {
            let (store, blk) = fusion_setup(8, 12, seed);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let v6 = tape.leaf(rand(&[2, 8, 4, 4], seed + 100));
            let e = tape.leaf(rand(&[2, 1, 12], seed + 200));
            let out = blk.forward(&mut tape, &b, v6, e).unwrap();
            for sample in tape.value(out.attended).data().chunks(16 * 8) {
                for tok in sample.chunks(8) {
                    tok.iter().zip(&sample[..8]).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn fusion_layernorm_contract_and_shape() {
        let mut store = ParamStore::<f32>::new();
        let blk = FusionBlock::new(&mut store, "f", 320, 768, 4, 3).unwrap();
        let gamma: Tensor<f32> = rand(&[320], 4);
        let beta: Tensor<f32> = rand(&[320], 5);
        store.set(blk.norm.gamma, gamma.clone()).unwrap();
        store.set(blk.norm.beta, beta.clone()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v6 = tape.leaf(rand(&[2, 320, 8, 8], 6));
        let e = tape.leaf(rand(&[2, 1, 768], 7));
        let out = blk.forward(&mut tape, &b, v6, e).unwrap();
        assert_eq!(tape.shape(out.fused), &[2, 320, 8, 8]);
        let r = tape.value(out.fused).data();
        // Per token, (r - beta) / gamma has zero mean and unit variance.
        for n in 0..2 {
            for p in 0..64 {
                let z: Vec<f64> = (0..320)
                    .map(|c| {
                        let v = r[(n * 320 + c) * 64 + p] as f64;
                        (v - beta.data()[c] as f64) / gamma.data()[c] as f64
                    })
                    .collect();
                let mean = z.iter().sum::<f64>() / 320.0;
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 320.0;
                assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
            }
        }
        let wrong = tape.leaf(rand(&[2, 1, 100], 8));
        assert!(matches!(blk.forward(&mut tape, &b, v6, wrong), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn fusion_gradient() {
        let (store, blk) = fusion_setup(8, 6, 4);
        let x = rand(&[2, 8, 2, 3], 12);
        let e = rand(&[2, 2, 6], 13);
        let ids = [blk.attn.q.weight, blk.attn.k.weight, blk.attn.v.bias, blk.attn.o.weight, blk.norm.gamma, blk.norm.beta];
        let err = check_block(&store, &x, &ids, |t, b, v| {
            let ev = t.constant(e.clone());
            Ok(blk.forward(t, b, v, ev)?.fused)
        });
        assert!(err < 1e-4, "{err}");
        let err = finite_diff_check(
            |tape: &mut Tape<f64>, v: Var| {
                let b = store.bind(tape);
                let xv = tape.constant(x.clone());
                let y = blk.forward(tape, &b, xv, v)?.fused;
                probe(tape, y, 5)
            },
            &e,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shifted_mlp_preserves_shape(c in 1usize..9, mult in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let mut store = ParamStore::<f32>::new();
            let blk = ShiftedMlpBlock::new(&mut store, "m", c, c * mult, 5, 0.1, seed).unwrap();
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let x = tape.leaf(rand(&[2, c, h, w], seed));
            let y = blk.forward(&mut tape, &b, x, Mode::Train { seed }).unwrap();
            prop_assert_eq!(tape.shape(y), &[2, c, h, w][..]);
        }
    }
}
