//! Analytic parameter / FLOP accounting and epoch timing.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs and bias additions
//! are not counted, so a convolution costs `2 k^2 (C_in / groups) C_out H' W'`
//! and a linear layer `2 C_in C_out tokens`. Elementwise work uses the
//! per-element constants below. Data movement (shifts, upsampling, concat,
//! reshapes) and eval-mode dropout cost nothing.

use std::fmt;
use std::time::Instant;

use crate::blocks::ConvStage;
use crate::error::{shape_err, Result};
use crate::model::{DocParseNet, EncoderStage, REDUCTION, STAGES};
use crate::nn::{ConvParams, LinearParams, ParamStore};
use crate::tensor::Real;

pub const MISH_FLOPS: u64 = 4;
/// Three comparisons per 2x2 window.
pub const MAXPOOL_FLOPS: u64 = 3;
/// Per score: max-subtract, exp, divide.
pub const SOFTMAX_FLOPS: u64 = 3;
/// Per score: the `1 / sqrt(d_head)` scaling.
pub const SCALE_FLOPS: u64 = 1;
/// Per element: mean, centre, square, scale, affine.
pub const LAYERNORM_FLOPS: u64 = 5;
pub const ADD_FLOPS: u64 = 1;
/// A training step is counted as forward + backward at twice the forward.
pub const TRAIN_STEP_FACTOR: u64 = 3;
pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    /// Parameter tensors owned by this row.
    pub param_names: Vec<String>,
    pub params: u64,
    pub flops: u64,
    /// Output elements this layer produces (for the memory estimate).
    pub activations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub batch: usize,
    pub input: (usize, usize),
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub forward_flops: u64,
    pub train_step_flops: u64,
    /// Rough training peak: parameters, gradients and two AdamW moments,
    /// plus every layer output kept for backward, at 4 bytes per value.
    pub peak_bytes: u64,
}

struct Builder<'a, T> {
    store: &'a ParamStore<T>,
    batch: u64,
    rows: Vec<CostRow>,
}

impl<T: Real> Builder<'_, T> {
    fn row(&mut self, name: String, kind: &'static str, ids: &[crate::nn::ParamId], flops: u64, activations: u64) {
        let param_names: Vec<String> = ids.iter().map(|&id| self.store.name(id).to_string()).collect();
        let params = ids.iter().map(|&id| self.store.get(id).numel() as u64).sum();
        self.rows.push(CostRow { name, kind, param_names, params, flops: flops * self.batch, activations: activations * self.batch });
    }

    fn conv(&mut self, name: &str, p: &ConvParams, hw: u64) {
        let macs = (p.k * p.k * (p.c_in / p.geom.groups) * p.c_out) as u64 * hw;
        let kind = if p.is_depthwise() { "dwconv" } else { "conv" };
        self.row(name.to_string(), kind, &[p.weight, p.bias], 2 * macs, p.c_out as u64 * hw);
    }

    fn linear(&mut self, name: &str, p: &LinearParams, tokens: u64) {
        self.row(name.to_string(), "linear", &[p.weight, p.bias], 2 * (p.c_in * p.c_out) as u64 * tokens, p.c_out as u64 * tokens);
    }

    fn elementwise(&mut self, name: String, kind: &'static str, per: u64, elements: u64) {
        self.row(name, kind, &[], per * elements, elements);
    }

    fn conv_stage(&mut self, name: &str, s: &ConvStage, hw: u64) {
        self.conv(&format!("{name}.conv"), &s.conv, hw);
        self.elementwise(format!("{name}.mish"), "mish", MISH_FLOPS, s.conv.c_out as u64 * hw);
        self.conv(&format!("{name}.pointwise"), &s.pointwise, hw);
    }
}

/// Per-layer costs of one forward pass on `batch` images of size `input`.
pub fn cost_report<T: Real>(model: &DocParseNet<T>, input: (usize, usize), batch: usize) -> Result<CostReport> {
    let (h, w) = input;
    if h == 0 || w == 0 || h % REDUCTION != 0 || w % REDUCTION != 0 {
        return Err(shape_err!("profile input {h}x{w} must be positive multiples of {REDUCTION}"));
    }
    let mut b = Builder { store: &model.params, batch: batch as u64, rows: Vec::new() };
    let (mut sh, mut sw) = (h as u64, w as u64);
    let mut channels = Vec::with_capacity(STAGES);
    for (i, stage) in model.encoder.iter().enumerate() {
        let name = format!("enc{}", i + 1);
        let hw = sh * sw;
        let c = match stage {
            EncoderStage::Conv(s) => {
                b.conv_stage(&name, s, hw);
                s.pointwise.c_out
            }
            EncoderStage::Mlp(s) => {
                let blk = &s.block;
                b.linear(&format!("{name}.proj"), &s.proj, hw);
                b.linear(&format!("{name}.mlp.lin1"), &blk.lin1, hw);
                b.conv(&format!("{name}.mlp.dw"), &blk.dw, hw);
                b.elementwise(format!("{name}.mlp.mish"), "mish", MISH_FLOPS, blk.hidden as u64 * hw);
                b.linear(&format!("{name}.mlp.lin2"), &blk.lin2, hw);
                blk.lin2.c_out
            }
        };
        channels.push(c as u64);
        if i + 1 < STAGES {
            sh /= 2;
            sw /= 2;
            b.elementwise(format!("{name}.pool"), "maxpool", MAXPOOL_FLOPS, c as u64 * sh * sw);
        }
    }
    let f = &model.fusion;
    let (n, c) = (sh * sw, channels[STAGES - 1]);
    let text_tokens = 1;
    let heads = f.attn.heads as u64;
    b.linear("fusion.attn.q", &f.attn.q, n);
    b.linear("fusion.attn.k", &f.attn.k, text_tokens);
    b.linear("fusion.attn.v", &f.attn.v, text_tokens);
    let scores = heads * n * text_tokens;
    b.row(
        "fusion.attn.core".into(),
        "attention",
        &[],
        2 * 2 * n * text_tokens * c + (SCALE_FLOPS + SOFTMAX_FLOPS) * scores,
        scores + n * c,
    );
    b.linear("fusion.attn.o", &f.attn.o, n);
    b.elementwise("fusion.residual".into(), "add", ADD_FLOPS, n * c);
    b.row("fusion.norm".into(), "layernorm", &[f.norm.gamma, f.norm.beta], LAYERNORM_FLOPS * n * c, n * c);
    for (level, stage) in model.decoder.iter().enumerate().rev() {
        sh *= 2;
        sw *= 2;
        b.conv_stage(&format!("dec{}", level + 1), stage, sh * sw);
    }
    b.conv("head", &model.head, sh * sw);

    let rows = b.rows;
    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let forward_flops: u64 = rows.iter().map(|r| r.flops).sum();
    let activations: u64 = rows.iter().map(|r| r.activations).sum();
    Ok(CostReport {
        batch,
        input,
        total_params,
        forward_flops,
        train_step_flops: TRAIN_STEP_FACTOR * forward_flops,
        peak_bytes: BYTES_PER_VALUE * (4 * total_params + activations),
        rows,
    })
}

pub fn count_flops<T: Real>(model: &DocParseNet<T>, input: (usize, usize), batch: usize) -> Result<u64> {
    Ok(cost_report(model, input, batch)?.forward_flops)
}

pub fn count_params<T: Real>(model: &DocParseNet<T>) -> u64 {
    model.count_params() as u64
}

impl CostReport {
    /// Parameter names that are not in exactly one row, for a coverage
    /// check against a store.
    pub fn coverage_gaps<T: Real>(&self, store: &ParamStore<T>) -> Vec<String> {
        let mut gaps = Vec::new();
        for (name, _) in store.iter() {
            let hits = self.rows.iter().filter(|r| r.param_names.iter().any(|n| n == name)).count();
            if hits != 1 {
                gaps.push(name.to_string());
            }
        }
        let listed: usize = self.rows.iter().map(|r| r.param_names.len()).sum();
        if listed != store.len() {
            gaps.push(format!("<{listed} listed vs {} stored>", store.len()));
        }
        gaps
    }

    /// One `key=value` line per row plus a totals line.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("row name={} kind={} params={} flops={}\n", r.name, r.kind, r.params, r.flops));
        }
        out.push_str(&format!(
            "total batch={} input={}x{} params={} forward_flops={} train_step_flops={} peak_bytes={}\n",
            self.batch, self.input.0, self.input.1, self.total_params, self.forward_flops, self.train_step_flops, self.peak_bytes
        ));
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# FLOP convention: 1 multiply-accumulate = 2 FLOPs, bias adds not counted; per element: \
             mish {MISH_FLOPS}, maxpool {MAXPOOL_FLOPS}, softmax {SOFTMAX_FLOPS}, scale {SCALE_FLOPS}, \
             layernorm {LAYERNORM_FLOPS}, add {ADD_FLOPS}"
        )?;
        writeln!(f, "# batch {} input {}x{}", self.batch, self.input.0, self.input.1)?;
        writeln!(f, "{:<22} {:<10} {:>12} {:>16}", "layer", "kind", "params", "flops")?;
        for r in &self.rows {
            writeln!(f, "{:<22} {:<10} {:>12} {:>16}", r.name, r.kind, r.params, r.flops)?;
        }
        writeln!(f, "params: {} ({:.2}M)", self.total_params, self.total_params as f64 / 1e6)?;
        writeln!(f, "forward FLOPs: {} ({:.4} TFLOPs)", self.forward_flops, self.forward_flops as f64 / 1e12)?;
        writeln!(
            f,
            "train-step FLOPs ({TRAIN_STEP_FACTOR}x forward): {} ({:.4} TFLOPs)",
            self.train_step_flops,
            self.train_step_flops as f64 / 1e12
        )?;
        write!(f, "peak memory estimate: {:.1} MiB", self.peak_bytes as f64 / (1024.0 * 1024.0))
    }
}

/// Runs one epoch body and returns its result with monotonic wall seconds.
pub fn time_epoch<R>(epoch: impl FnOnce() -> Result<R>) -> Result<(R, f64)> {
    let start = Instant::now();
    let r = epoch()?;
    Ok((r, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::{ConvGeometry, Mode};
    use crate::tensor::{Fill, Tape, Tensor};

    fn default_model() -> DocParseNet<f32> {
        DocParseNet::build(&ModelConfig::default()).unwrap()
    }

    #[test]
    fn single_layer_formulas() {
        let mut s = ParamStore::<f32>::new();
        let head = ConvParams::new(&mut s, "h", 320, 5, 1, ConvGeometry::POINTWISE, 0).unwrap();
        let lin = LinearParams::new(&mut s, "l", 768, 5, 0).unwrap();
        let mut b = Builder { store: &s, batch: 1, rows: Vec::new() };
        b.conv("h", &head, 64);
        b.linear("l", &lin, 1);
        assert_eq!(b.rows[0].flops, 204_800);
        assert_eq!(b.rows[0].params, 1605);
        assert_eq!(b.rows[1].params, 3845);
    }

    #[test]
    fn totals_and_coverage() {
        let m = default_model();
        let r = cost_report(&m, (256, 256), 1).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_params, m.count_params() as u64);
        assert_eq!(r.forward_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
        assert!(r.coverage_gaps(&m.params).is_empty(), "{:?}", r.coverage_gaps(&m.params));
        let mut names: Vec<&str> = r.rows.iter().map(|x| x.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), r.rows.len());
        let text = r.to_string();
        assert!(text.contains("1 multiply-accumulate = 2 FLOPs"));
        assert!(text.contains(&format!("({:.2}M)", r.total_params as f64 / 1e6)));
        assert_eq!(r.machine_lines().lines().count(), r.rows.len() + 1);
    }

    #[test]
    fn scaling_laws() {
        let m = default_model();
        let one = count_flops(&m, (64, 64), 1).unwrap();
        for batch in [2, 3, 7] {
            assert_eq!(count_flops(&m, (64, 64), batch).unwrap(), batch as u64 * one);
        }
        let small = cost_report(&m, (64, 64), 1).unwrap();
        let big = cost_report(&m, (128, 128), 1).unwrap();
        for (a, b) in small.rows.iter().zip(&big.rows) {
            if a.name.starts_with("enc1") || a.name.starts_with("dec1") {
                assert_eq!(b.flops, 4 * a.flops, "{}", a.name);
            }
        }
        assert!(cost_report(&m, (100, 64), 1).is_err());
    }

    #[test]
    fn params_unchanged_by_training_pass() {
        let cfg = ModelConfig { crop: (32, 32), ..ModelConfig::default() };
        let m = DocParseNet::<f32>::build(&cfg).unwrap();
        let before = count_params(&m);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::create(&[1, 3, 32, 32], Fill::Uniform { bound: 1.0, seed: 1 }).unwrap());
        let e = tape.constant(Tensor::zeros(&[1, 1, 768]).unwrap());
        let out = m.forward(&mut tape, &b, x, e, Mode::Train { seed: 3 }).unwrap();
        let loss = crate::tensor::ops::sum(&mut tape, out.logits).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(count_params(&m), before);
        assert_eq!(m.params.len(), DocParseNet::<f32>::build(&cfg).unwrap().params.len());
    }

    #[test]
    fn timing_is_positive() {
        let ((), s) = time_epoch(|| {
            std::thread::sleep(std::time::Duration::from_millis(5));
            Ok(())
        })
        .unwrap();
        assert!(s >= 0.005);
    }
}
