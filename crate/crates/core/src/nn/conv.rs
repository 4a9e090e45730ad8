//! Grouped 2-D convolution (im2col + GEMM) and a direct depthwise kernel.

use rayon::prelude::*;

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{gemm, BackwardCtx, BackwardOp, GradSink, MatRef, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry { stride: 1, padding: 1, groups: 1 };
    pub const POINTWISE: ConvGeometry = ConvGeometry { stride: 1, padding: 0, groups: 1 };

    pub fn depthwise(channels: usize) -> Self {
        ConvGeometry { stride: 1, padding: 1, groups: channels }
    }

    pub fn out_size(&self, size: usize, k: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= k && self.stride > 0).then(|| (padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.c_in / self.g.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.g.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn depthwise(&self) -> bool {
        self.g.groups == self.c_in && self.g.groups == self.c_out
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.padding == 0
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeometry) -> Result<Dims> {
    let [batch, c_in, h, wd] = x.dims4()?;
    let [c_out, cin_g, k, k2] = w.dims4()?;
    if g.groups == 0 || g.stride == 0 {
        return Err(contract_err!("conv stride and groups must be positive: {g:?}"));
    }
    if k != k2 {
        return Err(shape_err!("square kernels only, got {k}x{k2}"));
    }
    if c_in % g.groups != 0 || c_out % g.groups != 0 {
        return Err(contract_err!("channels {c_in}->{c_out} not divisible by groups {}", g.groups));
    }
    if cin_g * g.groups != c_in {
        return Err(shape_err!(
            "weight expects {} input channels, input has {c_in}",
            cin_g * g.groups
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err!("bias shape {:?} for {c_out} output channels", b.shape()));
        }
    }
    let (ho, wo) = match (g.out_size(h, k), g.out_size(wd, k)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err!("{h}x{wd} input smaller than {k}x{k} kernel after padding")),
    };
    Ok(Dims { batch, c_in, h, w: wd, c_out, k, ho, wo, g })
}

/// Output columns `ox` whose input column `ox * s + j - p` lies in `0..w`.
fn valid_cols(d: &Dims, j: usize) -> (usize, usize) {
    let (s, p) = (d.g.stride, d.g.padding);
    let lo = if j >= p { 0 } else { (p - j).div_ceil(s) };
    let hi = if d.w + p > j { ((d.w + p - j - 1) / s + 1).min(d.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds channels `c0..c0 + d.cin_g()` of one sample into `[rows, ho * wo]`.
fn im2col<T: Real>(x: &[T], d: &Dims, c0: usize, cols: &mut [T]) {
    let (k, s, p) = (d.k, d.g.stride, d.g.padding as isize);
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin_g() {
        let plane = &x[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for i in 0..k {
            for j in 0..k {
                let (lo, hi) = valid_cols(d, j);
                let row = &mut cols[((c * k + i) * k + j) * hw_out..][..hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * s + i) as isize - p;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let ix0 = lo * s + j - d.g.padding;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (n, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + n * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the input planes.
fn col2im<T: Real>(cols: &[T], d: &Dims, c0: usize, x: &mut [T]) {
    let (k, s, p) = (d.k, d.g.stride, d.g.padding as isize);
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin_g() {
        let plane = &mut x[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for i in 0..k {
            for j in 0..k {
                let (lo, hi) = valid_cols(d, j);
                if lo >= hi {
                    continue;
                }
                let row = &cols[((c * k + i) * k + j) * hw_out..][..hw_out];
                let ix0 = lo * s + j - d.g.padding;
                for oy in 0..d.ho {
                    let iy = (oy * s + i) as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.wo + lo..oy * d.wo + hi];
                    for (n, &v) in src.iter().enumerate() {
                        dst[ix0 + n * s] += v;
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], d: &Dims, out: &mut [T]) {
    let (k, s, p) = (d.k, d.g.stride as isize, d.g.padding as isize);
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let ker = &w[c * k * k..(c + 1) * k * k];
        let o = &mut out[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for i in 0..k {
            for j in 0..k {
                let wv = ker[i * k + j];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + i as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in o[oy * d.wo..(oy + 1) * d.wo].iter_mut().enumerate() {
                        let ix = ox as isize * s + j as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            *v += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates depthwise input and/or weight gradients for one sample.
fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &Dims,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, s, p) = (d.k, d.g.stride as isize, d.g.padding as isize);
    for c in 0..d.c_in {
        let pl = c * d.h * d.w..(c + 1) * d.h * d.w;
        let gp = &g[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for i in 0..k {
            for j in 0..k {
                let widx = c * k * k + i * k + j;
                let mut acc = T::zero();
                for oy in 0..d.ho {
                    let iy = oy as isize * s + i as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let row = pl.start + iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = ox as isize * s + j as isize - p;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let gv = gp[oy * d.wo + ox];
                        let xi = row + ix as usize;
                        acc += gv * x[xi];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += gv * w[widx];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

fn forward_sample<T: Real>(x: &[T], w: &[T], d: &Dims, out: &mut [T]) {
    if d.depthwise() {
        out.fill(T::zero());
        depthwise_forward(x, w, d, out);
        return;
    }
    let hw = d.ho * d.wo;
    let rows = d.col_rows();
    let mut cols = if d.pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    for gi in 0..d.g.groups {
        let c0 = gi * d.cin_g();
        let colref = if d.pointwise() {
            &x[c0 * hw..(c0 + rows) * hw]
        } else {
            im2col(x, d, c0, &mut cols);
            &cols[..]
        };
        let wg = &w[gi * d.cout_g() * rows..(gi + 1) * d.cout_g() * rows];
        let og = &mut out[gi * d.cout_g() * hw..(gi + 1) * d.cout_g() * hw];
        gemm(d.cout_g(), rows, hw, T::one(), MatRef::rm(wg, rows), MatRef::rm(colref, hw), T::zero(), og);
    }
}

struct Conv2d {
    x: Var,
    w: Var,
    b: Option<Var>,
    d: Dims,
}

impl<T: Real> BackwardOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let d = self.d;
        let g = ctx.grad();
        let x = ctx.value(self.x).data();
        let w = ctx.value(self.w).data();
        let in_sz = d.c_in * d.h * d.w;
        let hw = d.ho * d.wo;
        let out_sz = d.c_out * hw;
        if let Some(b) = self.b {
            if let Some(db) = sink.slot(b) {
                for s in 0..d.batch {
                    for (c, dbc) in db.iter_mut().enumerate() {
                        *dbc += g[s * out_sz + c * hw..s * out_sz + (c + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if d.depthwise() {
            if let Some(dw) = sink.slot(self.w) {
                for s in 0..d.batch {
                    depthwise_backward(&x[s * in_sz..(s + 1) * in_sz], w, &g[s * out_sz..(s + 1) * out_sz], &d, None, Some(&mut *dw));
                }
            }
            if let Some(dx) = sink.slot(self.x) {
                dx.par_chunks_mut(in_sz).enumerate().for_each(|(s, dxs)| {
                    depthwise_backward(&x[s * in_sz..(s + 1) * in_sz], w, &g[s * out_sz..(s + 1) * out_sz], &d, Some(dxs), None);
                });
            }
            return;
        }
        let rows = d.col_rows();
        if let Some(dw) = sink.slot(self.w) {
            let mut cols = if d.pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
            for s in 0..d.batch {
                let xs = &x[s * in_sz..(s + 1) * in_sz];
                for gi in 0..d.g.groups {
                    let c0 = gi * d.cin_g();
                    let colref = if d.pointwise() {
                        &xs[c0 * hw..(c0 + rows) * hw]
                    } else {
                        im2col(xs, &d, c0, &mut cols);
                        &cols[..]
                    };
                    let gg = &g[s * out_sz + gi * d.cout_g() * hw..s * out_sz + (gi + 1) * d.cout_g() * hw];
                    let dwg = &mut dw[gi * d.cout_g() * rows..(gi + 1) * d.cout_g() * rows];
                    // dW_g += G_g * cols^T
                    gemm(d.cout_g(), hw, rows, T::one(), MatRef::rm(gg, hw), MatRef::rm_t(colref, hw), T::one(), dwg);
                }
            }
        }
        if let Some(dx) = sink.slot(self.x) {
            dx.par_chunks_mut(in_sz).enumerate().for_each(|(s, dxs)| {
                let mut dcols = vec![T::zero(); rows * hw];
                for gi in 0..d.g.groups {
                    let c0 = gi * d.cin_g();
                    let wg = &w[gi * d.cout_g() * rows..(gi + 1) * d.cout_g() * rows];
                    let gg = &g[s * out_sz + gi * d.cout_g() * hw..s * out_sz + (gi + 1) * d.cout_g() * hw];
                    if d.pointwise() {
                        let dst = &mut dxs[c0 * hw..(c0 + rows) * hw];
                        gemm(rows, d.cout_g(), hw, T::one(), MatRef::rm_t(wg, rows), MatRef::rm(gg, hw), T::one(), dst);
                    } else {
                        gemm(rows, d.cout_g(), hw, T::one(), MatRef::rm_t(wg, rows), MatRef::rm(gg, hw), T::zero(), &mut dcols);
                        col2im(&dcols, &d, c0, dxs);
                    }
                }
            });
        }
    }
}

/// `x [B, C_in, H, W]` convolved with `weight [C_out, C_in / groups, k, k]`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
    let d = conv_dims(tape.value(x), tape.value(weight), bias.map(|b| tape.value(b)), geom)?;
    let xs = tape.value(x).data();
    let ws = tape.value(weight).data();
    let in_sz = d.c_in * d.h * d.w;
    let hw = d.ho * d.wo;
    let out_sz = d.c_out * hw;
    let mut out = vec![T::zero(); d.batch * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, o)| {
        forward_sample(&xs[s * in_sz..(s + 1) * in_sz], ws, &d, o);
    });
    if let Some(b) = bias {
        let bs = tape.value(b).data();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let bv = bs[i % d.c_out];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    let value = Tensor::new(&[d.batch, d.c_out, d.ho, d.wo], out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.push(value, &inputs, Conv2d { x, w: weight, b: bias, d }))
}

/// Depthwise 3x3 convolution, stride 1, padding 1: channel `c` of the output
/// depends only on channel `c` of the input.
pub fn dwconv<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
    let c = tape.value(x).dims4()?[1];
    let ws = tape.value(weight).shape();
    let ok = geom.groups == c && geom.stride == 1 && geom.padding == 1 && ws == [c, 1, 3, 3];
    if !ok {
        return Err(contract_err!(
            "dwconv needs depthwise 3x3/s1/p1 params for {c} channels, got weight {ws:?} and {geom:?}"
        ));
    }
    conv2d(tape, x, weight, bias, geom)
}
