//! Differentiable tensor primitives: arithmetic, reductions, products and
//! layout changes.

use super::{gemm, BackwardCtx, BackwardOp, GradSink, MatRef, Real, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Number of times `b` repeats inside `a` under leading-dimension broadcasting.
fn broadcast_repeats(a: &[usize], b: &[usize]) -> Result<usize> {
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let suffix = &b[lead..];
    if b.len() > a.len() || !a.ends_with(suffix) {
        return Err(shape_err!("cannot broadcast {b:?} onto {a:?} (leading dims only)"));
    }
    let bn: usize = suffix.iter().product();
    Ok(a.iter().product::<usize>() / bn)
}

struct Binary {
    kind: BinaryKind,
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = ctx.grad();
        let av = ctx.value(self.a).data();
        let bv = ctx.value(self.b).data();
        let bn = bv.len();
        if let Some(ga) = sink.slot(self.a) {
            match self.kind {
                BinaryKind::Add | BinaryKind::Sub => ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x),
                BinaryKind::Mul => {
                    for (i, (d, &x)) in ga.iter_mut().zip(g).enumerate() {
                        *d += x * bv[i % bn];
                    }
                }
            }
        }
        if let Some(gb) = sink.slot(self.b) {
            for (i, &x) in g.iter().enumerate() {
                let j = i % bn;
                gb[j] += match self.kind {
                    BinaryKind::Add => x,
                    BinaryKind::Sub => -x,
                    BinaryKind::Mul => x * av[i],
                };
            }
        }
    }
}

/// `a (op) b` where `b` matches `a` or broadcasts along leading dims.
pub fn elementwise<T: Real>(tape: &mut Tape<T>, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
    let at = tape.value(a);
    let bt = tape.value(b);
    broadcast_repeats(at.shape(), bt.shape())?;
    let bv = bt.data();
    let bn = bv.len();
    let out: Vec<T> = at
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = bv[i % bn];
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            }
        })
        .collect();
    let value = Tensor::new(at.shape(), out)?;
    Ok(tape.push(value, &[a, b], Binary { kind, a, b }))
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Add, a, b)
}

pub fn sub<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Sub, a, b)
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Mul, a, b)
}

struct Scale<T> {
    x: Var,
    factor: T,
}

impl<T: Real> BackwardOp<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(gx) = sink.slot(self.x) {
            gx.iter_mut().zip(ctx.grad()).for_each(|(d, &g)| *d += g * self.factor);
        }
    }
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, factor: T) -> Result<Var> {
    let xt = tape.value(x);
    let value = Tensor::new(xt.shape(), xt.data().iter().map(|&v| v * factor).collect())?;
    Ok(tape.push(value, &[x], Scale { x, factor }))
}

struct SumAll {
    x: Var,
    scale: f64,
}

impl<T: Real> BackwardOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = ctx.grad()[0] * T::lit(self.scale);
        if let Some(gx) = sink.slot(self.x) {
            gx.iter_mut().for_each(|d| *d += g);
        }
    }
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).sum();
    Ok(tape.push(Tensor::scalar(s), &[x], SumAll { x, scale: 1.0 }))
}

pub fn mean<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let s = tape.value(x).sum() / T::lit(n as f64);
    Ok(tape.push(Tensor::scalar(s), &[x], SumAll { x, scale: 1.0 / n as f64 }))
}

struct Reshape {
    x: Var,
}

impl<T: Real> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(self.x, ctx.grad());
    }
}

pub fn reshape<T: Real>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let value = tape.value(x).reshaped(shape)?;
    Ok(tape.push(value, &[x], Reshape { x }))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    // Pad to rank 4 so a fixed nest of loops covers every case.
    let pad = 4 - shape.len();
    let mut dims = [1usize; 4];
    let mut st = [0usize; 4];
    for (k, &p) in perm.iter().enumerate() {
        dims[pad + k] = shape[p];
        st[pad + k] = in_strides[p];
    }
    let mut out = Vec::with_capacity(src.len());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                if st[3] == 1 {
                    out.extend_from_slice(&src[base..base + dims[3]]);
                } else {
                    out.extend((0..dims[3]).map(|i3| src[base + i3 * st[3]]));
                }
            }
        }
    }
    out
}

struct Permute {
    x: Var,
    inverse: Vec<usize>,
}

impl<T: Real> BackwardOp<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = permute_data(ctx.grad(), ctx.output().shape(), &self.inverse);
        sink.add(self.x, &g);
    }
}

/// Reorders axes: output axis `k` is input axis `perm[k]`.
pub fn permute<T: Real>(tape: &mut Tape<T>, x: Var, perm: &[usize]) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(contract_err!("{perm:?} is not a permutation of {} axes", shape.len()));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let data = permute_data(tape.value(x).data(), &shape, perm);
    let mut inverse = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inverse[p] = k;
    }
    let value = Tensor::new(&out_shape, data)?;
    Ok(tape.push(value, &[x], Permute { x, inverse }))
}

struct Concat {
    parts: Vec<Var>,
    axis: usize,
}

impl<T: Real> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let out_shape = ctx.output().shape();
        let outer: usize = out_shape[..self.axis].iter().product();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let row = out_shape[self.axis] * inner;
        let g = ctx.grad();
        let mut offset = 0;
        for &p in &self.parts {
            let chunk = ctx.value(p).shape()[self.axis] * inner;
            if let Some(gp) = sink.slot(p) {
                for o in 0..outer {
                    let src = &g[o * row + offset..o * row + offset + chunk];
                    gp[o * chunk..(o + 1) * chunk]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            offset += chunk;
        }
    }
}

/// Joins tensors along `axis`; all other dims must agree.
pub fn concat<T: Real>(tape: &mut Tape<T>, parts: &[Var], axis: usize) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| contract_err!("concat of zero tensors"))?;
    let base = tape.value(*first).shape().to_vec();
    if axis >= base.len() {
        return Err(contract_err!("concat axis {axis} out of range for rank {}", base.len()));
    }
    let mut axis_len = 0;
    for &p in parts {
        let s = tape.value(p).shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err!("concat along {axis}: {s:?} incompatible with {base:?}"));
        }
        axis_len += s[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out_shape = base.clone();
    out_shape[axis] = axis_len;
    let mut data = Vec::with_capacity(outer * axis_len * inner);
    for o in 0..outer {
        for &p in parts {
            let t = tape.value(p);
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let value = Tensor::new(&out_shape, data)?;
    Ok(tape.push(value, parts, Concat { parts: parts.to_vec(), axis }))
}

struct Narrow {
    x: Var,
    axis: usize,
    start: usize,
}

impl<T: Real> BackwardOp<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let in_shape = ctx.value(self.x).shape();
        let out_len = ctx.output().shape()[self.axis];
        let outer: usize = in_shape[..self.axis].iter().product();
        let inner: usize = in_shape[self.axis + 1..].iter().product();
        let g = ctx.grad();
        if let Some(gx) = sink.slot(self.x) {
            for o in 0..outer {
                let dst = o * in_shape[self.axis] * inner + self.start * inner;
                let src = o * out_len * inner;
                gx[dst..dst + out_len * inner]
                    .iter_mut()
                    .zip(&g[src..src + out_len * inner])
                    .for_each(|(d, &v)| *d += v);
            }
        }
    }
}

/// Slice `start..start + len` along `axis`, keeping the axis.
pub fn narrow<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let t = tape.value(x);
    let shape = t.shape().to_vec();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * shape[axis] * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut out_shape = shape;
    out_shape[axis] = len;
    let value = Tensor::new(&out_shape, data)?;
    Ok(tape.push(value, &[x], Narrow { x, axis, start }))
}

struct BatchedMatmul {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Real> BackwardOp<T> for BatchedMatmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = ctx.grad();
        let av = ctx.value(self.a).data();
        let bv = ctx.value(self.b).data();
        if let Some(ga) = sink.slot(self.a) {
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                // dA = dC * B^T
                let bt = if self.trans_b { MatRef::rm(bi, k) } else { MatRef::rm_t(bi, n) };
                gemm(m, n, k, T::one(), MatRef::rm(gi, n), bt, T::one(), &mut ga[i * m * k..(i + 1) * m * k]);
            }
        }
        if let Some(gb) = sink.slot(self.b) {
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &av[i * m * k..(i + 1) * m * k];
                let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    // d(B^T) = A^T dC  =>  dB = dC^T A, shape [n, k]
                    gemm(n, m, k, T::one(), MatRef::rm_t(gi, n), MatRef::rm(ai, k), T::one(), gbi);
                } else {
                    gemm(k, m, n, T::one(), MatRef::rm_t(ai, k), MatRef::rm(gi, n), T::one(), gbi);
                }
            }
        }
    }
}

/// Batched product over matching leading dims: `[.., M, K] x [.., K, N]`,
/// or `[.., M, K] x [.., N, K]^T` when `trans_b`.
pub fn bmm<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, trans_b: bool) -> Result<Var> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err!("bmm: incompatible shapes {sa:?} and {sb:?}"));
    }
    let r = sa.len();
    let (m, k) = (sa[r - 2], sa[r - 1]);
    let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    if k != kb {
        return Err(shape_err!("matmul inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"));
    }
    let batch: usize = sa[..r - 2].iter().product();
    let av = tape.value(a).data();
    let bv = tape.value(b).data();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let bi = &bv[i * k * n..(i + 1) * k * n];
        let bm = if trans_b { MatRef::rm_t(bi, k) } else { MatRef::rm(bi, n) };
        gemm(m, k, n, T::one(), MatRef::rm(&av[i * m * k..(i + 1) * m * k], k), bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    let mut out_shape = sa[..r - 2].to_vec();
    out_shape.extend([m, n]);
    let value = Tensor::new(&out_shape, out)?;
    Ok(tape.push(value, &[a, b], BatchedMatmul { a, b, batch, m, k, n, trans_b }))
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).rank() != 2 || tape.value(b).rank() != 2 {
        return Err(shape_err!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        ));
    }
    bmm(tape, a, b, false)
}
