use crate::error::{contract_err, Result};
use crate::tensor::{BackwardCtx, BackwardOp, GradSink, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftAxis {
    Height,
    Width,
}

/// Per-channel offsets for `channels` split into `groups` contiguous groups
/// with offsets `-(groups/2) ..= groups/2`; channel `c` lands in group
/// `floor(groups * c / channels)`.
pub fn group_offsets(channels: usize, groups: usize) -> Vec<i64> {
    let half = (groups / 2) as i64;
    (0..channels)
        .map(|c| (groups * c / channels) as i64 - half)
        .collect()
}

/// Rotates each `[B, C, H, W]` channel plane along `axis`: the element at
/// index `i` moves to `(i + offsets[c]) mod size`.
fn rotate<T: Copy>(src: &[T], dims: [usize; 4], axis: ShiftAxis, offsets: &[i64], sign: i64) -> Vec<T> {
    let [b, c, h, w] = dims;
    let mut out = src.to_vec();
    for n in 0..b {
        for (ch, &off) in offsets.iter().enumerate().take(c) {
            let base = (n * c + ch) * h * w;
            let plane = &src[base..base + h * w];
            let dst = &mut out[base..base + h * w];
            match axis {
                ShiftAxis::Width => {
                    let s = (off * sign).rem_euclid(w as i64) as usize;
                    for y in 0..h {
                        let row = &plane[y * w..(y + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        drow[s..].copy_from_slice(&row[..w - s]);
                        drow[..s].copy_from_slice(&row[w - s..]);
                    }
                }
                ShiftAxis::Height => {
                    let s = (off * sign).rem_euclid(h as i64) as usize;
                    dst[s * w..].copy_from_slice(&plane[..(h - s) * w]);
                    dst[..s * w].copy_from_slice(&plane[(h - s) * w..]);
                }
            }
        }
    }
    out
}

struct CyclicShift {
    x: Var,
    axis: ShiftAxis,
    offsets: Vec<i64>,
}

impl<T: Real> BackwardOp<T> for CyclicShift {
    fn name(&self) -> &'static str {
        "cyclic_shift"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let dims = ctx.output().dims4().expect("rank-4 by construction");
        let g = rotate(ctx.grad(), dims, self.axis, &self.offsets, -1);
        sink.add(self.x, &g);
    }
}

pub fn cyclic_shift<T: Real>(tape: &mut Tape<T>, x: Var, axis: ShiftAxis, offsets: &[i64]) -> Result<Var> {
    let xt = tape.value(x);
    let dims = xt.dims4()?;
    if offsets.len() != dims[1] {
        return Err(contract_err!(
            "{} shift offsets for {} channels",
            offsets.len(),
            dims[1]
        ));
    }
    let value = Tensor::new(xt.shape(), rotate(xt.data(), dims, axis, offsets, 1))?;
    Ok(tape.push(value, &[x], CyclicShift { x, axis, offsets: offsets.to_vec() }))
}
