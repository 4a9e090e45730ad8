use crate::error::{shape_err, Result};
use crate::tensor::{ops, Real, Tape, Var};

use super::conv::{conv2d, ConvGeometry};
use super::params::LinearVars;

/// `x [.., C_in] -> [.., C_out]`, i.e. `x W^T + b` on the last dim.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, p: LinearVars) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let ws = tape.shape(p.weight).to_vec();
    let c_in = *shape.last().expect("rank >= 1");
    if ws.len() != 2 || ws[1] != c_in {
        return Err(shape_err!("linear weight {ws:?} does not accept input {shape:?}"));
    }
    let rows = shape.iter().product::<usize>() / c_in;
    let flat = ops::reshape(tape, x, &[rows, c_in])?;
    let y = ops::bmm(tape, flat, p.weight, true)?;
    let y = ops::add(tape, y, p.bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = ws[0];
    ops::reshape(tape, y, &out_shape)
}

/// Per-pixel linear over the channel dim of `x [B, C_in, H, W]`.
pub fn channel_linear<T: Real>(tape: &mut Tape<T>, x: Var, p: LinearVars) -> Result<Var> {
    let ws = tape.shape(p.weight).to_vec();
    if ws.len() != 2 {
        return Err(shape_err!("channel_linear weight must be rank 2, got {ws:?}"));
    }
    let w4 = ops::reshape(tape, p.weight, &[ws[0], ws[1], 1, 1])?;
    conv2d(tape, x, w4, Some(p.bias), ConvGeometry::POINTWISE)
}
