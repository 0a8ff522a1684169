//! Differentiable building blocks composed from tape primitives.

use crate::error::{Error, Result};
use crate::tape::{Axis, Tape, VarId};
use crate::tensor::Scalar;

/// x @ w + b, b broadcast over rows.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
///
/// With a single key row the softmax is 1 and the output equals that value
/// row regardless of the query.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: VarId, k: VarId, v: VarId) -> Result<VarId> {
    let (_, d) = tape.value(q).dims2()?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scaled, Axis::Rows)?;
    tape.matmul(weights, v)
}

/// Projection weights for one attention layer.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
}

/// Multi-head attention with separate query and key/value inputs. Queries
/// come from `x_q`, keys and values from `x_kv`; self-attention passes the
/// same id for both.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x_q: VarId,
    x_kv: VarId,
    w: &AttnVars,
    heads: usize,
) -> Result<VarId> {
    let q = linear(tape, x_q, w.wq, w.bq)?;
    let k = linear(tape, x_kv, w.wk, w.bk)?;
    let v = linear(tape, x_kv, w.wv, w.bv)?;
    let (_, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let ks = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vs = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        parts.push(attention(tape, qs, ks, vs)?);
    }
    let merged = tape.concat_cols(&parts)?;
    linear(tape, merged, w.wo, w.bo)
}
