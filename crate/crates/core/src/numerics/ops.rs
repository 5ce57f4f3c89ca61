//! Composite operations built from tape primitives.

use super::tape::{Mask, Tape, Var};
use crate::error::{Error, Result};

/// `y = x·W (+ b)` for `x: [*, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Softmax along the last axis.
pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax_rows(x, None)
}

/// `softmax(Q·Kᵀ / √d_k) · V`, optionally masked.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let d_k = *qs.last().unwrap();
    if d_k != *ks.last().unwrap() {
        return Err(Error::shape("attention q/k", &qs, &ks));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::shape("attention k/v", &ks, &vs));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled, mask)?;
    tape.matmul(weights, v)
}

/// Mean over all elements.
pub fn mean(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len() as f64;
    let s = tape.sum(x);
    tape.scale(s, 1.0 / n)
}
