use super::network::{Bound, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

/// Multi-head self-attention over `x [N, L, d]` with the projection weights
/// under `prefix` (`wq, bq, wk, bk, wv, bv, wo, bo`). With `causal`, position
/// `t` attends to positions `<= t` only.
pub fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    prefix: &str,
    x: Var,
    n_heads: usize,
    causal: bool,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("mha", &[&s]));
    }
    let (n, len, d) = (s[0], s[1], s[2]);
    if d % n_heads != 0 {
        return Err(Error::invalid(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let heads = |tape: &mut Tape<T>, w: &str, bias: &str| -> Result<Var> {
        let p = tape.matmul(x, b.get(&format!("{prefix}.{w}"))?)?;
        let p = tape.add_bcast(p, b.get(&format!("{prefix}.{bias}"))?)?;
        let p = tape.reshape(p, &[n, len, n_heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[n * n_heads, len, dh])
    };
    let q = heads(tape, "wq", "bq")?;
    let k = heads(tape, "wk", "bk")?;
    let v = heads(tape, "wv", "bv")?;
    let scores = tape.bmm(q, k, true)?;
    ctx.score_entries += (n * n_heads * len * len) as u64;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let scores = if causal && len > 1 {
        tape.masked_fill(scores, &causal_mask(len), T::neg_infinity())?
    } else {
        scores
    };
    let weights = tape.softmax(scores, 2)?;
    ctx.record_weights(tape, weights);
    let out = tape.bmm(weights, v, false)?;
    let out = tape.reshape(out, &[n, n_heads, len, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[n, len, d])?;
    let out = tape.matmul(out, b.get(&format!("{prefix}.wo"))?)?;
    tape.add_bcast(out, b.get(&format!("{prefix}.bo"))?)
}

/// Intermediate of [`axial_attention`] exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AxialTrace {
    /// Column-attended features shifted down one row, `[B, H, W, d]`.
    pub shifted: Var,
}

/// Axial attention over `h [B, H, W, d]`:
/// 1. unmasked attention within each row,
/// 2. causal attention down each column of that result,
/// 3. shift down one row (row 0 zero, last row dropped),
/// 4. causal attention within each row of `h + shifted`.
///
/// All three attentions share the parameters under `prefix`.
pub fn axial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    prefix: &str,
    h: Var,
    n_heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, AxialTrace)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(format!(
            "axial attention expects [B, H>=1, W>=1, d], got {s:?}"
        )));
    }
    let (bs, rows, cols, d) = (s[0], s[1], s[2], s[3]);

    let x = tape.reshape(h, &[bs * rows, cols, d])?;
    let a = mha(tape, b, prefix, x, n_heads, false, ctx)?;
    let a = tape.reshape(a, &[bs, rows, cols, d])?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[bs * cols, rows, d])?;

    let a = mha(tape, b, prefix, a, n_heads, true, ctx)?;
    let a = tape.reshape(a, &[bs, cols, rows, d])?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;

    let shifted = tape.shift_down(a, 1)?;
    let mixed = tape.add(h, shifted)?;
    let mixed = tape.reshape(mixed, &[bs * rows, cols, d])?;
    let out = mha(tape, b, prefix, mixed, n_heads, true, ctx)?;
    let out = tape.reshape(out, &[bs, rows, cols, d])?;
    Ok((out, AxialTrace { shifted }))
}

/// Full causal attention over the raster sequence of `h [B, H, W, d]`.
pub fn dense_causal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    prefix: &str,
    h: Var,
    n_heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(format!(
            "dense attention expects [B, H>=1, W>=1, d], got {s:?}"
        )));
    }
    let x = tape.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
    let out = mha(tape, b, prefix, x, n_heads, true, ctx)?;
    tape.reshape(out, &s)
}
