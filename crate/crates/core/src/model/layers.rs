//! Stateless building blocks: GRU cell, dot-product attention, output layer.

use crate::tensor::{Result, Tape, TensorError, Var};

/// Tape handles of one GRU layer.
///
/// `wx` is `[in, 3H]` with gate blocks ordered update, reset, candidate;
/// `bx` is `[3H]`; `uzr` is `[H, 2H]` (update, reset); `uh` is `[H, H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wx: Var,
    pub bx: Var,
    pub uzr: Var,
    pub uh: Var,
}

/// One GRU step on a batch of rows:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h~ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
pub fn gru_cell(tape: &mut Tape<'_>, x: Var, h: Var, w: &GruVars) -> Result<Var> {
    let hidden = tape.shape(w.uh)[0];
    if tape.shape(h).len() != 2 || tape.shape(h)[1] != hidden {
        return Err(TensorError::Dimension {
            op: "gru_cell",
            left: tape.shape(h).to_vec(),
            right: tape.shape(w.uh).to_vec(),
        });
    }
    let gx = tape.matmul(x, w.wx)?;
    let gx = tape.add_bias(gx, w.bx)?;
    let gh = tape.matmul(h, w.uzr)?;
    let gx_zr = tape.slice_cols(gx, 0, 2 * hidden)?;
    let zr = tape.add(gx_zr, gh)?;
    let zr = tape.sigmoid(zr)?;
    let z = tape.slice_cols(zr, 0, hidden)?;
    let r = tape.slice_cols(zr, hidden, hidden)?;
    let rh = tape.mul(r, h)?;
    let cand = tape.matmul(rh, w.uh)?;
    let gx_h = tape.slice_cols(gx, 2 * hidden, hidden)?;
    let cand = tape.add(gx_h, cand)?;
    let cand = tape.tanh(cand)?;
    let keep = tape.one_minus(z)?;
    let keep = tape.mul(keep, h)?;
    let update = tape.mul(z, cand)?;
    tape.add(keep, update)
}

/// Global dot-product attention. `enc` is `[B, T, H]`, `query` is `[B, H]`,
/// `lens[b]` is the number of valid encoder positions of row `b`.
/// Returns the attention weights `[B, T]` and the context `[B, H]`.
pub fn attend(tape: &mut Tape<'_>, enc: Var, lens: &[usize], query: Var) -> Result<(Var, Var)> {
    let scores = tape.attn_scores(enc, query)?;
    let weights = tape.softmax_rows_masked(scores, lens)?;
    let context = tape.attn_context(weights, enc)?;
    Ok((weights, context))
}

/// Log-probabilities over the output vocabulary from `[context, h]`
/// (or `h` alone when attention is disabled).
pub fn output_log_probs(
    tape: &mut Tape<'_>,
    context: Option<Var>,
    h: Var,
    w_out: Var,
    b_out: Var,
) -> Result<Var> {
    let features = match context {
        Some(c) => tape.concat(c, h, 1)?,
        None => h,
    };
    let logits = tape.matmul(features, w_out)?;
    let logits = tape.add_bias(logits, b_out)?;
    tape.log_softmax_rows(logits)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
