//! Generative NLL, symmetric NT-Xent and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::TokenGrid;
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// weight of the generative term
    pub alpha: f64,
    /// weight of the contrastive (or supervised) term
    pub beta: f64,
    /// contrastive temperature
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("weights.alpha", "must be non-negative"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("weights.beta", "must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("weights.temperature", "must be positive"));
        }
        Ok(())
    }

    /// `alpha * gen + beta * con`.
    pub fn combine(&self, gen: f64, con: f64) -> f64 {
        self.alpha * gen + self.beta * con
    }
}

/// Hybrid objective on a tape. Missing terms contribute nothing.
pub fn hybrid<T: Scalar>(tape: &mut Tape<T>, gen: Option<Var>, con: Option<Var>, w: &LossWeights) -> Result<Var> {
    let g = gen.map(|v| tape.scale(v, T::of(w.alpha)));
    let c = con.map(|v| tape.scale(v, T::of(w.beta)));
    match (g, c) {
        (Some(g), Some(c)) => tape.add(g, c),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(Error::invalid("hybrid loss without any term")),
    }
}

/// Negative log-likelihood in nats per image, averaged over the batch.
///
/// `logits [B, D, K]` at position `t` score token `t + 1`; token 0 of each
/// grid is never predicted.
pub fn generative_nll<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[&TokenGrid]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if targets.is_empty() || s.first() == Some(&0) {
        return Err(Error::invalid("generative_nll: empty batch"));
    }
    if s.len() != 3 || s[0] != targets.len() || targets.iter().any(|t| t.len() != s[1]) {
        return Err(Error::shape("generative_nll", &[&s, &[targets.len()]]));
    }
    let (bsz, d) = (s[0], s[1]);
    if d < 2 {
        return Err(Error::invalid("generative_nll: sequence length must be at least 2"));
    }
    let pred = tape.slice(logits, 1, 0, d - 1)?;
    let logp = tape.log_softmax(pred, 2)?;
    let idx: Vec<usize> = targets
        .iter()
        .flat_map(|t| t.tokens[1..].iter().map(|&v| v as usize))
        .collect();
    let picked = tape.gather(logp, &idx)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, T::of(-1.0 / bsz as f64)))
}

/// Mean cross-entropy of `logits [B, C]` against `labels`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross_entropy", &[&s, &[labels.len()]]));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(logp, labels)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, T::of(-1.0 / labels.len() as f64)))
}

fn transpose<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    tape.permute(z, &[1, 0])
}

/// Symmetric NT-Xent over index-aligned unit-norm rows `z1, z2 [N, p]`.
///
/// For anchor `z1_i` the denominator runs over `z1_j, j != i` and all `z2_j`
/// (the positive included); the second term swaps the views. The result is
/// averaged over the `2N` anchors.
pub fn nt_xent<T: Scalar>(tape: &mut Tape<T>, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let s1 = tape.shape(z1).to_vec();
    let s2 = tape.shape(z2).to_vec();
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape("nt_xent", &[&s1, &s2]));
    }
    if s1[0] == 0 {
        return Err(Error::invalid("nt_xent: empty batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("nt_xent: temperature must be positive"));
    }
    let p = s1[1];
    for z in [z1, z2] {
        for row in tape.value(z).data().chunks(p) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if (norm - T::one()).abs() > T::of(1e-4) {
                return Err(Error::invalid(format!("nt_xent: row norm {norm} is not 1")));
            }
        }
    }
    let t1 = transpose(tape, z1)?;
    let t2 = transpose(tape, z2)?;
    let s11 = tape.matmul(z1, t1)?;
    let s12 = tape.matmul(z1, t2)?;
    let s21 = tape.matmul(z2, t1)?;
    let s22 = tape.matmul(z2, t2)?;
    nt_xent_from_similarities(tape, [s11, s12, s21, s22], temperature)
}

/// NT-Xent from the four `[N, N]` similarity blocks `(11, 12, 21, 22)`.
pub fn nt_xent_from_similarities<T: Scalar>(tape: &mut Tape<T>, sims: [Var; 4], temperature: f64) -> Result<Var> {
    let n = tape.shape(sims[0])[0];
    let diag: Vec<bool> = (0..n * n).map(|i| i / n == i % n).collect();
    let positives: Vec<usize> = (0..n).map(|i| n + i).collect();
    let inv_t = T::of(1.0 / temperature);
    let mut terms = Vec::with_capacity(2);
    for (same, cross) in [(sims[0], sims[1]), (sims[3], sims[2])] {
        let same = tape.scale(same, inv_t);
        let cross = tape.scale(cross, inv_t);
        let same = tape.masked_fill(same, &diag, T::neg_infinity())?;
        let logits = tape.concat(&[same, cross], 1)?;
        let logp = tape.log_softmax(logits, 1)?;
        let picked = tape.gather(logp, &positives)?;
        terms.push(tape.sum(picked));
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, T::of(-1.0 / (2 * n) as f64)))
}

/// Bits per predicted token: `nll / ((D - 1) ln 2)`.
pub fn bpd_from_nll(nll_nats_per_image: f64, seq_len: usize) -> Result<f64> {
    if seq_len < 2 {
        return Err(Error::invalid("bpd needs a sequence length of at least 2"));
    }
    Ok(nll_nats_per_image / ((seq_len - 1) as f64 * std::f64::consts::LN_2))
}
