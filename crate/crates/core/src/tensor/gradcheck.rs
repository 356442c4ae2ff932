//! Central finite-difference gradient checks on 64-bit tapes.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative error found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f` with central differences at step `eps`.
///
/// `f` maps leaf variables to any tensor; it is contracted with a fixed random
/// weight tensor so every output element contributes. Relative error is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let eval = |xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Init, 0, 0);
            let n = tape.value(out).len();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(tape.shape(out).to_vec(), data).expect("same size")
        });
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| vec![0.0; x.len()]))
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(inputs, &mut weights, true)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&xs, &mut weights, false)?;
            xs[t].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&xs, &mut weights, false)?;
            xs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() || !grad[i].is_finite() {
                return Err(Error::NonFinite(format!("gradient check input {t} element {i}")));
            }
            let rel = (grad[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}
