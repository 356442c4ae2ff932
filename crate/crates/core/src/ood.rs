//! Out-of-distribution scoring. Both scores follow one convention: higher
//! means more in-distribution.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::eval::RepMatrix;
use crate::losses;
use crate::model::{Bound, ForwardCtx, GcrlModel};
use crate::quantizer::TokenGrid;
use crate::tensor::{Scalar, Tape, Tensor};

/// Gaussian fitted to the representations of one class.
#[derive(Debug, Clone)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    /// Regularized covariance, `d × d` row-major.
    pub covariance: Vec<f64>,
    pub epsilon: f64,
    chol: DMatrix<f64>,
    log_det: f64,
}

#[derive(Debug, Clone)]
pub struct ClassGaussians {
    pub d: usize,
    pub classes: Vec<ClassGaussian>,
}

/// Relative ridge added to every class covariance.
pub const RIDGE: f64 = 1e-4;

/// Per-class mean and sample covariance (denominator `n_c - 1`) plus
/// `eps·I`, `eps = RIDGE · mean(diag)`. Every class in `0..=max label` needs at
/// least two samples.
pub fn fit_class_gaussians(train: &RepMatrix) -> Result<ClassGaussians> {
    let labels = train.require_labels("class Gaussian fit")?;
    let d = train.d;
    if d == 0 {
        return Err(Error::invalid("class Gaussian fit needs d >= 1"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut classes = Vec::with_capacity(n_classes);
    for (c, rows) in members.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "class {c} has {} sample(s); a covariance needs at least 2",
                rows.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, &v) in mean.iter_mut().zip(train.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for &i in rows {
            let x: Vec<f64> = train.row(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += x[a] * x[b];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= n - 1.0);
        let mean_diag = (0..d).map(|a| cov[a * d + a]).sum::<f64>() / d as f64;
        let mut epsilon = RIDGE * mean_diag;
        if epsilon == 0.0 {
            // Identical samples: fall back to an absolute ridge so the density
            // stays defined.
            epsilon = RIDGE;
        }
        let g = ClassGaussian::from_moments(mean, cov, epsilon)
            .map_err(|_| Error::invalid(format!("covariance of class {c} is not positive definite")))?;
        classes.push(g);
    }
    Ok(ClassGaussians { d, classes })
}

impl ClassGaussian {
    /// Adds `epsilon·I` to `covariance` (`d × d` row-major) and factorizes it.
    pub fn from_moments(mean: Vec<f64>, mut covariance: Vec<f64>, epsilon: f64) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::shape("class Gaussian", &[&[d, d], &[covariance.len()]]));
        }
        for a in 0..d {
            covariance[a * d + a] += epsilon;
        }
        let m = DMatrix::from_row_slice(d, d, &covariance);
        if (0..d).any(|a| (0..a).any(|b| m[(a, b)] != m[(b, a)])) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?
            .unpack();
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(ClassGaussian {
            mean,
            covariance,
            epsilon,
            chol,
            log_det,
        })
    }

    pub fn log_density(&self, x: &[f32]) -> f64 {
        let d = self.mean.len();
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(&v, m)| v as f64 - m));
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + y.norm_squared())
    }
}

impl ClassGaussians {
    /// `max_c log N(rep | mu_c, Sigma_c)`.
    pub fn score(&self, rep: &[f32]) -> Result<f64> {
        if rep.len() != self.d {
            return Err(Error::shape("score_supervised", &[&[rep.len()], &[self.d]]));
        }
        Ok(self
            .classes
            .iter()
            .map(|g| g.log_density(rep))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn score_all(&self, reps: &RepMatrix) -> Result<Vec<f64>> {
        (0..reps.n).map(|i| self.score(reps.row(i))).collect()
    }
}

/// `log p(x)` over positions `2..D` and its gradient with respect to the
/// embedded tokens (`D × d`, before positional embeddings), evaluated in
/// precision `T`. `embedded` overrides the table lookup.
pub fn embedded_log_likelihood<T: Scalar>(
    model: &GcrlModel,
    grid: &TokenGrid,
    embedded: Option<Vec<T>>,
) -> Result<(T, Vec<T>)> {
    let c = &model.config;
    let d = c.d_model;
    model.check_grids(&[grid])?;
    let values = match embedded {
        Some(v) if v.len() == grid.len() * d => v,
        Some(v) => {
            return Err(Error::shape(
                "embedded_log_likelihood",
                &[&[v.len()], &[grid.len() * d]],
            ))
        }
        None => {
            let table = model.param("tok_emb")?.data();
            grid.tokens
                .iter()
                .flat_map(|&t| {
                    table[t as usize * d..(t as usize + 1) * d]
                        .iter()
                        .map(|&v| T::from_f32_lossy(v))
                })
                .collect()
        }
    };
    let mut tape = Tape::<T>::new();
    let b = Bound::new(&mut tape, model, false);
    let emb = tape.param(Tensor::new(vec![1, c.height, c.width, d], values)?);
    let logits = model.logits_from_embedded(&mut tape, &b, emb, &mut ForwardCtx::eval())?;
    let nll = losses::generative_nll(&mut tape, logits, &[grid])?;
    let log_p = -tape.value(nll).item();
    let mut grads = tape.backward(nll)?;
    let g = grads.take(emb).expect("embedded input requires grad");
    // d log p = -d nll
    Ok((log_p, g.into_iter().map(|v| -v).collect()))
}

/// `-‖∂ log p(x) / ∂ e‖₂`, where `e` is the embedded input. Eval mode.
pub fn score_unsupervised(model: &GcrlModel, grid: &TokenGrid) -> Result<f64> {
    if model.config.n_dec_blocks == 0 {
        return Err(Error::invalid("the unsupervised score needs decoder blocks"));
    }
    let (_, g) = embedded_log_likelihood::<f32>(model, grid, None)?;
    let norm = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(
            "gradient of log p with respect to the embedded input".into(),
        ));
    }
    Ok(-norm)
}

fn check_sides(inside: &[f64], outside: &[f64]) -> Result<()> {
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::invalid(
            "OOD metrics need at least one in- and one out-of-distribution score",
        ));
    }
    if inside.iter().chain(outside).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("OOD score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC with average ranks: `P(in > out) + 0.5·P(in = out)`.
pub fn auroc(inside: &[f64], outside: &[f64]) -> Result<f64> {
    check_sides(inside, outside)?;
    let mut all: Vec<(f64, bool)> = inside
        .iter()
        .map(|&s| (s, true))
        .chain(outside.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = i + all[i..].iter().take_while(|x| x.0 == all[i].0).count();
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n_in, n_out) = (inside.len() as f64, outside.len() as f64);
    Ok((rank_sum - n_in * (n_in + 1.0) / 2.0) / (n_in * n_out))
}

/// Average precision with in-distribution as the positive class: the sum of
/// `ΔRecall · Precision` over descending distinct score thresholds.
pub fn auprc(inside: &[f64], outside: &[f64]) -> Result<f64> {
    check_sides(inside, outside)?;
    let mut all: Vec<(f64, bool)> = inside
        .iter()
        .map(|&s| (s, true))
        .chain(outside.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_in = inside.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = i + all[i..].iter().take_while(|x| x.0 == all[i].0).count();
        for x in &all[i..j] {
            if x.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_in;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// `sample_id,split,score` with `split` in `{in, out}`.
pub fn scores_csv(inside: &[f64], outside: &[f64]) -> String {
    let mut s = String::from("sample_id,split,score\n");
    for (split, scores) in [("in", inside), ("out", outside)] {
        for (i, v) in scores.iter().enumerate() {
            let _ = writeln!(s, "{i},{split},{v}");
        }
    }
    s
}
