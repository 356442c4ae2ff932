//! Downstream evaluation on frozen models: representation extraction, linear
//! and k-NN probes, calibration, low-shot probes, likelihood and sampling.
//!
//! `GREP` representation files: magic, u32 version, u32 n, u32 d, u8 label
//! flag, `n·d` little-endian f32 values, then `n` little-endian i32 labels
//! when the flag is 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_bytes, Cursor};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{score_entries_per_block, AttentionKind, Bound, ForwardCtx, GcrlModel, ModelConfig, RepPosition};
use crate::quantizer::TokenGrid;
use crate::rng::{self, Purpose};
use crate::tensor::{adamw_step, AdamWConfig, GradMap, OptimState, Tape, Tensor};
use crate::trainer::TrainMode;

const GREP_MAGIC: &[u8; 4] = b"GREP";
const GREP_VERSION: u32 = 1;

/// Which pooled features a [`RepMatrix`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepSource {
    /// Encoder output through `enc_ln` and pooling.
    EncoderPooled,
    /// Output of block `k` (1-based) through `dec_ln` and pooling.
    BlockPooled(usize),
    /// Read from a file; provenance unknown.
    External,
}

/// `n × d` row-major representations with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RepMatrix {
    pub n: usize,
    pub d: usize,
    pub values: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub source: RepSource,
}

impl RepMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::shape("rep_matrix", &[&[n, d], &[values.len()]]));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::invalid("label count differs from row count"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("representation matrix".into()));
        }
        Ok(RepMatrix {
            n,
            d,
            values,
            labels,
            source: RepSource::External,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{what} needs labelled representations")))
    }

    pub fn select(&self, rows: &[usize]) -> RepMatrix {
        RepMatrix {
            n: rows.len(),
            d: self.d,
            values: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
            source: self.source,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GREP_MAGIC.to_vec();
        for v in [GREP_VERSION, self.n as u32, self.d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.labels.is_some() as u8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in self.labels.iter().flatten() {
            out.extend_from_slice(&(l as i32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut c = Cursor::new(bytes, what);
        c.magic(GREP_MAGIC)?;
        c.version(GREP_VERSION)?;
        let (n, d) = (c.u32()? as usize, c.u32()? as usize);
        let flag = c.u8()?;
        if flag > 1 {
            return Err(c.error(format!("label flag {flag} is neither 0 nor 1")));
        }
        let values = c.f32s(n * d)?;
        let labels = if flag == 1 {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                let v = c.i32()?;
                if v < 0 {
                    return Err(c.error(format!("negative label {v}")));
                }
                l.push(v as usize);
            }
            Some(l)
        } else {
            None
        };
        c.finish()?;
        RepMatrix::new(n, d, values, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Resolves `position` for a model trained in `mode`: the encoder output for
/// `Half` when the encoder has its own head, otherwise the output of block
/// `ceil(n/2)` (`Half`) or the last block, normalized with `dec_ln`.
pub fn rep_source(model: &GcrlModel, mode: TrainMode, position: RepPosition) -> Result<RepSource> {
    let c = &model.config;
    let n = c.n_blocks();
    match (mode, position) {
        (TrainMode::GenerativeOnly, RepPosition::Half) => Ok(RepSource::BlockPooled(n.div_ceil(2))),
        (_, RepPosition::Half) => Ok(RepSource::EncoderPooled),
        (TrainMode::ContrastiveOnly | TrainMode::SupervisedContrastiveReplaced, RepPosition::Last) => Err(
            Error::invalid("position `last` is undefined for a model whose decoder is not trained"),
        ),
        (_, RepPosition::Last) if c.n_dec_blocks == 0 => Err(Error::invalid("position `last` needs decoder blocks")),
        (_, RepPosition::Last) => Ok(RepSource::BlockPooled(n)),
    }
}

/// Eval-mode pooled features of `grids` in batches of `batch` (results do not
/// depend on the batch size).
pub fn extract_reps(
    model: &GcrlModel,
    grids: &[TokenGrid],
    labels: Option<&[usize]>,
    source: RepSource,
    batch: usize,
) -> Result<RepMatrix> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let d = model.config.d_model;
    let mut values = Vec::with_capacity(grids.len() * d);
    for chunk in grids.chunks(batch) {
        let refs: Vec<&TokenGrid> = chunk.iter().collect();
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, model, false);
        let mut ctx = ForwardCtx::eval();
        let r = match source {
            RepSource::EncoderPooled => model.representation(&mut tape, &b, &refs, &mut ctx)?,
            RepSource::BlockPooled(k) => model.pooled_at(&mut tape, &b, &refs, k, "dec_ln", &mut ctx)?,
            RepSource::External => return Err(Error::invalid("cannot extract external representations")),
        };
        values.extend_from_slice(tape.value(r).data());
    }
    let mut m = RepMatrix::new(grids.len(), d, values, labels.map(<[usize]>::to_vec))?;
    m.source = source;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: u32,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Constant learning rate.
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            weight_decay: 1e-4,
            batch_size: 512,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Single linear layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl LinearClassifier {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    /// Softmax probabilities, `n × C` row-major, computed in f64.
    pub fn probabilities(&self, reps: &RepMatrix) -> Vec<f64> {
        let c = self.n_classes();
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut out = Vec::with_capacity(reps.n * c);
        for i in 0..reps.n {
            let x = reps.row(i);
            let logits: Vec<f64> = (0..c)
                .map(|j| {
                    b[j] as f64
                        + x.iter()
                            .enumerate()
                            .map(|(k, &v)| v as f64 * w[k * c + j] as f64)
                            .sum::<f64>()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            out.extend(logits.iter().map(|l| (l - m).exp() / z));
        }
        out
    }

    /// Predicted class and its probability for every row (ties to the lowest
    /// class).
    pub fn predict(&self, reps: &RepMatrix) -> Vec<(usize, f64)> {
        let c = self.n_classes();
        self.probabilities(reps)
            .chunks(c)
            .map(|p| {
                p.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classifier: LinearClassifier,
    /// Max softmax probability per test row.
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
}

/// Trains a softmax linear classifier on `train` with AdamW at a constant
/// learning rate and reports top-1 accuracy on `test`.
pub fn linear_probe(train: &RepMatrix, test: &RepMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let ytr = train.require_labels("linear probe")?;
    let yte = test.require_labels("linear probe")?;
    if train.d != test.d {
        return Err(Error::shape("linear_probe", &[&[train.d], &[test.d]]));
    }
    if train.n == 0 || test.n == 0 {
        return Err(Error::invalid("linear probe needs non-empty train and test sets"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("probe.batch_size", "must be at least 1"));
    }
    let n_classes = ytr.iter().chain(yte).max().map_or(0, |m| m + 1);
    let mut present = vec![false; n_classes];
    for &y in ytr {
        present[y] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::invalid(format!(
            "class {missing} absent from the probe training labels"
        )));
    }
    let d = train.d;
    let mut params = indexmap::IndexMap::new();
    params.insert("w".to_string(), Tensor::<f32>::zeros(vec![d, n_classes]));
    params.insert("b".to_string(), Tensor::<f32>::zeros(vec![n_classes]));
    let mut state = OptimState::new([("w", true), ("b", false)]);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Probe, epoch, 0));
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::new(
                vec![chunk.len(), d],
                chunk.iter().flat_map(|&i| train.row(i).iter().copied()).collect(),
            )?;
            let y: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let mut tape = Tape::<f32>::new();
            let w = tape.param(params["w"].clone());
            let b = tape.param(params["b"].clone());
            let xv = tape.constant(x);
            let logits = tape.matmul(xv, w)?;
            let logits = tape.add_bcast(logits, b)?;
            let loss = losses::cross_entropy(&mut tape, logits, &y)?;
            let mut g = tape.backward(loss)?;
            let mut grads = GradMap::new();
            grads.insert("w".into(), g.take(w).expect("w requires grad"));
            grads.insert("b".into(), g.take(b).expect("b requires grad"));
            adamw_step(&mut params, &grads, &mut state, &adam, cfg.lr)?;
        }
    }
    let classifier = LinearClassifier {
        weight: params["w"].clone(),
        bias: params["b"].clone(),
    };
    let preds = classifier.predict(test);
    let correct: Vec<bool> = preds.iter().zip(yte).map(|(&(p, _), &y)| p == y).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / test.n as f64;
    Ok(ProbeResult {
        accuracy,
        classifier,
        confidences: preds.iter().map(|p| p.1).collect(),
        correct,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub error_rate: f64,
    pub predictions: Vec<usize>,
}

/// Cosine-similarity k-NN by exhaustive scan. Neighbours are ranked by
/// similarity (equal similarities by training index); the vote is by count,
/// ties broken by summed similarity and then by the lower label.
pub fn knn_probe(train: &RepMatrix, test: &RepMatrix, k: usize) -> Result<KnnResult> {
    let ytr = train.require_labels("k-NN probe")?;
    let yte = test.require_labels("k-NN probe")?;
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > train.n {
        return Err(Error::invalid(format!("k = {k} exceeds {} training rows", train.n)));
    }
    if train.d != test.d {
        return Err(Error::shape("knn_probe", &[&[train.d], &[test.d]]));
    }
    if test.n == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let n_classes = ytr.iter().max().map_or(0, |m| m + 1);
    let mut predictions = Vec::with_capacity(test.n);
    for i in 0..test.n {
        let q = test.row(i);
        let mut sims: Vec<(f64, usize)> = (0..train.n).map(|j| (cosine(q, train.row(j)), j)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); n_classes];
        for &(s, j) in &sims[..k] {
            votes[ytr[j]].0 += 1;
            votes[ytr[j]].1 += s;
        }
        let mut best = 0;
        for c in 1..n_classes {
            let (vc, vb) = (votes[c], votes[best]);
            if vc.0 > vb.0 || (vc.0 == vb.0 && vc.1 > vb.1) {
                best = c;
            }
        }
        predictions.push(best);
    }
    let errors = predictions.iter().zip(yte).filter(|(p, y)| p != y).count();
    Ok(KnnResult {
        error_rate: errors as f64 / test.n as f64,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width bins partitioning `[0, 1]`: bin `b` holds confidences in
/// `(b/n, (b+1)/n]`, and bin 0 also holds 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,mean_confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{}",
                b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            );
        }
        s
    }
}

fn bin_index(conf: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut b = ((conf * nb).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    // guard against rounding of conf * n at bin edges
    if b > 0 && conf <= b as f64 / nb {
        b -= 1;
    } else if b + 1 < n_bins && conf > (b + 1) as f64 / nb {
        b += 1;
    }
    b
}

/// Expected calibration error `Σ_b (n_b / n) |acc_b − conf_b|`.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<(f64, ReliabilityBins)> {
    if confidences.is_empty() {
        return Err(Error::invalid("ECE of an empty prediction set"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::invalid("confidences and correctness flags differ in length"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be positive"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let s = &mut sums[bin_index(c, n_bins)];
        s.0 += 1;
        s.1 += c;
        s.2 += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, conf_sum, hits))| {
            let (mc, acc) = if count > 0 {
                (conf_sum / count as f64, hits as f64 / count as f64)
            } else {
                (0.0, 0.0)
            };
            total += count as f64 / n * (acc - mc).abs();
            ReliabilityBin {
                lower: i as f64 / n_bins as f64,
                upper: (i + 1) as f64 / n_bins as f64,
                count,
                mean_confidence: mc,
                accuracy: acc,
            }
        })
        .collect();
    Ok((total, ReliabilityBins { n_bins, bins }))
}

/// Stratified subsample: `floor(fraction·n / C)` rows of every class, chosen
/// with the `Subsample` stream of `seed`, returned in ascending row order.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let per_class = (fraction * labels.len() as f64 / n_classes as f64 + 1e-9).floor() as usize;
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        let take = per_class.min(rows.len());
        if take == 0 {
            return Err(Error::invalid(format!("class {c} has no samples after subsampling")));
        }
        if take < rows.len() {
            rows.shuffle(&mut rng::stream(seed, Purpose::Subsample, 0, c as u32));
        }
        keep.extend_from_slice(&rows[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowShotRun {
    pub seed: u64,
    pub n_train: usize,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowShotSummary {
    pub runs: Vec<LowShotRun>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Linear probes on stratified fractions of `train`, one per seed.
pub fn lowshot_probe(
    train: &RepMatrix,
    test: &RepMatrix,
    fraction: f64,
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<LowShotSummary> {
    let labels = train.require_labels("low-shot probe")?;
    if seeds.is_empty() {
        return Err(Error::invalid("low-shot probe needs at least one seed"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let rows = stratified_subsample(labels, fraction, seed)?;
        let sub = train.select(&rows);
        let r = linear_probe(&sub, test, cfg)?;
        let (e, _) = ece(&r.confidences, &r.correct, 10)?;
        runs.push(LowShotRun {
            seed,
            n_train: rows.len(),
            accuracy: r.accuracy,
            ece: e,
        });
    }
    let (accuracy_mean, accuracy_std) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (ece_mean, ece_std) = mean_std(&runs.iter().map(|r| r.ece).collect::<Vec<_>>());
    Ok(LowShotSummary {
        runs,
        accuracy_mean,
        accuracy_std,
        ece_mean,
        ece_std,
    })
}

/// Mean per-image NLL (nats, positions 2..D) and bits per predicted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BpdReport {
    pub n_images: usize,
    pub nll_per_image: f64,
    pub bpd: f64,
}

pub fn eval_bpd(model: &GcrlModel, grids: &[TokenGrid], batch: usize) -> Result<BpdReport> {
    if grids.is_empty() || batch == 0 {
        return Err(Error::invalid("bpd needs images and a positive batch size"));
    }
    let mut total = 0.0f64;
    for chunk in grids.chunks(batch) {
        let refs: Vec<&TokenGrid> = chunk.iter().collect();
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, model, false);
        let logits = model.decoder_logits_on_tape(&mut tape, &b, &refs, &mut ForwardCtx::eval())?;
        let nll = losses::generative_nll(&mut tape, logits, &refs)?;
        total += tape.value(nll).item() as f64 * chunk.len() as f64;
    }
    let nll_per_image = total / grids.len() as f64;
    Ok(BpdReport {
        n_images: grids.len(),
        nll_per_image,
        bpd: losses::bpd_from_nll(nll_per_image, model.config.seq_len())?,
    })
}

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Softmax of `logits / τ`, `τ > 0`.
    Temperature(f64),
    /// Argmax (the `τ → 0` limit); ties go to the lowest token id.
    Greedy,
}

fn draw(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Ancestral sampling in raster order. Position 1 comes from
/// `first_token_counts` (the training marginal); position `t > 1` from the
/// decoder given the tokens before it. Image `i` draws from its own stream
/// keyed by `(seed, i)`.
pub fn sample(
    model: &GcrlModel,
    n_images: usize,
    sampling: Sampling,
    seed: u64,
    first_token_counts: &[u64],
) -> Result<Vec<TokenGrid>> {
    let c = &model.config;
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {t}")));
        }
    }
    if first_token_counts.len() != c.vocab || first_token_counts.iter().all(|&n| n == 0) {
        return Err(Error::invalid(
            "first-token marginal must have one positive-total entry per token",
        ));
    }
    let mut rngs: Vec<_> = (0..n_images)
        .map(|i| rng::stream(seed, Purpose::Sample, 0, i as u32))
        .collect();
    let marginal: Vec<f64> = first_token_counts.iter().map(|&n| n as f64).collect();
    let mut grids: Vec<TokenGrid> = rngs
        .iter_mut()
        .map(|r| {
            let first = match sampling {
                Sampling::Greedy => argmax(&marginal),
                Sampling::Temperature(_) => draw(&marginal, r.gen()),
            };
            let mut tokens = vec![0u32; c.seq_len()];
            tokens[0] = first as u32;
            TokenGrid::new(c.height, c.width, tokens)
        })
        .collect::<Result<_>>()?;
    if n_images == 0 {
        return Ok(grids);
    }
    let k = c.vocab;
    for t in 1..c.seq_len() {
        let refs: Vec<&TokenGrid> = grids.iter().collect();
        let logits = model.decoder_logits(&refs)?;
        let data = logits.data();
        for (i, g) in grids.iter_mut().enumerate() {
            let row = &data[(i * c.seq_len() + t - 1) * k..(i * c.seq_len() + t) * k];
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let next = match sampling {
                Sampling::Greedy => argmax(&row),
                Sampling::Temperature(tau) => {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = row.iter().map(|l| ((l - m) / tau).exp()).collect();
                    draw(&w, rngs[i].gen())
                }
            };
            g.tokens[t] = next as u32;
        }
    }
    Ok(grids)
}

#[cfg(test)]
mod tests;

/// One row of the attention throughput benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub attention_kind: AttentionKind,
    pub images_per_s: f64,
    pub score_entries_per_image: u64,
    pub n: usize,
}

pub const THROUGHPUT_HEADER: &str = "attention_kind,images_per_s,score_entries_per_image,n";

impl ThroughputRow {
    pub fn csv_row(&self) -> String {
        let kind = match self.attention_kind {
            AttentionKind::Axial => "axial",
            AttentionKind::Dense => "dense",
        };
        format!(
            "{kind},{:.3},{},{}",
            self.images_per_s, self.score_entries_per_image, self.n
        )
    }
}

/// Times `repetitions` eval-mode decoder forwards of a `batch` of random
/// token grids and counts attention score entries per image and block. The
/// counter is checked against [`score_entries_per_block`].
pub fn attention_throughput(
    config: &ModelConfig,
    batch: usize,
    repetitions: usize,
    seed: u64,
) -> Result<ThroughputRow> {
    if batch == 0 || repetitions == 0 {
        return Err(Error::invalid("throughput needs a positive batch and repetition count"));
    }
    let model = GcrlModel::init(config.clone(), seed)?;
    let c = &model.config;
    let mut r = rng::stream(seed, Purpose::Sample, 0, u32::MAX);
    let grids: Vec<TokenGrid> = (0..batch)
        .map(|_| {
            TokenGrid::new(
                c.height,
                c.width,
                (0..c.seq_len()).map(|_| r.gen_range(0..c.vocab as u32)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    let mut entries = 0u64;
    let start = Instant::now();
    for _ in 0..repetitions {
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, &model, false);
        let mut ctx = ForwardCtx::eval();
        model.decoder_logits_on_tape(&mut tape, &b, &refs, &mut ctx)?;
        entries = ctx.score_entries;
    }
    let secs = start.elapsed().as_secs_f64();
    let per_image = entries / (batch * c.n_blocks()) as u64;
    let expected = score_entries_per_block(c.attention, c.height, c.width, c.n_heads);
    if per_image != expected {
        return Err(Error::invalid(format!(
            "instrumented attention entries {per_image} differ from the closed form {expected}"
        )));
    }
    Ok(ThroughputRow {
        attention_kind: c.attention,
        images_per_s: (batch * repetitions) as f64 / secs.max(f64::MIN_POSITIVE),
        score_entries_per_image: per_image,
        n: repetitions,
    })
}
