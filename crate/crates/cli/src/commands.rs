//! Subcommand implementations. Each takes a deserialized config and an
//! output directory and returns a one-line JSON summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use gcrl_core::data::{self, read_dataset, SyntheticParams};
use gcrl_core::eval::{self, ProbeConfig, RepMatrix, Sampling, THROUGHPUT_HEADER};
use gcrl_core::model::{AttentionKind, RepPosition};
use gcrl_core::ood;
use gcrl_core::quantizer::{build_codebook, sample_pixels};
use gcrl_core::trainer::{self, load_checkpoint, Checkpoint, RunOptions, TrainConfig};
use gcrl_core::{Codebook, Dataset, DatasetSpec, ModelConfig, TokenGrid};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    Ok(data::write_text(path, &text)?)
}

fn encode_all(dataset: &Dataset, codebook: &Codebook) -> CliResult<Vec<TokenGrid>> {
    Ok(dataset
        .images
        .iter()
        .map(|im| codebook.encode(im))
        .collect::<gcrl_core::Result<_>>()?)
}

fn load_codebook(path: &Path, field: &str) -> CliResult<Codebook> {
    if !path.exists() {
        return Err(CliError::config(field, format!("{} does not exist", path.display())));
    }
    Ok(Codebook::load(path)?)
}

// ---------------------------------------------------------------- gen-synth

pub fn gen_synth(params: &SyntheticParams, out: &Path) -> CliResult<Value> {
    let ds = data::synthetic(params)?;
    let path = out.join("dataset.gimg");
    data::write_images(&ds, &path)?;
    Ok(json!({ "images": ds.len(), "path": path }))
}

// ----------------------------------------------------------- build-codebook

fn default_k() -> usize {
    16
}
fn default_iters() -> usize {
    100
}
fn default_max_pixels() -> usize {
    65_536
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Pixels sampled (with replacement) for k-means when the dataset has more.
    #[serde(default = "default_max_pixels")]
    pub max_pixels: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn build_codebook_cmd(cfg: &CodebookConfig, out: &Path) -> CliResult<Value> {
    if cfg.k == 0 {
        return Err(CliError::config("k", "must be at least 1"));
    }
    let ds = read_dataset(&cfg.dataset)?;
    let pixels = sample_pixels(&ds.images, cfg.max_pixels, cfg.seed);
    let codebook = build_codebook(&pixels, cfg.k, cfg.max_iters, cfg.seed)?;
    let path = out.join("codebook.gcbk");
    codebook.save(&path)?;
    Ok(json!({ "k": codebook.k(), "pixels": pixels.len(), "path": path }))
}

// -------------------------------------------------------------------- train

/// Inputs of a training run, loaded before any output is written.
pub struct TrainInputs {
    codebook: Codebook,
    dataset: Dataset,
    resume: Option<Checkpoint>,
}

pub fn train_inputs(cfg: &TrainConfig, resume: Option<&Path>) -> CliResult<TrainInputs> {
    cfg.validate()?;
    let cb_path = cfg
        .codebook
        .as_deref()
        .ok_or_else(|| CliError::config("codebook", "train needs a codebook path (run build-codebook first)"))?;
    Ok(TrainInputs {
        codebook: load_codebook(cb_path, "codebook")?,
        dataset: read_dataset(&cfg.dataset)?,
        resume: resume.map(load_checkpoint).transpose()?,
    })
}

pub fn train(cfg: &TrainConfig, inputs: TrainInputs, out: &Path, stop_after_epoch: Option<u32>) -> CliResult<Value> {
    let TrainInputs {
        codebook,
        dataset,
        resume,
    } = inputs;
    let outcome = trainer::run_training(
        cfg,
        &dataset,
        &codebook,
        RunOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_after_epoch,
        },
    )?;
    let last = outcome.log.last();
    Ok(json!({
        "epoch": outcome.checkpoint.epoch,
        "step": outcome.checkpoint.step,
        "final_loss": last.map(|m| m.loss),
        "checkpoint": out.join("final.gckp"),
    }))
}

// --------------------------------------------------------------- evaluation

/// Where an evaluation reads representations from.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Encode a dataset and extract representations with the checkpoint.
    Dataset(DatasetSpec),
    /// A `GREP` file written by `extract-reps`.
    Reps(PathBuf),
}

fn default_position() -> RepPosition {
    RepPosition::Half
}
fn default_batch() -> usize {
    64
}
fn default_knn_k() -> usize {
    5
}
fn default_bins() -> usize {
    10
}
fn default_fraction() -> f64 {
    0.01
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_n_images() -> usize {
    8
}
fn default_temperature() -> f64 {
    1.0
}

/// Shared config of the evaluation subcommands; each reads the fields it
/// needs. `train` defaults to the dataset the checkpoint was trained on and
/// `codebook` to the checkpoint's codebook path.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub codebook: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<Source>,
    #[serde(default)]
    pub test: Option<Source>,
    /// Out-of-distribution set for the OOD subcommands.
    #[serde(default)]
    pub ood: Option<Source>,
    #[serde(default = "default_position")]
    pub position: RepPosition,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_knn_k")]
    pub k: usize,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Predictions CSV read by `eval-ece`.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default = "default_n_images")]
    pub n_images: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Argmax decoding instead of temperature sampling.
    #[serde(default)]
    pub greedy: bool,
    #[serde(default)]
    pub seed: u64,
}

struct Context<'a> {
    cfg: &'a EvalConfig,
    checkpoint: Option<Checkpoint>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a EvalConfig) -> CliResult<Self> {
        if cfg.batch_size == 0 {
            return Err(CliError::config("batch_size", "must be at least 1"));
        }
        let checkpoint = match &cfg.checkpoint {
            Some(p) if !p.exists() => {
                return Err(CliError::config(
                    "checkpoint",
                    format!("{} does not exist", p.display()),
                ))
            }
            Some(p) => Some(load_checkpoint(p)?),
            None => None,
        };
        Ok(Context { cfg, checkpoint })
    }

    fn checkpoint(&self) -> CliResult<&Checkpoint> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| CliError::config("checkpoint", "this subcommand needs a checkpoint"))
    }

    fn codebook(&self) -> CliResult<Codebook> {
        match (&self.cfg.codebook, &self.checkpoint) {
            (Some(p), _) => load_codebook(p, "codebook"),
            (None, Some(ck)) => match &ck.config.codebook {
                Some(p) => load_codebook(p, "codebook"),
                None => Err(CliError::config(
                    "codebook",
                    "the checkpoint records no codebook; set one",
                )),
            },
            (None, None) => Err(CliError::config(
                "codebook",
                "no codebook and no checkpoint to take it from",
            )),
        }
    }

    /// The source in `field`, with `train` falling back to the checkpoint's
    /// training set.
    fn source(&self, field: &str) -> CliResult<Source> {
        let given = match field {
            "train" => &self.cfg.train,
            "test" => &self.cfg.test,
            _ => &self.cfg.ood,
        };
        match (given, field) {
            (Some(s), _) => Ok(s.clone()),
            (None, "train") => Ok(Source::Dataset(self.checkpoint()?.config.dataset.clone())),
            (None, _) => Err(CliError::config(field, "required by this subcommand")),
        }
    }

    fn grids(&self, field: &str) -> CliResult<(Vec<TokenGrid>, Option<Vec<usize>>)> {
        match self.source(field)? {
            Source::Dataset(spec) => {
                let ds = read_dataset(&spec)?;
                Ok((encode_all(&ds, &self.codebook()?)?, ds.labels))
            }
            Source::Reps(_) => Err(CliError::config(
                field,
                "this subcommand needs a dataset, not representations",
            )),
        }
    }

    fn reps(&self, field: &str) -> CliResult<RepMatrix> {
        match self.source(field)? {
            Source::Reps(p) => Ok(RepMatrix::load(&p)?),
            Source::Dataset(_) => {
                let ck = self.checkpoint()?;
                let (grids, labels) = self.grids(field)?;
                let src = eval::rep_source(&ck.model, ck.config.mode, self.cfg.position)?;
                Ok(eval::extract_reps(
                    &ck.model,
                    &grids,
                    labels.as_deref(),
                    src,
                    self.cfg.batch_size,
                )?)
            }
        }
    }
}

pub fn extract_reps(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let mut written = serde_json::Map::new();
    for field in ["train", "test", "ood"] {
        let present = match field {
            "train" => cfg.train.is_some() || ctx.checkpoint.is_some(),
            "test" => cfg.test.is_some(),
            _ => cfg.ood.is_some(),
        };
        if present {
            let reps = ctx.reps(field)?;
            let path = out.join(format!("{field}.grep"));
            reps.save(&path)?;
            written.insert(field.into(), json!({ "n": reps.n, "d": reps.d, "path": path }));
        }
    }
    Ok(Value::Object(written))
}

pub const PREDICTIONS_HEADER: &str = "sample_id,label,predicted,confidence,correct";

pub fn eval_linear(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let (train, test) = (ctx.reps("train")?, ctx.reps("test")?);
    let result = eval::linear_probe(&train, &test, &cfg.probe)?;
    let labels = test.labels.as_deref().unwrap_or_default();
    let mut csv = format!("{PREDICTIONS_HEADER}\n");
    for (i, (pred, conf)) in result.classifier.predict(&test).into_iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{pred},{conf},{}\n",
            labels[i],
            u8::from(result.correct[i])
        ));
    }
    data::write_text(&out.join("predictions.csv"), &csv)?;
    let summary = json!({ "accuracy": result.accuracy, "n_train": train.n, "n_test": test.n, "d": train.d });
    write_json(&out.join("linear.json"), &summary)?;
    Ok(summary)
}

pub fn eval_knn(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let (train, test) = (ctx.reps("train")?, ctx.reps("test")?);
    let result = eval::knn_probe(&train, &test, cfg.k)?;
    let labels = test.labels.as_deref().unwrap_or_default();
    let mut csv = String::from("sample_id,label,predicted\n");
    for (i, p) in result.predictions.iter().enumerate() {
        csv.push_str(&format!("{i},{},{p}\n", labels[i]));
    }
    data::write_text(&out.join("knn_predictions.csv"), &csv)?;
    let summary = json!({ "k": cfg.k, "error_rate": result.error_rate, "n_train": train.n, "n_test": test.n });
    write_json(&out.join("knn.json"), &summary)?;
    Ok(summary)
}

/// Reads the `confidence` and `correct` columns of a predictions CSV.
pub fn read_predictions(path: &Path) -> CliResult<(Vec<f64>, Vec<bool>)> {
    let bad = |msg: String| CliError::Runtime(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let (ci, ki) = (column("confidence")?, column("correct")?);
    let (mut conf, mut correct) = (Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let c: f64 = record[ci]
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: confidence `{}` is not a number", row + 1, &record[ci])))?;
        let k = match record[ki].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(format!("row {}: correct `{other}` is not 0/1", row + 1))),
        };
        conf.push(c);
        correct.push(k);
    }
    Ok((conf, correct))
}

pub fn eval_ece(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let path = cfg
        .predictions
        .as_deref()
        .ok_or_else(|| CliError::config("predictions", "eval-ece needs a predictions CSV"))?;
    if !path.exists() {
        return Err(CliError::config(
            "predictions",
            format!("{} does not exist", path.display()),
        ));
    }
    let (conf, correct) = read_predictions(path)?;
    let (ece, bins) = eval::ece(&conf, &correct, cfg.n_bins)?;
    data::write_text(&out.join("reliability.csv"), &bins.to_csv())?;
    let summary = json!({ "ece": ece, "n": conf.len(), "n_bins": cfg.n_bins });
    write_json(&out.join("ece.json"), &summary)?;
    Ok(summary)
}

pub fn eval_lowshot(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let (train, test) = (ctx.reps("train")?, ctx.reps("test")?);
    let s = eval::lowshot_probe(&train, &test, cfg.fraction, &cfg.seeds, &cfg.probe)?;
    let mut csv = String::from("seed,n_train,accuracy,ece\n");
    for r in &s.runs {
        csv.push_str(&format!("{},{},{},{}\n", r.seed, r.n_train, r.accuracy, r.ece));
    }
    data::write_text(&out.join("lowshot.csv"), &csv)?;
    let summary = json!({
        "fraction": cfg.fraction,
        "accuracy_mean": s.accuracy_mean,
        "accuracy_std": s.accuracy_std,
        "ece_mean": s.ece_mean,
        "ece_std": s.ece_std,
    });
    write_json(&out.join("lowshot.json"), &summary)?;
    Ok(summary)
}

pub fn eval_bpd(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let ck = ctx.checkpoint()?;
    let field = if cfg.test.is_some() { "test" } else { "train" };
    let (grids, _) = ctx.grids(field)?;
    let r = eval::eval_bpd(&ck.model, &grids, cfg.batch_size)?;
    let summary = json!({ "split": field, "n_images": r.n_images, "nll_per_image": r.nll_per_image, "bpd": r.bpd });
    write_json(&out.join("bpd.json"), &summary)?;
    Ok(summary)
}

pub fn sample(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let ck = ctx.checkpoint()?;
    let codebook = ctx.codebook()?;
    let sampling = if cfg.greedy {
        Sampling::Greedy
    } else if cfg.temperature > 0.0 && cfg.temperature.is_finite() {
        Sampling::Temperature(cfg.temperature)
    } else {
        return Err(CliError::config("temperature", "must be positive (or set greedy)"));
    };
    let grids = eval::sample(&ck.model, cfg.n_images, sampling, cfg.seed, &ck.first_token_counts)?;
    let mut tokens = String::from("sample_id,tokens\n");
    for (i, g) in grids.iter().enumerate() {
        data::write_ppm(&codebook.decode(g)?, &out.join(format!("sample_{i:03}.ppm")))?;
        let t: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
        tokens.push_str(&format!("{i},{}\n", t.join(" ")));
    }
    data::write_text(&out.join("samples.csv"), &tokens)?;
    Ok(json!({ "images": grids.len() }))
}

fn ood_report(inside: &[f64], outside: &[f64], out: &Path, convention: &str) -> CliResult<Value> {
    data::write_text(&out.join("ood_scores.csv"), &ood::scores_csv(inside, outside))?;
    let summary = json!({
        "auroc": ood::auroc(inside, outside)?,
        "auprc": ood::auprc(inside, outside)?,
        "n_in": inside.len(),
        "n_out": outside.len(),
        "score": convention,
        "higher_is": "in-distribution",
    });
    write_json(&out.join("ood.json"), &summary)?;
    Ok(summary)
}

pub fn ood_sup(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let gaussians = ood::fit_class_gaussians(&ctx.reps("train")?)?;
    let inside = gaussians.score_all(&ctx.reps("test")?)?;
    let outside = gaussians.score_all(&ctx.reps("ood")?)?;
    ood_report(&inside, &outside, out, "max class-conditional Gaussian log-density")
}

pub fn ood_unsup(cfg: &EvalConfig, out: &Path) -> CliResult<Value> {
    let ctx = Context::new(cfg)?;
    let model = &ctx.checkpoint()?.model;
    let score = |field| -> CliResult<Vec<f64>> {
        let (grids, _) = ctx.grids(field)?;
        Ok(grids
            .iter()
            .map(|g| ood::score_unsupervised(model, g))
            .collect::<gcrl_core::Result<_>>()?)
    };
    let (inside, outside) = (score("test")?, score("ood")?);
    ood_report(&inside, &outside, out, "negative norm of the log-likelihood gradient")
}

// -------------------------------------------------------------------- bench

fn default_bench_batch() -> usize {
    4
}
fn default_repetitions() -> usize {
    100
}
fn default_kinds() -> Vec<AttentionKind> {
    vec![AttentionKind::Dense, AttentionKind::Axial]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_bench_batch")]
    pub batch_size: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<AttentionKind>,
    #[serde(default)]
    pub seed: u64,
}

pub fn bench(cfg: &BenchConfig, out: &Path) -> CliResult<Value> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 {
        return Err(CliError::config("batch_size", "must be at least 1"));
    }
    if cfg.repetitions == 0 {
        return Err(CliError::config("repetitions", "must be at least 1"));
    }
    let mut csv = format!("{THROUGHPUT_HEADER}\n");
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let model = ModelConfig {
            attention: kind,
            ..cfg.model.clone()
        };
        let row = eval::attention_throughput(&model, cfg.batch_size, cfg.repetitions, cfg.seed)?;
        csv.push_str(&row.csv_row());
        csv.push('\n');
        rows.push(row);
    }
    data::write_text(&out.join("bench.csv"), &csv)?;
    serde_json::to_value(rows).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Creates `out` and records the invocation in `run_info.json`, the only
/// output that carries a timestamp.
pub fn prepare_out(
    out: &Path,
    command: &str,
    config: Option<&Path>,
    overrides: &[String],
    threads: usize,
) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &out.join("run_info.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "overrides": overrides,
            "threads": threads,
            "timestamp_unix": timestamp,
        }),
    )
}
