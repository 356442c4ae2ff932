//! The encoder/decoder transformer over token grids.

mod attention;
mod network;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub use attention::{axial_attention, dense_causal_attention, mha, AxialTrace};
pub use network::{Bound, ForwardCtx, RepPosition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Axial,
    Dense,
}

/// Attention score entries one image costs in one block: `heads·D²` for
/// dense attention, `heads·(H·W² + W·H² + H·W²)` for the three axial passes.
pub fn score_entries_per_block(kind: AttentionKind, height: usize, width: usize, n_heads: usize) -> u64 {
    let (h, w, n) = (height as u64, width as u64, n_heads as u64);
    match kind {
        AttentionKind::Dense => n * (h * w).pow(2),
        AttentionKind::Axial => n * (h * w * w + w * h * h + h * w * w),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_mult: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub attention: AttentionKind,
    pub dropout: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Size of the linear classification head used by the supervised modes;
    /// 0 means no head.
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            vocab: 16,
            d_model: 64,
            n_heads: 4,
            mlp_mult: 4,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            attention: AttentionKind::Axial,
            dropout: 0.1,
            proj_hidden: 128,
            proj_out: 64,
            n_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn n_blocks(&self) -> usize {
        self.n_enc_blocks + self.n_dec_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_mult", self.mlp_mult),
            ("n_enc_blocks", self.n_enc_blocks),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let k = self.vocab;
        let hidden = self.mlp_mult * d;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        let embeddings = k * d + self.height * d + self.width * d;
        let final_lns = 2 * (2 * d);
        let proj = (d * self.proj_hidden + self.proj_hidden)
            + 2 * self.proj_hidden
            + (self.proj_hidden * self.proj_out + self.proj_out);
        let out_head = d * k;
        let cls = if self.n_classes > 0 {
            d * self.n_classes + self.n_classes
        } else {
            0
        };
        embeddings + self.n_blocks() * block + final_lns + proj + out_head + cls
    }
}

/// Parameters are grouped by name prefix: `enc.{i}.*`, `dec.{i}.*`, `enc_ln.*`,
/// `dec_ln.*`, `proj.*`, `out_head`, `cls.*` and the embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrlModel {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<f32>>,
}

pub(crate) fn block_prefix(i: usize, cfg: &ModelConfig) -> String {
    if i < cfg.n_enc_blocks {
        format!("enc.{i}")
    } else {
        format!("dec.{}", i - cfg.n_enc_blocks)
    }
}

/// Layer-norm gains/biases and the token embedding table are not decayed.
pub fn is_decayed(name: &str) -> bool {
    if name == "tok_emb" {
        return false;
    }
    let mut parts = name.rsplit('.');
    let last = parts.next().unwrap_or("");
    let owner = parts.next().unwrap_or("");
    !((last == "gain" || last == "bias") && owner.contains("ln"))
}

impl GcrlModel {
    /// Weights and embeddings ~ N(0, 0.02²); the output projection of every
    /// residual branch uses std 0.02/√(2·n_blocks); biases zero, LN gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_blocks().max(1) as f64).sqrt();
        let mut params = IndexMap::new();
        let mut normal = |shape: Vec<usize>, s: f64| -> Tensor<f32> {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng) as f32).collect()).expect("sized")
        };
        let (d, k, hidden) = (config.d_model, config.vocab, config.mlp_mult * config.d_model);
        params.insert("tok_emb".into(), normal(vec![k, d], std));
        params.insert("pos_row".into(), normal(vec![config.height, d], std));
        params.insert("pos_col".into(), normal(vec![config.width, d], std));
        for i in 0..config.n_blocks() {
            let p = block_prefix(i, &config);
            let mut put = |name: &str, t: Tensor<f32>| {
                params.insert(format!("{p}.{name}"), t);
            };
            put("ln1.gain", Tensor::full(vec![d], 1.0));
            put("ln1.bias", Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv"] {
                put(&format!("attn.{w}"), normal(vec![d, d], std));
                put(&format!("attn.b{}", &w[1..]), Tensor::zeros(vec![d]));
            }
            put("attn.wo", normal(vec![d, d], resid_std));
            put("attn.bo", Tensor::zeros(vec![d]));
            put("ln2.gain", Tensor::full(vec![d], 1.0));
            put("ln2.bias", Tensor::zeros(vec![d]));
            put("mlp.w1", normal(vec![d, hidden], std));
            put("mlp.b1", Tensor::zeros(vec![hidden]));
            put("mlp.w2", normal(vec![hidden, d], resid_std));
            put("mlp.b2", Tensor::zeros(vec![d]));
        }
        for ln in ["enc_ln", "dec_ln"] {
            params.insert(format!("{ln}.gain"), Tensor::full(vec![d], 1.0));
            params.insert(format!("{ln}.bias"), Tensor::zeros(vec![d]));
        }
        params.insert("proj.w1".into(), normal(vec![d, config.proj_hidden], std));
        params.insert("proj.b1".into(), Tensor::zeros(vec![config.proj_hidden]));
        params.insert("proj.ln.gain".into(), Tensor::full(vec![config.proj_hidden], 1.0));
        params.insert("proj.ln.bias".into(), Tensor::zeros(vec![config.proj_hidden]));
        params.insert("proj.w2".into(), normal(vec![config.proj_hidden, config.proj_out], std));
        params.insert("proj.b2".into(), Tensor::zeros(vec![config.proj_out]));
        params.insert("out_head".into(), normal(vec![d, k], std));
        if config.n_classes > 0 {
            params.insert("cls.w".into(), normal(vec![d, config.n_classes], std));
            params.insert("cls.b".into(), Tensor::zeros(vec![config.n_classes]));
        }
        Ok(GcrlModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("model has no parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("model has no parameter `{name}`")))
    }

    pub fn decay_mask(&self) -> impl Iterator<Item = (&str, bool)> {
        self.params.keys().map(|n| (n.as_str(), is_decayed(n)))
    }
}

#[cfg(test)]
pub(crate) mod tests;
