use indexmap::IndexMap;

use super::attention::{axial_attention, dense_causal_attention};
use super::{block_prefix, AttentionKind, GcrlModel};
use crate::error::{Error, Result};
use crate::quantizer::TokenGrid;
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Model parameters placed on a tape, by name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Places every parameter of `model` on `tape`. With `trainable` the leaves
    /// require gradients.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, model: &GcrlModel, trainable: bool) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.cast::<T>(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    /// Substitutes the variable used for parameter `name`.
    pub fn replace(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Per-forward state: train/eval switch, dropout stream and attention
/// instrumentation.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut StreamRng>,
    /// Number of attention score entries computed so far.
    pub score_entries: u64,
    /// When set, attention weight tensors are collected here.
    pub captured_weights: Option<Vec<Var>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            score_entries: 0,
            captured_weights: None,
        }
    }

    pub fn train(rng: &'a mut StreamRng) -> Self {
        ForwardCtx {
            training: true,
            rng: Some(rng),
            score_entries: 0,
            captured_weights: None,
        }
    }

    pub(crate) fn record_weights<T: Scalar>(&mut self, _tape: &Tape<T>, w: Var) {
        if let Some(c) = self.captured_weights.as_mut() {
            c.push(w);
        }
    }

    fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, rate: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => tape.dropout(x, rate, &mut **rng, true),
            _ => Ok(x),
        }
    }
}

/// Which block output feeds the pooled representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepPosition {
    Half,
    Last,
}

fn ln_affine<T: Scalar>(tape: &mut Tape<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let n = tape.layer_norm(x, axis, T::of(LN_EPS))?;
    let g = tape.mul_bcast(n, b.get(&format!("{prefix}.gain"))?)?;
    tape.add_bcast(g, b.get(&format!("{prefix}.bias"))?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, x: Var, w: &str, bias: &str) -> Result<Var> {
    let y = tape.matmul(x, b.get(w)?)?;
    tape.add_bcast(y, b.get(bias)?)
}

impl GcrlModel {
    pub(crate) fn check_grids(&self, grids: &[&TokenGrid]) -> Result<()> {
        let c = &self.config;
        if grids.is_empty() {
            return Err(Error::invalid("empty token batch"));
        }
        for g in grids {
            if g.height != c.height || g.width != c.width {
                return Err(Error::invalid(format!(
                    "token grid {}x{} does not match model {}x{}",
                    g.height, g.width, c.height, c.width
                )));
            }
            if let Some(&t) = g.tokens.iter().find(|&&t| t as usize >= c.vocab) {
                return Err(Error::invalid(format!("token {t} outside vocabulary of {}", c.vocab)));
            }
        }
        Ok(())
    }

    /// Token embedding lookup, `[B, H, W, d]`, before positional embeddings.
    pub fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, grids: &[&TokenGrid]) -> Result<Var> {
        self.check_grids(grids)?;
        let c = &self.config;
        let ids: Vec<usize> = grids
            .iter()
            .flat_map(|g| g.tokens.iter().map(|&t| t as usize))
            .collect();
        let e = tape.embedding(b.get("tok_emb")?, &ids)?;
        tape.reshape(e, &[grids.len(), c.height, c.width, c.d_model])
    }

    /// Adds row and column positional embeddings to `[B, H, W, d]`.
    pub fn add_positions<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, emb: Var) -> Result<Var> {
        let c = &self.config;
        let rows = tape.reshape(b.get("pos_row")?, &[c.height, 1, c.d_model])?;
        let x = tape.add_bcast(emb, rows)?;
        tape.add_bcast(x, b.get("pos_col")?)
    }

    /// One transformer block:
    /// `h = LN(h); h = h + Attn(h); h = h + MLP(LN(h))`, dropout before each
    /// residual add.
    pub fn block_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        index: usize,
        h: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let p = block_prefix(index, c);
        let x = ln_affine(tape, b, h, &format!("{p}.ln1"))?;
        let attn_prefix = format!("{p}.attn");
        let a = match c.attention {
            AttentionKind::Axial => axial_attention(tape, b, &attn_prefix, x, c.n_heads, ctx)?.0,
            AttentionKind::Dense => dense_causal_attention(tape, b, &attn_prefix, x, c.n_heads, ctx)?,
        };
        let a = ctx.dropout(tape, a, c.dropout)?;
        let h = tape.add(x, a)?;
        let m = ln_affine(tape, b, h, &format!("{p}.ln2"))?;
        let m = linear(tape, b, m, &format!("{p}.mlp.w1"), &format!("{p}.mlp.b1"))?;
        let m = tape.gelu(m);
        let m = linear(tape, b, m, &format!("{p}.mlp.w2"), &format!("{p}.mlp.b2"))?;
        let m = ctx.dropout(tape, m, c.dropout)?;
        let out = tape.add(h, m)?;
        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite(format!("activations of block {index} ({p})")));
        }
        Ok(out)
    }

    /// Runs blocks `range` of the concatenated encoder + decoder stack.
    pub fn run_blocks<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        mut h: Var,
        range: std::ops::Range<usize>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        for i in range {
            h = self.block_forward(tape, b, i, h, ctx)?;
        }
        Ok(h)
    }

    /// Embeddings plus positions followed by the encoder blocks: `[B, H, W, d]`.
    pub fn encoder_hidden<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        grids: &[&TokenGrid],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let e = self.embed_tokens(tape, b, grids)?;
        let x = self.add_positions(tape, b, e)?;
        self.run_blocks(tape, b, x, 0..self.config.n_enc_blocks, ctx)
    }

    /// Layer norm (parameters under `ln`) then global average pooling: `[B, d]`.
    pub fn pool<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, h: Var, ln: &str) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        let n = ln_affine(tape, b, h, ln)?;
        let flat = tape.reshape(n, &[s[0], s[1] * s[2], s[3]])?;
        tape.mean(flat, 1)
    }

    /// Encoder representation `z̃(x)`: encoder blocks, `enc_ln`, pooling.
    pub fn representation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        grids: &[&TokenGrid],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let h = self.encoder_hidden(tape, b, grids, ctx)?;
        self.pool(tape, b, h, "enc_ln")
    }

    /// `linear → LN → GELU → linear → L2-normalize`, `[B, proj_out]`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, rep: Var) -> Result<Var> {
        let h = linear(tape, b, rep, "proj.w1", "proj.b1")?;
        let h = ln_affine(tape, b, h, "proj.ln")?;
        let h = tape.gelu(h);
        let z = linear(tape, b, h, "proj.w2", "proj.b2")?;
        tape.l2_normalize(z, 1)
    }

    /// Decoder blocks on top of encoder features, `dec_ln`, output head:
    /// `[B, D, K]` logits where position `t` scores token `t + 1`.
    pub fn logits_from_hidden<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        h_enc: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        if c.n_dec_blocks == 0 {
            return Err(Error::invalid("model has no decoder blocks"));
        }
        let h = self.run_blocks(tape, b, h_enc, c.n_enc_blocks..c.n_blocks(), ctx)?;
        let h = ln_affine(tape, b, h, "dec_ln")?;
        let bs = tape.shape(h)[0];
        let h = tape.reshape(h, &[bs, c.seq_len(), c.d_model])?;
        tape.matmul(h, b.get("out_head")?)
    }

    /// Decoder logits from token embeddings `[B, H, W, d]` that have not yet
    /// received positional embeddings.
    pub fn logits_from_embedded<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        emb: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let x = self.add_positions(tape, b, emb)?;
        let h = self.run_blocks(tape, b, x, 0..self.config.n_enc_blocks, ctx)?;
        self.logits_from_hidden(tape, b, h, ctx)
    }

    pub fn decoder_logits_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        grids: &[&TokenGrid],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if self.config.n_dec_blocks == 0 {
            return Err(Error::invalid("model has no decoder blocks"));
        }
        let h = self.encoder_hidden(tape, b, grids, ctx)?;
        self.logits_from_hidden(tape, b, h, ctx)
    }

    pub fn class_logits<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, rep: Var) -> Result<Var> {
        if self.config.n_classes == 0 {
            return Err(Error::invalid("model has no classification head"));
        }
        linear(tape, b, rep, "cls.w", "cls.b")
    }

    /// Pooled features after block `⌈n/2⌉` (`Half`) or after the last block,
    /// normalized with the layer norm named `ln`.
    pub fn pooled_at<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        grids: &[&TokenGrid],
        blocks: usize,
        ln: &str,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if blocks == 0 || blocks > self.config.n_blocks() {
            return Err(Error::invalid(format!("cannot pool after block {blocks}")));
        }
        let e = self.embed_tokens(tape, b, grids)?;
        let x = self.add_positions(tape, b, e)?;
        let h = self.run_blocks(tape, b, x, 0..blocks, ctx)?;
        self.pool(tape, b, h, ln)
    }

    /// Eval-mode encoder representations, `[B, d]`.
    pub fn encode_representation(&self, grids: &[&TokenGrid]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, self, false);
        let r = self.representation(&mut tape, &b, grids, &mut ForwardCtx::eval())?;
        Ok(tape.value(r).clone())
    }

    /// Eval-mode projection of representations, `[B, proj_out]`.
    pub fn project_eval(&self, rep: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, self, false);
        let r = tape.constant(rep.clone());
        let z = self.project(&mut tape, &b, r)?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode decoder logits, `[B, D, K]`.
    pub fn decoder_logits(&self, grids: &[&TokenGrid]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, self, false);
        let l = self.decoder_logits_on_tape(&mut tape, &b, grids, &mut ForwardCtx::eval())?;
        Ok(tape.value(l).clone())
    }
}
