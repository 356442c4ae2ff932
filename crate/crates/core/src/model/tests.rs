use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::quantizer::TokenGrid;
use crate::tensor::{Tape, Var};

pub(crate) fn tiny_config(h: usize, w: usize, attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        height: h,
        width: w,
        vocab: 5,
        d_model: 8,
        n_heads: 2,
        mlp_mult: 2,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        attention,
        dropout: 0.0,
        proj_hidden: 6,
        proj_out: 4,
        n_classes: 0,
    }
}

fn random_grid(h: usize, w: usize, k: u32, seed: u64) -> TokenGrid {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    TokenGrid::new(h, w, (0..h * w).map(|_| r.gen_range(0..k)).collect()).unwrap()
}

/// Larger init so attention patterns are far from uniform in perturbation tests.
fn sharpen(model: &mut GcrlModel) {
    for (name, p) in model.params.iter_mut() {
        if name.contains(".w") || name.starts_with("pos") || name == "tok_emb" || name == "out_head" {
            for v in p.data_mut() {
                *v *= 20.0;
            }
        }
    }
}

fn random_hidden(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn run_attention(model: &GcrlModel, kind: AttentionKind, h: &Tensor<f32>) -> (Vec<f32>, u64) {
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, model, false);
    let x = tape.constant(h.clone());
    let mut ctx = ForwardCtx::eval();
    let out = match kind {
        AttentionKind::Axial => {
            axial_attention(&mut tape, &b, "enc.0.attn", x, model.config.n_heads, &mut ctx)
                .unwrap()
                .0
        }
        AttentionKind::Dense => {
            dense_causal_attention(&mut tape, &b, "enc.0.attn", x, model.config.n_heads, &mut ctx).unwrap()
        }
    };
    (tape.value(out).data().to_vec(), ctx.score_entries)
}

#[test]
fn param_count_matches_closed_form() {
    for (enc, dec, cls) in [(1, 1, 0), (2, 0, 3), (3, 2, 10)] {
        let cfg = ModelConfig {
            n_enc_blocks: enc,
            n_dec_blocks: dec,
            n_classes: cls,
            ..tiny_config(3, 4, AttentionKind::Axial)
        };
        let m = GcrlModel::init(cfg.clone(), 0).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config(3, 3, AttentionKind::Axial);
    cfg.n_heads = 3;
    assert!(GcrlModel::init(cfg, 0).is_err());
    let mut cfg = tiny_config(3, 3, AttentionKind::Axial);
    cfg.n_enc_blocks = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn decay_mask_excludes_layer_norm_and_token_embedding() {
    let m = GcrlModel::init(tiny_config(2, 2, AttentionKind::Axial), 0).unwrap();
    for (name, decay) in m.decay_mask() {
        let expect = !(name == "tok_emb" || name.contains("ln"));
        assert_eq!(decay, expect, "{name}");
    }
}

#[test]
fn zero_branch_block_is_layer_norm_path() {
    let mut m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 1).unwrap();
    for name in ["enc.0.attn.wo", "enc.0.attn.bo", "enc.0.mlp.w2", "enc.0.mlp.b2"] {
        m.param_mut(name).unwrap().data_mut().fill(0.0);
    }
    let h = random_hidden(&[2, 3, 3, 8], 4);
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, &m, false);
    let x = tape.constant(h);
    let out = m.block_forward(&mut tape, &b, 0, x, &mut ForwardCtx::eval()).unwrap();
    let ln = tape.layer_norm(x, 3, 1e-5).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(ln).data());
}

#[test]
fn single_token_attention_is_value_projection() {
    let m = GcrlModel::init(tiny_config(1, 1, AttentionKind::Dense), 2).unwrap();
    let h = random_hidden(&[1, 1, 1, 8], 5);
    for kind in [AttentionKind::Dense, AttentionKind::Axial] {
        let (out, _) = run_attention(&m, kind, &h);
        let mut tape = Tape::<f32>::new();
        let b = Bound::new(&mut tape, &m, false);
        let x = tape.constant(h.clone().reshaped(vec![1, 8]).unwrap());
        let v = tape.matmul(x, b.get("enc.0.attn.wv").unwrap()).unwrap();
        let v = tape.add_bcast(v, b.get("enc.0.attn.bv").unwrap()).unwrap();
        let o = tape.matmul(v, b.get("enc.0.attn.wo").unwrap()).unwrap();
        let o = tape.add_bcast(o, b.get("enc.0.attn.bo").unwrap()).unwrap();
        // for axial the shifted row is all zero, so the last stage sees only x
        for (a, e) in out.iter().zip(tape.value(o).data()) {
            assert!((a - e).abs() < 1e-6, "{kind:?}");
        }
    }
}

#[test]
fn dense_mask_zeroes_future_weights() {
    let m = GcrlModel::init(tiny_config(2, 3, AttentionKind::Dense), 3).unwrap();
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, &m, false);
    let x = tape.constant(random_hidden(&[2, 2, 3, 8], 6));
    let mut ctx = ForwardCtx::eval();
    ctx.captured_weights = Some(Vec::new());
    dense_causal_attention(&mut tape, &b, "enc.0.attn", x, 2, &mut ctx).unwrap();
    let w = ctx.captured_weights.unwrap()[0];
    let len = 6;
    for (i, &v) in tape.value(w).data().iter().enumerate() {
        let (t, j) = ((i / len) % len, i % len);
        if j > t {
            assert_eq!(v, 0.0);
        } else {
            assert!(v > 0.0);
        }
    }
}

#[test]
fn axial_shifted_row_zero_is_exactly_zero() {
    let m = GcrlModel::init(tiny_config(3, 4, AttentionKind::Axial), 4).unwrap();
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, &m, false);
    let x = tape.constant(random_hidden(&[2, 3, 4, 8], 7));
    let (_, trace) = axial_attention(&mut tape, &b, "enc.0.attn", x, 2, &mut ForwardCtx::eval()).unwrap();
    let s = tape.value(trace.shifted).data();
    for bi in 0..2 {
        let row0 = &s[bi * 3 * 4 * 8..bi * 3 * 4 * 8 + 4 * 8];
        assert!(row0.iter().all(|&v| v == 0.0));
    }
    assert!(s.iter().any(|&v| v != 0.0));
}

#[test]
fn axial_single_row_reduces_to_causal_row_attention() {
    let m = GcrlModel::init(tiny_config(1, 5, AttentionKind::Axial), 5).unwrap();
    let h = random_hidden(&[2, 1, 5, 8], 8);
    let (axial, _) = run_attention(&m, AttentionKind::Axial, &h);
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, &m, false);
    let x = tape.constant(h.reshaped(vec![2, 5, 8]).unwrap());
    let r = mha(&mut tape, &b, "enc.0.attn", x, 2, true, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(axial.as_slice(), tape.value(r).data());
}

/// Input positions whose perturbation changes output position `t`.
fn dependency_sets(model: &GcrlModel, kind: AttentionKind, h: usize, w: usize) -> Vec<Vec<bool>> {
    let d = model.config.d_model;
    let base = random_hidden(&[1, h, w, d], 10);
    let (y0, _) = run_attention(model, kind, &base);
    let n = h * w;
    let mut deps = vec![vec![false; n]; n];
    for src in 0..n {
        let mut x = base.clone();
        for v in &mut x.data_mut()[src * d..(src + 1) * d] {
            *v += 0.5;
        }
        let (y, _) = run_attention(model, kind, &x);
        for t in 0..n {
            deps[t][src] = y[t * d..(t + 1) * d] != y0[t * d..(t + 1) * d];
        }
    }
    deps
}

#[test]
fn axial_receptive_field_is_raster_prefix() {
    let mut m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 6).unwrap();
    sharpen(&mut m);
    let deps = dependency_sets(&m, AttentionKind::Axial, 3, 3);
    for t in 0..9 {
        let (r, c) = (t / 3, t % 3);
        for s in 0..9 {
            let (rs, cs) = (s / 3, s % 3);
            let expected = rs < r || (rs == r && cs <= c);
            assert_eq!(deps[t][s], expected, "output {t} input {s}");
        }
    }
}

#[test]
fn dense_receptive_field_is_raster_prefix() {
    let mut m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Dense), 7).unwrap();
    sharpen(&mut m);
    let deps = dependency_sets(&m, AttentionKind::Dense, 3, 3);
    for t in 0..9 {
        for s in 0..9 {
            assert_eq!(deps[t][s], s <= t, "output {t} input {s}");
        }
    }
}

#[test]
fn dense_and_axial_differ() {
    let m = GcrlModel::init(tiny_config(4, 4, AttentionKind::Axial), 8).unwrap();
    let h = random_hidden(&[1, 4, 4, 8], 11);
    assert_ne!(
        run_attention(&m, AttentionKind::Axial, &h).0,
        run_attention(&m, AttentionKind::Dense, &h).0
    );
}

#[test]
fn score_entry_counters_match_formulas() {
    for (h, w, heads, bsz) in [(4usize, 4usize, 1usize, 1usize), (3, 5, 2, 2), (2, 6, 4, 3)] {
        let mut cfg = tiny_config(h, w, AttentionKind::Axial);
        cfg.n_heads = heads;
        let m = GcrlModel::init(cfg, 0).unwrap();
        let x = random_hidden(&[bsz, h, w, 8], 1);
        let (_, axial) = run_attention(&m, AttentionKind::Axial, &x);
        let (_, dense) = run_attention(&m, AttentionKind::Dense, &x);
        assert_eq!(dense as usize, bsz * heads * (h * w) * (h * w));
        assert_eq!(axial as usize, bsz * heads * (h * w * w + w * h * h + h * w * w));
        assert_eq!(
            dense,
            bsz as u64 * score_entries_per_block(AttentionKind::Dense, h, w, heads)
        );
        assert_eq!(
            axial,
            bsz as u64 * score_entries_per_block(AttentionKind::Axial, h, w, heads)
        );
    }
    let m = GcrlModel::init(tiny_config(4, 4, AttentionKind::Axial), 0).unwrap();
    let mut cfg = m.config.clone();
    cfg.n_heads = 1;
    let m = GcrlModel { config: cfg, ..m };
    let x = random_hidden(&[1, 4, 4, 8], 1);
    assert_eq!(run_attention(&m, AttentionKind::Dense, &x).1, 256);
    assert_eq!(run_attention(&m, AttentionKind::Axial, &x).1, 192);
}

fn decoder_causality(kind: AttentionKind, h: usize, w: usize) {
    let mut m = GcrlModel::init(tiny_config(h, w, kind), 9).unwrap();
    sharpen(&mut m);
    let n = h * w;
    let k = m.config.vocab;
    let base = random_grid(h, w, k as u32, 12);
    let l0 = m.decoder_logits(&[&base]).unwrap();
    for tp in 0..n {
        let mut g = base.clone();
        g.tokens[tp] = (g.tokens[tp] + 1) % k as u32;
        let l = m.decoder_logits(&[&g]).unwrap();
        assert_eq!(&l.data()[..tp * k], &l0.data()[..tp * k], "perturbing {tp}");
        assert_ne!(&l.data()[tp * k..(tp + 1) * k], &l0.data()[tp * k..(tp + 1) * k]);
    }
}

#[test]
fn decoder_is_causal_axial() {
    decoder_causality(AttentionKind::Axial, 3, 3);
    decoder_causality(AttentionKind::Axial, 4, 4);
}

#[test]
fn decoder_is_causal_dense() {
    decoder_causality(AttentionKind::Dense, 3, 3);
    decoder_causality(AttentionKind::Dense, 4, 4);
}

#[test]
fn zero_head_gives_uniform_predictions() {
    let mut m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 10).unwrap();
    m.param_mut("out_head").unwrap().data_mut().fill(0.0);
    let g = random_grid(3, 3, 5, 1);
    let logits = m.decoder_logits(&[&g]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn predictive_distributions_normalize() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 11).unwrap();
    let g = random_grid(3, 3, 5, 2);
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(m.decoder_logits(&[&g]).unwrap());
    let p = tape.softmax(l, 2).unwrap();
    for row in tape.value(p).data().chunks(5) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn missing_decoder_is_an_error() {
    let mut cfg = tiny_config(2, 2, AttentionKind::Axial);
    cfg.n_dec_blocks = 0;
    let m = GcrlModel::init(cfg, 0).unwrap();
    assert!(m.decoder_logits(&[&random_grid(2, 2, 5, 0)]).is_err());
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let m = GcrlModel::init(tiny_config(2, 2, AttentionKind::Axial), 0).unwrap();
    let g = TokenGrid::new(2, 2, vec![0, 1, 5, 0]).unwrap();
    assert!(m.encode_representation(&[&g]).is_err());
}

#[test]
fn representations_are_per_sample_and_deterministic() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 12).unwrap();
    let grids: Vec<TokenGrid> = (0..4).map(|i| random_grid(3, 3, 5, 20 + i)).collect();
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    let r = m.encode_representation(&refs).unwrap();
    assert_eq!(r.shape(), &[4, 8]);
    let perm = [2usize, 0, 3, 1];
    let prefs: Vec<&TokenGrid> = perm.iter().map(|&i| &grids[i]).collect();
    let rp = m.encode_representation(&prefs).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(&rp.data()[row * 8..(row + 1) * 8], &r.data()[src * 8..(src + 1) * 8]);
    }
    let twice = m.encode_representation(&[&grids[0], &grids[0]]).unwrap();
    assert_eq!(&twice.data()[..8], &twice.data()[8..]);
}

#[test]
fn projections_are_unit_norm() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 13).unwrap();
    let rep = random_hidden(&[5, 8], 3);
    let z = m.project_eval(&rep).unwrap();
    assert_eq!(z.shape(), &[5, 4]);
    for row in z.data().chunks(4) {
        assert!((row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-6);
    }
    // zero representation with zero biases projects to the zero vector
    let z0 = m.project_eval(&Tensor::zeros(vec![1, 8])).unwrap();
    assert!(z0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wide_projection_head() {
    let cfg = ModelConfig {
        proj_hidden: 1024,
        proj_out: 64,
        ..tiny_config(2, 2, AttentionKind::Axial)
    };
    let m = GcrlModel::init(cfg, 0).unwrap();
    let z = m.project_eval(&random_hidden(&[2, 8], 1)).unwrap();
    assert_eq!(z.shape(), &[2, 64]);
}

#[test]
fn dropout_only_changes_train_mode() {
    let mut cfg = tiny_config(3, 3, AttentionKind::Axial);
    cfg.dropout = 0.1;
    let m = GcrlModel::init(cfg, 14).unwrap();
    let g = random_grid(3, 3, 5, 4);
    let eval = |m: &GcrlModel| m.decoder_logits(&[&g]).unwrap();
    assert_eq!(eval(&m), eval(&m));
    let mut rng = crate::rng::stream(0, crate::rng::Purpose::Dropout, 0, 0);
    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, &m, false);
    let l = m
        .decoder_logits_on_tape(&mut tape, &b, &[&g], &mut ForwardCtx::train(&mut rng))
        .unwrap();
    assert_ne!(tape.value(l), &eval(&m));
}

#[test]
fn whole_model_gradient_check() {
    let m = GcrlModel::init(tiny_config(2, 2, AttentionKind::Axial), 15).unwrap();
    let g = random_grid(2, 2, 5, 9);
    // Check gradients w.r.t. a few parameter tensors through the full decoder.
    for name in ["pos_row", "enc.0.attn.wq", "dec.0.mlp.w1", "dec_ln.gain"] {
        let p0 = m.param(name).unwrap().cast::<f64>();
        let report = crate::tensor::gradcheck::check(&[p0], 1e-3, 3, |tape, vars: &[Var]| {
            let b = Bound::new(tape, &m, false);
            let b = b.replace(name, vars[0]);
            m.decoder_logits_on_tape(tape, &b, &[&g], &mut ForwardCtx::eval())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {}", report.max_rel_error);
    }
}
