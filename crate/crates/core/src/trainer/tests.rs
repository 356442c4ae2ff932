use super::*;
use crate::data::{synthetic, SyntheticParams};
use crate::model::AttentionKind;
use crate::quantizer::{build_codebook, sample_pixels};
use crate::tensor::LrSchedule;

fn setup(n_per_class: usize, size: usize, mode: TrainMode) -> (TrainConfig, Dataset, Codebook) {
    let ds = synthetic(&SyntheticParams {
        n_per_class,
        size,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cb = build_codebook(&sample_pixels(&ds.images, 4096, 1), 5, 20, 1).unwrap();
    let mut model = crate::model::tests::tiny_config(size, size, AttentionKind::Axial);
    model.n_classes = 2;
    let cfg = TrainConfig {
        mode,
        model,
        epochs: 4,
        batch_size: 4,
        schedule: ScheduleConfig {
            peak_rate: 3e-3,
            phase2_peak_rate: None,
            warmup_epochs: 1,
        },
        weak_aug: AugPolicy {
            pad: 1,
            ..AugPolicy::weak()
        },
        ..Default::default()
    };
    (cfg, ds, cb)
}

fn run(cfg: &TrainConfig, ds: &Dataset, cb: &Codebook) -> TrainOutcome {
    run_training(cfg, ds, cb, RunOptions::default()).unwrap()
}

#[test]
fn no_augmentation_gives_raw_tokens() {
    let (mut cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    cfg.weak_aug = AugPolicy::none();
    cfg.strong_aug = AugPolicy::none();
    let b = make_batch(&ds, &cb, &[0, 3], 5, &cfg).unwrap();
    for (k, &i) in [0usize, 3].iter().enumerate() {
        let raw = cb.encode(&ds.images[i]).unwrap();
        assert_eq!(b.weak_tokens[k], raw);
        assert_eq!(b.strong_tokens[k], raw);
    }
    assert_eq!(
        b.labels,
        Some(vec![ds.labels.as_ref().unwrap()[0], ds.labels.as_ref().unwrap()[3]])
    );
}

#[test]
fn batches_are_keyed_by_seed_epoch_index() {
    let (cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    let a = make_batch(&ds, &cb, &[1, 2], 7, &cfg).unwrap();
    assert_eq!(a, make_batch(&ds, &cb, &[1, 2], 7, &cfg).unwrap());
    // the stream of a sample does not depend on its batch neighbours
    let single = make_batch(&ds, &cb, &[2], 7, &cfg).unwrap();
    assert_eq!(single.strong_tokens[0], a.strong_tokens[1]);
    assert!(make_batch(&ds, &cb, &[99], 0, &cfg).is_err());
}

#[test]
fn strong_view_differs_from_weak_view() {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..16 * 16 * 3).map(|_| r.gen()).collect();
    let textured = Image::new(16, 16, data).unwrap();
    let ds = Dataset::new(vec![textured], None).unwrap();
    let cb = build_codebook(&sample_pixels(&ds.images, 4096, 0), 16, 20, 0).unwrap();
    let cfg = TrainConfig::default();
    let differ = (0..100)
        .filter(|&e| {
            let b = make_batch(&ds, &cb, &[0], e, &cfg).unwrap();
            b.weak_tokens[0] != b.strong_tokens[0]
        })
        .count();
    assert!(differ >= 99, "{differ}");
}

use crate::image::Image;

#[test]
fn zero_epochs_returns_initial_state() {
    let (mut cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    cfg.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(
        &cfg,
        &ds,
        &cb,
        RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.log.is_empty());
    assert_eq!(
        out.checkpoint.model,
        GcrlModel::init(cfg.model.clone(), cfg.seed).unwrap()
    );
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    assert_eq!(load_checkpoint(&dir.path().join("final.gckp")).unwrap(), out.checkpoint);
}

#[test]
fn contrastive_term_starts_at_phase_boundary() {
    let (mut cfg, ds, cb) = setup(4, 4, TrainMode::Gcrl);
    cfg.epochs = 3;
    assert_eq!(cfg.phase1_epochs(), 2);
    let out = run(&cfg, &ds, &cb);
    for m in &out.log {
        assert_eq!(m.con_loss.is_some(), m.epoch >= 2, "{m:?}");
        assert_eq!(m.phase, if m.epoch >= 2 { 2 } else { 1 });
        assert!(m.gen_loss.is_some());
        assert!(m.grad_norm <= cfg.grad_clip + 1e-6);
    }
    let rows = metrics_csv(&out.log);
    let first_con = rows
        .lines()
        .skip(1)
        .position(|l| !l.split(',').nth(5).unwrap().is_empty())
        .unwrap();
    assert_eq!(out.log[first_con].epoch, 2);
}

#[test]
fn projection_head_frozen_during_phase_one() {
    let (mut cfg, ds, cb) = setup(4, 4, TrainMode::Gcrl);
    cfg.epochs = 4;
    let init = GcrlModel::init(cfg.model.clone(), cfg.seed).unwrap();
    let out = run_training(
        &cfg,
        &ds,
        &cb,
        RunOptions {
            stop_after_epoch: Some(cfg.phase1_epochs()),
            ..Default::default()
        },
    )
    .unwrap();
    let after = &out.checkpoint.model;
    for (name, p) in &init.params {
        let same = after.params[name] == *p;
        if name.starts_with("proj.") || name.starts_with("cls.") {
            assert!(same, "{name} changed in phase 1");
        } else if name == "tok_emb" || name.starts_with("enc.") {
            assert!(!same, "{name} did not train");
        }
    }
    // and the head does move once phase 2 starts
    let full = run(&cfg, &ds, &cb);
    assert_ne!(full.checkpoint.model.params["proj.w2"], init.params["proj.w2"]);
}

#[test]
fn contrastive_only_leaves_decoder_untouched() {
    let (cfg, ds, cb) = setup(4, 4, TrainMode::ContrastiveOnly);
    let init = GcrlModel::init(cfg.model.clone(), cfg.seed).unwrap();
    let out = run(&cfg, &ds, &cb);
    for (name, p) in &init.params {
        let frozen = name.starts_with("dec") || name == "out_head" || name.starts_with("cls.");
        assert_eq!(out.checkpoint.model.params[name] == *p, frozen, "{name}");
    }
    assert!(out.log.iter().all(|m| m.gen_loss.is_none() && m.con_loss.is_some()));
}

#[test]
fn supervised_modes_train_the_class_head() {
    for mode in [TrainMode::SupervisedHybrid, TrainMode::SupervisedContrastiveReplaced] {
        let (cfg, ds, cb) = setup(4, 4, mode);
        let init = GcrlModel::init(cfg.model.clone(), cfg.seed).unwrap();
        let out = run(&cfg, &ds, &cb);
        assert_ne!(out.checkpoint.model.params["cls.w"], init.params["cls.w"]);
        assert_eq!(out.checkpoint.model.params["proj.w1"], init.params["proj.w1"]);
        let gen_present = out.log.iter().all(|m| m.gen_loss.is_some());
        assert_eq!(gen_present, mode == TrainMode::SupervisedHybrid);
    }
    let (mut cfg, _, _) = setup(1, 4, TrainMode::SupervisedHybrid);
    cfg.model.n_classes = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "model.n_classes"));
}

#[test]
fn lr_trace_follows_two_phase_schedule() {
    let (mut cfg, ds, cb) = setup(4, 4, TrainMode::Gcrl);
    cfg.epochs = 4;
    cfg.schedule.phase2_peak_rate = Some(1e-3);
    let out = run(&cfg, &ds, &cb);
    let spe = (ds.len() / cfg.batch_size) as u32;
    let p1 = LrSchedule {
        peak_rate: 3e-3,
        warmup_epochs: 1,
        total_epochs: 2,
        steps_per_epoch: spe,
    };
    let p2 = LrSchedule { peak_rate: 1e-3, ..p1 };
    for m in &out.log {
        let expect = if m.epoch < 2 {
            lr_at(m.step, &p1).unwrap()
        } else {
            lr_at(m.step - 2 * spe as u64, &p2).unwrap()
        };
        assert_eq!(m.lr, expect);
    }
    let peak2 = out
        .log
        .iter()
        .filter(|m| m.epoch >= 2)
        .map(|m| m.lr)
        .fold(0.0, f64::max);
    assert_eq!(peak2, 1e-3);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (mut cfg, ds, cb) = setup(4, 4, TrainMode::Gcrl);
    cfg.epochs = 4;
    cfg.model.dropout = 0.1;
    let full = run(&cfg, &ds, &cb);
    let dir = tempfile::tempdir().unwrap();
    let opts = |resume| RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume,
        stop_after_epoch: None,
    };
    let half = run_training(
        &cfg,
        &ds,
        &cb,
        RunOptions {
            stop_after_epoch: Some(3),
            ..opts(None)
        },
    )
    .unwrap();
    let saved = load_checkpoint(&dir.path().join("final.gckp")).unwrap();
    assert_eq!(saved, half.checkpoint);
    let rest = run_training(&cfg, &ds, &cb, opts(Some(saved))).unwrap();
    assert_eq!(rest.checkpoint.model, full.checkpoint.model);
    assert_eq!(rest.checkpoint.optim, full.checkpoint.optim);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&full.log));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    let out = run(&cfg, &ds, &cb);
    let bytes = out.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

fn header_span(bytes: &[u8]) -> (usize, usize) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    (16, 16 + len)
}

fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let (a, b) = header_span(bytes);
    let mut v: serde_json::Value = serde_json::from_slice(&bytes[a..b]).unwrap();
    edit(&mut v);
    let json = serde_json::to_vec(&v).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[b..]);
    out
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let (cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    let bytes = run(&cfg, &ds, &cb).checkpoint.to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[4] = 9;
    let e = Checkpoint::from_bytes(&bad, "x").unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, "x")
        .unwrap_err()
        .to_string()
        .contains("magic"));

    let shape = rewrite_header(&bytes, |v| {
        v["tensors"][3]["shape"] = serde_json::json!([7]);
    });
    let e = Checkpoint::from_bytes(&shape, "x").unwrap_err().to_string();
    let name = {
        let (a, b) = header_span(&bytes);
        let v: serde_json::Value = serde_json::from_slice(&bytes[a..b]).unwrap();
        v["tensors"][3]["name"].as_str().unwrap().to_string()
    };
    assert!(e.contains(&format!("`{name}`")), "{e}");

    let truncated = &bytes[..bytes.len() - 4];
    let e = Checkpoint::from_bytes(truncated, "x").unwrap_err().to_string();
    assert!(e.contains("truncated") && e.contains("optim.v."), "{e}");

    let cross = rewrite_header(&bytes, |v| {
        v["config"]["model"]["d_model"] = serde_json::json!(16);
    });
    assert!(Checkpoint::from_bytes(&cross, "x").is_err());
}

#[test]
fn resume_with_other_model_config_is_a_config_error() {
    let (cfg, ds, cb) = setup(2, 4, TrainMode::Gcrl);
    let ck = run(&cfg, &ds, &cb).checkpoint;
    let mut other = cfg.clone();
    other.model.d_model = 12;
    other.model.proj_hidden = 6;
    let err = run_training(
        &other,
        &ds,
        &cb,
        RunOptions {
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Config { ref field, .. } if field == "model.d_model"),
        "{err}"
    );
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).unwrap_err();
    assert!(err.to_string().contains("epochz"));
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "mode": "generative_only"}"#).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.grad_clip, 1.0);
    assert_eq!(cfg.weight_decay, 1e-4);
    assert_eq!(cfg.phase1_fraction, 0.5);
    for (cfg, field) in [
        (
            TrainConfig {
                batch_size: 0,
                ..cfg.clone()
            },
            "batch_size",
        ),
        (
            TrainConfig {
                phase1_fraction: 1.5,
                ..cfg.clone()
            },
            "phase1_fraction",
        ),
        (
            TrainConfig {
                grad_clip: 0.0,
                ..cfg.clone()
            },
            "grad_clip",
        ),
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config { field: f, .. }) if f == field));
    }
}

#[test]
fn overfit_smoke_halves_generative_loss() {
    let (mut cfg, ds, cb) = setup(16, 4, TrainMode::GenerativeOnly);
    assert_eq!(ds.len(), 32);
    cfg.epochs = 25;
    cfg.batch_size = 4;
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.peak_rate = 1e-2;
    cfg.weak_aug = AugPolicy::none();
    let out = run(&cfg, &ds, &cb);
    assert_eq!(out.log.len(), 200);
    let first = out.log[0].gen_loss.unwrap();
    let last = out.log.iter().rev().take(8).map(|m| m.gen_loss.unwrap()).sum::<f64>() / 8.0;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
