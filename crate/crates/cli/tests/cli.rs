use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcrl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"))
}

const SYNTH: &str = r#"{ "n_per_class": 4, "size": 8, "noise": 0.05, "seed": 1,
                         "families": ["horizontal_stripes", "vertical_stripes"] }"#;

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gcrl(dir.path(), &["--help"]).status.success());
    assert!(gcrl(dir.path(), &["--version"]).status.success());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["no-such-command"][..],
        &["train"],
        &["train", "--out", "x", "--set", "noequals"],
    ] {
        let out = gcrl(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"], "usage");
    }
}

#[test]
fn config_errors_exit_3_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["train", "--out", "t", "--set", "epochs=\"ten\""], "epochs"),
        (&["train", "--out", "t", "--set", "model.typo=1"], "model.typo"),
        (&["train", "--out", "t"], "codebook"),
        (&["eval-ece", "--out", "e", "--set", "checkpoint=x.gckp"], "predictions"),
    ];
    for (args, field) in cases {
        let out = gcrl(dir.path(), args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        let err = stderr_json(&out);
        assert_eq!(err["error"], "config");
        assert_eq!(err["field"], field, "{args:?}");
    }
    // a rejected config leaves no output directory behind
    assert!(!dir.path().join("t").exists());
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gcrl"))
        .args(["bench", "--out", "b"])
        .current_dir(dir.path())
        .env("GCRL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["field"], "GCRL_THREADS");
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gcrl(
        dir.path(),
        &[
            "build-codebook",
            "--out",
            "c",
            "--set",
            "dataset={\"kind\":\"raw_dump\",\"path\":\"nope.gimg\"}",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.json"), SYNTH).unwrap();
    for out in ["a", "b"] {
        assert!(gcrl(dir.path(), &["gen-synth", "--config", "s.json", "--out", out])
            .status
            .success());
    }
    let a = fs::read(dir.path().join("a/dataset.gimg")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/dataset.gimg")).unwrap());
    assert!(dir.path().join("a/run_info.json").exists());
}

#[test]
fn zero_epoch_training_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s.json"), SYNTH).unwrap();
    assert!(gcrl(d, &["gen-synth", "--config", "s.json", "--out", "s"])
        .status
        .success());
    let ds = r#"dataset={"kind":"raw_dump","path":"s/dataset.gimg"}"#;
    assert!(gcrl(d, &["build-codebook", "--out", "c", "--set", ds, "--set", "k=4"])
        .status
        .success());
    let out = gcrl(
        d,
        &[
            "train",
            "--out",
            "t",
            "--set",
            ds,
            "--set",
            "codebook=c/codebook.gcbk",
            "--set",
            "epochs=0",
            "--set",
            "model.height=8",
            "--set",
            "model.width=8",
            "--set",
            "model.vocab=4",
            "--set",
            "model.d_model=8",
            "--set",
            "model.n_heads=2",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(d.join("t/metrics.csv")).unwrap();
    assert_eq!(metrics, "step,epoch,phase,loss,gen_loss,con_loss,grad_norm,lr\n");
    let ck = gcrl_core::trainer::load_checkpoint(&d.join("t/final.gckp")).unwrap();
    assert_eq!((ck.epoch, ck.step), (0, 0));
}

#[test]
fn eval_ece_matches_hand_computed_value() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "sample_id,label,predicted,confidence,correct\n\
               0,0,0,0.15,1\n1,1,0,0.18,0\n2,0,1,0.12,0\n3,1,1,0.85,1\n4,0,0,0.9,1\n5,1,0,0.88,0\n";
    fs::write(dir.path().join("p.csv"), csv).unwrap();
    let out = gcrl(
        dir.path(),
        &[
            "eval-ece",
            "--out",
            "e",
            "--set",
            "predictions=p.csv",
            "--set",
            "checkpoint=unused",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("e/ece.json")).unwrap()).unwrap();
    let expect = 0.5 * (1.0 / 3.0 - 0.15) + 0.5 * (2.63 / 3.0 - 2.0 / 3.0);
    assert!((summary["ece"].as_f64().unwrap() - expect).abs() < 1e-12);
    let bins = fs::read_to_string(dir.path().join("e/reliability.csv")).unwrap();
    assert_eq!(bins.lines().count(), 11);
}

#[test]
fn bench_reports_closed_form_score_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = gcrl(
        dir.path(),
        &[
            "bench",
            "--out",
            "b",
            "--set",
            "repetitions=2",
            "--set",
            "batch_size=1",
            "--set",
            "model.height=4",
            "--set",
            "model.width=4",
            "--set",
            "model.n_heads=1",
            "--set",
            "model.n_enc_blocks=1",
            "--set",
            "model.n_dec_blocks=1",
            "--set",
            "model.d_model=8",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "dense");
    assert_eq!(rows[0][2], "256");
    assert_eq!(rows[1][0], "axial");
    assert_eq!(rows[1][2], "192");
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |p: &Path| fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    let mut train_configs = vec![
        root.join("desk.json"),
        root.join("overfit.json"),
        root.join("smoke/train.json"),
    ];
    for e in fs::read_dir(root.join("presets")).unwrap() {
        train_configs.push(e.unwrap().path());
    }
    for p in &train_configs {
        let cfg: gcrl_core::trainer::TrainConfig =
            serde_json::from_str(&read(p)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    let synth: gcrl_core::data::SyntheticParams = serde_json::from_str(&read(&root.join("synthetic.json"))).unwrap();
    assert_eq!(synth.families.len(), 4);
}
