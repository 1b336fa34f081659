use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const MICRO: &str = r#"{
  "profile": "tiny",
  "model": {
    "fusion_dim": 16,
    "vit": {"embed_dim": 16, "heads": 2, "mlp_dim": 32},
    "cnn": {"channels": [4, 4, 4], "in_channels": 2},
    "clinical": {"hidden": [8]},
    "head": {"hidden": [8]}
  },
  "train": {"max_epochs": 2, "patience": 1, "val_fraction": 0.2}
}"#;

fn hcvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcvt"))
        .args(args)
        .env("HCVT_THREADS", "1")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    run: PathBuf,
    train_stdout: String,
}

/// A 20-patient tiny dataset and one 2-fold run, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let data = root.join("data");
        let o = hcvt(&["synth", "--n", "20", "--seed", "3", "--tiny", "--out", s(&data)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let config = root.join("micro.json");
        fs::write(&config, MICRO).unwrap();
        let run = root.join("runs/full");
        let o = hcvt(&[
            "train", "--data", s(&data), "--config", s(&config), "--folds", "2", "--seed", "1",
            "--out", s(&run),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture {
            root,
            data,
            config,
            run,
            train_stdout: stdout(&o),
        }
    })
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--n", "--prevalence", "--seed", "--out", "--tiny", "--force"]),
        ("train", &["--data", "--config", "--variant", "--folds", "--seed", "--out"]),
        ("eval", &["--ckpt", "--data", "--split-file"]),
        ("ablate", &["--variants", "--folds"]),
        ("compare", &["--run", "--baseline"]),
        ("cam", &["--ckpt", "--patient", "--sequence", "--slice", "--method", "--out"]),
    ];
    for (cmd, flags) in cases {
        let o = hcvt(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = hcvt(&["synth", "--n", "10", "--out", s(&out), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn synth_counts_and_refuses_to_overwrite() {
    let f = fixture();
    let dirs = fs::read_dir(&f.data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 20);
    assert_eq!(read_json(&f.data.join("manifest.json"))["n_patients"], 20);
    let o = hcvt(&["synth", "--n", "20", "--seed", "3", "--tiny", "--out", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = hcvt(&["synth", "--n", "100", "--prevalence", "0.62", "--tiny", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("62 positive"));
    assert_eq!(read_json(&out.join("manifest.json"))["class_counts"]["positive"], 62);
}

#[test]
fn train_writes_run_directory_and_summary() {
    let f = fixture();
    let report = read_json(&f.run.join("report.json"));
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 2);
    assert_eq!(report["variant"], "full");
    assert_eq!(report["monitor"], "val_loss");
    for i in 0..2 {
        for name in ["ckpt", "history.csv", "split.json"] {
            assert!(f.run.join(format!("fold{i}/{name}")).exists(), "fold{i}/{name}");
        }
    }
    let config = read_json(&f.run.join("config.json"));
    assert_eq!(config["model"]["fusion_dim"], 16);
    assert_eq!(config["train"]["seed"], 1);
    let auc_mean = report["summary"]["auc_mean"].as_f64().unwrap();
    let line = f.train_stdout.trim();
    assert_eq!(line.lines().count(), 1);
    assert!(line.starts_with(&format!("AUC {auc_mean:.1} ±")), "{line}");
}

#[test]
fn same_seed_reproduces_the_report() {
    let f = fixture();
    let again = f.root.join("runs/again");
    let o = hcvt(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--folds", "2", "--seed", "1",
        "--out", s(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (a, b) = (read_json(&f.run.join("report.json")), read_json(&again.join("report.json")));
    assert_eq!(a["per_fold"], b["per_fold"]);
    assert_eq!(a["summary"], b["summary"]);
    assert_eq!(o.stdout, f.train_stdout.as_bytes());
}

#[test]
fn existing_run_needs_force() {
    let f = fixture();
    let o = hcvt(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--folds", "2", "--out", s(&f.run),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
}

#[test]
fn invalid_variant_lists_valid_names() {
    let f = fixture();
    let o = hcvt(&["train", "--data", s(&f.data), "--variant", "no_such", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["full", "no_local_gam", "no_global_gam", "no_gam", "single_branch", "mri_only"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!Path::new("x").exists());
}

#[test]
fn bad_config_key_is_rejected() {
    let f = fixture();
    let cfg = f.root.join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 3}}"#).unwrap();
    let o = hcvt(&["train", "--data", s(&f.data), "--config", s(&cfg), "--out", s(&f.root.join("bad"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"));
}

#[test]
fn eval_reproduces_reported_fold_metrics() {
    let f = fixture();
    let report = read_json(&f.run.join("report.json"));
    for i in 0..2 {
        let fold = &report["per_fold"][i];
        let json = f.root.join(format!("eval{i}.json"));
        let o = hcvt(&[
            "eval", "--ckpt", s(&f.run.join(format!("fold{i}/ckpt"))), "--data", s(&f.data),
            "--json", s(&json),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert_eq!(out.lines().count(), 1);
        let auc: f64 = out.split("auc=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert_eq!(Some(auc), fold["auc"].as_f64(), "{out}");
        let e = read_json(&json);
        assert_eq!(e["metrics"]["precision"], fold["precision"]);
        assert_eq!(e["metrics"]["recall"], fold["recall"]);
        assert_eq!(e["confusion"], fold["confusion"]);
    }
}

#[test]
fn compare_with_itself_gives_p_one() {
    let f = fixture();
    let o = hcvt(&["compare", "--run", s(&f.run), "--baseline", s(&f.run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("paired-t p = 1 "), "{}", stdout(&o));
}

#[test]
fn compare_rejects_different_fold_plans() {
    let f = fixture();
    let other = f.root.join("runs/seed2");
    let o = hcvt(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--folds", "2", "--seed", "2",
        "--out", s(&other),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = hcvt(&["compare", "--run", s(&other), "--baseline", s(&f.run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fold plans"));
}

#[test]
fn cam_both_writes_two_maps() {
    let f = fixture();
    let out = f.root.join("cam");
    let o = hcvt(&[
        "cam", "--ckpt", s(&f.run.join("fold0/ckpt")), "--data", s(&f.data), "--patient", "P0001",
        "--sequence", "adc", "--slice", "6", "--method", "both", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let hash = read_json(&f.run.join("report.json"))["per_fold"][0]["checkpoint_hash"].clone();
    for source in ["cnn_layer3", "vit_block2"] {
        let stem = out.join(format!("P0001_adc_slice6_{source}"));
        assert!(stem.with_extension("png").exists());
        let side = read_json(&stem.with_extension("json"));
        assert_eq!(side["source"], source);
        assert_eq!(side["slice_index"], 6);
        assert_eq!(side["checkpoint_hash"], hash);
    }
    let o = hcvt(&[
        "cam", "--ckpt", s(&f.run.join("fold0/ckpt")), "--data", s(&f.data), "--patient", "P0001",
        "--sequence", "adc", "--slice", "8", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_fold_id() {
    let f = fixture();
    let out = f.root.join("runs/diverge");
    let o = hcvt(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--folds", "2", "--lr", "1e38",
        "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("fold 0 failed") && err.contains("training diverged"), "{err}");
    assert!(out.join("report.json").exists());
}

#[test]
fn ablate_compares_every_variant_to_full() {
    let f = fixture();
    let out = f.root.join("ablate");
    let o = hcvt(&[
        "ablate", "--data", s(&f.data), "--config", s(&f.config), "--folds", "2", "--variants",
        "no_gam,mri_only", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    let plan = read_json(&out.join("full/report.json"))["fold_plan_hash"].clone();
    for v in ["no_gam", "mri_only"] {
        let r = read_json(&out.join(format!("{v}/report.json")));
        assert_eq!(r["fold_plan_hash"], plan);
        assert_eq!(r["comparisons"][0]["baseline_run"], "full");
        assert_eq!(r["comparisons"][0]["test"], "paired-t");
    }
}
