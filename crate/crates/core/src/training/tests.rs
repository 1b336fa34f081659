use super::*;
use crate::dataio::{generate_synthetic, kfold_split, SynthOptions};
use crate::model::{ClinicalConfig, CnnConfig, HeadConfig, ModelConfig, Variant, VitConfig};

fn micro() -> ModelConfig {
    ModelConfig {
        fusion_dim: 16,
        vit: VitConfig {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_dim: 32,
            ..VitConfig::default()
        },
        cnn: CnnConfig {
            channels: vec![4, 4, 4],
            in_channels: 2,
            ..CnnConfig::default()
        },
        clinical: ClinicalConfig { hidden: vec![8] },
        head: HeadConfig {
            hidden: vec![8],
            dropout: 0.1,
        },
        input: InputConfig { depth: 2, size: 64 },
        ..ModelConfig::default()
    }
}

fn labeled(cfg: &ModelConfig, prefix: &str, n: usize, seed: u64) -> Vec<Labeled> {
    (0..n)
        .map(|i| Labeled {
            sample: Sample::random(cfg, &format!("{prefix}{i}"), seed + i as u64),
            label: (i % 2) as u8,
        })
        .collect()
}

fn fold_data(cfg: &ModelConfig) -> FoldData {
    FoldData {
        train: labeled(cfg, "tr", 6, 0),
        val: labeled(cfg, "va", 4, 100),
        test: labeled(cfg, "te", 4, 200),
    }
}

fn quick(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs,
        patience,
        ..TrainConfig::default()
    }
}

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let want = -(0.3 * 0.8f64.ln() + 0.7 * 0.2f64.ln());
    assert!((bce_loss(&[0.8], &[0.3]).unwrap() - want).abs() < 1e-12);
    assert!((want - 1.193_549).abs() < 1e-5);
    // clamped, so finite
    let edge = bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
    assert!((edge - -(BCE_EPS.ln())).abs() < 1e-6);
    assert!(bce_loss(&[], &[]).is_err());
    assert!(bce_loss(&[0.5], &[1.5]).is_err());
    assert!(bce_loss(&[0.5, 0.5], &[1.0]).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::tiny().validate().is_ok());
    assert_eq!(TrainConfig::default().monitor, Monitor::ValAuc);
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { patience: 400, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { mixup_alpha: -1.0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 0.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(HcvtError::Config(_))), "{bad:?}");
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "lr_decay": 2}"#).unwrap_err();
    assert!(err.to_string().contains("lr_decay"));
    let m: Monitor = serde_json::from_str("\"val_loss\"").unwrap();
    assert_eq!(m, Monitor::ValLoss);
}

#[test]
fn adam_moves_every_parameter_with_a_gradient() {
    let cfg = micro();
    let model = Model::<f32>::init(cfg.clone(), 3).unwrap();
    let batch: Vec<(Sample, f64)> = labeled(&cfg, "p", 2, 0)
        .into_iter()
        .map(|l| (l.sample, l.label as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, grads) = batch_step(&model, &batch, &mut rng).unwrap();
    let mut params = model.params().clone();
    let mut adam = Adam::new(&TrainConfig::default(), params.len());
    adam.step(&mut params, &grads);
    for (id, name, after) in params.iter() {
        let before = model.params().get(id);
        match &grads[id.index()] {
            Some(g) if g.iter().any(|&v| v != 0.0) => assert_ne!(before, after, "{name}"),
            Some(_) => {}
            None => assert_eq!(before, after, "{name}"),
        }
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut params = ParamStore::<f64>::new();
    let id = params.insert("w", Array2::zeros((1, 3))).unwrap();
    let g = Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 0.0]).unwrap();
    let cfg = TrainConfig { lr: 0.1, eps: 1e-12, ..TrainConfig::default() };
    let mut adam = Adam::new(&cfg, 1);
    adam.step(&mut params, &[Some(g)]);
    let w = params.get(id);
    assert!((w[[0, 0]] + 0.1).abs() < 1e-9);
    assert!((w[[0, 1]] - 0.1).abs() < 1e-9);
    assert_eq!(w[[0, 2]], 0.0);
}

#[test]
fn early_stopping_counts_patience_from_best_epoch() {
    let cfg = micro();
    let data = fold_data(&cfg);
    // a vanishing step keeps every epoch's validation loss identical, so
    // epoch 1 stays best under the strict loss monitor
    let tc = TrainConfig {
        lr: 1e-30,
        monitor: Monitor::ValLoss,
        ..quick(12, 3)
    };
    let r = train_fold(Model::init(cfg.clone(), 1).unwrap(), &data, &tc, 0, None).unwrap();
    assert_eq!(r.best_epoch, 1);
    assert_eq!(r.epochs_run, 4);
    assert_eq!(r.history.len(), 4);
    assert_eq!(r.epochs_run - r.best_epoch, tc.patience);

    let tc = quick(6, 5);
    let r = train_fold(Model::init(cfg, 1).unwrap(), &data, &tc, 0, None).unwrap();
    let max_auc = r.history.iter().map(|h| h.val_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_auc, max_auc);
    assert_eq!(r.history[r.best_epoch - 1].val_auc, max_auc);
    assert!(r.epochs_run == tc.max_epochs || r.epochs_run - r.best_epoch == tc.patience);
}

#[test]
fn restores_best_parameters_and_writes_artifacts() {
    let cfg = micro();
    let data = fold_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = train_fold(Model::init(cfg, 2).unwrap(), &data, &quick(3, 2), 0, Some(dir.path())).unwrap();
    let again = evaluate(&r.model, &data.val).unwrap();
    assert_eq!(again.loss, r.best_val_loss);
    assert_eq!(evaluate(&r.model, &data.test).unwrap(), r.test);
    let hist = read_history(&dir.path().join("history.csv")).unwrap();
    assert_eq!(hist, r.history);
    assert!(r.checkpoint.unwrap().exists());
    assert_eq!(r.checkpoint_hash.unwrap().len(), 64);
}

#[test]
fn same_seed_gives_same_first_epoch() {
    let cfg = micro();
    let data = fold_data(&cfg);
    let run = |seed: u64| {
        let tc = TrainConfig { seed, ..quick(1, 0) };
        train_fold(Model::init(cfg.clone(), 5).unwrap(), &data, &tc, 0, None)
            .unwrap()
            .history[0]
            .clone()
    };
    assert_eq!(run(0), run(0));
    assert_ne!(run(0).train_loss, run(1).train_loss);
}

#[test]
fn leakage_and_empty_splits_are_rejected() {
    let cfg = micro();
    let mut data = fold_data(&cfg);
    data.test.push(data.train[0].clone());
    let err = train_fold(Model::init(cfg.clone(), 1).unwrap(), &data, &quick(2, 1), 0, None);
    assert!(matches!(err, Err(HcvtError::Contract(m)) if m.contains("tr0")));
    let mut data = fold_data(&cfg);
    data.val.push(data.test[1].clone());
    assert!(data.check().is_err());
    let mut data = fold_data(&cfg);
    data.val.clear();
    assert!(matches!(data.check(), Err(HcvtError::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let cfg = micro();
    let mut model = Model::<f32>::init(cfg.clone(), 1).unwrap();
    let name = model
        .params()
        .names()
        .filter(|n| n.starts_with("head.") && n.ends_with(".bias"))
        .last()
        .unwrap()
        .to_string();
    model.params_mut().by_name_mut(&name).unwrap().fill(f32::NAN);
    let err = train_fold(model, &fold_data(&cfg), &quick(2, 1), 0, None).unwrap_err();
    assert!(matches!(err, HcvtError::Diverged(m) if m.contains("epoch 1")));
}

#[test]
fn validation_carve_out_is_stratified_and_disjoint() {
    let ids: Vec<(String, u8)> = (0..40).map(|i| (format!("P{i:02}"), (i < 25) as u8)).collect();
    let (train, val) = carve_validation(&ids, 0.2, 3, 0);
    assert_eq!(train.len() + val.len(), 40);
    assert!(train.iter().all(|t| !val.contains(t)));
    let pos = |s: &[String]| s.iter().filter(|id| id[1..].parse::<usize>().unwrap() < 25).count();
    assert_eq!(pos(&val), 5);
    assert_eq!(val.len(), 8);
    assert_eq!(carve_validation(&ids, 0.2, 3, 0), (train.clone(), val.clone()));
    assert_ne!(carve_validation(&ids, 0.2, 3, 1).1, val);
    // every class contributes at least one
    let few: Vec<(String, u8)> = (0..6).map(|i| (format!("Q{i}"), (i == 0 || i == 1) as u8)).collect();
    let (_, v) = carve_validation(&few, 0.1, 0, 0);
    assert_eq!(v.len(), 2);
}

#[test]
fn cross_validation_report_and_comparison() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    generate_synthetic(&SynthOptions::new(16, 4).tiny(), &data_dir).unwrap();
    let cfg = micro();
    let cohort = Cohort::prepare(Dataset::open(&data_dir).unwrap(), &cfg.input).unwrap();
    let tc = TrainConfig {
        val_fraction: 0.2,
        ..quick(2, 1)
    };
    let a = root.path().join("full");
    let report = run_cv(&cohort, &cfg, &tc, 2, Some(&a)).unwrap();
    assert_eq!(report.per_fold.len(), 2);
    assert!(report.failed_folds().is_empty());
    let aucs = report.fold_aucs().unwrap();
    let s = report.summary.as_ref().unwrap();
    assert!((s.auc_mean - 100.0 * (aucs[0] + aucs[1]) / 2.0).abs() < 1e-9);
    assert_eq!(load_report(&a).unwrap(), report);
    for f in &report.per_fold {
        let split = FoldSplit::load(&a.join(format!("fold{}/split.json", f.fold))).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (f.n_train, f.n_val, f.n_test));
        assert_eq!(f.n_train + f.n_val + f.n_test, 16);
        assert!(a.join(format!("fold{}/ckpt", f.fold)).exists());
    }

    let b = root.path().join("no_gam");
    let other = run_cv(&cohort, &cfg.clone().with_variant(Variant::NoGam), &tc, 2, Some(&b)).unwrap();
    assert_eq!(other.fold_plan_hash, report.fold_plan_hash);
    let (_, _, cmp) = compare_runs(&a, &b).unwrap();
    assert_eq!(cmp.baseline_run, "no_gam");
    assert_eq!(cmp.test, "paired-t");
    assert!((0.0..=1.0).contains(&cmp.p_value));
    let (_, _, same) = compare_runs(&a, &a).unwrap();
    assert_eq!(same.p_value, 1.0);

    let c = root.path().join("reseeded");
    run_cv(&cohort, &cfg, &TrainConfig { seed: 9, ..tc.clone() }, 2, Some(&c)).unwrap();
    assert!(matches!(compare_runs(&a, &c), Err(HcvtError::Validation(_))));
}

#[test]
fn failing_folds_are_recorded_individually() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    generate_synthetic(&SynthOptions::new(12, 5).tiny(), &data_dir).unwrap();
    let cfg = micro();
    let mut cohort = Cohort::prepare(Dataset::open(&data_dir).unwrap(), &cfg.input).unwrap();
    let tc = TrainConfig { val_fraction: 0.2, ..quick(2, 1) };
    // a NaN patient that fold 1 trains on and fold 0 tests on
    let plan = kfold_split(&cohort.dataset.manifest, 2, tc.seed).unwrap();
    let labels = cohort.dataset.manifest.labels();
    let (train1, _) = plan.split(1);
    let tagged: Vec<(String, u8)> = train1.iter().map(|id| (id.clone(), labels[id])).collect();
    let (fit1, _) = carve_validation(&tagged, tc.val_fraction, tc.seed, 1);
    let bad = fit1[0].clone();
    assert!(plan.folds[0].contains(&bad));
    for v in cohort.volumes.get_mut(&bad).unwrap() {
        v.voxels.fill(f32::NAN);
    }
    let report = run_cv(&cohort, &cfg, &tc, 2, None).unwrap();
    assert_eq!(report.per_fold.len(), 2);
    assert!(report.summary.is_none());
    let err = |i: usize| report.per_fold[i].error.clone().unwrap();
    assert!(err(0).contains(&format!("non-finite prediction for patient {bad}")), "{}", err(0));
    assert!(err(1).contains("non-finite loss"), "{}", err(1));
}
