use super::*;
use crate::data::{generate, SynthConfig};
use crate::vit::{load_checkpoint, ViTConfig};

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ..ViTConfig::default()
    }
}

fn tiny(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        vit: tiny_vit(),
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> Dataset {
    generate(&SynthConfig {
        num_samples: n,
        seed: 17,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        batch_size: 4,
        ..tiny(1, 3)
    };
    let ds = data(4);
    let out = train(&cfg, &ds, None).unwrap();
    assert_eq!(out.epochs[0].steps, 1);
    assert_eq!(out.params, ViTParams::init(cfg.vit, 3).unwrap());
}

#[test]
fn loss_decreases_on_a_small_set() {
    let ds = data(50);
    for seed in 0..3 {
        let out = train(&tiny(20, seed), &ds, None).unwrap();
        let first = out.epochs.first().unwrap().total;
        let last = out.epochs.last().unwrap().total;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn runs_are_reproducible() {
    let ds = data(12);
    let cfg = TrainConfig { holdout: 4, ..tiny(2, 5) };
    let a = train(&cfg, &ds, None).unwrap();
    let b = train(&cfg, &ds, None).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.params, b.params);
    assert!(a.epochs.iter().all(|e| e.heldout_miou.is_some()));
    let c = train(&TrainConfig { seed: 6, ..cfg }, &ds, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn baseline_still_reports_consistency_terms() {
    let ds = data(6);
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        augmentations: vec![SpatialTransform::FlipH],
        ..tiny(1, 0)
    };
    let out = train(&cfg, &ds, None).unwrap();
    let e = &out.epochs[0];
    assert!(e.l_act > 0.0 && e.l_aff > 0.0);
    assert_eq!(e.total, e.l_cls);
}

#[test]
fn output_directory_contents() {
    let ds = data(6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(2, 1);
    let out = train(&cfg, &ds, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let records: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.epochs);
    let back = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(back, out.params);
    let saved = TrainConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let ds = data(3);
    let cfg = tiny(1, 0);
    let mut params = ViTParams::init(cfg.vit, 0).unwrap();
    params.get_mut("head.bias").unwrap().data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train_from(params, &cfg, &ds, Some(dir.path())).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    let dump = std::fs::read_to_string(dir.path().join(NAN_DUMP_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert_eq!(v["non_finite_parameters"][0], "head.bias");
    assert!(v["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = TrainConfig {
        loss_layers: Some("1..2".parse().unwrap()),
        distance: crate::regularizer::Distance::SmoothL1,
        augmentations: vec![SpatialTransform::Rot90, "resize:6x6".parse().unwrap()],
        ..tiny(3, 9)
    };
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    let partial = TrainConfig::from_toml("epochs = 4\nalpha = 0.0\n").unwrap();
    assert_eq!(partial.epochs, 4);
    assert_eq!(partial.beta, TrainConfig::default().beta);
    assert!(TrainConfig::from_toml("epochs = 0").is_err());
    assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
    assert!(TrainConfig::from_toml("augmentations = []").is_err());
    assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
    assert!(TrainConfig::from_toml("cam_layers = \"3..9\"").is_err());
}

#[test]
fn poly_schedule() {
    let cfg = TrainConfig {
        poly_power: 0.9,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.learning_rate_at(0, 10), 0.1);
    assert!(cfg.learning_rate_at(5, 10) < 0.1);
    assert_eq!(cfg.learning_rate_at(10, 10), 0.0);
    assert_eq!(TrainConfig::default().learning_rate_at(7, 10), 0.05);
}

#[test]
fn plain_sgd_update() {
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..tiny(1, 0)
    };
    let mut p = ViTParams::init(cfg.vit, 0).unwrap();
    let before = p.clone();
    let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), 2.0)).collect();
    let mut opt = Sgd::new(&cfg, &p);
    opt.step(&mut p, &grads, 0.5).unwrap();
    for (a, b) in p.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y - 1.0);
        }
    }
    let mom = TrainConfig { momentum: 0.5, ..tiny(1, 0) };
    let mut q = before.clone();
    let mut opt = Sgd::new(&mom, &q);
    opt.step(&mut q, &grads, 1.0).unwrap();
    opt.step(&mut q, &grads, 1.0).unwrap();
    // Velocity 2 then 3: total displacement 5.
    assert_eq!(q.tensors()[0].data()[0], before.tensors()[0].data()[0] - 5.0);
}

#[test]
fn evaluation_report_shape() {
    let ds = data(4);
    let cfg = tiny(1, 0);
    let out = train(&cfg, &ds, None).unwrap();
    let report = evaluate(&out.params, &ds.samples, &cfg.eval_config().unwrap()).unwrap();
    assert_eq!(report.num_images, 4);
    assert_eq!(report.layer_sweep_refined.len(), 2);
    assert!((0.0..=1.0).contains(&report.refined.best_miou));
    assert_eq!(report.unrefined.curve.len(), 19);
    assert!(evaluate(&out.params, &[], &cfg.eval_config().unwrap()).is_err());
}

#[test]
fn mismatched_dataset_is_rejected() {
    let ds = generate(&SynthConfig {
        num_samples: 3,
        num_classes: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(matches!(train(&tiny(1, 0), &ds, None), Err(AcrError::Config(_))));
    let ds = data(2);
    assert!(train(&TrainConfig { holdout: 2, ..tiny(1, 0) }, &ds, None).is_err());
}

#[test]
fn pretrained_rows_fine_tune_a_shared_model() {
    let ds = data(6);
    let pre = Pretraining {
        epochs: 2,
        dataset: generate(&SynthConfig {
            num_samples: 6,
            seed: 99,
            ..SynthConfig::default()
        })
        .unwrap(),
    };
    let base = TrainConfig {
        batch_size: 3,
        alpha: 5.0,
        beta: 5.0,
        ..tiny(1, 0)
    };
    let table = regularizer_grid(&base, &ds, &[4], Some(&pre)).unwrap();
    assert_eq!(table.rows.len(), 4);

    let pre_cfg = TrainConfig {
        seed: 4,
        epochs: 2,
        alpha: 0.0,
        beta: 0.0,
        ..base.clone()
    };
    let start = train(&pre_cfg, &pre.dataset, None).unwrap().params;
    let full_cfg = TrainConfig { seed: 4, ..base.clone() };
    let out = train_from(start, &full_cfg, &ds, None).unwrap();
    let report = evaluate(&out.params, &ds.samples, &full_cfg.eval_config().unwrap()).unwrap();
    let run = &table.row("full").unwrap().runs[0];
    assert_eq!(run.miou_refined, report.refined.best_miou);
    assert_eq!(run.miou_unrefined, report.unrefined.best_miou);
    assert!(run.seconds > 0.0);
}
