use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use dgcf::backbone::{load_backbone, parameter_checksum, BackboneGeometry, BackboneHandle, TapSpec, WeightsInit};
use dgcf::data::{extract_slices, PairedCase, SlicePairs};
use dgcf::generator::{build_generator, BuildOptions, GeneratorConfig, Variant};
use dgcf::losses::LossConfig;
use dgcf::phantom::{phantom_case, PhantomSpec};
use dgcf::training::{load_checkpoint, LogRecord, TrainConfig, TrainLog, Trainer};
use dgcf::Error;

fn backbone() -> Arc<BackboneHandle> {
    Arc::new(load_backbone(BackboneGeometry::tiny(4, 16, 8), WeightsInit::Standin { seed: 0 }, DType::F32, &Device::Cpu).unwrap())
}

fn pairs() -> SlicePairs {
    let spec = PhantomSpec { depth: 4, height: 32, width: 32, ..Default::default() };
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for i in 0..2 {
        let (src, tgt) = phantom_case(&spec, "t", i).unwrap();
        let case = PairedCase::new(&src, &tgt).unwrap();
        s.extend(extract_slices(&case.source, 32).unwrap().slices);
        t.extend(extract_slices(&case.target, 32).unwrap().slices);
    }
    SlicePairs::from_slices(s, t).unwrap()
}

fn config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        epochs: 1000,
        seed,
        max_steps: Some(steps),
        checkpoint_every: 0,
        loss: LossConfig { taps: TapSpec::new(vec![1, 2, 3, 4]).unwrap(), ..Default::default() },
        model: GeneratorConfig::new(Variant::CrossFusion, vec![8, 16, 32], 32),
        ..Default::default()
    }
}

fn trainer(cfg: &TrainConfig, bb: Arc<BackboneHandle>) -> Trainer {
    let model = build_generator(&cfg.model, Some(bb), &BuildOptions { seed: cfg.seed, ..Default::default() }).unwrap();
    Trainer::new(model, None, cfg.clone()).unwrap()
}

fn totals(log: &TrainLog) -> Vec<f64> {
    log.steps().map(|(_, b)| b.total).collect()
}

#[test]
fn same_seed_gives_identical_first_steps() {
    let bb = backbone();
    let data = pairs();
    let a = totals(&trainer(&config(10, 3), bb.clone()).fit(&data, None, None).unwrap());
    let b = totals(&trainer(&config(10, 3), bb.clone()).fit(&data, None, None).unwrap());
    let c = totals(&trainer(&config(10, 4), bb).fit(&data, None, None).unwrap());
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn moving_average_of_total_loss_descends() {
    let bb = backbone();
    let before = parameter_checksum(&bb).unwrap();
    let mut t = trainer(&config(200, 0), bb.clone());
    let log = t.fit(&pairs(), None, None).unwrap();
    let losses = totals(&log);
    assert_eq!(losses.len(), 200);
    assert!(losses.iter().all(|l| l.is_finite()));
    let trailing = |end: usize| {
        let start = end.saturating_sub(50);
        losses[start..end].iter().sum::<f64>() / (end - start) as f64
    };
    assert!(trailing(200) < trailing(20), "{} vs {}", trailing(200), trailing(20));
    for (_, b) in log.steps() {
        assert!((b.total - (b.l1 + b.mldp)).abs() < 1e-9);
    }
    assert_eq!(parameter_checksum(&bb).unwrap(), before);
    assert!(t.params_without_grad().is_empty());
}

#[test]
fn logs_checkpoints_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let bb = backbone();
    let data = pairs();
    let mut cfg = config(usize::MAX, 0);
    cfg.max_steps = None;
    cfg.epochs = 2;
    cfg.checkpoint_every = 1;
    let mut t = trainer(&cfg, bb.clone());
    let log_path = dir.path().join("train_log.jsonl");
    t.log_to(&log_path).unwrap();
    let log = t.fit(&data, Some(&data), Some(dir.path())).unwrap();
    for name in ["epoch_0001.ckpt", "epoch_0002.ckpt", "best.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(log.best_val_l1.is_some());
    let records = TrainLog::read_jsonl(&log_path).unwrap();
    assert_eq!(records.len(), log.records.len());
    let step_ids: Vec<usize> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, .. } => Some(*step),
            _ => None,
        })
        .collect();
    assert_eq!(step_ids, (1..=8).collect::<Vec<_>>());
    let epochs = records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. })).count();
    assert_eq!(epochs, 2);
    assert_eq!(log.steps().count(), 8);

    // resuming the first-epoch checkpoint runs exactly the remaining epoch
    let mut resumed = trainer(&cfg, bb.clone());
    resumed.resume_from(&dir.path().join("epoch_0001.ckpt")).unwrap();
    assert_eq!((resumed.epoch(), resumed.steps_taken()), (1, 4));
    let more = resumed.fit(&data, None, None).unwrap();
    assert_eq!(more.steps().count(), 4);
    assert_eq!(resumed.steps_taken(), 8);

    let final_model = load_checkpoint(&dir.path().join("final.ckpt"), Some(&cfg.model), Some(bb)).unwrap();
    assert_eq!(final_model.trainable_param_count(), t.model().trainable_param_count());

    let mut wrong = config(1, 0);
    wrong.model = GeneratorConfig::new(Variant::CrossFusion, vec![8, 16, 16], 32);
    let mut other = trainer(&wrong, backbone());
    assert!(matches!(other.resume_from(&dir.path().join("final.ckpt")), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_a_record() {
    let mut t = trainer(&config(5, 0), backbone());
    let x = Tensor::full(f32::NAN, (2, 1, 32, 32), &Device::Cpu).unwrap();
    let y = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(t.step(&x, &y), Err(Error::NonFiniteLoss { step: 1, .. })));
    assert!(matches!(t.log().records.last(), Some(LogRecord::Abort { .. })));
    assert_eq!(t.steps_taken(), 0);
}

#[test]
fn config_model_must_match_built_model() {
    let cfg = config(1, 0);
    let other = GeneratorConfig::new(Variant::Concat, vec![8, 16, 32], 32);
    let model = build_generator(&other, Some(backbone()), &BuildOptions::default()).unwrap();
    assert!(matches!(Trainer::new(model, None, cfg), Err(Error::Config(_))));
}
