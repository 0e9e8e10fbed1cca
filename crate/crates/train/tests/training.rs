use sar_train::*;
use sar_vit::{Checkpoint, LastBlockVariant};

fn small(overrides: &[&str]) -> TrainConfig {
    let base = [
        "model.image_size=16",
        "model.patch_size=4",
        "model.embed_dim=8",
        "model.heads=2",
        "model.blocks=2",
        "model.mlp_ratio=2.0",
        "model.last_block=\"c\"",
        "data.image_size=16",
        "data.patch_size=4",
        "data.min_extent=4",
        "data.max_extent=8",
        "data.samples=24",
        "test_samples=12",
        "batch_size=8",
        "epochs=2",
        "eval_every=1",
    ];
    let all: Vec<String> = base.iter().chain(overrides).map(|s| s.to_string()).collect();
    TrainConfig::from_toml_str("", &all).unwrap()
}

fn run_recording(cfg: &TrainConfig) -> (Vec<Vec<u64>>, RunLog) {
    let data = TrainData::generate(cfg).unwrap();
    let mut s = Session::new(cfg).unwrap();
    let mut steps = Vec::new();
    let mut on_step = |i: &StepInfo| steps.push(i.params.flatten().iter().map(|v| v.to_bits()).collect());
    s.run(cfg, &data, &mut RunOptions { on_step: Some(&mut on_step), ..Default::default() }).unwrap();
    (steps, s.log)
}

#[test]
fn zero_lambda_is_bit_identical_to_no_aux() {
    let (a, log_a) = run_recording(&small(&["lambda=0", "aux_loss=spatial-entropy"]));
    let (b, log_b) = run_recording(&small(&["lambda=0", "aux_loss=none"]));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(log_a.records[1].train_ce.to_bits(), log_b.records[1].train_ce.to_bits());
    let (c, _) = run_recording(&small(&["lambda=0.01"]));
    assert_ne!(a, c);
}

#[test]
fn identical_config_reproduces_run_log() {
    let cfg = small(&["aux_loss=tv"]);
    let (a, log_a) = run_recording(&cfg);
    let (b, log_b) = run_recording(&cfg);
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}

#[test]
fn logged_metrics_stay_in_bounds() {
    let cfg = small(&["epochs=3"]);
    let (_, log) = run_recording(&cfg);
    let max_h = (16f64).ln();
    for r in &log.records {
        for (h, c) in [(r.mean_entropy, r.mean_components)].into_iter().chain(r.test.as_ref().map(|t| (t.mean_entropy, t.mean_components))) {
            assert!(h.is_finite() && (0.0..=max_h).contains(&h), "{h}");
            assert!((0.0..=16.0).contains(&c));
        }
        assert!(r.train_loss.is_finite());
    }
    assert_eq!(log.records.len(), 3);
    assert_eq!(log.last().unwrap().step, 9);
}

#[test]
fn overfits_one_batch() {
    let cfg = small(&[
        "model.embed_dim=16",
        "data.samples=8",
        "test_samples=0",
        "epochs=200",
        "lr=3e-3",
        "weight_decay=0",
    ]);
    let data = TrainData::generate(&cfg).unwrap();
    let (model, log) = train(init_model(&cfg).unwrap(), &cfg, &data).unwrap();
    assert_eq!(log.last().unwrap().step, 200);
    let m = evaluate(&model, &data.train, &cfg.loss_config(), 0.6).unwrap();
    assert_eq!(m.accuracy, 1.0, "loss {}", m.loss);
}

#[test]
fn random_model_is_near_chance() {
    let cfg = small(&["test_samples=500", "model.embed_dim=16"]);
    let data = TrainData::generate(&cfg).unwrap();
    let model = init_model(&cfg).unwrap();
    let m = evaluate(&model, &data.test, &cfg.loss_config(), 0.6).unwrap();
    assert!((m.accuracy - 1.0 / 3.0).abs() <= 0.1, "{}", m.accuracy);
    assert_eq!(m.samples, 500);
    assert_eq!(m, evaluate(&model, &data.test, &cfg.loss_config(), 0.6).unwrap());
    assert!((0.0..=1.0).contains(&m.mean_jaccard));
    let back: EvalMetrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn empty_dataset_is_an_error() {
    let cfg = small(&[]);
    let model = init_model(&cfg).unwrap();
    assert!(matches!(evaluate(&model, &[], &cfg.loss_config(), 0.6), Err(Error::EmptyDataset)));
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["epochs=3", "checkpoint_every=1"]);
    let data = TrainData::generate(&cfg).unwrap();

    let mut full = Session::new(&cfg).unwrap();
    full.run(&cfg, &data, &mut RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    assert!(dir.path().join("checkpoints/epoch-002.ckpt").exists());
    assert!(dir.path().join("final.ckpt").exists());
    assert_eq!(RunLog::load(dir.path().join("runlog.jsonl")).unwrap(), full.log);

    let ck = Checkpoint::load(dir.path().join("checkpoints/epoch-001.ckpt")).unwrap();
    let (mut resumed, rcfg) = Session::from_checkpoint(&ck).unwrap();
    assert_eq!(rcfg, cfg);
    assert_eq!(resumed.epochs_done, 1);
    resumed.run(&rcfg, &data, &mut RunOptions::default()).unwrap();
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!(resumed.log.records[..], full.log.records[1..]);

    let plain = Checkpoint::load(dir.path().join("final.ckpt")).unwrap().to_model().unwrap();
    assert_eq!(plain, full.model);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[]);
    let data = TrainData::generate(&cfg).unwrap();
    let mut model = init_model(&cfg).unwrap();
    model.params.head_b[0] = f64::NAN;
    let mut s = Session::with_model(model, &cfg).unwrap();
    let err = s.run(&cfg, &data, &mut RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap_err();
    match err {
        Error::NonFinite { epoch: 1, step: 0, dump: Some(path) } => {
            let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
            assert_eq!(dump["samples"].as_array().unwrap().len(), 8);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn model_must_match_config() {
    let cfg = small(&[]);
    let mut other = cfg.clone();
    other.model.last_block = LastBlockVariant::Standard;
    let model = init_model(&other).unwrap();
    assert!(matches!(Session::with_model(model, &cfg), Err(Error::Incompatible(_))));
}

#[test]
fn schedule_reaches_floor() {
    let cfg = small(&["epochs=4"]);
    let sched = Session::schedule(&cfg, 24);
    assert_eq!(sched.total_steps, 12);
    assert_eq!(sched.at(0), cfg.lr);
    assert!(sched.at(11) <= 1e-2 * cfg.lr);
}
