use super::*;
use crate::data::{make_folds, synth_dataset, SplitRatios, SynthOptions};
use crate::model::Variant;

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig { channels: vec![4, 6, 8], context_depth: 3, se_ratio: 2, ppd_width: 4, variant, seed: 1 }
}

fn tiny_data() -> (Vec<Volume>, FoldData) {
    let vols = synth_dataset(4, 2, &SynthOptions { size: [6, 16, 16], ..Default::default() }).unwrap();
    let ids: Vec<String> = vols.iter().map(|v| v.subject_id.clone()).collect();
    let plan = make_folds(&ids, 1, SplitRatios::default(), 0).unwrap();
    let data = FoldData::build(&vols, &plan.folds[0], 3, true, 0).unwrap();
    (vols, data)
}

#[test]
fn plateau_decays_by_exact_factor() {
    let cfg = TrainConfig { plateau_patience: 2, ..Default::default() };
    let mut s = PlateauScheduler::new(&cfg);
    let lrs: Vec<f64> = (0..8)
        .map(|_| {
            s.step(0.5);
            s.lr()
        })
        .collect();
    assert_eq!(lrs, [1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6, 1e-7, 1e-7]);
    // improvement resets the window
    let mut s = PlateauScheduler::new(&cfg);
    for m in [0.1, 0.1, 0.2, 0.2, 0.3] {
        s.step(m);
    }
    assert_eq!(s.lr(), 1e-4);
}

#[test]
fn snap_removes_rounding_residue() {
    assert_ne!(1e-5 * 0.1, 1e-6);
    assert_eq!(snap(1e-5 * 0.1), 1e-6);
    assert_eq!(snap(1e-4 * 0.1), 1e-5);
}

#[test]
fn sgd_matches_hand_computed_momentum() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add_weight("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut sgd = Sgd::new(0.5);
    for expected in [0.8f32, 0.54] {
        let mut g = Graph::train();
        let w = g.param(&store, id);
        let l = g.mul(w, w).unwrap();
        let l = g.sum_all(l);
        let grads = g.backward(l);
        drop(g);
        sgd.step(&mut store, &grads, 0.1);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-6);
    }
    // step 1: v = 2, w = 1 - 0.2 = 0.8; step 2: v = 0.5*2 + 1.6 = 2.6, w = 0.8 - 0.26 = 0.54
}

#[test]
fn config_kv_round_trip() {
    let c = TrainConfig { lr0: 0.02, monitor: Monitor::Frozen, augment: false, seed: 4, ..Default::default() };
    let mut map = crate::kv::parse(&crate::kv::format(&c.to_kv())).unwrap();
    assert_eq!(TrainConfig::take_from_kv(&mut map).unwrap(), c);
    assert!(map.is_empty());
    let mut bad = crate::kv::parse("plateau_factor = 1.5").unwrap();
    assert!(TrainConfig::take_from_kv(&mut bad).is_err());
}

#[test]
fn frozen_metric_decays_then_stops() {
    let (_, data) = tiny_data();
    let cfg = TrainConfig {
        monitor: Monitor::Frozen,
        plateau_patience: 2,
        early_stop_patience: 4,
        max_epochs: 50,
        augment: false,
        ..Default::default()
    };
    let (run, _) = train_fold(&tiny_model(Variant::Unet2d), &cfg, &LossConfig::default(), &data, &RunOptions::default(), &EventLog::null())
        .unwrap();
    assert_eq!(run.stop_reason, StopReason::EarlyStop);
    assert_eq!(run.epochs.len(), 5);
    assert_eq!(run.lr_history(), vec![1e-4, 1e-5, 1e-6]);
    assert_eq!(run.best_epoch, 1);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (_, data) = tiny_data();
    let cfg = TrainConfig { max_epochs: 2, lr0: 0.01, ..Default::default() };
    let go = || {
        train_fold(&tiny_model(Variant::Dfenet), &cfg, &LossConfig::default(), &data, &RunOptions::default(), &EventLog::null())
            .unwrap()
    };
    let (a, ma) = go();
    let (b, mb) = go();
    let bits = |r: &RunRecord| r.loss_curve().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.epochs, b.epochs);
    assert!(ma.store.bit_equal(&mb.store));
    assert!(a.epochs.iter().all(|e| e.loss_total.is_finite() && e.loss_edge > 0.0));
}

#[test]
fn best_checkpoint_reproduces_recorded_val_metrics() {
    let (_, data) = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let cfg = TrainConfig { max_epochs: 3, lr0: 0.01, ..Default::default() };
    let opts = RunOptions { checkpoint: Some(path.clone()), ..Default::default() };
    let (run, _) = train_fold(&tiny_model(Variant::FusionPpd), &cfg, &LossConfig::default(), &data, &opts, &EventLog::null()).unwrap();
    let model = load_checkpoint::<f32>(&path, Some(&tiny_model(Variant::FusionPpd))).unwrap();
    let val = evaluate(&model, &data.val, cfg.batch_size, cfg.threshold).unwrap();
    assert_eq!(val.mean, run.best_val);
    assert_eq!(run.epochs[run.best_epoch - 1].val, run.best_val);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (_, mut data) = tiny_data();
    data.train[0].slice[3] = f32::NAN;
    let cfg = TrainConfig { max_epochs: 1, augment: false, ..Default::default() };
    let err = train_fold(&tiny_model(Variant::Unet2d), &cfg, &LossConfig::default(), &data, &RunOptions::default(), &EventLog::null())
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn single_fold_cv_mean_equals_the_fold() {
    let (vols, _) = tiny_data();
    let ids: Vec<String> = vols.iter().map(|v| v.subject_id.clone()).collect();
    let plan = make_folds(&ids, 1, SplitRatios::default(), 0).unwrap();
    let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
    let r = experiment::cross_validate(
        &vols,
        &tiny_model(Variant::Unet2d),
        &cfg,
        &LossConfig::default(),
        &plan,
        &experiment::CvOptions::default(),
        &EventLog::null(),
    )
    .unwrap();
    assert_eq!(r.per_fold.len(), 1);
    assert_eq!(r.mean, r.per_fold[0]);
    assert_eq!(r.curves.len(), 1);
}
