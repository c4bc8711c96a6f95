use meant::dataset::MacdStats;
use meant::model::{Meant, ModelConfig};
use meant::nn::ParamStore;
use meant::synthetic::{separable_windows, SeparableSpec};
use meant::tensor::{Tape, Tensor, TensorError};
use meant::training::{
    ablation_table, compute_metrics, cosine_warm_restart_lr, decode_checkpoint, encode_checkpoint, evaluate,
    load_checkpoint, run_ablation, train, AdamW, EarlyStopping, OptimizerState, ScheduleState, StopDecision,
    TrainConfig, TrainData, TrainError, Variant,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ce(logits: &[f64], labels: &[usize]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![labels.len(), 2], logits.to_vec()).unwrap());
    let l = tape.cross_entropy(v, labels)?;
    tape.value(l).item()
}

#[test]
fn cross_entropy_examples() {
    assert!((ce(&[0.0, 0.0], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(ce(&[1000.0, -1000.0], &[0]).unwrap().abs() < 1e-12);
    assert!(matches!(ce(&[0.0, 0.0], &[2]), Err(TensorError::Contract(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..2)).collect();
    let oracle: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = &logits[2 * i..2 * i + 2];
            -(z[y].exp() / (z[0].exp() + z[1].exp())).ln()
        })
        .sum::<f64>()
        / 8.0;
    assert!((ce(&logits, &labels).unwrap() - oracle).abs() < 1e-12);
}

fn one_param(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
        .unwrap();
    s
}

fn values(store: &ParamStore) -> Vec<f64> {
    store.iter().next().unwrap().2.data().to_vec()
}

#[test]
fn adamw_closed_forms() {
    let lr = 1e-3;
    let no_decay = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut store = one_param(&[0.5, -2.0]);
    let mut opt = OptimizerState::new(&store, no_decay);
    opt.step(&mut store, &[vec![1.0, 1.0]], lr).unwrap();
    let expect = lr / (1.0 + 1e-8);
    let got = values(&store);
    assert!((got[0] - (0.5 - expect)).abs() < 1e-9);
    assert!((got[1] - (-2.0 - expect)).abs() < 1e-9);
    assert_eq!(opt.step, 1);

    let mut store = one_param(&[0.5, -2.0]);
    let mut opt = OptimizerState::new(&store, no_decay);
    opt.step(&mut store, &[vec![0.0, 0.0]], lr).unwrap();
    assert_eq!(values(&store), vec![0.5, -2.0]);

    let mut store = one_param(&[0.5, -2.0]);
    let mut opt = OptimizerState::new(&store, AdamW::default());
    opt.step(&mut store, &[vec![0.0, 0.0]], lr).unwrap();
    let got = values(&store);
    assert_eq!(got, vec![0.5 * (1.0 - lr * 0.01), -2.0 * (1.0 - lr * 0.01)]);

    let mut store = one_param(&[1.0]);
    let mut opt = OptimizerState::new(&store, AdamW::default());
    let err = opt.step(&mut store, &[vec![f64::NAN]], lr).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
    assert!(opt.step(&mut store, &[vec![1.0, 2.0]], lr).is_err());
}

proptest! {
    #[test]
    fn zero_learning_rate_changes_no_parameter(seed in any::<u64>(), n in 1usize..20, steps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut store = one_param(&init);
        let mut opt = OptimizerState::new(&store, AdamW::default());
        for _ in 0..steps {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            opt.step(&mut store, &[g], 0.0).unwrap();
        }
        prop_assert_eq!(values(&store), init);
    }

    #[test]
    fn schedule_is_periodic(t in 0.0f64..7.0, cycles in 1u32..6) {
        let st = ScheduleState::default();
        let a = cosine_warm_restart_lr(&st, t);
        let b = cosine_warm_restart_lr(&st, t + 7.0 * f64::from(cycles));
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=5e-5).contains(&a));
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let r = compute_metrics(&preds, &labels).unwrap();
        let count = |p: usize, y: usize| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == y).count();
        for y in 0..2 {
            for p in 0..2 {
                prop_assert_eq!(r.confusion[y][p], count(p, y));
            }
        }
        prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), n);
        for m in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}

#[test]
fn schedule_examples() {
    let st = ScheduleState::default();
    assert_eq!(cosine_warm_restart_lr(&st, 0.0), 5e-5);
    assert!((cosine_warm_restart_lr(&st, 3.5) - 2.5e-5).abs() < 1e-15);
    assert_eq!(cosine_warm_restart_lr(&st, 7.0), 5e-5);
    assert!(cosine_warm_restart_lr(&st, 6.999) < 1e-10);
    assert!((cosine_warm_restart_lr(&st, 7.0 + 1e-9) - 5e-5).abs() < 1e-15);
    assert!(ScheduleState { t0: 0.5, ..st }.validate().is_err());
}

#[test]
fn metrics_examples() {
    let r = compute_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
    assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

    let r = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
    assert_eq!(r.accuracy, 0.5);
    assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (0.5, 0.5, 0.5));

    let r = compute_metrics(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap();
    assert_eq!(r.accuracy, 0.5);
    assert_eq!((r.per_class[1].recall, r.per_class[0].recall), (1.0, 0.0));
    assert!(matches!(compute_metrics(&[], &[]), Err(TrainError::Contract(_))));
}

#[test]
fn early_stopping_counts_epochs() {
    let mut es = EarlyStopping::new(3);
    let decisions: Vec<_> = [0.9, 0.8, 0.7, 0.6, 0.5].iter().map(|&v| es.observe(v)).collect();
    assert_eq!(
        decisions[..4],
        [
            StopDecision::Improved,
            StopDecision::Continue,
            StopDecision::Continue,
            StopDecision::Stop
        ]
    );
    let mut es = EarlyStopping::new(2);
    assert_eq!(es.observe(0.5), StopDecision::Improved);
    assert_eq!(es.observe(0.5), StopDecision::Continue);
    assert_eq!(es.observe(0.6), StopDecision::Improved);
    assert_eq!(es.bad_epochs, 0);
}

fn fixture(n: usize, seed: u64) -> Vec<meant::dataset::LagWindow> {
    separable_windows(n, &SeparableSpec::default(), seed)
}

fn quick(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        patience: epochs,
        ..TrainConfig::default()
    };
    cfg.schedule.eta_max = 1e-2;
    cfg
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let train_w = fixture(32, 1);
    let val_w = fixture(16, 2);
    let stats = MacdStats::identity();
    let data = TrainData {
        train: &train_w,
        val: &val_w,
        stats: &stats,
    };
    let dir = tempfile::tempdir().unwrap();
    let a = train(
        Meant::new(ModelConfig::toy()).unwrap(),
        data,
        &quick(4),
        Some(dir.path()),
    )
    .unwrap();
    let b = train(Meant::new(ModelConfig::toy()).unwrap(), data, &quick(4), None).unwrap();
    let losses = |o: &meant::training::TrainOutcome| o.log.iter().map(|r| r.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.log.len(), 4);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["val"]["macro_f1"].is_number());

    let loaded = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(loaded.store, a.best.store);
    assert_eq!(loaded.config(), a.best.config());

    let r1 = evaluate(&a.best, &val_w, &stats, 5).unwrap();
    let r2 = evaluate(&loaded, &val_w, &stats, 7).unwrap();
    assert_eq!(r1, r2);
    assert!(matches!(
        evaluate(&a.best, &[], &stats, 4),
        Err(TrainError::Contract(_))
    ));
    assert!(matches!(
        train(
            Meant::new(ModelConfig::toy()).unwrap(),
            TrainData { val: &[], ..data },
            &quick(1),
            None
        ),
        Err(TrainError::Contract(_))
    ));
}

#[test]
fn default_learning_rate_barely_moves_a_toy_model() {
    let w = fixture(64, 3);
    let stats = MacdStats::identity();
    let cfg = TrainConfig {
        epochs: 20,
        patience: 20,
        ..TrainConfig::default()
    };
    let out = train(
        Meant::new(ModelConfig::toy()).unwrap(),
        TrainData {
            train: &w,
            val: &w,
            stats: &stats,
        },
        &cfg,
        None,
    )
    .unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!((first - last).abs() < 0.05, "{first} -> {last}");
}

#[test]
fn divergence_returns_last_good_model() {
    let w = fixture(16, 4);
    let stats = MacdStats::identity();
    let mut model = Meant::new(ModelConfig::toy()).unwrap();
    let id = model.store.id("head.out.bias").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let initial = model.clone();
    let err = train(
        model,
        TrainData {
            train: &w,
            val: &w,
            stats: &stats,
        },
        &quick(2),
        None,
    )
    .unwrap_err();
    match err {
        TrainError::Diverged {
            epoch,
            batch,
            last_good,
            ..
        } => {
            assert_eq!((epoch, batch), (1, 0));
            assert_eq!(last_good.config(), initial.config());
        }
        other => panic!("{other}"),
    }
}

#[test]
fn checkpoint_integrity() {
    let model = Meant::new(ModelConfig::toy()).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    assert_eq!(&bytes[..4], b"MEAN");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.store, model.store);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(matches!(decode_checkpoint(&bad), Err(TrainError::Checkpoint(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());

    let mut other = bytes.clone();
    other[4] = 9;
    let n = other.len() - 4;
    let crc = crc32fast::hash(&other[..n]).to_le_bytes();
    other[n..].copy_from_slice(&crc);
    let err = decode_checkpoint(&other).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");
}

#[test]
fn ablation_variants() {
    let names = Variant::parse_list("full,text+price,price-only").unwrap();
    let train_w = fixture(16, 5);
    let val_w = fixture(8, 6);
    let test_w = fixture(8, 7);
    let stats = MacdStats::identity();
    let data = TrainData {
        train: &train_w,
        val: &val_w,
        stats: &stats,
    };
    let rows = run_ablation(&ModelConfig::toy(), &quick(1), data, &test_w, &names).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].num_params > rows[1].num_params && rows[1].num_params > rows[2].num_params);
    assert!(ablation_table(&rows).lines().count() == 4);

    let rows = run_ablation(
        &ModelConfig::toy(),
        &quick(1),
        data,
        &test_w,
        &Variant::parse_list("meanpool,seqproj").unwrap(),
    )
    .unwrap();
    let cfg = ModelConfig::toy();
    assert_eq!(
        rows[1].num_params - rows[0].num_params,
        cfg.seq_len + 1 + 2 * cfg.language.d
    );

    let rows = run_ablation(&cfg, &quick(1), data, &test_w, &[Variant::Lag(1)]).unwrap();
    assert_eq!(rows[0].variant, "lag1");
    assert!(matches!(
        run_ablation(&cfg, &quick(1), data, &test_w, &[Variant::Lag(10)]),
        Err(TrainError::Mismatch(_))
    ));
    let err = Variant::parse_list("full,bogus").unwrap_err();
    assert!(matches!(err, TrainError::UnknownVariant { .. }));
}
