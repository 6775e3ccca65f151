mod common;

use common::*;
use proptest::prelude::*;
use simtpr_core::config::{ExperimentConfig, OptimConfig};
use simtpr_core::model::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensors};
use simtpr_core::synthdata::{generate, Dataset, EnvConfig};
use simtpr_core::train::*;
use simtpr_core::{Error, Precision, Tensor};

fn small_env() -> EnvConfig {
    EnvConfig { size: 8, goal: (4, 4), epsilon: 0.3 }
}

fn dataset() -> Dataset {
    generate(&small_env(), 0, 6, 16).unwrap()
}

/// A few-millisecond-per-step configuration on 8×8 frames.
fn quick_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.batch.n = 4;
    c.batch.t = 5;
    c.model.d = 8;
    c.model.heads = 2;
    c.model.layers = 1;
    c.model.encoder_channels = vec![4, 4];
    c.diag.rank_samples = 48;
    c.diag.cosine_pairs = 16;
    c.train.epochs = 1;
    c.train.steps_per_epoch = 4;
    c.train.log_interval = 1;
    c
}

fn params_of(values: &[(&str, Vec<f64>)]) -> NamedTensors {
    let mut p = NamedTensors::new();
    for (name, v) in values {
        p.insert(*name, Tensor::new(vec![v.len()], v.clone()).unwrap());
    }
    p
}

fn optim(lr: f64, weight_decay: f64) -> OptimConfig {
    OptimConfig { lr, weight_decay, ..OptimConfig::default() }
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let mut p = params_of(&[("a", vec![1.0, -2.0]), ("b", vec![0.5])]);
    let before = p.clone();
    let mut opt = AdamW::new(&p, optim(0.1, 0.0), Precision::F64);
    let zeros = vec![Some(Tensor::zeros(&[2])), Some(Tensor::zeros(&[1]))];
    opt.update(&mut p, &zeros).unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.step, 1);
    opt.update(&mut p, &[None, None]).unwrap();
    assert_eq!(opt.step, 2);
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let mut p = params_of(&[("a", vec![1.0, -2.0, 4.0])]);
    let mut opt = AdamW::new(&p, optim(0.1, 0.01), Precision::F64);
    opt.update(&mut p, &[Some(Tensor::zeros(&[3]))]).unwrap();
    for (got, orig) in p.at(0).1.data().iter().zip([1.0, -2.0, 4.0]) {
        assert!((got - orig * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}

#[test]
fn adamw_scalar_first_step() {
    let mut p = params_of(&[("w", vec![0.0])]);
    let cfg = OptimConfig { lr: 0.1, weight_decay: 0.0, ..OptimConfig::default() };
    let eps = cfg.eps;
    let mut opt = AdamW::new(&p, cfg, Precision::F64);
    opt.update(&mut p, &[Some(Tensor::new(vec![1], vec![1.0]).unwrap())]).unwrap();
    // m̂ = v̂ = 1 after bias correction.
    assert!((p.at(0).1.data()[0] - (-0.1 / (1.0 + eps))).abs() < 1e-15);
    assert!((opt.m[0].data()[0] - 0.1).abs() < 1e-15);
    assert!((opt.v[0].data()[0] - 0.001).abs() < 1e-15);
}

#[test]
fn adamw_rejects_bad_gradients() {
    let mut p = params_of(&[("alpha", vec![1.0]), ("beta", vec![1.0, 2.0])]);
    let mut opt = AdamW::new(&p, optim(0.1, 0.0), Precision::F64);
    let bad = vec![None, Some(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap())];
    match opt.update(&mut p, &bad) {
        Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "beta"),
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
    assert!(opt.update(&mut p, &[None, Some(Tensor::zeros(&[3]))]).is_err());
    assert!(opt.update(&mut p, &[None]).is_err());
    assert_eq!(opt.step, 0, "failed updates do not advance the counter");
}

#[test]
fn clipping_examples() {
    let mut small = vec![Some(Tensor::new(vec![2], vec![0.3, 0.0]).unwrap()), None];
    let before = small.clone();
    assert!((clip_global_norm(&mut small, 0.5) - 0.3).abs() < 1e-15);
    assert_eq!(small, before);

    let mut big = vec![Some(Tensor::new(vec![2], vec![1.2, 0.0]).unwrap()), Some(Tensor::new(vec![1], vec![1.6]).unwrap())];
    assert!((clip_global_norm(&mut big, 0.5) - 2.0).abs() < 1e-12);
    assert!((global_norm(&big) - 0.5).abs() < 1e-6);

    let mut zero = vec![Some(Tensor::zeros(&[3]))];
    clip_global_norm(&mut zero, 0.5);
    assert_eq!(zero[0].as_ref().unwrap().data(), &[0.0; 3]);
}

#[test]
fn zero_epochs_give_only_the_initial_record() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.train.epochs = 0;
    let (bundle, records) = pretrain(cfg.clone(), &ds).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].step, 0);
    let fresh = simtpr_core::model::ModelBundle::from_config(&cfg, ds.frame_shape(), ds.num_actions()).unwrap();
    assert_eq!(bundle, fresh);
}

#[test]
fn zero_learning_rate_only_moves_batch_norm_statistics() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.optim.lr = 0.0;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let before = t.bundle.clone();
    let loss_before = t.evaluate_loss(1).unwrap();
    let report = t.train_step().unwrap();
    assert_eq!(t.step(), 1);
    assert_eq!(t.bundle.params.fingerprint(), before.params.fingerprint());
    assert_ne!(t.bundle.buffers, before.buffers, "predictor running statistics update");
    assert_eq!(report.loss, loss_before);
    assert_eq!(t.evaluate_loss(1).unwrap(), loss_before);
}

#[test]
fn identical_runs_give_identical_csv() {
    let ds = dataset();
    let a = metrics_csv(&pretrain(quick_config(), &ds).unwrap().1);
    let b = metrics_csv(&pretrain(quick_config(), &ds).unwrap().1);
    assert_eq!(a, b);
    let mut other = quick_config();
    other.seed = 1;
    assert_ne!(a, metrics_csv(&pretrain(other, &ds).unwrap().1));
}

#[test]
fn csv_layout() {
    let ds = dataset();
    let (_, records) = pretrain(quick_config(), &ds).unwrap();
    let csv = metrics_csv(&records);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,loss_total,loss_sim,loss_decorr,loss_decorr_on,loss_decorr_off,loss_contrastive,loss_action,loss_recon,feat_rank,cos_k1,cos_k3,cos_k5,wall_secs"
    );
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 15);
        // Contrastive, action and recon are inactive; wall time is off.
        assert_eq!((cells[7], cells[8], cells[9], cells[14]), ("", "", "", ""));
        assert!(cells[3].parse::<f64>().is_ok());
    }
    let parsed = parse_csv(&csv);
    assert_eq!(parsed.len(), records.len());
    assert_eq!(parsed[2][1], ("step".to_string(), Some(2.0)));
    assert_eq!(parsed[2][7], ("loss_contrastive".to_string(), None));
}

#[test]
fn sparse_logging_keeps_the_last_step() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.train.steps_per_epoch = 5;
    cfg.train.log_interval = 2;
    let (_, records) = pretrain(cfg, &ds).unwrap();
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4, 5]);
}

#[test]
fn without_decorrelation_the_total_is_the_similarity() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.lambda_d = 0.0;
    let (_, records) = pretrain(cfg, &ds).unwrap();
    for r in &records {
        assert_eq!(Some(r.loss.total), r.loss.sim);
    }
}

#[test]
fn one_step_moves_parameters_by_a_bounded_amount() {
    let ds = dataset();
    let cfg = quick_config();
    let (lr, wd) = (cfg.optim.lr, cfg.optim.weight_decay);
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let before = snapshot(&t.bundle);
    t.train_step().unwrap();
    for (b, a) in before.iter().zip(snapshot(&t.bundle)) {
        for (p0, p1) in b.data().iter().zip(a.data()) {
            assert!((p1 - p0).abs() <= lr * (2.0 + wd * p0.abs()) + 1e-9);
        }
    }
}

#[test]
fn split_run_matches_continuous_run() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.train.steps_per_epoch = 2;
    let (_, full) = pretrain(cfg.clone(), &ds).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Vec::new();
    let mut t = Trainer::new(cfg, &ds).unwrap();
    t.run(Some(1), None, &mut |r| {
        first.push(r.clone());
        Ok(())
    })
    .unwrap();
    save_checkpoint(&t.checkpoint(), &path).unwrap();
    drop(t);
    let mut resumed = Trainer::resume(load_checkpoint(&path).unwrap(), &ds).unwrap();
    assert_eq!(resumed.step(), 1);
    resumed
        .run(None, None, &mut |r| {
            first.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(metrics_csv(&first), metrics_csv(&full));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = dataset();
    let mut t = Trainer::new(quick_config(), &ds).unwrap();
    t.train_step().unwrap();
    let ck = t.checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.step, 1);
    assert_eq!(back.config, ck.config);
    for ((n1, a), (n2, b)) in ck.bundle.params.iter().zip(back.bundle.params.iter()) {
        assert_eq!(n1, n2);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.bundle.buffers, ck.bundle.buffers);
    assert_eq!(back.optimizer, ck.optimizer);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ds = dataset();
    let t = Trainer::new(quick_config(), &ds).unwrap();
    let bytes = t.checkpoint().to_bytes();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CrcMismatch { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'Z';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(&dir.path().join("absent.ckpt")).unwrap_err().is_io());
}

#[test]
fn checkpoints_for_other_datasets_are_incompatible() {
    let ds = dataset();
    let ck = Trainer::new(quick_config(), &ds).unwrap().checkpoint();
    let bigger = generate(&EnvConfig { size: 10, goal: (5, 5), epsilon: 0.3 }, 0, 6, 16).unwrap();
    assert!(matches!(Trainer::resume(ck, &bigger), Err(Error::IncompatibleCheckpoint(_))));
}

#[test]
fn periodic_checkpoints_are_written() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.train.checkpoint_interval = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, &ds).unwrap();
    t.run(None, Some(dir.path()), &mut |_| Ok(())).unwrap();
    for step in [2, 4] {
        let ck = load_checkpoint(&dir.path().join(format!("step-{step}.ckpt"))).unwrap();
        assert_eq!(ck.step, step);
    }
    assert!(!dir.path().join("step-1.ckpt").exists());
}

#[test]
fn numeric_failures_report_their_step() {
    let ds = dataset();
    let mut t = Trainer::new(quick_config(), &ds).unwrap();
    t.bundle.params.get_mut("projector.fc2.w").unwrap().data_mut()[0] = f64::NAN;
    match t.train_step() {
        Err(Error::Step { epoch, step, source }) => {
            assert_eq!((epoch, step), (0, 1));
            assert!(source.is_numeric(), "{source}");
        }
        other => panic!("expected a step error, got {other:?}"),
    }
}

#[test]
fn windows_longer_than_trajectories_are_a_config_error() {
    let ds = dataset();
    let mut cfg = quick_config();
    cfg.batch.t = 17;
    assert!(matches!(Trainer::new(cfg, &ds), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_the_cap(seed in 0u64..10_000, cap in 0.01f64..5.0, scale in 0.0f64..10.0) {
        let mut r = rng(seed);
        let mut g = vec![Some(normal(&[3, 4], &mut r).map(|v| v * scale)), None, Some(normal(&[5], &mut r))];
        let before = global_norm(&g);
        let reported = clip_global_norm(&mut g, cap);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&g) <= cap * (1.0 + 1e-12));
    }
}
