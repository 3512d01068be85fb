use super::*;
use crate::bdvae::{Architecture, ModelConfig};
use crate::datamodel::Modality;
use crate::maskspec::{MaskEntry, MaskSet, Role};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn masks(n_features: usize, sets: &[Vec<usize>]) -> MaskSet {
    MaskSet {
        entries: sets
            .iter()
            .enumerate()
            .map(|(i, s)| MaskEntry {
                name: format!("f{i}"),
                modality: Modality::Rna,
                role: Role::Specified,
                indices: s.clone(),
            })
            .collect(),
        n_features,
        feature_names: (0..n_features).map(|j| format!("x{j}")).collect(),
    }
}

/// Eight features in two blocks of four; block 0 carries a class shift.
fn cohort(n: usize, seed: u64) -> (Tensor, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut data = Vec::with_capacity(n * 8);
    for &yi in &y {
        let f0: f64 = StandardNormal.sample(&mut rng);
        let f1: f64 = StandardNormal.sample(&mut rng);
        let f0 = f0 + 2.0 * yi as f64;
        for j in 0..8 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let f = if j < 4 { f0 } else { f1 };
            data.push(f + 0.5 * e);
        }
    }
    (Tensor::matrix(n, 8, data).unwrap(), y)
}

fn model(seed: u64) -> BdvaeModel {
    let m = masks(8, &[vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    let arch = Architecture::new(&m, &[1, 1], &ModelConfig::default()).unwrap();
    BdvaeModel::init(arch, seed)
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr_vae: 5e-3,
        lr_cls: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let mut p = vec![Tensor::vector(vec![0.5, -2.0])];
    let mut opt = AdamW::new(&p, 1e-3, 0.0);
    opt.step(&mut p, &[Tensor::vector(vec![0.0, 0.0])]);
    assert_eq!(p[0].data(), &[0.5, -2.0]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = vec![Tensor::vector(vec![1.0, 1.0])];
    let mut opt = AdamW::new(&p, 1e-3, 0.0);
    opt.step(&mut p, &[Tensor::vector(vec![3.0, -0.2])]);
    assert!(close(p[0].data()[0], 1.0 - 1e-3, 1e-10));
    assert!(close(p[0].data()[1], 1.0 + 1e-3, 1e-10));
}

#[test]
fn adamw_decay_is_pure_shrink() {
    let mut p = vec![Tensor::vector(vec![2.0])];
    let mut opt = AdamW::new(&p, 0.1, 0.5);
    for _ in 0..3 {
        opt.step(&mut p, &[Tensor::vector(vec![0.0])]);
    }
    assert!(close(p[0].data()[0], 2.0 * 0.95f64.powi(3), 1e-15));
}

#[test]
fn clip_examples() {
    let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!(close(g[0].data()[0], 0.6, 1e-15) && close(g[0].data()[1], 0.8, 1e-15));
    let mut g = vec![Tensor::vector(vec![0.3]), Tensor::vector(vec![0.4])];
    clip_global_norm(&mut g, 1.0);
    assert_eq!((g[0].data()[0], g[1].data()[0]), (0.3, 0.4));
    let mut g = vec![Tensor::vector(vec![0.0; 3])];
    clip_global_norm(&mut g, 1.0);
    assert_eq!(g[0].data(), &[0.0; 3]);
}

#[test]
fn clip_is_joint_over_tensors() {
    let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
    clip_global_norm(&mut g, 1.0);
    assert!(close(g[0].data()[0], 0.6, 1e-15) && close(g[1].data()[0], 0.8, 1e-15));
}

fn lr_trace(values: &[f64]) -> Vec<f64> {
    let mut s = PlateauScheduler::new(20, 0.5, 0.0);
    let mut lr = 1.0;
    values
        .iter()
        .map(|&v| {
            lr *= s.observe(v);
            lr
        })
        .collect()
}

#[test]
fn plateau_examples() {
    let improving: Vec<f64> = (0..60).map(|i| 100.0 - i as f64).collect();
    assert!(lr_trace(&improving).iter().all(|&lr| lr == 1.0));

    let flat = lr_trace(&[1.0; 21]);
    assert!(flat[..20].iter().all(|&lr| lr == 1.0));
    assert_eq!(flat[20], 0.5);
    let longer = lr_trace(&[1.0; 40]);
    assert!(longer[20..40].iter().all(|&lr| lr == 0.5));

    let mut v = vec![1.0; 25];
    v[19] = 0.5;
    assert!(lr_trace(&v).iter().all(|&lr| lr == 1.0));
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (x, y) = cohort(20, 1);
    let kinds = vec![ValueKind::Continuous; 8];
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &x,
        y_val: &y,
        kinds: &kinds,
    };
    let m = model(4);
    let out = train(m.clone(), &data, &quick_cfg(0), &mut ()).unwrap();
    assert_eq!(out.best, m);
    assert_eq!(out.last, m);
    assert!(out.log.epochs.is_empty());
    assert_eq!(out.best_epoch, None);
}

#[test]
fn training_is_deterministic_and_exports_on_schedule() {
    struct Exports(Vec<usize>);
    impl TrainObserver for Exports {
        fn on_latent_export(&mut self, epoch: usize, _m: &BdvaeModel) -> Result<(), TrainError> {
            self.0.push(epoch);
            Ok(())
        }
    }
    let (x, y) = cohort(40, 2);
    let (xv, yv) = cohort(20, 3);
    let kinds = vec![ValueKind::Continuous; 8];
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &xv,
        y_val: &yv,
        kinds: &kinds,
    };
    let mut cfg = quick_cfg(25);
    cfg.latent_export_every = 7;
    let mut ex = Exports(Vec::new());
    let a = train(model(5), &data, &cfg, &mut ex).unwrap();
    let b = train(model(5), &data, &cfg, &mut ()).unwrap();
    assert_eq!(ex.0, vec![7, 14, 21]);
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.epochs.len(), 25);
    let best = a.best_epoch.unwrap();
    let min = a
        .log
        .epochs
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.log.epochs[best - 1].val_loss, min);
    assert!(a.log.epochs[..best - 1].iter().all(|r| r.val_loss > min));
}

#[test]
fn optimizer_groups_split_at_classifier() {
    let m = model(0);
    let split = m.names().iter().position(|n| n.starts_with("cls.")).unwrap();
    assert!(m.names()[..split].iter().all(|n| !n.starts_with("cls.")));
    assert!(m.names()[split..].iter().all(|n| n.starts_with("cls.")));
}

#[test]
fn classifier_alone_receives_weight_decay() {
    // With every loss weight but the reconstruction term tiny, the classifier
    // gradients vanish and only decoupled decay moves its weights.
    let (x, y) = cohort(20, 8);
    let kinds = vec![ValueKind::Continuous; 8];
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &x,
        y_val: &y,
        kinds: &kinds,
    };
    let mut cfg = quick_cfg(1);
    cfg.batch_size = 20;
    cfg.weights = LossWeights {
        rec: 1.0,
        mmd: 0.0,
        resp: 0.0,
    };
    cfg.weight_decay_cls = 0.5;
    cfg.lr_cls = 0.1;
    let m0 = model(9);
    let out = train(m0.clone(), &data, &cfg, &mut ()).unwrap();
    for (name, p0) in m0.names().iter().zip(m0.params()) {
        let p1 = out.last.param(name).unwrap();
        if name.starts_with("cls.") {
            for (a, b) in p0.data().iter().zip(p1.data()) {
                assert!(close(*b, a * 0.95, 1e-15), "{name}");
            }
        }
    }
}

/// The per-batch loss is stochastic (fresh reparameterization and prior draws),
/// so monotonicity is checked on the deterministic full-batch loss of the
/// probe set (z = μ, fixed prior), reported as `val_loss` when the probe set
/// doubles as validation. A linear decoder head lets the unscaled targets be
/// fitted at all.
#[test]
fn overfit_probe_loss_decreases() {
    let (x, y) = cohort(30, 11);
    let kinds = vec![ValueKind::Continuous; 8];
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &x,
        y_val: &y,
        kinds: &kinds,
    };
    for seed in 0..4 {
        let m = masks(8, &[vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let mc = ModelConfig {
            decoder_head: crate::bdvae::DecoderHead::Linear,
            ..ModelConfig::default()
        };
        let model = BdvaeModel::init(Architecture::new(&m, &[1, 1], &mc).unwrap(), seed);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 30,
            lr_vae: 3e-3,
            lr_cls: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let out = train(model, &data, &cfg, &mut ()).unwrap();
        let det: Vec<f64> = out.log.epochs.iter().map(|r| r.val_loss).collect();
        let rises: Vec<usize> = (5..50).filter(|&i| det[i] > det[i - 1]).collect();
        assert!(rises.is_empty(), "seed {seed}: rises at {rises:?}");
        let noisy: Vec<f64> = out.log.epochs.iter().map(|r| r.train_loss).collect();
        let early = noisy[5..10].iter().sum::<f64>();
        let late = noisy[45..50].iter().sum::<f64>();
        assert!(late < early);
    }
}

#[test]
fn planted_signal_is_learned() {
    let (x, y) = cohort(160, 21);
    let (xv, yv) = cohort(80, 22);
    let kinds = vec![ValueKind::Continuous; 8];
    let data = TrainData {
        x_train: &x,
        y_train: &y,
        x_val: &xv,
        y_val: &yv,
        kinds: &kinds,
    };
    let out = train(model(13), &data, &quick_cfg(60), &mut ()).unwrap();
    let best = out.best_epoch.unwrap();
    assert!(out.log.epochs[best - 1].val_auc.unwrap() > 0.85);
    let logits = out.best.predict_logits(&xv).unwrap();
    assert!(roc_auc(&logits, &yv).unwrap() > 0.85);
}

#[test]
fn jsonl_log_has_one_line_per_epoch() {
    let log = TrainingLog {
        epochs: vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            train_auc: None,
            val_loss: 0.25,
            val_auc: Some(0.75),
            lr_vae: 1e-3,
            lr_cls: 1e-3,
        }],
        aborted: None,
    };
    assert_eq!(
        log.to_jsonl(),
        "{\"epoch\":1,\"train_loss\":0.5,\"train_auc\":null,\"val_loss\":0.25,\"val_auc\":0.75,\"lr_vae\":0.001,\"lr_cls\":0.001}\n"
    );
}
