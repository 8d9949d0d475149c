use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mta::CalibrationMode;
use crate::mtp::{PoolMethod, Weighting};

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

fn random_batch(cfg: &ModelConfig, ids: usize, per_id: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.resolution;
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    for id in 0..ids {
        for _ in 0..per_id {
            let data = (0..cfg.frames * h * w).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
            clips.push(Tensor::new(vec![1, cfg.frames, h, w], data).unwrap());
            labels.push(id);
        }
    }
    Batch { clips, labels }
}

#[test]
fn default_backbone_shape() {
    let (model, store) = MetaGait::new(ModelConfig::default()).unwrap();
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let clip = tr.constant(Tensor::ones(vec![1, 30, 64, 44]).unwrap());
    let mut recs = Vec::new();
    let f = model.backbone(&mut tr, &mut bind, clip, &mut recs).unwrap();
    assert_eq!(tr.shape(f), &[128, 30, 16, 11]);
    assert_eq!(recs.len(), 9);
}

#[test]
fn wrong_clip_shape_rejected() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let clip = tr.constant(Tensor::ones(vec![1, 5, 16, 12]).unwrap());
    assert!(model.forward_clip(&mut tr, &mut bind, clip).is_err());
}

#[test]
fn same_seed_same_outputs() {
    let cfg = tiny();
    let batch = random_batch(&cfg, 1, 1, 1);
    let (m1, s1) = MetaGait::new(cfg.clone()).unwrap();
    let (m2, s2) = MetaGait::new(cfg).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(m1.embed(&s1, &batch.clips[0]).unwrap(), m2.embed(&s2, &batch.clips[0]).unwrap());
}

#[test]
fn attention_off_is_a_plain_conv_stack() {
    let cfg = ModelConfig {
        mta_dims: vec![],
        ..tiny()
    };
    let (model, store) = MetaGait::new(cfg).unwrap();
    assert_eq!(model.blocks().count(), 0);
    let clip = random_batch(model.config(), 1, 1, 2).clips.remove(0);
    let mut tr = Trace::new();
    let mut bind = Binding::new(&store);
    let x = tr.constant(clip.clone());
    let f = model.backbone(&mut tr, &mut bind, x, &mut Vec::new()).unwrap();

    let mut tr2 = Trace::new();
    let mut y = tr2.constant(clip);
    for s in 1..=3 {
        let k = tr2.constant(store.get(&format!("stage{s}/conv")).unwrap().clone());
        y = tr2.conv(y, k, 2).unwrap();
        y = tr2.leaky_relu(y);
        if s < 3 {
            y = max_pool2(&mut tr2, y).unwrap();
        }
    }
    assert_eq!(tr.value(f), tr2.value(y));
}

#[test]
fn every_ablation_is_constructible() {
    use AttentionDim::*;
    let variants = vec![
        tiny().baseline(),
        ModelConfig { mta_dims: vec![Spatial], ..tiny() },
        ModelConfig { mta_dims: vec![Channel], ..tiny() },
        ModelConfig { mta_dims: vec![Temporal], ..tiny() },
        ModelConfig { mta_dims: vec![Temporal, Channel], ..tiny() },
        ModelConfig { mta_mode: CalibrationMode::Static, ..tiny() },
        ModelConfig { gate: false, ..tiny() },
        ModelConfig { kernels: vec![3], ..tiny() },
        ModelConfig { kernels: vec![1, 3], ..tiny() },
        ModelConfig { mta_stages: vec![3], ..tiny() },
        ModelConfig { pooling: vec![PoolMethod::Mean], pool_weighting: Weighting::None, ..tiny() },
        ModelConfig { pooling: vec![PoolMethod::Gem], ..tiny() },
        ModelConfig { pooling: vec![PoolMethod::Mean, PoolMethod::Max], ..tiny() },
        ModelConfig { pool_weighting: Weighting::Static, ..tiny() },
    ];
    let clip = random_batch(&tiny(), 1, 1, 3).clips.remove(0);
    for cfg in variants {
        let (model, store) = MetaGait::new(cfg.clone()).unwrap();
        let e = model.embed(&store, &clip).unwrap();
        assert_eq!(e.len(), 2 * 4, "{cfg:?}");
        assert!(e.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn loss_finite_and_positive_at_init() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let batch = random_batch(model.config(), 4, 2, 4);
    let t = Trainer::new(model, store);
    let (loss, _) = t.gradients(&batch).unwrap();
    assert!(loss.total.is_finite() && loss.total > 0.0);
    assert_eq!(loss.total, loss.triplet + loss.cross_entropy);
}

#[test]
fn fan_out_gradients_match_single_trace() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let batch = random_batch(model.config(), 2, 2, 5);
    let t = Trainer::new(model, store);
    let (loss, grads) = t.gradients(&batch).unwrap();

    let mut tr = Trace::new();
    let mut bind = Binding::new(&t.store);
    let l = t.model.batch_loss(&mut tr, &mut bind, &batch).unwrap();
    assert!((tr.value(l.total).item() - loss.total).abs() < 1e-12);
    let g = tr.backward(l.total).unwrap();
    for (name, &v) in bind.vars() {
        let want = g.data(v).unwrap();
        let got = &grads[name];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{name}");
        }
    }
}

#[test]
fn end_to_end_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let report = crate::gradcheck::check_model(&tiny(), 1e-3, 3, &mut rng).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.probes > 200);
}

#[test]
fn first_adam_step_is_about_lr() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let batch = random_batch(model.config(), 4, 2, 7);
    let mut t = Trainer::new(model, store.clone());
    let (_, grads) = t.gradients(&batch).unwrap();
    t.train_step(&batch).unwrap();
    let lr = t.model.config().learning_rate;
    for (name, g) in &grads {
        let before = store.get(name).unwrap().data();
        let after = t.store.get(name).unwrap().data();
        for ((a, b), gi) in after.iter().zip(before).zip(g) {
            if gi.abs() > 1e-6 && !name.ends_with("gem_p") {
                let step = (a - b).abs();
                assert!(step <= 10.0 * lr && step >= lr / 10.0, "{name}: {step}");
            }
        }
    }
}

#[test]
fn overfits_a_fixed_batch_and_is_deterministic() {
    let run = || {
        let (model, store) = MetaGait::new(tiny()).unwrap();
        let batch = random_batch(model.config(), 4, 2, 8);
        let mut t = Trainer::new(model, store);
        (0..200).map(|_| t.train_step(&batch).unwrap().total).collect::<Vec<f64>>()
    };
    let a = run();
    assert!(a[199] < a[0], "{} -> {}", a[0], a[199]);
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let batch = random_batch(model.config(), 4, 2, 9);
    let mut t = Trainer::new(model, store);
    t.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_trainer(&t)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, Checkpoint::from_trainer(&t));
    let t2 = loaded.into_trainer().unwrap();
    for clip in &batch.clips {
        let a = t.model.embed(&t.store, clip).unwrap();
        let b = t2.model.embed(&t2.store, clip).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn checkpoint_config_mismatch_rejected() {
    let (model, store) = MetaGait::new(tiny()).unwrap();
    let t = Trainer::new(model, store);
    let mut ck = Checkpoint::from_trainer(&t);
    ck.config.embed_dim = 8;
    assert!(matches!(ck.into_trainer(), Err(Error::Checkpoint(_))));
}

#[test]
fn nan_parameters_abort_with_non_finite_loss() {
    let (model, mut store) = MetaGait::new(tiny()).unwrap();
    let k = store.get_mut("stage1/conv").unwrap();
    k.data_mut()[0] = f64::NAN;
    let batch = random_batch(model.config(), 4, 2, 10);
    let mut t = Trainer::new(model, store);
    assert!(matches!(t.train_step(&batch), Err(Error::NonFiniteLoss { step: 1, .. })));
}
