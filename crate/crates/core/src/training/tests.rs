use super::*;
use crate::data::TaskSpec;
use crate::network::NetworkShape;
use crate::schemes::Scheme;
use crate::tensor::Tensor;

fn one_param_store(p: f64, g: Option<f64>) -> ParamStore {
    let mut store = ParamStore::new();
    let id = store.add("w", ParamKind::Weight, Tensor::scalar(p));
    if let Some(g) = g {
        store.get_mut(id).tensor.accumulate_grad(&[g]).unwrap();
    }
    store
}

fn value(store: &ParamStore) -> f64 {
    store.iter().next().unwrap().1.tensor.data()[0]
}

#[test]
fn schedule_follows_milestones() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0).unwrap(), 0.1);
    assert!((cfg.lr_at(99).unwrap() - 0.1).abs() < 1e-15);
    assert!((cfg.lr_at(100).unwrap() - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(150).unwrap() - 0.001).abs() < 1e-15);
    assert!((cfg.lr_at(231).unwrap() - 1e-5).abs() < 1e-18);
    assert!(matches!(cfg.lr_at(260), Err(Error::Contract(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { milestones: vec![5, 5], ..TrainConfig::default() },
        TrainConfig { milestones: vec![300], ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn plain_sgd_step() {
    let mut store = one_param_store(1.0, Some(2.0));
    let mut state = SgdState::new(&store);
    sgd_step(&mut store, &mut state, 0.1, 0.0, 0.0, 0.0).unwrap();
    assert!((value(&store) - 0.8).abs() < 1e-15);
    assert!(store.iter().next().unwrap().1.tensor.grad().is_none());
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut store = one_param_store(1.5, Some(0.0));
    let mut state = SgdState::new(&store);
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0, 0.0).unwrap();
    assert_eq!(value(&store), 1.5);
}

#[test]
fn momentum_recursion() {
    let mut store = one_param_store(0.0, Some(1.0));
    let mut state = SgdState::new(&store);
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0, 0.0).unwrap();
    assert!((value(&store) + 0.1).abs() < 1e-15);
    store.iter_mut().next().unwrap().1.tensor.accumulate_grad(&[1.0]).unwrap();
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0, 0.0).unwrap();
    assert!((value(&store) + 0.29).abs() < 1e-15);
}

#[test]
fn missing_gradient_names_the_parameter() {
    let mut store = one_param_store(1.0, None);
    let mut state = SgdState::new(&store);
    let err = sgd_step(&mut store, &mut state, 0.1, 0.0, 0.0, 0.0).unwrap_err();
    assert!(err.to_string().contains("`w`"), "{err}");
}

#[test]
fn decay_skips_norm_parameters() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamKind::Weight, Tensor::scalar(1.0));
    let g = store.add("g", ParamKind::NormScale, Tensor::scalar(1.0));
    let h = store.add("h", ParamKind::StepScale, Tensor::scalar(1.0));
    for id in [w, g, h] {
        store.get_mut(id).tensor.accumulate_grad(&[0.0]).unwrap();
    }
    let mut state = SgdState::new(&store);
    sgd_step(&mut store, &mut state, 1.0, 0.0, 0.5, 0.0).unwrap();
    assert_eq!(store.get(w).tensor.data()[0], 0.5);
    assert_eq!(store.get(g).tensor.data()[0], 1.0);
    assert_eq!(store.get(h).tensor.data()[0], 1.0);
}

fn small_task() -> (Dataset, Dataset) {
    TaskSpec {
        train_per_class: 32,
        test_per_class: 16,
        ..TaskSpec::spirals()
    }
    .generate(1)
    .unwrap()
}

#[test]
fn zero_epochs_yield_no_records() {
    let (tr, te) = small_task();
    let mut net = HoNetwork::build(&NetworkShape::dense(Scheme::Euler, 6, 4, 2, 2), 0).unwrap();
    let cfg = TrainConfig { epochs: 0, milestones: vec![], ..TrainConfig::default() };
    assert!(train(&mut net, &tr, &te, &cfg).unwrap().is_empty());
}

#[test]
fn huge_learning_rate_diverges_in_one_epoch() {
    let (tr, te) = small_task();
    let mut net = HoNetwork::build(&NetworkShape::dense(Scheme::Rk4, 10, 4, 2, 2), 0).unwrap();
    let cfg = TrainConfig { batch_size: 16, ..TrainConfig::constant(1e9, 5) };
    let records = train(&mut net, &tr, &te, &cfg).unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0].diverged);
}

#[test]
fn runs_are_reproducible() {
    let (tr, te) = small_task();
    let shape = NetworkShape::dense(Scheme::Midpoint, 6, 4, 2, 2);
    let cfg = TrainConfig { batch_size: 16, ..TrainConfig::constant(0.05, 3) };
    let run = || {
        let mut net = HoNetwork::build(&shape, 3).unwrap();
        let mut r = train(&mut net, &tr, &te, &cfg).unwrap();
        r.iter_mut().for_each(|e| e.seconds = 0.0);
        (r, net.store.flatten())
    };
    assert_eq!(run(), run());
}

#[test]
fn step_scales_move_only_when_learnable() {
    let (tr, te) = small_task();
    let cfg = TrainConfig { batch_size: 16, ..TrainConfig::constant(0.05, 1) };
    let mut adaptive =
        HoNetwork::build(&NetworkShape::dense(Scheme::VernerAdaptive, 30, 3, 2, 2), 0).unwrap();
    train(&mut adaptive, &tr, &te, &cfg).unwrap();
    assert_ne!(adaptive.step_scales(), vec![1.0]);
    let mut fixed =
        HoNetwork::build(&NetworkShape::dense(Scheme::VernerFixed, 30, 3, 2, 2), 0).unwrap();
    train(&mut fixed, &tr, &te, &cfg).unwrap();
    assert!(fixed.step_scales().is_empty());
}

#[test]
fn clamp_holds_after_every_step() {
    let (tr, te) = small_task();
    let mut shape = NetworkShape::dense(Scheme::VernerAdaptive, 30, 3, 2, 2);
    shape.h_clamp = true;
    let mut net = HoNetwork::build(&shape, 0).unwrap();
    let cfg = TrainConfig { batch_size: 16, ..TrainConfig::constant(0.05, 1) };
    let mut trainer = Trainer::new(cfg, &net).unwrap();
    trainer
        .run(&mut net, &tr, &te, &mut |n, _, _| {
            assert!(n.step_scales().iter().all(|h| (0.125..=4.0).contains(h)));
            Ok(())
        })
        .unwrap();
}

#[test]
fn correct_counts_argmax_hits() {
    let logits = Tensor::new(vec![3, 2], vec![0.1, 0.9, 2.0, -1.0, 0.0, 0.5]).unwrap();
    assert_eq!(correct(&logits, &[1, 0, 0]), 2);
}

#[test]
fn resume_continues_bit_exactly() {
    let (tr, te) = small_task();
    let shape = NetworkShape::dense(Scheme::Rk4, 10, 4, 2, 2);
    let cfg = TrainConfig { batch_size: 16, milestones: vec![2], ..TrainConfig::constant(0.05, 4) };
    let mut full_net = HoNetwork::build(&shape, 8).unwrap();
    let mut full = Trainer::new(cfg.clone(), &full_net).unwrap();
    let mut saved = None;
    let strip = |mut r: Vec<EpochRecord>| {
        r.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    };
    let all = full
        .run(&mut full_net, &tr, &te, &mut |n, t, _| {
            if t.epoch == 2 {
                saved = Some(t.checkpoint(n).to_bytes().unwrap());
            }
            Ok(())
        })
        .unwrap();
    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let (mut trainer, mut net) = Trainer::resume(cfg, &ck).unwrap();
    let rest = trainer.run(&mut net, &tr, &te, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(strip(rest), strip(all[2..].to_vec()));
    assert_eq!(
        net.store.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        full_net.store.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn per_sample_losses() {
    let logits = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap();
    let l = per_sample_cross_entropy(&logits, &[1, 1]);
    assert!((l[0] - 2f64.ln()).abs() < 1e-15);
    assert!((l[1] - 1000.0).abs() < 1e-9);
}
