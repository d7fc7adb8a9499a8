mod common;

use made::optim::{resample_unlimited_mask, train_with_observer, MaskSchedule};
use made::{
    test_nll, train, verify_autoregressive, Activation, Architecture, Dataset, MadeError,
    MaskPolicy, ModelFile, Optimizer, TrainConfig,
};
use ndarray::Array2;

fn config(optimizer: Optimizer, policy: MaskPolicy, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer,
        max_epochs,
        mask_policy: policy,
        valid_masks_for_unlimited: 8,
        test_masks_for_unlimited: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn sgd_reduces_training_nll() {
    let data = common::teacher_dataset(4, (2000, 500, 500), 40);
    let arch = Architecture::new(4, vec![16], Activation::Relu).with_direct(true);
    let cfg = config(
        Optimizer::Sgd {
            learning_rate: 0.05,
        },
        MaskPolicy::Fixed,
        5,
    );
    let out = train::<f64>(&arch, &data, &cfg).unwrap();
    let epochs = &out.report.epochs;
    assert_eq!(epochs.len(), 6);
    assert_eq!(epochs[0].epoch, 0);
    assert!(epochs[5].train_nll < epochs[0].train_nll, "{epochs:?}");
    assert!(out.report.best_valid_nll < epochs[0].valid_nll);
}

#[test]
fn keeps_the_parameters_of_the_best_epoch() {
    let data = common::teacher_dataset(5, (600, 200, 200), 41);
    let arch = Architecture::new(5, vec![12], Activation::Softplus);
    // A large step makes validation NLL bounce, so the last epoch is rarely best.
    let cfg = TrainConfig {
        lookahead: 3,
        ..config(
            Optimizer::Sgd { learning_rate: 2.0 },
            MaskPolicy::Cycle(3),
            40,
        )
    };
    let mut seen = Vec::new();
    let out = train_with_observer::<f64>(&arch, &data, &cfg, |r| seen.push(*r)).unwrap();
    assert_eq!(seen, out.report.epochs);
    let best = out.report.best_epoch;
    let min = seen
        .iter()
        .map(|r| r.valid_nll)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(seen[best].valid_nll, min);
    assert_eq!(out.report.best_valid_nll, min);
    let schedule = MaskSchedule::new(&arch, cfg.mask_policy, cfg.seed).unwrap();
    let valid_masks = schedule
        .evaluation_masks(
            made::seed::Stream::ValidMasks,
            cfg.valid_masks_for_unlimited,
        )
        .unwrap();
    let again = test_nll(&out.params, &valid_masks, data.valid.view())
        .unwrap()
        .mean;
    assert_eq!(again, min);
    if out.report.stopped_early {
        assert_eq!(seen.len() - 1, best + cfg.lookahead);
    }
    // Cycling visits the list round-robin, one mask per update.
    for (step, &m) in out.report.mask_usage.iter().enumerate() {
        assert_eq!(m, step as u64 % 3);
    }
}

#[test]
fn single_precision_training_runs() {
    let data = common::teacher_dataset(4, (400, 100, 100), 42);
    let arch = Architecture::new(4, vec![8], Activation::Relu);
    let cfg = config(
        Optimizer::Adagrad {
            learning_rate: 0.05,
            epsilon: 1e-6,
        },
        MaskPolicy::Unlimited,
        3,
    );
    let out = train::<f32>(&arch, &data, &cfg).unwrap();
    assert_eq!(out.test_masks.len(), 16);
    assert!(out.report.best_valid_nll <= out.report.epochs[0].valid_nll);
}

#[test]
fn rejects_empty_and_mismatched_data() {
    let arch = Architecture::new(3, vec![4], Activation::Relu);
    let full = Array2::<u8>::zeros((4, 3));
    let empty = Dataset::new("e", Array2::zeros((0, 3)), full.clone(), full.clone()).unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(
        train::<f64>(&arch, &empty, &cfg),
        Err(MadeError::Config(_))
    ));
    let wide = Dataset::new(
        "w",
        Array2::zeros((4, 5)),
        Array2::zeros((4, 5)),
        Array2::zeros((4, 5)),
    )
    .unwrap();
    assert!(matches!(
        train::<f64>(&arch, &wide, &cfg),
        Err(MadeError::Config(_))
    ));
}

#[test]
fn unlimited_masks_are_reproducible_and_varied() {
    let arch = Architecture::new(100, vec![20, 20], Activation::Relu).with_direct(true);
    let a = resample_unlimited_mask(7, 3, &arch).unwrap();
    assert_eq!(a, resample_unlimited_mask(7, 3, &arch).unwrap());
    let orderings: Vec<_> = (0..100)
        .map(|s| {
            resample_unlimited_mask(s, 3, &arch)
                .unwrap()
                .ordering()
                .clone()
        })
        .collect();
    assert!(orderings.iter().any(|o| o != &orderings[0]));
    assert!(verify_autoregressive(&a).passed());
}

#[test]
fn saved_models_reproduce_test_nll_bit_for_bit() {
    let data = common::teacher_dataset(6, (500, 100, 300), 43);
    let arch = Architecture::new(6, vec![10, 10], Activation::Relu)
        .with_direct(true)
        .with_conditioning(true);
    let cfg = config(Optimizer::default(), MaskPolicy::Cycle(4), 3);
    let out = train::<f64>(&arch, &data, &cfg).unwrap();
    let before = test_nll(&out.params, &out.test_masks, data.test.view()).unwrap();

    let mut model = ModelFile::new(out.params, cfg);
    model.dataset = Some("teacher".into());
    model.best_valid_nll = Some(out.report.best_valid_nll);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.made");
    model.save(&path).unwrap();
    let loaded = ModelFile::load(&path).unwrap();
    let after = test_nll(
        &loaded.params,
        &loaded.test_masks(None).unwrap(),
        data.test.view(),
    )
    .unwrap();
    assert_eq!(before.mean.to_bits(), after.mean.to_bits());
    assert_eq!(before.ci95.to_bits(), after.ci95.to_bits());
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
}

/// Data drawn from a trained model scores close to that model's entropy.
#[test]
fn samples_score_near_the_model_entropy() {
    let data = common::teacher_dataset(8, (1500, 300, 300), 44);
    let arch = Architecture::new(8, vec![16], Activation::Relu).with_direct(true);
    let out = train::<f64>(
        &arch,
        &data,
        &config(Optimizer::default(), MaskPolicy::Fixed, 10),
    )
    .unwrap();
    let masks = &out.test_masks[0];
    let pmf = made::brute_force_pmf(&out.params, masks).unwrap();
    let entropy: f64 = pmf.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let drawn = made::sample(&out.params, masks, 20_000, &mut common::rng(45)).unwrap();
    let est = test_nll(&out.params, std::slice::from_ref(masks), drawn.view()).unwrap();
    assert!(
        (est.mean - entropy).abs() < 3.0 * est.ci95 / 1.96 + 1e-3,
        "{} vs {entropy}",
        est.mean
    );
}
