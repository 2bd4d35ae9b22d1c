//! Training-loop behavior on real (tiny) data: convergence under the
//! error-target criterion, bit-reproducibility, and gap bookkeeping.

use genmeter_core::model::{Mode, NetworkSpec, StoppingReason};
use genmeter_core::synthdata::{generate, DatasetSpec};
use genmeter_core::trainer::{evaluate, train, Stopping, TrainConfig};

fn easy_dataset() -> genmeter_core::synthdata::LabeledDataset {
    let spec = DatasetSpec {
        n_samples: 80,
        image_hw: (16, 16),
        radius: (4.0, 5.0),
        ring_thickness: (1.5, 2.0),
        noise_std: 0.02,
        ..DatasetSpec::desk_default()
    };
    generate(&spec, 71).unwrap()
}

#[test]
fn separable_set_reaches_error_target() {
    let ds = easy_dataset();
    let part = ds.split.partition(0);
    let spec = NetworkSpec::vgg_like((16, 16), 2, 8, false, 0.0, false).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        lambda: 1.0,
        stopping: Stopping::TargetTrainError { epsilon: 0.01 },
        max_epochs: 60,
        error_thresholds: vec![0.01, 0.1],
        seed: 13,
    };
    let (ckpt, trace) = train(&spec, &ds, &part, &config).unwrap();
    assert_eq!(ckpt.meta.stopping_reason, StoppingReason::ThresholdMet);
    assert!(ckpt.meta.final_train_error.unwrap() <= 0.01);
    // The crossing bookkeeping is consistent with the epochs.
    let cross_01 = trace.first_crossing(0.01).expect("crossed the headline threshold");
    assert!(cross_01 <= trace.total_steps);
    let cross_10 = trace.first_crossing(0.1).expect("crossed the looser threshold first");
    assert!(cross_10 <= cross_01);
    assert_eq!(ckpt.meta.step_at_error_threshold, Some(cross_01));

    // Generalization gap bookkeeping stays in range.
    let test = evaluate(&ckpt, &ds, &part.test, "iid").unwrap();
    let gap = test.error - ckpt.meta.final_train_error.unwrap();
    assert!((-1.0..=1.0).contains(&gap), "gap {gap}");
}

#[test]
fn training_is_bit_reproducible() {
    let ds = easy_dataset();
    let part = ds.split.partition(0);
    let spec = NetworkSpec::vgg_like((16, 16), 1, 4, true, 0.25, false).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        lambda: 1.0,
        stopping: Stopping::TargetTrainError { epsilon: 0.001 },
        max_epochs: 3,
        error_thresholds: vec![0.1],
        seed: 21,
    };
    let (a, trace_a) = train(&spec, &ds, &part, &config).unwrap();
    let (b, trace_b) = train(&spec, &ds, &part, &config).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.state(), b.state());
    assert_eq!(trace_a, trace_b);

    let other = TrainConfig { seed: 22, ..config };
    let (c, _) = train(&spec, &ds, &part, &other).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn multitask_training_runs_and_emits_masks() {
    let ds = easy_dataset();
    let mut ds = ds;
    ds.split = genmeter_core::synthdata::make_folds(ds.len(), genmeter_core::synthdata::SplitScheme::FiveFold, 4).unwrap();
    let part = ds.split.partition(1);
    let spec = NetworkSpec::vgg_like((16, 16), 2, 4, true, 0.25, true).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        lambda: 0.2,
        stopping: Stopping::Patience { epochs: 3 },
        max_epochs: 8,
        error_thresholds: vec![0.1],
        seed: 5,
    };
    let (ckpt, trace) = train(&spec, &ds, &part, &config).unwrap();
    assert!(trace.epochs.len() <= 8);
    assert!(trace.epochs.iter().all(|e| e.val_risk.is_some()));
    let out = ckpt.forward(&ds.batch(&part.test), Mode::Eval, None).unwrap();
    let masks = out.masks.expect("decoder emits masks");
    assert_eq!(masks.shape(), &[part.test.len(), 16, 16]);
}

#[test]
fn combined_loss_without_masks_is_rejected() {
    let mut spec = DatasetSpec::desk_default();
    spec.n_samples = 20;
    spec.image_hw = (16, 16);
    spec.radius = (4.0, 5.0);
    spec.ring_thickness = (1.5, 2.0);
    spec.with_masks = false;
    let ds = generate(&spec, 3).unwrap();
    let part = ds.split.partition(0);
    let net = NetworkSpec::vgg_like((16, 16), 1, 4, false, 0.0, true).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        lambda: 0.2,
        stopping: Stopping::TargetTrainError { epsilon: 0.01 },
        max_epochs: 2,
        error_thresholds: vec![0.1],
        seed: 1,
    };
    assert!(train(&net, &ds, &part, &config).is_err());
}
