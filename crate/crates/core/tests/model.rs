use mtrlab_core::data::{generate_dataset, toy_task_spec, SceneParams, TOY_TASKS};
use mtrlab_core::nn::{
    build_model, decode_checkpoint, encode_checkpoint, load_checkpoint_bytes, multitask_loss, task_loss, uniform_weights,
    LossKind, ModelConfig, SgdConfig, SharedBackboneModel, Target, TaskSpec,
};
use mtrlab_core::train::{train_step, TrainConfig};
use mtrlab_core::Tensor;
use proptest::prelude::*;

fn small_params() -> SceneParams {
    SceneParams {
        height: 8,
        width: 8,
        ..SceneParams::default()
    }
}

fn toy_model(seed: u64) -> SharedBackboneModel {
    let p = small_params();
    build_model(&ModelConfig {
        input_shape: [1, 8, 8],
        trunk_width: 4,
        trunk_depth: 2,
        head_width: 4,
        tasks: TOY_TASKS.iter().map(|t| toy_task_spec(t, &p).unwrap()).collect(),
        seed,
    })
    .unwrap()
}

#[test]
fn every_task_has_one_disjoint_head() {
    let model = toy_model(1);
    let trunk = model.trunk_param_indices();
    let mut seen = trunk.clone();
    for t in TOY_TASKS {
        let head = model.head_param_indices(t).unwrap();
        assert!(!head.is_empty());
        for i in head {
            assert!(!seen.contains(&i), "parameter {i} shared");
            seen.push(i);
        }
    }
    seen.sort();
    assert_eq!(seen, (0..model.params().len()).collect::<Vec<_>>());
}

#[test]
fn mismatched_head_resolution_is_rejected() {
    let err = build_model(&ModelConfig {
        input_shape: [1, 8, 8],
        trunk_width: 4,
        trunk_depth: 1,
        head_width: 4,
        tasks: vec![TaskSpec::new("seg", LossKind::PixelCrossEntropy, &[4, 4, 4])],
        seed: 0,
    });
    assert!(err.is_err());
}

#[test]
fn uniform_weights_give_the_mean_task_loss() {
    let data = generate_dataset(3, 5, &small_params()).unwrap();
    let model = toy_model(2);
    for m in 1..=TOY_TASKS.len() {
        let tasks = &TOY_TASKS[..m];
        let (x, targets) = data.batch(&[0, 1, 2], tasks).unwrap();
        let joint = multitask_loss(&model, &x, &targets, &uniform_weights(tasks)).unwrap();
        let mean = tasks
            .iter()
            .map(|t| task_loss(&model, &x, &targets[*t], t).unwrap())
            .sum::<f64>()
            / m as f64;
        assert!((joint - mean).abs() <= 1e-12 * mean.abs().max(1.0), "M={m}: {joint} vs {mean}");
    }
}

#[test]
fn training_step_leaves_other_heads_alone() {
    let data = generate_dataset(4, 6, &small_params()).unwrap();
    let weights = vec![("seg".to_string(), 1.0), ("depth".to_string(), 0.5)];
    let (x, targets) = data.batch(&[0, 1, 2, 3], &["seg", "depth"]).unwrap();
    let mut with = toy_model(3);
    let mut without = toy_model(3);
    let before = with.clone();
    let cfg = TrainConfig::new(weights.clone(), 1);
    train_step(&mut with, &mut cfg.optimizer(), &x, &targets, &weights).unwrap();
    let mut targets_seg = targets.clone();
    targets_seg.remove("depth");
    train_step(&mut without, &mut cfg.optimizer(), &x, &targets_seg, &weights[..1]).unwrap();
    for &i in &with.head_param_indices("seg").unwrap() {
        assert_ne!(with.params()[i].value, before.params()[i].value);
    }
    for t in ["edge", "keypoint", "recon"] {
        for &i in &with.head_param_indices(t).unwrap() {
            assert_eq!(with.params()[i].value, before.params()[i].value, "{t} head moved");
            assert_eq!(without.params()[i].value, before.params()[i].value);
        }
    }
    for &i in &without.head_param_indices("depth").unwrap() {
        assert_eq!(without.params()[i].value, before.params()[i].value);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut model = toy_model(4);
    let bytes = encode_checkpoint(&model);
    let entries = decode_checkpoint(&bytes).unwrap();
    assert_eq!(entries.len(), model.params().len());
    // weights are stored as f32
    let mut original = model.clone();
    for p in original.params_mut() {
        p.value = p.value.map(|v| v as f32 as f64);
    }
    for p in model.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    load_checkpoint_bytes(&mut model, &bytes).unwrap();
    assert_eq!(model, original);
    assert_eq!(encode_checkpoint(&model), bytes);
    let mut other = toy_model(4);
    let truncated = &bytes[..bytes.len() - 3];
    assert!(load_checkpoint_bytes(&mut other, truncated).is_err());
}

#[test]
fn sgd_defaults_are_positive() {
    let s = SgdConfig::default();
    assert!(s.lr > 0.0 && s.momentum >= 0.0 && s.weight_decay >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 2 * 16),
        labels in prop::collection::vec(0usize..2, 16),
        pred in prop::collection::vec(-5.0f64..5.0, 16),
        target in prop::collection::vec(-5.0f64..5.0, 16),
    ) {
        let specs = vec![
            TaskSpec::new("c", LossKind::PixelCrossEntropy, &[2, 4, 4]),
            TaskSpec::new("a", LossKind::L1, &[1, 4, 4]),
            TaskSpec::new("s", LossKind::Mse, &[1, 4, 4]),
        ];
        for spec in specs {
            let mut tape = mtrlab_core::Tape::new();
            let (out, tgt) = match spec.loss {
                LossKind::PixelCrossEntropy => (
                    tape.constant(Tensor::new(vec![1, 2, 4, 4], logits.clone()).unwrap()),
                    Target::Classes { shape: [1, 4, 4], labels: labels.clone() },
                ),
                _ => (
                    tape.constant(Tensor::new(vec![1, 1, 4, 4], pred.clone()).unwrap()),
                    Target::Dense(Tensor::new(vec![1, 1, 4, 4], target.clone()).unwrap()),
                ),
            };
            let l = mtrlab_core::nn::task_loss_var(&mut tape, out, &tgt, spec.loss, None).unwrap();
            prop_assert!(tape.value(l).item().unwrap() >= 0.0);
        }
    }
}
