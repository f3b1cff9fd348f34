use mtrlab_core::advtrain::{adversarial_train, AdvTrainConfig, TaskCombinationSet};
use mtrlab_core::attacks::{AttackConfig, Steps};
use mtrlab_core::data::{generate_dataset, toy_task_spec, Dataset, SceneParams, TOY_TASKS};
use mtrlab_core::nn::{build_model, ModelConfig, SharedBackboneModel};
use mtrlab_core::train::{train, TrainConfig};

fn setup() -> (Dataset, SharedBackboneModel) {
    let p = SceneParams {
        height: 8,
        width: 8,
        ..SceneParams::default()
    };
    let data = generate_dataset(20, 12, &p).unwrap();
    let model = build_model(&ModelConfig {
        input_shape: [1, 8, 8],
        trunk_width: 4,
        trunk_depth: 2,
        head_width: 4,
        tasks: TOY_TASKS.iter().map(|t| toy_task_spec(t, &p).unwrap()).collect(),
        seed: 6,
    })
    .unwrap();
    (data, model)
}

fn config(epsilon: f64, epochs: usize) -> AdvTrainConfig {
    AdvTrainConfig {
        batch_size: 6,
        seed: 44,
        ..AdvTrainConfig::new(epsilon, epochs)
    }
}

#[test]
fn zero_budget_single_task_matches_plain_training_bitwise() {
    let (data, init) = setup();
    let cfg = config(0.0, 3);
    let mut adv = init.clone();
    let history = adversarial_train(&mut adv, &data, &TaskCombinationSet::single("seg"), &cfg).unwrap();
    let mut plain = init.clone();
    let tc: TrainConfig = cfg.as_train_config(vec![("seg".into(), 1.0)]);
    let stats = train(&mut plain, &data, &tc).unwrap();
    assert_eq!(adv, plain);
    for (r, s) in history.records.iter().zip(&stats) {
        assert_eq!(r.adv_loss.to_bits(), s.mean_loss.to_bits());
        assert_eq!(r.attack_gradient_passes, 0);
    }
}

#[test]
fn attack_budget_is_accounted_per_epoch() {
    let (data, mut model) = setup();
    let set = TaskCombinationSet::with_auxiliary("seg", &["depth"], 0.01);
    let cfg = config(4.0, 2);
    let steps = AttackConfig::pgd(4.0, Steps::Auto).resolved_steps().unwrap();
    let h = adversarial_train(&mut model, &data, &set, &cfg).unwrap();
    assert_eq!(h.attack_steps, steps);
    assert_eq!(h.minibatches_per_epoch, data.len().div_ceil(6));
    for e in 0..2 {
        assert_eq!(h.passes_in_epoch(e), set.subsets.len() * steps * h.minibatches_per_epoch);
        let recs: Vec<_> = h.records.iter().filter(|r| r.epoch == e).collect();
        assert_eq!(recs.len(), 2);
        for r in recs {
            assert_eq!(r.optimizer_steps, h.minibatches_per_epoch);
            assert!(r.adv_loss.is_finite() && r.clean_loss.is_finite());
        }
    }
}

#[test]
fn heads_outside_the_combination_set_are_untouched() {
    let (data, mut model) = setup();
    let before = model.clone();
    let set = TaskCombinationSet::with_auxiliary("seg", &["depth"], 0.01);
    adversarial_train(&mut model, &data, &set, &config(2.0, 1)).unwrap();
    for t in ["edge", "keypoint", "recon"] {
        for &i in &model.head_param_indices(t).unwrap() {
            assert_eq!(model.params()[i], before.params()[i], "{t}");
        }
    }
    for t in ["seg", "depth"] {
        let moved = model
            .head_param_indices(t)
            .unwrap()
            .iter()
            .any(|&i| model.params()[i].value != before.params()[i].value);
        assert!(moved, "{t} head did not train");
    }
}
