use mtrlab_core::attacks::{
    evaluate_under_attack, run_attack, AttackConfig, AttackObjective, InputObjective, Steps, TaskObjective,
};
use mtrlab_core::data::{generate_dataset, toy_task_spec, Dataset, SceneParams, TOY_TASKS};
use mtrlab_core::nn::{build_model, ModelConfig, SharedBackboneModel};
use mtrlab_core::train::{train, TrainConfig};

fn params(side: usize) -> SceneParams {
    SceneParams {
        height: side,
        width: side,
        ..SceneParams::default()
    }
}

fn model(side: usize, seed: u64) -> SharedBackboneModel {
    let p = params(side);
    build_model(&ModelConfig {
        input_shape: [1, side, side],
        trunk_width: 6,
        trunk_depth: 2,
        head_width: 6,
        tasks: TOY_TASKS.iter().map(|t| toy_task_spec(t, &p).unwrap()).collect(),
        seed,
    })
    .unwrap()
}

#[test]
fn pgd_with_random_start_raises_the_loss() {
    let data = generate_dataset(20, 8, &params(8)).unwrap();
    let mut raised = 0;
    let mut runs = 0;
    for m in 0..5u64 {
        let net = model(8, m);
        for (k, task) in TOY_TASKS.iter().enumerate() {
            for i in 0..data.len() / 5 {
                let idx = (i * 5 + k + m as usize) % data.len();
                let (x, targets) = data.example(idx, &[task]).unwrap();
                let obj = TaskObjective::new(&net, &targets, &AttackObjective::SingleTask(task.to_string())).unwrap();
                let cfg = AttackConfig::pgd(4.0, Steps::Auto).with_seed(m * 1000 + idx as u64);
                let out = run_attack(&obj, &x, &cfg).unwrap();
                raised += usize::from(obj.loss(&out.x_adv).unwrap() >= obj.loss(&x).unwrap());
                runs += 1;
            }
        }
    }
    assert!(raised * 100 >= runs * 99, "{raised}/{runs} runs raised the loss");
}

fn trained(data: &Dataset) -> SharedBackboneModel {
    let mut net = model(16, 2);
    let weights = vec![("seg".to_string(), 0.5), ("depth".to_string(), 0.5)];
    train(&mut net, data, &TrainConfig::new(weights, 6)).unwrap();
    net
}

#[test]
fn single_task_attack_hurts_its_task_more_than_a_joint_attack() {
    let p = params(16);
    let train_ds = generate_dataset(96, 31, &p).unwrap();
    let test = generate_dataset(32, 32, &p).unwrap();
    let net = trained(&train_ds);
    let idx: Vec<usize> = (0..test.len()).collect();
    let cfg = AttackConfig::pgd(4.0, Steps::Auto).with_seed(3);
    let single = evaluate_under_attack(&net, &test, &idx, &AttackObjective::SingleTask("seg".into()), &cfg, &["seg"]).unwrap();
    let joint = evaluate_under_attack(
        &net,
        &test,
        &idx,
        &AttackObjective::MultiTask(vec![("seg".into(), 0.5), ("depth".into(), 0.5)]),
        &cfg,
        &["seg"],
    )
    .unwrap();
    let (s, j) = (single.rows[0].attacked, joint.rows[0].attacked);
    assert!(s <= j, "single-task mIoU {s} vs joint {j}");
    assert!(single.rows[0].clean == joint.rows[0].clean);
}

#[test]
fn zero_epsilon_evaluation_is_clean_evaluation() {
    let data = generate_dataset(6, 4, &params(8)).unwrap();
    let net = model(8, 1);
    let idx: Vec<usize> = (0..data.len()).collect();
    for kind in [AttackConfig::fgsm(0.0), AttackConfig::pgd(0.0, Steps::Fixed(5)), AttackConfig::mim(0.0, Steps::Fixed(5))] {
        let t = evaluate_under_attack(&net, &data, &idx, &AttackObjective::SingleTask("seg".into()), &kind, &TOY_TASKS).unwrap();
        for r in &t.rows {
            assert_eq!(r.clean.to_bits(), r.attacked.to_bits(), "{} {}", t.attack, r.task);
        }
        assert_eq!(t.clean_objective.to_bits(), t.attacked_objective.to_bits());
        assert_eq!(t.gradient_passes, 0);
    }
}

#[test]
fn evaluation_is_reproducible() {
    let data = generate_dataset(6, 4, &params(8)).unwrap();
    let net = model(8, 1);
    let idx: Vec<usize> = (0..data.len()).collect();
    let cfg = AttackConfig::mim(4.0, Steps::Fixed(4)).with_seed(9);
    let obj = AttackObjective::SingleTask("depth".into());
    let a = evaluate_under_attack(&net, &data, &idx, &obj, &cfg, &["seg", "depth"]).unwrap();
    let b = evaluate_under_attack(&net, &data, &idx, &obj, &cfg, &["seg", "depth"]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.gradient_passes, 4 * data.len());
}
