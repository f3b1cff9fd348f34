use mtrlab_core::data::{generate_dataset, sample_task_gradients, toy_task_spec, GradientSandboxSpec, SceneParams};
use mtrlab_core::nn::{build_model, ModelConfig};
use mtrlab_core::train::{train, TrainConfig};
use mtrlab_core::vulnerability::{collect_task_gradients, covariance_from_samples};

fn sandbox(tasks: usize, rho: f64, samples: usize, seed: u64) -> GradientSandboxSpec {
    GradientSandboxSpec {
        dim: 100,
        tasks,
        variance: 1.0,
        rho,
        samples,
        seed,
    }
}

#[test]
fn sandbox_second_moments_converge_at_root_n() {
    let rho = 0.5;
    for n in [1_000, 10_000, 100_000] {
        let grads = sample_task_gradients(&sandbox(4, rho, n, 17)).unwrap();
        let cov = covariance_from_samples(&grads).unwrap();
        // Var(r_iᵀr_j) = (1 + ρ²)/d for the equicorrelated construction
        let se_off = ((1.0 + rho * rho) / 100.0 / n as f64).sqrt();
        let se_diag = (2.0 / 100.0 / n as f64).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let (target, se) = if i == j { (1.0, se_diag) } else { (rho, se_off) };
                let err = (cov.raw[i][j] - target).abs();
                assert!(err <= 5.0 * se, "N={n} C[{i}][{j}] = {} (err {err}, se {se})", cov.raw[i][j]);
            }
        }
    }
}

/// Per-example products `r_segᵀ r_depth` of a jointly trained model.
fn seg_depth_products(correlated: bool) -> Vec<f64> {
    let params = SceneParams {
        height: 16,
        width: 16,
        correlated,
        ..SceneParams::default()
    };
    let train_ds = generate_dataset(128, 21, &params).unwrap();
    let test = generate_dataset(96, 22, &params).unwrap();
    let mut model = build_model(&ModelConfig {
        input_shape: [1, 16, 16],
        trunk_width: 8,
        trunk_depth: 3,
        head_width: 8,
        tasks: vec![toy_task_spec("seg", &params).unwrap(), toy_task_spec("depth", &params).unwrap()],
        seed: 5,
    })
    .unwrap();
    let weights = vec![("seg".to_string(), 0.5), ("depth".to_string(), 0.5)];
    train(&mut model, &train_ds, &TrainConfig::new(weights, 8)).unwrap();
    let idx: Vec<usize> = (0..test.len()).collect();
    let grads = collect_task_gradients(&model, &test, &idx, &["seg", "depth"], 1.0).unwrap();
    grads.iter().map(|g| g[0].dot(&g[1]).unwrap()).collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn shared_geometry_correlates_task_gradients() {
    let (mean, se) = mean_and_se(&seg_depth_products(true));
    assert!(mean > 3.0 * se, "correlated scenes: mean {mean}, se {se}");
    let (mean, se) = mean_and_se(&seg_depth_products(false));
    assert!(mean.abs() <= 3.0 * se, "independent scenes: mean {mean}, se {se}");
}
