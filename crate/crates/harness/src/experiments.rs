//! Experiment drivers shared by the CLI commands and the acceptance suite.

use log::{info, warn};
use mtrlab_core::advtrain::{adversarial_train, robust_eval, AdvTrainConfig, AdvTrainHistory, TaskCombinationSet};
use mtrlab_core::attacks::{evaluate_under_attack, AttackConfig, AttackEvalTable, AttackObjective};
use mtrlab_core::data::{generate_train_test, read_dataset, Dataset, GradientSandbox, GradientSandboxSpec};
use mtrlab_core::metrics::MetricKind;
use mtrlab_core::nn::{build_model, SharedBackboneModel};
use mtrlab_core::train::{train, EpochStats, TrainConfig};
use mtrlab_core::vulnerability::corollary1_prediction;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TheorySection};
use crate::error::{HarnessError, HarnessResult};

/// Train and test sets from files when configured, else generated.
pub fn load_data(cfg: &ExperimentConfig) -> HarnessResult<(Dataset, Dataset)> {
    let d = &cfg.data;
    match (&d.train_path, &d.test_path) {
        (Some(tr), Some(te)) => Ok((read_dataset(tr)?, read_dataset(te)?)),
        (None, None) => Ok(generate_train_test(d.train_size, d.test_size, cfg.seed, &d.scene_params())?),
        _ => Err(HarnessError::Config("data.train_path and data.test_path go together".into())),
    }
}

pub fn eval_indices(cfg: &ExperimentConfig, test: &Dataset) -> Vec<usize> {
    let n = cfg.data.eval_examples.unwrap_or(test.len()).min(test.len());
    (0..n).collect()
}

pub fn fresh_model(cfg: &ExperimentConfig, params: &mtrlab_core::data::SceneParams, seed: u64) -> HarnessResult<SharedBackboneModel> {
    Ok(build_model(&cfg.model.model_config(params, seed)?)?)
}

pub fn train_config(cfg: &ExperimentConfig, weights: Vec<(String, f64)>, seed: u64) -> TrainConfig {
    TrainConfig {
        weights,
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        sgd: cfg.training.sgd(),
        seed,
    }
}

/// Builds and trains a model on `weights` with the configured schedule.
pub fn train_model(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    weights: Vec<(String, f64)>,
    seed: u64,
) -> HarnessResult<(SharedBackboneModel, Vec<EpochStats>)> {
    let mut model = fresh_model(cfg, &train_ds.params, seed)?;
    let history = train(&mut model, train_ds, &train_config(cfg, weights, seed))?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryRow {
    pub m: usize,
    pub rho: f64,
    /// `√(mean ‖R‖²)` over the sandbox draws.
    pub empirical: f64,
    /// `σ·√((1 + (M−1)ρ)/M)`.
    pub predicted: f64,
    /// `σ/√M`.
    pub corollary: f64,
    pub rel_error: f64,
}

/// Monte-Carlo `√E‖R‖²` for every PSD-valid `(M, ρ)` of the grid.
pub fn theory_grid(section: &TheorySection, seed: u64) -> HarnessResult<Vec<TheoryRow>> {
    let mut cells = Vec::new();
    for &m in &section.task_counts {
        for &rho in &section.rhos {
            let spec = GradientSandboxSpec {
                dim: section.dim,
                tasks: m,
                variance: section.variance,
                rho,
                samples: section.samples,
                seed: seed ^ ((m as u64) << 32) ^ rho.to_bits(),
            };
            match spec.validate() {
                Ok(()) => cells.push(spec),
                Err(e) => warn!("skipping M={m}, rho={rho}: {e}"),
            }
        }
    }
    cells
        .par_iter()
        .map(|spec| {
            let m = spec.tasks;
            let mut sum = 0.0;
            for draw in GradientSandbox::new(spec.clone())? {
                let d = draw[0].len();
                let mut sq = 0.0;
                for k in 0..d {
                    let r = draw.iter().map(|g| g[k]).sum::<f64>() / m as f64;
                    sq += r * r;
                }
                sum += sq;
            }
            let empirical = (sum / spec.samples as f64).sqrt();
            let predicted = spec.predicted_joint_rms();
            let sigma = spec.variance.sqrt();
            let rel_error = if predicted > 0.0 {
                (empirical - predicted).abs() / predicted
            } else {
                empirical
            };
            Ok(TheoryRow {
                m,
                rho: spec.rho,
                empirical,
                predicted,
                corollary: sigma * corollary1_prediction(m)?,
                rel_error,
            })
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Main-task scores of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct MainScore {
    pub clean: f64,
    pub attacked: f64,
    pub metric: MetricKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub main: String,
    pub auxiliary: String,
    /// `(λ_a, score)` for every λ tried; `None` when training diverged.
    pub trials: Vec<(f64, Option<MainScore>)>,
    /// Index into `trials` of the λ with the best attacked metric.
    pub chosen: Option<usize>,
}

impl MatrixCell {
    pub fn chosen_score(&self) -> Option<(f64, &MainScore)> {
        let (l, s) = &self.trials[self.chosen?];
        s.as_ref().map(|s| (*l, s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixResult {
    pub tasks: Vec<String>,
    pub baselines: Vec<(String, Option<MainScore>)>,
    pub cells: Vec<MatrixCell>,
}

impl MatrixResult {
    pub fn baseline(&self, task: &str) -> Option<&MainScore> {
        self.baselines.iter().find(|(t, _)| t == task).and_then(|(_, s)| s.as_ref())
    }

    /// Relative attacked-metric improvement of a cell over its baseline.
    pub fn attacked_improvement(&self, cell: &MatrixCell) -> Option<f64> {
        let base = self.baseline(&cell.main)?;
        let (_, s) = cell.chosen_score()?;
        Some(base.metric.relative_improvement(s.attacked, base.attacked))
    }

    /// Signed relative change of the clean metric value against the baseline.
    pub fn clean_change(&self, cell: &MatrixCell) -> Option<f64> {
        let base = self.baseline(&cell.main)?;
        let (_, s) = cell.chosen_score()?;
        Some((s.clean - base.clean) / base.clean.abs().max(f64::MIN_POSITIVE))
    }

    /// `(improved, scored)` over cells whose trainings all converged.
    pub fn improved_fraction(&self) -> (usize, usize) {
        let vals: Vec<f64> = self.cells.iter().filter_map(|c| self.attacked_improvement(c)).collect();
        (vals.iter().filter(|v| **v > 0.0).count(), vals.len())
    }

    pub fn mean_clean_change(&self) -> f64 {
        let vals: Vec<f64> = self.cells.iter().filter_map(|c| self.clean_change(c)).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

fn score_main(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test: &Dataset,
    main: &str,
    weights: Vec<(String, f64)>,
    attack: &AttackConfig,
) -> HarnessResult<Option<MainScore>> {
    let trained = train_model(cfg, train_ds, weights.clone(), cfg.seed);
    let model = match trained {
        Ok((m, _)) => m,
        Err(HarnessError::Numeric(msg)) => {
            warn!("training {weights:?} diverged: {msg}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let idx = eval_indices(cfg, test);
    let table = evaluate_under_attack(
        &model,
        test,
        &idx,
        &AttackObjective::SingleTask(main.to_string()),
        attack,
        &[main],
    )?;
    let row = &table.rows[0];
    Ok(Some(MainScore {
        clean: row.clean,
        attacked: row.attacked,
        metric: row.metric,
    }))
}

/// Single-task baselines plus every ordered (main, auxiliary) pair with
/// each λ_a, all from one initialization seed and one shuffle order.
pub fn attack_matrix(cfg: &ExperimentConfig, train_ds: &Dataset, test: &Dataset) -> HarnessResult<MatrixResult> {
    let tasks = cfg.matrix.tasks.clone();
    if tasks.len() < 2 {
        return Err(HarnessError::Config("attack matrix needs at least 2 tasks".into()));
    }
    if cfg.matrix.lambdas.is_empty() {
        return Err(HarnessError::Config("matrix.lambdas is empty".into()));
    }
    let attack = cfg
        .attacks
        .first()
        .ok_or_else(|| HarnessError::Config("no attack configured".into()))?
        .to_config(cfg.seed)?;

    enum Job {
        Base(String),
        Pair(String, String, f64),
    }
    let mut jobs = Vec::new();
    for main in &tasks {
        jobs.push(Job::Base(main.clone()));
        for aux in tasks.iter().filter(|a| *a != main) {
            for &l in &cfg.matrix.lambdas {
                jobs.push(Job::Pair(main.clone(), aux.clone(), l));
            }
        }
    }
    let scores = jobs
        .par_iter()
        .map(|job| match job {
            Job::Base(m) => score_main(cfg, train_ds, test, m, vec![(m.clone(), 1.0)], &attack),
            Job::Pair(m, a, l) => score_main(cfg, train_ds, test, m, vec![(m.clone(), 1.0), (a.clone(), *l)], &attack),
        })
        .collect::<HarnessResult<Vec<_>>>()?;

    let mut baselines = Vec::new();
    let mut cells: Vec<MatrixCell> = Vec::new();
    for (job, score) in jobs.iter().zip(scores) {
        match job {
            Job::Base(m) => baselines.push((m.clone(), score)),
            Job::Pair(m, a, l) => {
                match cells.last_mut() {
                    Some(c) if c.main == *m && c.auxiliary == *a => c.trials.push((*l, score)),
                    _ => cells.push(MatrixCell {
                        main: m.clone(),
                        auxiliary: a.clone(),
                        trials: vec![(*l, score)],
                        chosen: None,
                    }),
                }
            }
        }
    }
    for c in &mut cells {
        let mut best: Option<(usize, &MainScore)> = None;
        for (i, (_, s)) in c.trials.iter().enumerate() {
            let Some(s) = s else { continue };
            let better = best.is_none_or(|(_, b)| s.metric.relative_improvement(s.attacked, b.attacked) > 0.0);
            if better {
                best = Some((i, s));
            }
        }
        c.chosen = best.map(|(i, _)| i);
        if let Some((l, s)) = c.chosen_score() {
            info!("{} + {} (lambda {l}): clean {:.4} attacked {:.4}", c.main, c.auxiliary, s.clean, s.attacked);
        }
    }
    Ok(MatrixResult { tasks, baselines, cells })
}

/// One seed of the adversarial-training comparison.
#[derive(Clone, Debug)]
pub struct AdvComparison {
    pub seed: u64,
    pub single: Vec<AttackEvalTable>,
    pub multi: Vec<AttackEvalTable>,
    pub single_history: AdvTrainHistory,
    pub multi_history: AdvTrainHistory,
}

pub fn adv_train_config(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<AdvTrainConfig> {
    Ok(AdvTrainConfig {
        attack: cfg.advtrain.attack.to_config(seed)?,
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        sgd: cfg.training.sgd(),
        seed,
    })
}

/// Adversarially trains `set` from a fresh model and runs the robust
/// evaluation suite against the main task.
pub fn adv_train_and_eval(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test: &Dataset,
    set: &TaskCombinationSet,
    seed: u64,
) -> HarnessResult<(SharedBackboneModel, AdvTrainHistory, Vec<AttackEvalTable>)> {
    let mut model = fresh_model(cfg, &train_ds.params, seed)?;
    let history = adversarial_train(&mut model, train_ds, set, &adv_train_config(cfg, seed)?)?;
    let idx = eval_indices(cfg, test);
    let tables = robust_eval(
        &model,
        test,
        &idx,
        &AttackObjective::SingleTask(set.main.clone()),
        &[set.main.as_str()],
        cfg.advtrain.eval_epsilon,
        seed,
    )?;
    Ok((model, history, tables))
}

/// Single-task vs multi-task adversarial training for one seed.
pub fn adv_comparison(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<AdvComparison> {
    let run_cfg = ExperimentConfig { seed, ..cfg.clone() };
    let (train_ds, test) = load_data(&run_cfg)?;
    let a = &cfg.advtrain;
    let aux: Vec<&str> = a.auxiliary.iter().map(String::as_str).collect();
    let sets = [
        TaskCombinationSet::single(&a.main),
        TaskCombinationSet::with_auxiliary(&a.main, &aux, a.lambda_a),
    ];
    let mut out = sets
        .par_iter()
        .map(|s| adv_train_and_eval(&run_cfg, &train_ds, &test, s, seed))
        .collect::<HarnessResult<Vec<_>>>()?;
    let (_, mh, mt) = out.pop().expect("two runs");
    let (_, sh, st) = out.pop().expect("two runs");
    Ok(AdvComparison {
        seed,
        single: st,
        multi: mt,
        single_history: sh,
        multi_history: mh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]);
        assert!(r > 0.8 && r < 1.0);
    }

    #[test]
    fn theory_grid_skips_invalid_cells() {
        let s = TheorySection {
            dim: 10,
            samples: 200,
            task_counts: vec![1, 3],
            rhos: vec![0.0, -0.6],
            ..TheorySection::default()
        };
        let rows = theory_grid(&s, 1).unwrap();
        // M=1 accepts any rho; M=3 rejects rho < -1/2
        assert_eq!(rows.len(), 3);
    }
}
