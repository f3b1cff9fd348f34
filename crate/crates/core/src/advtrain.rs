//! Adversarial training over a set of task combinations: for every
//! minibatch and every subset `S_t` in order, craft a PGD example against
//! `L_t = Σ λ_i ℓ_i` and take one optimizer step on it.

use crate::attacks::{
    evaluate_under_attack, run_attack, AttackConfig, AttackEvalTable, AttackKind, AttackObjective, Steps,
    TaskObjective,
};
use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::nn::{validate_weights, SgdConfig, SharedBackboneModel};
use crate::train::{epoch_batches, train_step, TrainConfig};

/// Ordered task subsets `S_t`, each with its loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCombinationSet {
    pub main: String,
    pub subsets: Vec<Vec<(String, f64)>>,
}

impl TaskCombinationSet {
    /// `S = {{T_m}}`.
    pub fn single(main: &str) -> Self {
        Self {
            main: main.to_string(),
            subsets: vec![vec![(main.to_string(), 1.0)]],
        }
    }

    /// `S = {{T_m}, {T_m, T_a…}}` with weight 1 on the main task and
    /// `lambda_a` on each auxiliary task.
    pub fn with_auxiliary(main: &str, auxiliary: &[&str], lambda_a: f64) -> Self {
        let mut joint = vec![(main.to_string(), 1.0)];
        joint.extend(auxiliary.iter().map(|a| (a.to_string(), lambda_a)));
        Self {
            main: main.to_string(),
            subsets: vec![vec![(main.to_string(), 1.0)], joint],
        }
    }

    pub fn validate(&self, model: &SharedBackboneModel) -> Result<()> {
        if self.subsets.is_empty() {
            return Err(Error::invalid("task combination set is empty"));
        }
        for (i, s) in self.subsets.iter().enumerate() {
            validate_weights(s).map_err(|e| Error::invalid(format!("subset {i}: {e}")))?;
            if !s.iter().any(|(t, _)| *t == self.main) {
                return Err(Error::invalid(format!("subset {i} does not contain main task `{}`", self.main)));
            }
            for (t, _) in s {
                model.task(t)?;
            }
        }
        Ok(())
    }

    fn all_tasks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (t, _) in self.subsets.iter().flatten() {
            if !out.contains(&t.as_str()) {
                out.push(t);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvTrainConfig {
    /// PGD used to craft training examples.
    pub attack: AttackConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl AdvTrainConfig {
    /// PGD at `epsilon` with the automatic step schedule.
    pub fn new(epsilon: f64, epochs: usize) -> Self {
        Self {
            attack: AttackConfig::pgd(epsilon, Steps::Auto),
            epochs,
            batch_size: 16,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }

    /// The plain-training configuration with the same schedule and seed.
    pub fn as_train_config(&self, weights: Vec<(String, f64)>) -> TrainConfig {
        TrainConfig {
            weights,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: self.sgd.clone(),
            seed: self.seed,
        }
    }
}

/// Per-epoch, per-subset record.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvEpochRecord {
    pub epoch: usize,
    pub subset: usize,
    /// Mean `L_t` on clean minibatches, before the step.
    pub clean_loss: f64,
    /// Mean `L_t` on the crafted minibatches, before the step.
    pub adv_loss: f64,
    pub attack_generations: usize,
    pub attack_gradient_passes: usize,
    pub optimizer_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdvTrainHistory {
    pub records: Vec<AdvEpochRecord>,
    pub minibatches_per_epoch: usize,
    pub attack_steps: usize,
}

impl AdvTrainHistory {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,subset_id,clean_loss,adv_loss,attack_generations,attack_gradient_passes,optimizer_steps\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.subset, r.clean_loss, r.adv_loss, r.attack_generations, r.attack_gradient_passes, r.optimizer_steps
            ));
        }
        out
    }

    /// Attack gradient passes summed over the subsets of `epoch`.
    pub fn passes_in_epoch(&self, epoch: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.attack_gradient_passes)
            .sum()
    }
}

pub fn adversarial_train(
    model: &mut SharedBackboneModel,
    dataset: &Dataset,
    set: &TaskCombinationSet,
    config: &AdvTrainConfig,
) -> Result<AdvTrainHistory> {
    adversarial_train_with(model, dataset, set, config, &mut |_, _| Ok(()))
}

/// As [`adversarial_train`], calling `on_epoch` with the records so far
/// after every epoch.
pub fn adversarial_train_with(
    model: &mut SharedBackboneModel,
    dataset: &Dataset,
    set: &TaskCombinationSet,
    config: &AdvTrainConfig,
    on_epoch: &mut dyn FnMut(&AdvTrainHistory, &SharedBackboneModel) -> Result<()>,
) -> Result<AdvTrainHistory> {
    set.validate(model)?;
    if config.attack.kind == AttackKind::Fgsm {
        return Err(Error::invalid("adversarial training uses an iterative attack"));
    }
    config.attack.validate()?;
    let tc = config.as_train_config(set.subsets[0].clone());
    tc.validate()?;
    let names = set.all_tasks();
    let attack_steps = if config.attack.epsilon == 0.0 {
        0
    } else {
        config.attack.resolved_steps()?
    };
    let mut opt = tc.optimizer();
    let mut history = AdvTrainHistory {
        attack_steps,
        ..AdvTrainHistory::default()
    };
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let batches = epoch_batches(dataset.len(), config.batch_size, config.seed, epoch);
        history.minibatches_per_epoch = batches.len();
        let mut recs: Vec<AdvEpochRecord> = (0..set.subsets.len())
            .map(|subset| AdvEpochRecord {
                epoch,
                subset,
                clean_loss: 0.0,
                adv_loss: 0.0,
                attack_generations: 0,
                attack_gradient_passes: 0,
                optimizer_steps: 0,
            })
            .collect();
        for (b, idx) in batches.iter().enumerate() {
            let (x, targets) = dataset.batch(idx, &names)?;
            for (t, weights) in set.subsets.iter().enumerate() {
                let tag = |e: Error| match e {
                    Error::NonFinite { op } => Error::NonFinite {
                        op: format!("epoch {epoch} batch {b} subset {t}: {op}"),
                    },
                    other => other,
                };
                let (x_adv, clean, passes) = {
                    let obj = TaskObjective::new(model, &targets, &AttackObjective::MultiTask(weights.clone()))?;
                    let cfg = AttackConfig {
                        seed: splitmix64(config.seed ^ splitmix64(((epoch as u64) << 40) | ((b as u64) << 8) | t as u64)),
                        ..config.attack.clone()
                    };
                    let out = run_attack(&obj, &x, &cfg).map_err(tag)?;
                    let clean = if out.gradient_passes() == 0 {
                        None
                    } else {
                        Some(crate::attacks::InputObjective::loss(&obj, &x).map_err(tag)?)
                    };
                    let passes = out.gradient_passes();
                    (out.x_adv, clean, passes)
                };
                let adv = train_step(model, &mut opt, &x_adv, &targets, weights).map_err(tag)?;
                let r = &mut recs[t];
                r.clean_loss += clean.unwrap_or(adv);
                r.adv_loss += adv;
                r.attack_generations += 1;
                r.attack_gradient_passes += passes;
                r.optimizer_steps += 1;
            }
        }
        let nb = batches.len() as f64;
        for mut r in recs {
            r.clean_loss /= nb;
            r.adv_loss /= nb;
            history.records.push(r);
        }
        on_epoch(&history, model)?;
    }
    Ok(history)
}

/// Clean, PGD50, PGD100 and MIM100 evaluation at `epsilon`.
pub fn robust_eval(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    objective: &AttackObjective,
    score_tasks: &[&str],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<AttackEvalTable>> {
    let suite = [
        AttackConfig::pgd(epsilon, Steps::Fixed(50)),
        AttackConfig::pgd(epsilon, Steps::Fixed(100)),
        AttackConfig::mim(epsilon, Steps::Fixed(100)),
    ];
    suite
        .iter()
        .map(|cfg| {
            evaluate_under_attack(
                model,
                dataset,
                indices,
                objective,
                &AttackConfig { seed, ..cfg.clone() },
                score_tasks,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_style_set() {
        let s = TaskCombinationSet::with_auxiliary("seg", &["depth"], 0.01);
        assert_eq!(s.subsets.len(), 2);
        assert_eq!(s.subsets[0], vec![("seg".to_string(), 1.0)]);
        assert_eq!(s.subsets[1][1], ("depth".to_string(), 0.01));
        assert_eq!(s.all_tasks(), vec!["seg", "depth"]);
    }
}
