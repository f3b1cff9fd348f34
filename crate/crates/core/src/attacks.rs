//! L∞-bounded untargeted attacks: FGSM, PGD and MIM.
//!
//! `epsilon` and `step_size` are given on the 0–255 pixel scale; inputs
//! live in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, MetricKind};
use crate::nn::{validate_weights, LossKind, ParamMode, PixelWeights, SharedBackboneModel, Target, TargetMap};
use crate::tensor::{grad_wrt_input, sign, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mim" => Ok(AttackKind::Mim),
            other => Err(Error::invalid(format!("unknown attack kind `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Steps {
    Fixed(usize),
    /// `min(ε + 4, ⌈1.25ε⌉)`.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: Steps,
    pub step_size: f64,
    pub random_start: bool,
    pub momentum: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon,
            steps: Steps::Auto,
            step_size: 1.0,
            random_start: kind == AttackKind::Pgd,
            momentum: 1.0,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackKind::Fgsm, epsilon)
    }

    pub fn pgd(epsilon: f64, steps: Steps) -> Self {
        Self {
            steps,
            ..Self::new(AttackKind::Pgd, epsilon)
        }
    }

    pub fn mim(epsilon: f64, steps: Steps) -> Self {
        Self {
            steps,
            ..Self::new(AttackKind::Mim, epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.kind != AttackKind::Fgsm {
            if !(self.step_size > 0.0) {
                return Err(Error::invalid("step size must be positive"));
            }
            if self.steps == Steps::Fixed(0) {
                return Err(Error::invalid("steps must be >= 1"));
            }
            if !(self.momentum >= 0.0) {
                return Err(Error::invalid("momentum decay must be >= 0"));
            }
        }
        Ok(())
    }

    /// Iteration count after schedule resolution; FGSM is one step.
    pub fn resolved_steps(&self) -> Result<usize> {
        match (self.kind, self.steps) {
            (AttackKind::Fgsm, _) => Ok(1),
            (_, Steps::Fixed(n)) if n >= 1 => Ok(n),
            (_, Steps::Fixed(_)) => Err(Error::invalid("steps must be >= 1")),
            (_, Steps::Auto) => pgd_step_schedule(self.epsilon),
        }
    }

    /// Label such as `pgd50` or `fgsm`.
    pub fn label(&self) -> String {
        match (self.kind, self.steps) {
            (AttackKind::Fgsm, _) => "fgsm".into(),
            (k, Steps::Fixed(n)) => format!("{}{n}", k.as_str()),
            (k, Steps::Auto) => format!("{}-auto", k.as_str()),
        }
    }
}

/// `min(ε + 4, ⌈1.25ε⌉)` with ε on the 0–255 scale.
pub fn pgd_step_schedule(epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("step schedule needs epsilon > 0, got {epsilon}")));
    }
    Ok((epsilon + 4.0).min((1.25 * epsilon).ceil()) as usize)
}

/// A scalar loss of the input together with its input gradient.
pub trait InputObjective: Sync {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn loss(&self, x: &Tensor) -> Result<f64> {
        Ok(self.loss_and_grad(x)?.0)
    }
}

/// Which task losses an attack maximizes.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackObjective {
    SingleTask(String),
    /// `Σ λ_c L_c` over the listed tasks.
    MultiTask(Vec<(String, f64)>),
}

impl AttackObjective {
    pub fn weights(&self) -> Vec<(String, f64)> {
        match self {
            AttackObjective::SingleTask(t) => vec![(t.clone(), 1.0)],
            AttackObjective::MultiTask(w) => w.clone(),
        }
    }

    pub fn tasks(&self) -> Vec<String> {
        self.weights().into_iter().map(|(t, _)| t).collect()
    }
}

/// Weighted task losses of a frozen model.
pub struct TaskObjective<'a> {
    model: &'a SharedBackboneModel,
    targets: &'a TargetMap,
    weights: Vec<(String, f64)>,
    scale: f64,
    selection: Option<PixelWeights>,
}

impl<'a> TaskObjective<'a> {
    pub fn new(model: &'a SharedBackboneModel, targets: &'a TargetMap, objective: &AttackObjective) -> Result<Self> {
        let weights = objective.weights();
        validate_weights(&weights)?;
        for (t, _) in &weights {
            model.task(t)?;
            if !targets.contains_key(t) {
                return Err(Error::invalid(format!("no target for task `{t}`")));
            }
        }
        Ok(Self {
            model,
            targets,
            weights,
            scale: 1.0,
            selection: None,
        })
    }

    /// Restricts a single-task objective to the pixels weighted by `sel`.
    pub fn with_selection(mut self, sel: PixelWeights) -> Result<Self> {
        if self.weights.len() != 1 {
            return Err(Error::invalid("pixel selection needs a single-task objective"));
        }
        self.selection = Some(sel);
        Ok(self)
    }

    fn record(&self, tape: &mut Tape, xv: crate::tensor::Var) -> Result<crate::tensor::Var> {
        let names: Vec<&str> = self.weights.iter().map(|(t, _)| t.as_str()).collect();
        let fwd = self.model.forward(tape, xv, &names, ParamMode::Frozen)?;
        let l = match &self.selection {
            Some(sel) => {
                let (task, w) = &self.weights[0];
                let l = self.model.task_loss_var(tape, &fwd, task, &self.targets[task], Some(sel))?;
                tape.scale(l, *w)?
            }
            None => self.model.multitask_loss_var(tape, &fwd, self.targets, &self.weights)?,
        };
        if self.scale == 1.0 {
            Ok(l)
        } else {
            tape.scale(l, self.scale)
        }
    }

    /// Multiplies the whole objective by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        self.scale = s;
        self
    }
}

impl InputObjective for TaskObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        grad_wrt_input(x, |tape, xv| self.record(tape, xv))
    }

    fn loss(&self, x: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = self.record(&mut tape, xv)?;
        tape.value(l).item()
    }
}

/// `w·x + b`, with gradient `w` everywhere.
#[derive(Clone, Debug)]
pub struct LinearObjective {
    pub w: Tensor,
    pub b: f64,
}

impl InputObjective for LinearObjective {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        Ok((self.w.dot(x)? + self.b, self.w.clone()))
    }
}

/// Adapts a closure returning `(loss, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F> InputObjective for FnObjective<F>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)> + Sync,
{
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        (self.0)(x)
    }
}

/// Diagnostics for one gradient pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Objective value at the iterate the gradient was taken at.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub trace: Vec<StepRecord>,
    /// MIM steps whose gradient had zero L1 norm.
    pub skipped_normalizations: usize,
}

impl AttackOutcome {
    pub fn gradient_passes(&self) -> usize {
        self.trace.len()
    }

    fn unchanged(x: &Tensor) -> Self {
        Self {
            x_adv: x.clone(),
            trace: Vec::new(),
            skipped_normalizations: 0,
        }
    }
}

fn checked_grad<O: InputObjective + ?Sized>(obj: &O, x: &Tensor, step: usize, name: &str) -> Result<(f64, Tensor)> {
    let (loss, g) = obj.loss_and_grad(x).map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{name} step {step}: {op}"),
        },
        other => other,
    })?;
    if !loss.is_finite() || !g.is_finite() {
        return Err(Error::NonFinite {
            op: format!("{name} step {step}: gradient"),
        });
    }
    if g.shape() != x.shape() {
        return Err(Error::shape("attack", format!("gradient {:?} vs input {:?}", g.shape(), x.shape())));
    }
    Ok((loss, g))
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("attack input must lie in [0, 1]"));
    }
    Ok(())
}

/// Projects `v` onto the ε-ball around `x0` and then onto `[0, 1]`.
fn project(v: f64, x0: f64, eps: f64) -> f64 {
    v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)
}

/// Single signed-gradient step of size ε.
pub fn fgsm<O: InputObjective + ?Sized>(obj: &O, x: &Tensor, epsilon: f64) -> Result<AttackOutcome> {
    AttackConfig::fgsm(epsilon).validate()?;
    check_input(x)?;
    if epsilon == 0.0 {
        return Ok(AttackOutcome::unchanged(x));
    }
    let eps = epsilon / 255.0;
    let (loss, g) = checked_grad(obj, x, 0, "fgsm")?;
    let x_adv = x.zip_map(&g, |xi, gi| (xi + eps * sign(gi)).clamp(0.0, 1.0))?;
    Ok(AttackOutcome {
        x_adv,
        trace: vec![StepRecord {
            step: 0,
            loss,
            grad_norm: g.norm_l2(),
        }],
        skipped_normalizations: 0,
    })
}

/// Runs the attack described by `config`.
pub fn run_attack<O: InputObjective + ?Sized>(obj: &O, x: &Tensor, config: &AttackConfig) -> Result<AttackOutcome> {
    run_attack_observed(obj, x, config, &mut |_, _| {})
}

/// As [`run_attack`], calling `observer(t, x_t)` on the start point
/// (`t = 0`) and after every update.
pub fn run_attack_observed<O: InputObjective + ?Sized>(
    obj: &O,
    x: &Tensor,
    config: &AttackConfig,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<AttackOutcome> {
    config.validate()?;
    match config.kind {
        AttackKind::Fgsm => {
            let out = fgsm(obj, x, config.epsilon)?;
            observer(0, x);
            observer(1, &out.x_adv);
            Ok(out)
        }
        AttackKind::Pgd | AttackKind::Mim => iterative(obj, x, config, observer),
    }
}

pub fn pgd<O: InputObjective + ?Sized>(obj: &O, x: &Tensor, config: &AttackConfig) -> Result<AttackOutcome> {
    run_attack(obj, x, &AttackConfig { kind: AttackKind::Pgd, ..config.clone() })
}

pub fn mim<O: InputObjective + ?Sized>(obj: &O, x: &Tensor, config: &AttackConfig) -> Result<AttackOutcome> {
    run_attack(obj, x, &AttackConfig { kind: AttackKind::Mim, ..config.clone() })
}

fn iterative<O: InputObjective + ?Sized>(
    obj: &O,
    x: &Tensor,
    config: &AttackConfig,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<AttackOutcome> {
    check_input(x)?;
    if config.epsilon == 0.0 {
        observer(0, x);
        return Ok(AttackOutcome::unchanged(x));
    }
    let steps = config.resolved_steps()?;
    let eps = config.epsilon / 255.0;
    let alpha = config.step_size / 255.0;
    let momentum_mode = config.kind == AttackKind::Mim;
    let name = config.kind.as_str();

    let mut xt = x.clone();
    if config.kind == AttackKind::Pgd && config.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (v, &x0) in xt.data_mut().iter_mut().zip(x.data()) {
            let d: f64 = rng.random_range(-eps..=eps);
            *v = project(x0 + d, x0, eps);
        }
    }
    observer(0, &xt);

    let mut trace = Vec::with_capacity(steps);
    let mut skipped = 0;
    let mut accum = momentum_mode.then(|| Tensor::zeros_like(x));
    for t in 0..steps {
        let (loss, g) = checked_grad(obj, &xt, t, name)?;
        trace.push(StepRecord {
            step: t,
            loss,
            grad_norm: g.norm_l2(),
        });
        let direction = match accum.as_mut() {
            None => g,
            Some(acc) => {
                let l1 = g.norm_l1();
                let inv = if l1 > 0.0 {
                    1.0 / l1
                } else {
                    skipped += 1;
                    1.0
                };
                for (a, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = config.momentum * *a + gi * inv;
                }
                acc.clone()
            }
        };
        for ((v, &x0), d) in xt.data_mut().iter_mut().zip(x.data()).zip(direction.data()) {
            *v = project(*v + alpha * sign(*d), x0, eps);
        }
        observer(t + 1, &xt);
    }
    Ok(AttackOutcome {
        x_adv: xt,
        trace,
        skipped_normalizations: skipped,
    })
}

/// Metric used to score a task, from its loss kind.
pub fn metric_for(model: &SharedBackboneModel, task: &str) -> Result<MetricKind> {
    Ok(match model.task(task)?.loss {
        LossKind::PixelCrossEntropy => MetricKind::MeanIou,
        LossKind::L1 => MetricKind::AbsError,
        LossKind::Mse => MetricKind::Mse,
    })
}

/// Clean and attacked score of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetricRow {
    pub task: String,
    pub metric: MetricKind,
    pub clean: f64,
    pub attacked: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackEvalTable {
    pub attack: String,
    pub epsilon: f64,
    pub rows: Vec<TaskMetricRow>,
    /// Seed used for each attacked example, in dataset order.
    pub example_seeds: Vec<u64>,
    pub gradient_passes: usize,
    /// Mean attack objective before and after the attack.
    pub clean_objective: f64,
    pub attacked_objective: f64,
}

impl AttackEvalTable {
    pub fn row(&self, task: &str) -> Option<&TaskMetricRow> {
        self.rows.iter().find(|r| r.task == task)
    }
}

/// Seed for the attack on example `index`.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

struct ExampleResult {
    clean: Vec<MetricAccumulator>,
    attacked: Vec<MetricAccumulator>,
    seed: u64,
    passes: usize,
    clean_obj: f64,
    adv_obj: f64,
}

fn score(
    model: &SharedBackboneModel,
    x: &Tensor,
    targets: &TargetMap,
    tasks: &[&str],
    kinds: &[MetricKind],
    classes: &[usize],
) -> Result<Vec<MetricAccumulator>> {
    let preds = model.predict(x, tasks)?;
    tasks
        .iter()
        .zip(kinds.iter().zip(classes))
        .map(|(t, (&k, &c))| {
            let mut acc = MetricAccumulator::new(k, c);
            match &targets[*t] {
                Target::Classes { labels, .. } => acc.add_classes(&preds[*t], labels)?,
                Target::Dense(y) => acc.add_dense(&preds[*t], y)?,
            }
            Ok(acc)
        })
        .collect()
}

/// Attacks every example of `indices` independently and scores
/// `score_tasks` on the clean and attacked inputs.
pub fn evaluate_under_attack(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    objective: &AttackObjective,
    config: &AttackConfig,
    score_tasks: &[&str],
) -> Result<AttackEvalTable> {
    config.validate()?;
    if indices.is_empty() || score_tasks.is_empty() {
        return Err(Error::invalid("attack evaluation needs examples and tasks"));
    }
    let kinds = score_tasks
        .iter()
        .map(|t| metric_for(model, t))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = score_tasks
        .iter()
        .map(|t| model.task(t).map(|s| s.output_shape[0]))
        .collect::<Result<_>>()?;
    let obj_tasks = objective.tasks();
    let mut needed: Vec<&str> = score_tasks.to_vec();
    for t in &obj_tasks {
        if !needed.contains(&t.as_str()) {
            needed.push(t);
        }
    }

    let results = indices
        .par_iter()
        .map(|&i| -> Result<ExampleResult> {
            let (x, targets) = dataset.example(i, &needed)?;
            let seed = example_seed(config.seed, i);
            let cfg = AttackConfig { seed, ..config.clone() };
            let obj = TaskObjective::new(model, &targets, objective)?;
            let out = run_attack(&obj, &x, &cfg)?;
            let clean = score(model, &x, &targets, score_tasks, &kinds, &classes)?;
            let attacked = score(model, &out.x_adv, &targets, score_tasks, &kinds, &classes)?;
            Ok(ExampleResult {
                clean,
                attacked,
                seed,
                passes: out.gradient_passes(),
                clean_obj: obj.loss(&x)?,
                adv_obj: obj.loss(&out.x_adv)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut clean: Vec<MetricAccumulator> = kinds.iter().zip(&classes).map(|(&k, &c)| MetricAccumulator::new(k, c)).collect();
    let mut attacked = clean.clone();
    let mut seeds = Vec::with_capacity(results.len());
    let (mut passes, mut clean_obj, mut adv_obj) = (0, 0.0, 0.0);
    for r in &results {
        for (acc, part) in clean.iter_mut().zip(&r.clean) {
            acc.merge(part)?;
        }
        for (acc, part) in attacked.iter_mut().zip(&r.attacked) {
            acc.merge(part)?;
        }
        seeds.push(r.seed);
        passes += r.passes;
        clean_obj += r.clean_obj;
        adv_obj += r.adv_obj;
    }
    let n = results.len() as f64;
    let rows = score_tasks
        .iter()
        .zip(kinds)
        .zip(clean.iter().zip(&attacked))
        .map(|((t, k), (c, a))| {
            Ok(TaskMetricRow {
                task: t.to_string(),
                metric: k,
                clean: c.value()?,
                attacked: a.value()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackEvalTable {
        attack: config.label(),
        epsilon: config.epsilon,
        rows,
        example_seeds: seeds,
        gradient_passes: passes,
        clean_objective: clean_obj / n,
        attacked_objective: adv_obj / n,
    })
}

/// Attacks `task`'s loss restricted to `k` uniformly drawn output pixels
/// per example and scores the full `task` output on the result.
pub fn evaluate_subsampled_attack(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    task: &str,
    k: usize,
    config: &AttackConfig,
) -> Result<f64> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("attack evaluation needs examples"));
    }
    let kind = metric_for(model, task)?;
    let spec = model.task(task)?;
    let (classes, h, w) = (spec.output_shape[0], spec.output_shape[1], spec.output_shape[2]);
    if k == 0 || k > h * w {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", h * w)));
    }
    let parts = indices
        .par_iter()
        .map(|&i| -> Result<MetricAccumulator> {
            let (x, targets) = dataset.example(i, &[task])?;
            let seed = example_seed(config.seed ^ (k as u64).rotate_left(48), i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels = rand::seq::index::sample(&mut rng, h * w, k).into_vec();
            let sel = PixelWeights::select([1, h, w], &pixels)?;
            let obj = TaskObjective::new(model, &targets, &AttackObjective::SingleTask(task.to_string()))?
                .with_selection(sel)?;
            let out = run_attack(&obj, &x, &AttackConfig { seed, ..config.clone() })?;
            Ok(score(model, &out.x_adv, &targets, &[task], &[kind], &[classes])?.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricAccumulator::new(kind, classes);
    for p in &parts {
        acc.merge(p)?;
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(w: Vec<f64>) -> LinearObjective {
        LinearObjective {
            w: Tensor::vector(w),
            b: 0.0,
        }
    }

    #[test]
    fn schedule_values() {
        let got: Vec<usize> = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&e| pgd_step_schedule(e).unwrap())
            .collect();
        assert_eq!(got, vec![2, 3, 5, 10, 20]);
        assert!(pgd_step_schedule(0.0).is_err());
        assert!(pgd_step_schedule(-1.0).is_err());
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let x = Tensor::vector(vec![0.2, 0.5]);
        let out = fgsm(&linear(vec![1.0, -1.0]), &x, 0.0).unwrap();
        assert_eq!(out.x_adv, x);
        assert_eq!(out.gradient_passes(), 0);
    }

    #[test]
    fn fgsm_on_linear_gains_eps_l1() {
        let obj = linear(vec![0.5, -2.0, 0.0, 1.0]);
        let x = Tensor::vector(vec![0.5; 4]);
        let out = fgsm(&obj, &x, 8.0).unwrap();
        let gain = obj.loss(&out.x_adv).unwrap() - obj.loss(&x).unwrap();
        assert!((gain - 8.0 / 255.0 * 3.5).abs() < 1e-12);
        // zero-gradient coordinate untouched
        assert_eq!(out.x_adv.data()[2], 0.5);
    }

    #[test]
    fn single_step_pgd_matches_fgsm_bitwise() {
        let obj = FnObjective(|x: &Tensor| {
            let g = x.map(|v| (v * 7.0).sin());
            Ok((x.sum(), g))
        });
        let x = Tensor::vector(vec![0.1, 0.5, 0.99, 0.0, 0.73]);
        let f = fgsm(&obj, &x, 4.0).unwrap();
        let cfg = AttackConfig {
            random_start: false,
            step_size: 4.0,
            ..AttackConfig::pgd(4.0, Steps::Fixed(1))
        };
        let p = pgd(&obj, &x, &cfg).unwrap();
        assert_eq!(f.x_adv.data(), p.x_adv.data());
    }

    #[test]
    fn mim_without_momentum_is_pgd_without_start() {
        let obj = FnObjective(|x: &Tensor| Ok((0.0, x.map(|v| (v * 13.0).cos() - 0.2))));
        let x = Tensor::vector(vec![0.3, 0.6, 0.1]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let base = AttackConfig {
            random_start: false,
            momentum: 0.0,
            ..AttackConfig::pgd(8.0, Steps::Fixed(12))
        };
        run_attack_observed(&obj, &x, &base, &mut |_, v| a.push(v.clone())).unwrap();
        let m = AttackConfig { kind: AttackKind::Mim, ..base };
        run_attack_observed(&obj, &x, &m, &mut |_, v| b.push(v.clone())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_gradient_mim_equals_pgd() {
        let obj = linear(vec![1.0, -3.0, 0.5]);
        let x = Tensor::vector(vec![0.5; 3]);
        for mu in [0.0, 0.5, 1.0, 3.0] {
            let base = AttackConfig {
                random_start: false,
                momentum: mu,
                ..AttackConfig::pgd(6.0, Steps::Fixed(9))
            };
            let p = run_attack(&obj, &x, &base).unwrap();
            let m = run_attack(&obj, &x, &AttackConfig { kind: AttackKind::Mim, ..base }).unwrap();
            assert_eq!(p.x_adv, m.x_adv);
        }
    }

    #[test]
    fn mim_zero_gradient_is_recorded() {
        let obj = linear(vec![0.0, 0.0]);
        let x = Tensor::vector(vec![0.5, 0.5]);
        let out = mim(&obj, &x, &AttackConfig::mim(4.0, Steps::Fixed(3))).unwrap();
        assert_eq!(out.skipped_normalizations, 3);
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn zero_epsilon_iterative_is_identity() {
        let obj = linear(vec![1.0]);
        let x = Tensor::vector(vec![0.4]);
        for kind in [AttackKind::Pgd, AttackKind::Mim] {
            let out = run_attack(&obj, &x, &AttackConfig::new(kind, 0.0)).unwrap();
            assert_eq!(out.x_adv, x);
        }
    }

    #[test]
    fn non_finite_gradient_names_step() {
        let obj = FnObjective(|x: &Tensor| {
            let bad = x.data()[0] > 0.5;
            Ok((0.0, x.map(|_| if bad { f64::NAN } else { 1.0 })))
        });
        let x = Tensor::vector(vec![0.49]);
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::pgd(16.0, Steps::Fixed(10))
        };
        let err = run_attack(&obj, &x, &cfg).unwrap_err();
        assert!(err.to_string().contains("pgd step 3"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_input() {
        let x = Tensor::vector(vec![1.5]);
        assert!(fgsm(&linear(vec![1.0]), &x, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn iterates_stay_in_ball_and_range(
            xs in prop::collection::vec(0.0f64..=1.0, 1..12),
            freq in 0.5f64..20.0,
            eps in 0.0f64..32.0,
            steps in 1usize..15,
            mim_kind in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let x = Tensor::vector(xs);
            let obj = FnObjective(move |x: &Tensor| Ok((0.0, x.map(|v| (v * freq).sin()))));
            let kind = if mim_kind { AttackKind::Mim } else { AttackKind::Pgd };
            let cfg = AttackConfig {
                seed,
                step_size: 2.0,
                ..AttackConfig::new(kind, eps).clone()
            };
            let cfg = AttackConfig { steps: Steps::Fixed(steps), ..cfg };
            let bound = eps / 255.0 + 1e-12;
            let mut ok = true;
            run_attack_observed(&obj, &x, &cfg, &mut |_, xt| {
                for (a, b) in xt.data().iter().zip(x.data()) {
                    ok &= (a - b).abs() <= bound && (0.0..=1.0).contains(a);
                }
            }).unwrap();
            prop_assert!(ok);
        }
    }
}
