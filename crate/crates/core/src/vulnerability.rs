//! First-order adversarial vulnerability: input-gradient norms, the joint
//! gradient of several tasks, gradient covariance and the closed-form
//! scaling law for the joint gradient norm.
//!
//! Radii here are in input units (not the 0–255 attack scale), and the
//! perturbation ball is not intersected with `[0, 1]`.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attacks::{InputObjective, TaskObjective, AttackObjective};
use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ParamMode, PixelWeights, SharedBackboneModel, Target, TargetMap};
use crate::tensor::{grad_wrt_input, Tensor};

/// A `p`-norm ball and its dual exponent `q` with `1/p + 1/q = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualNormSpec {
    p: f64,
}

impl DualNormSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 1.0) {
            return Err(Error::invalid(format!("p = {p} must lie in (1, inf]")));
        }
        Ok(Self { p })
    }

    pub fn linf() -> Self {
        Self { p: f64::INFINITY }
    }

    pub fn l2() -> Self {
        Self { p: 2.0 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        if self.p.is_infinite() {
            1.0
        } else {
            self.p / (self.p - 1.0)
        }
    }

    /// `‖g‖_q`.
    pub fn dual_norm(&self, g: &Tensor) -> f64 {
        let q = self.q();
        if q == 1.0 {
            g.norm_l1()
        } else if q == 2.0 {
            g.norm_l2()
        } else {
            g.norm_p(q)
        }
    }

    /// The `δ` with `‖δ‖_p = r` maximizing `gᵀδ`.
    pub fn maximizer(&self, g: &Tensor, r: f64) -> Tensor {
        if self.p.is_infinite() {
            return g.map(|v| r * crate::tensor::sign(v));
        }
        let q = self.q();
        let norm = self.dual_norm(g);
        if norm == 0.0 {
            return Tensor::zeros_like(g);
        }
        g.map(|v| r * crate::tensor::sign(v) * (v.abs() / norm).powf(q - 1.0))
    }

    /// A point drawn uniformly from the radius-`r` ball.
    fn sample_ball(&self, rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = if self.p.is_infinite() {
            (0..n).map(|_| rng.random_range(-r..=r)).collect()
        } else {
            // generalized-Gaussian direction for p = 2, radial scaling U^(1/n)
            let dir: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let t = Tensor::new(shape.to_vec(), dir.clone()).expect("shape");
            let norm = t.norm_p(self.p).max(f64::MIN_POSITIVE);
            let radius = r * rng.random::<f64>().powf(1.0 / n as f64);
            dir.into_iter().map(|d| d / norm * radius).collect()
        };
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// `r_c = ∂_x (s·L_c)` for each task, against one weight snapshot.
pub fn per_task_gradients(
    model: &SharedBackboneModel,
    x: &Tensor,
    targets: &TargetMap,
    tasks: &[&str],
    scale: f64,
) -> Result<Vec<Tensor>> {
    tasks
        .iter()
        .map(|t| {
            let target = targets
                .get(*t)
                .ok_or_else(|| Error::invalid(format!("no target for task `{t}`")))?;
            let (_, g) = grad_wrt_input(x, |tape, xv| {
                let fwd = model.forward(tape, xv, &[t], ParamMode::Frozen)?;
                let l = model.task_loss_var(tape, &fwd, t, target, None)?;
                tape.scale(l, scale)
            })?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("input gradient of task `{t}`"),
                });
            }
            Ok(g)
        })
        .collect()
}

/// `R = (1/M) Σ r_c`.
pub fn joint_gradient(gradients: &[Tensor]) -> Result<Tensor> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::invalid("joint gradient of an empty list"))?;
    let mut acc = Tensor::zeros_like(first);
    for g in gradients {
        acc.add_scaled(g, 1.0)?;
    }
    Ok(acc.scaled(1.0 / gradients.len() as f64))
}

/// `‖∂_x L‖_q`, times `r` when a radius is given.
pub fn gradient_vulnerability<O: InputObjective + ?Sized>(
    obj: &O,
    x: &Tensor,
    radius: Option<f64>,
    norm: DualNormSpec,
) -> Result<f64> {
    let (_, g) = obj.loss_and_grad(x)?;
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "vulnerability gradient".into() });
    }
    Ok(norm.dual_norm(&g) * radius.unwrap_or(1.0))
}

/// Mean over `cases` of [`gradient_vulnerability`].
pub fn first_order_vulnerability_of<O: InputObjective>(
    cases: &[(O, Tensor)],
    radius: Option<f64>,
    norm: DualNormSpec,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::invalid("vulnerability over an empty sample"));
    }
    if let Some(r) = radius {
        if !(r >= 0.0) {
            return Err(Error::invalid("radius must be >= 0"));
        }
    }
    let vals = cases
        .par_iter()
        .map(|(o, x)| gradient_vulnerability(o, x, radius, norm))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `E_x ‖∂_x L_all‖_q · r` over the examples `indices`, where `L_all`
/// weights the tasks by `weights`.
pub fn first_order_vulnerability(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    weights: &[(String, f64)],
    radius: Option<f64>,
    norm: DualNormSpec,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("vulnerability over an empty sample"));
    }
    let objective = AttackObjective::MultiTask(weights.to_vec());
    let names: Vec<&str> = weights.iter().map(|(t, _)| t.as_str()).collect();
    let vals = indices
        .par_iter()
        .map(|&i| {
            let (x, targets) = dataset.example(i, &names)?;
            let obj = TaskObjective::new(model, &targets, &objective)?;
            gradient_vulnerability(&obj, &x, radius, norm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Lower bound on `max_{‖δ‖_p ≤ r} |L(x) − L(x+δ)|` from `trials` random
/// ball points plus the two dual-norm corner points `±δ*`.
pub fn empirical_delta_loss<O: InputObjective + ?Sized>(
    obj: &O,
    x: &Tensor,
    radius: f64,
    norm: DualNormSpec,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid("radius must be >= 0"));
    }
    if radius == 0.0 {
        return Ok(0.0);
    }
    let (l0, g) = obj.loss_and_grad(x)?;
    let delta_at = |d: &Tensor| -> Result<f64> {
        let mut xp = x.clone();
        xp.add_scaled(d, 1.0)?;
        let l = obj.loss(&xp)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "perturbed loss".into() });
        }
        Ok((l - l0).abs())
    };
    let corner = norm.maximizer(&g, radius);
    let mut best = delta_at(&corner)?.max(delta_at(&corner.scaled(-1.0))?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let d = norm.sample_ball(&mut rng, x.shape(), radius);
        best = best.max(delta_at(&d)?);
    }
    Ok(best)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Second-moment statistics of per-task gradients over a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub tasks: usize,
    pub samples: usize,
    /// `mean(r_iᵀ r_j) − mean(r_i)ᵀ mean(r_j)`.
    pub centered: Vec<Vec<f64>>,
    /// `mean(r_iᵀ r_j)`.
    pub raw: Vec<Vec<f64>>,
    /// `‖mean(r_i)‖₂`; zero under the zero-mean assumption.
    pub mean_norms: Vec<f64>,
}

/// Accumulates `samples[n][task]` gradient vectors into covariance
/// matrices, using compensated sums.
pub fn covariance_from_samples(samples: &[Vec<Vec<f64>>]) -> Result<CovarianceEstimate> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("covariance of an empty sample"))?;
    let m = first.len();
    if m == 0 {
        return Err(Error::invalid("covariance over zero tasks"));
    }
    let d = first[0].len();
    if samples.iter().any(|s| s.len() != m || s.iter().any(|g| g.len() != d)) {
        return Err(Error::shape("covariance", "ragged gradient samples"));
    }
    let n = samples.len();
    let mut raw = vec![vec![CompensatedSum::default(); m]; m];
    let mut means = vec![vec![CompensatedSum::default(); d]; m];
    for s in samples {
        for i in 0..m {
            for j in 0..=i {
                raw[i][j].add(s[i].iter().zip(&s[j]).map(|(a, b)| a * b).sum());
            }
            for (acc, v) in means[i].iter_mut().zip(&s[i]) {
                acc.add(*v);
            }
        }
    }
    let mean_vecs: Vec<Vec<f64>> = means
        .iter()
        .map(|row| row.iter().map(|c| c.value() / n as f64).collect())
        .collect();
    let mut raw_m = vec![vec![0.0; m]; m];
    let mut cen = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let r = raw[i][j].value() / n as f64;
            let mm: f64 = mean_vecs[i].iter().zip(&mean_vecs[j]).map(|(a, b)| a * b).sum();
            raw_m[i][j] = r;
            raw_m[j][i] = r;
            cen[i][j] = r - mm;
            cen[j][i] = r - mm;
        }
    }
    Ok(CovarianceEstimate {
        tasks: m,
        samples: n,
        centered: cen,
        raw: raw_m,
        mean_norms: mean_vecs
            .iter()
            .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect(),
    })
}

/// Per-task input gradients for each example of `indices`, in order.
pub fn collect_task_gradients(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    tasks: &[&str],
    scale: f64,
) -> Result<Vec<Vec<Tensor>>> {
    if indices.is_empty() {
        return Err(Error::invalid("gradient sample is empty"));
    }
    indices
        .par_iter()
        .map(|&i| {
            let (x, targets) = dataset.example(i, tasks)?;
            per_task_gradients(model, &x, &targets, tasks, scale)
        })
        .collect()
}

/// Covariance of the per-task input gradients of `tasks` over `indices`.
pub fn gradient_covariance(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    tasks: &[&str],
) -> Result<CovarianceEstimate> {
    if indices.len() < 2 {
        return Err(Error::invalid("covariance needs at least two examples"));
    }
    let grads = collect_task_gradients(model, dataset, indices, tasks, 1.0)?;
    covariance_from_samples(&to_vectors(&grads))
}

fn to_vectors(grads: &[Vec<Tensor>]) -> Vec<Vec<Vec<f64>>> {
    grads
        .iter()
        .map(|s| s.iter().map(|g| g.data().to_vec()).collect())
        .collect()
}

fn check_square(c: &[Vec<f64>]) -> Result<usize> {
    let m = c.len();
    if m == 0 || c.iter().any(|r| r.len() != m) {
        return Err(Error::shape("theorem1", "covariance must be a nonempty square matrix"));
    }
    if let Some(i) = (0..m).find(|&i| !(c[i][i] > 0.0)) {
        return Err(Error::invalid(format!("diagonal entry {i} is {} (must be > 0)", c[i][i])));
    }
    Ok(m)
}

fn checked_sqrt(radicand: f64) -> Result<f64> {
    if radicand < -1e-12 {
        return Err(Error::invalid(format!("negative radicand {radicand}")));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// `√((1 + (2/M) Σ_i Σ_{j<i} C_ij / C_ii) / M)`: joint gradient norm
/// relative to a single task's.
pub fn theorem1_prediction(c: &[Vec<f64>]) -> Result<f64> {
    let m = check_square(c)?;
    let mut s = 0.0;
    for (i, row) in c.iter().enumerate() {
        for &cij in &row[..i] {
            s += cij / c[i][i];
        }
    }
    let mf = m as f64;
    checked_sqrt((1.0 + 2.0 / mf * s) / mf)
}

/// Homogeneous-variance form `√(Σ_ij C_ij / (M · tr C))`, i.e. the exact
/// `E‖R‖² / σ̄²` with `σ̄²` the mean diagonal.
pub fn theorem1_homogeneous(c: &[Vec<f64>]) -> Result<f64> {
    let m = check_square(c)?;
    let total: f64 = c.iter().flatten().sum();
    let trace: f64 = (0..m).map(|i| c[i][i]).sum();
    checked_sqrt(total / (m as f64 * trace))
}

/// `1/√M`.
pub fn corollary1_prediction(m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::invalid("M must be >= 1"));
    }
    Ok(1.0 / (m as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VulnerabilityReport {
    pub tasks: Vec<String>,
    pub samples: usize,
    /// `mean ‖r_c‖₂` per task.
    pub task_norms: Vec<f64>,
    /// `mean ‖R‖₂`.
    pub joint_norm: f64,
    /// `√(mean ‖R‖₂²)`.
    pub joint_rms: f64,
    pub covariance: CovarianceEstimate,
    /// Matrix form evaluated on the raw second moments.
    pub theorem1: f64,
    pub theorem1_homogeneous: f64,
    /// Matrix form evaluated on the centered covariance.
    pub theorem1_centered: Option<f64>,
    pub corollary1: f64,
    /// `joint_rms / √(mean_c ‖r_c‖²)`, the empirical counterpart of the
    /// predictions above.
    pub empirical_ratio: f64,
}

impl VulnerabilityReport {
    pub fn from_samples(tasks: &[&str], grads: &[Vec<Vec<f64>>]) -> Result<Self> {
        let cov = covariance_from_samples(grads)?;
        if cov.tasks != tasks.len() {
            return Err(Error::shape("report", "task names vs gradient count"));
        }
        let m = tasks.len();
        let n = grads.len() as f64;
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut task_norms = vec![CompensatedSum::default(); m];
        let (mut jn, mut jsq) = (CompensatedSum::default(), CompensatedSum::default());
        for s in grads {
            for (acc, g) in task_norms.iter_mut().zip(s) {
                acc.add(norm(g));
            }
            let d = s[0].len();
            let joint: Vec<f64> = (0..d).map(|k| s.iter().map(|g| g[k]).sum::<f64>() / m as f64).collect();
            let r = norm(&joint);
            jn.add(r);
            jsq.add(r * r);
        }
        let mean_diag = (0..m).map(|i| cov.raw[i][i]).sum::<f64>() / m as f64;
        let joint_rms = (jsq.value() / n).sqrt();
        Ok(Self {
            tasks: tasks.iter().map(|t| t.to_string()).collect(),
            samples: grads.len(),
            task_norms: task_norms.iter().map(|c| c.value() / n).collect(),
            joint_norm: jn.value() / n,
            joint_rms,
            theorem1: theorem1_prediction(&cov.raw)?,
            theorem1_homogeneous: theorem1_homogeneous(&cov.raw)?,
            theorem1_centered: theorem1_prediction(&cov.centered).ok(),
            corollary1: corollary1_prediction(m)?,
            empirical_ratio: joint_rms / mean_diag.sqrt(),
            covariance: cov,
        })
    }

    /// `task_i,task_j,cov,raw_moment` rows for `i ≤ j`.
    pub fn pairwise_csv(&self) -> String {
        let mut out = String::from("task_i,task_j,cov,raw_moment\n");
        for i in 0..self.tasks.len() {
            for j in i..self.tasks.len() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    self.tasks[i], self.tasks[j], self.covariance.centered[i][j], self.covariance.raw[i][j]
                ));
            }
        }
        out
    }

    pub fn summary_header() -> &'static str {
        "M,joint_norm,theorem1_pred,corollary1_pred"
    }

    pub fn summary_row(&self) -> String {
        format!("{},{},{},{}", self.tasks.len(), self.joint_norm, self.theorem1, self.corollary1)
    }
}

/// Gradient samples of `tasks` on `indices` scaled by `scale`, summarized.
pub fn vulnerability_report(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    tasks: &[&str],
    scale: f64,
) -> Result<VulnerabilityReport> {
    let grads = collect_task_gradients(model, dataset, indices, tasks, scale)?;
    VulnerabilityReport::from_samples(tasks, &to_vectors(&grads))
}

/// Mean `‖∇_x L_k‖₂` where `L_k` averages `task`'s loss over `k` output
/// pixels drawn uniformly without replacement, over `repeats` draws.
pub fn subsample_output_vulnerability(
    model: &SharedBackboneModel,
    x: &Tensor,
    target: &Target,
    task: &str,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let spec = model.task(task)?;
    let batch = x.shape()[0];
    let (h, w) = (spec.output_shape[1], spec.output_shape[2]);
    let total = batch * h * w;
    if k == 0 || k > total {
        return Err(Error::invalid(format!("k = {k} outside 1..={total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..repeats {
        let pixels = sample_indices(&mut rng, total, k).into_vec();
        let sel = PixelWeights::select([batch, h, w], &pixels)?;
        let (_, g) = grad_wrt_input(x, |tape, xv| {
            let fwd = model.forward(tape, xv, &[task], ParamMode::Frozen)?;
            model.task_loss_var(tape, &fwd, task, target, Some(&sel))
        })?;
        sum += g.norm_l2();
    }
    Ok(sum / repeats as f64)
}

/// One point of a subsampling curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsamplePoint {
    pub k: usize,
    pub mean_grad_norm: f64,
}

/// [`subsample_output_vulnerability`] for every `k`, averaged over the
/// examples `indices`. Seeds depend only on `(seed, k, example)`.
pub fn subsample_curve(
    model: &SharedBackboneModel,
    dataset: &Dataset,
    indices: &[usize],
    task: &str,
    ks: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SubsamplePoint>> {
    if indices.is_empty() {
        return Err(Error::invalid("subsample curve over an empty sample"));
    }
    ks.iter()
        .map(|&k| {
            let vals = indices
                .par_iter()
                .map(|&i| {
                    let (x, targets) = dataset.example(i, &[task])?;
                    let s = splitmix64(seed ^ splitmix64((k as u64) << 32 | i as u64));
                    subsample_output_vulnerability(model, &x, &targets[task], task, k, repeats, s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SubsamplePoint {
                k,
                mean_grad_norm: vals.iter().sum::<f64>() / vals.len() as f64,
            })
        })
        .collect()
}
