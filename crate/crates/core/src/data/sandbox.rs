//! Synthetic per-task gradients with a prescribed equicorrelation.
//!
//! Each draw yields `M` vectors in `ℝ^d` with `E[r_i] = 0`,
//! `E‖r_i‖² = σ²` and `E[r_iᵀ r_j] = ρσ²` for `i ≠ j`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSandboxSpec {
    pub dim: usize,
    pub tasks: usize,
    /// σ², the expected squared norm of every task gradient.
    pub variance: f64,
    /// Pairwise correlation ρ.
    pub rho: f64,
    pub samples: usize,
    pub seed: u64,
}

impl GradientSandboxSpec {
    /// Smallest ρ keeping the `M·d` covariance positive semidefinite.
    pub fn min_rho(tasks: usize) -> f64 {
        if tasks <= 1 {
            f64::NEG_INFINITY
        } else {
            -1.0 / (tasks - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.tasks == 0 {
            return Err(Error::invalid("sandbox needs dim >= 1 and tasks >= 1"));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(Error::invalid(format!("variance {} must be finite and >= 0", self.variance)));
        }
        let lo = Self::min_rho(self.tasks);
        if !(self.rho <= 1.0 && self.rho >= lo) {
            return Err(Error::invalid(format!(
                "rho {} outside PSD range [{lo}, 1] for M = {}",
                self.rho, self.tasks
            )));
        }
        Ok(())
    }

    /// Closed form `σ·√((1 + (M−1)ρ)/M)` for `√E‖R‖²`.
    pub fn predicted_joint_rms(&self) -> f64 {
        let m = self.tasks as f64;
        let rho = if self.tasks == 1 { 0.0 } else { self.rho };
        (self.variance * (1.0 + (m - 1.0) * rho) / m).sqrt()
    }
}

/// Streaming generator for [`GradientSandboxSpec`].
pub struct GradientSandbox {
    spec: GradientSandboxSpec,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    drawn: usize,
}

impl GradientSandbox {
    pub fn new(spec: GradientSandboxSpec) -> Result<Self> {
        spec.validate()?;
        let std = (spec.variance / spec.dim as f64).sqrt();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            normal: Normal::new(0.0, std).expect("finite std"),
            spec,
            drawn: 0,
        })
    }

    fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal.sample(&mut self.rng)).collect()
    }

    /// One draw of `M` task gradients.
    pub fn next_sample(&mut self) -> Vec<Vec<f64>> {
        let GradientSandboxSpec { dim, tasks, rho, .. } = self.spec;
        if tasks == 1 {
            return vec![self.draw(dim)];
        }
        if rho >= 0.0 {
            // r_i = √ρ·z + √(1−ρ)·u_i
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            let z = self.draw(dim);
            (0..tasks)
                .map(|_| {
                    let u = self.draw(dim);
                    z.iter().zip(&u).map(|(zi, ui)| a * zi + b * ui).collect()
                })
                .collect()
        } else {
            // r_i = √(1−ρ)·(u_i − ū) + √(1+(M−1)ρ)·ū, valid down to ρ = −1/(M−1)
            let m = tasks as f64;
            let a = (1.0 - rho).sqrt();
            let c = (1.0 + (m - 1.0) * rho).max(0.0).sqrt();
            let us: Vec<Vec<f64>> = (0..tasks).map(|_| self.draw(dim)).collect();
            let mean: Vec<f64> = (0..dim).map(|k| us.iter().map(|u| u[k]).sum::<f64>() / m).collect();
            us.iter()
                .map(|u| {
                    u.iter()
                        .zip(&mean)
                        .map(|(ui, mi)| a * (ui - mi) + c * mi)
                        .collect()
                })
                .collect()
        }
    }
}

impl Iterator for GradientSandbox {
    type Item = Vec<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.drawn >= self.spec.samples {
            return None;
        }
        self.drawn += 1;
        Some(self.next_sample())
    }
}

/// All `N` draws, each holding `M` gradients of length `d`.
pub fn sample_task_gradients(spec: &GradientSandboxSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(GradientSandbox::new(spec.clone())?.collect())
}
