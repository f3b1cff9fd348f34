use super::model::{Param, SharedBackboneModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, lr)` pairs; from `epoch` onward the rate is `lr`.
    pub lr_drops: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drops: Vec::new(),
        }
    }
}

impl SgdConfig {
    /// Adds a single 10× drop at 90% of `epochs`.
    pub fn with_final_drop(mut self, epochs: usize) -> Self {
        let at = (epochs * 9) / 10;
        if at > 0 && at < epochs {
            self.lr_drops = vec![(at, self.lr / 10.0)];
        }
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map_or(self.lr, |(_, lr)| *lr)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub lr: f64,
    velocity: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            velocity: Vec::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.config.lr_at(epoch);
    }

    pub fn velocity(&self, idx: usize) -> Option<&Tensor> {
        self.velocity.get(idx).and_then(|v| v.as_ref())
    }

    /// `v ← μv + g + wd·θ; θ ← θ − lr·v`, then clears the gradients.
    ///
    /// Parameters without a gradient are left untouched, weight decay
    /// included.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.iter().all(|p| p.grad.is_none()) {
            return Err(Error::MissingGradients);
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.grad.take() else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.value.shape()),
                ));
            }
            let v = vel.get_or_insert_with(|| Tensor::zeros_like(&p.value));
            for ((vi, gi), th) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data()) {
                *vi = momentum * *vi + gi + weight_decay * th;
            }
            for (th, vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                *th -= self.lr * vi;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(model: &mut SharedBackboneModel, state: &mut OptimizerState) -> Result<()> {
    state.step(model.params_mut())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Param {
        Param {
            name: "p".into(),
            value: Tensor::vector(vec![v]),
            grad: g.map(|g| Tensor::vector(vec![g])),
        }
    }

    #[test]
    fn vanilla_step() {
        let mut ps = vec![param(1.0, Some(0.5))];
        let mut st = OptimizerState::new(SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_drops: vec![],
        });
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data(), &[0.5]);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut ps = vec![param(0.7, Some(0.0))];
        let mut st = OptimizerState::new(SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        });
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data(), &[0.7]);
    }

    #[test]
    fn two_momentum_steps_match_recursion() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut ps = vec![param(2.0, Some(0.3))];
        let mut st = OptimizerState::new(SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
            lr_drops: vec![],
        });
        st.step(&mut ps).unwrap();
        ps[0].grad = Some(Tensor::vector(vec![-0.2]));
        st.step(&mut ps).unwrap();

        // hand-rolled recursion
        let mut th = 2.0;
        let v1 = 0.3 + wd * th;
        th -= lr * v1;
        let v2 = mu * v1 - 0.2 + wd * th;
        th -= lr * v2;
        assert!((ps[0].value.data()[0] - th).abs() < 1e-12);
        assert!((st.velocity(0).unwrap().data()[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn missing_gradients() {
        let mut ps = vec![param(1.0, None)];
        let mut st = OptimizerState::new(SgdConfig::default());
        assert!(matches!(st.step(&mut ps), Err(Error::MissingGradients)));
    }

    #[test]
    fn gradient_free_parameters_are_untouched() {
        let mut ps = vec![param(1.0, Some(1.0)), param(3.0, None)];
        let mut st = OptimizerState::new(SgdConfig::default());
        st.step(&mut ps).unwrap();
        assert_eq!(ps[1].value.data(), &[3.0]);
    }

    #[test]
    fn final_drop_schedule() {
        let cfg = SgdConfig::default().with_final_drop(20);
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(17), 0.01);
        assert!((cfg.lr_at(18) - 0.001).abs() < 1e-15);
    }
}
