use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::loss::{task_loss_var, LossKind, PixelWeights, Target, TargetMap};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// One prediction task attached to the shared trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    /// Loss weight λ in the weighted total loss.
    pub weight: f64,
    /// `[channels, h, w]` of the head output. For cross-entropy heads
    /// `channels` is the class count.
    pub output_shape: Vec<usize>,
    /// Number of conv layers in the decoder head.
    pub head_depth: usize,
}

impl TaskSpec {
    pub fn new(name: &str, loss: LossKind, output_shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            loss,
            weight: 1.0,
            output_shape: output_shape.to_vec(),
            head_depth: 2,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_head_depth(mut self, depth: usize) -> Self {
        self.head_depth = depth;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::invalid(format!("task `{}` has negative weight", self.name)));
        }
        if self.output_shape.len() != 3 || self.output_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "task `{}` output shape must be [channels, h, w], got {:?}",
                self.name, self.output_shape
            )));
        }
        if self.head_depth == 0 {
            return Err(Error::invalid(format!("task `{}` needs head_depth >= 1", self.name)));
        }
        if self.loss == LossKind::PixelCrossEntropy && self.output_shape[0] < 2 {
            return Err(Error::invalid(format!(
                "task `{}` needs at least 2 classes",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `[channels, h, w]` of one input example.
    pub input_shape: [usize; 3],
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head_width: usize,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

/// A trainable tensor with its most recent gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    spec: TaskSpec,
    layers: Vec<ConvLayer>,
}

/// Trunk of 3×3 conv + relu layers feeding one conv decoder per task.
///
/// Parameters are stored in a flat list in trunk-then-head order; heads
/// never share entries with each other or with the trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedBackboneModel {
    config: ModelConfig,
    params: Vec<Param>,
    trunk: Vec<ConvLayer>,
    heads: Vec<Head>,
}

/// Whether a forward pass registers parameters as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Handles produced by [`SharedBackboneModel::forward`].
#[derive(Debug)]
pub struct Forward {
    pub outputs: BTreeMap<String, Var>,
    param_vars: Vec<Option<Var>>,
}

/// Builds a model with He-normal weights and zero biases.
pub fn build_model(config: &ModelConfig) -> Result<SharedBackboneModel> {
    SharedBackboneModel::new(config.clone())
}

impl SharedBackboneModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let [c_in, h, w] = config.input_shape;
        if c_in == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("input shape must be positive"));
        }
        if config.trunk_width == 0 || config.head_width == 0 || config.trunk_depth == 0 {
            return Err(Error::invalid("trunk/head widths and trunk depth must be positive"));
        }
        if config.tasks.is_empty() {
            return Err(Error::invalid("model needs at least one task"));
        }
        for (i, t) in config.tasks.iter().enumerate() {
            t.validate()?;
            if config.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::invalid(format!("duplicate task `{}`", t.name)));
            }
            // conv layers preserve spatial size, so heads must emit the input resolution
            if t.output_shape[1..] != [h, w] {
                return Err(Error::shape(
                    "build_model",
                    format!(
                        "head `{}` output {:?} incompatible with trunk output {:?}",
                        t.name,
                        t.output_shape,
                        [config.trunk_width, h, w]
                    ),
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize, params: &mut Vec<Param>| {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let data = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                value: Tensor::new(vec![c_out, c_in, 3, 3], data).expect("shape"),
                grad: None,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[c_out]),
                grad: None,
            });
            ConvLayer {
                weight: params.len() - 2,
                bias: params.len() - 1,
            }
        };

        let mut trunk = Vec::new();
        let mut width = c_in;
        for i in 0..config.trunk_depth {
            trunk.push(conv(format!("trunk.{i}"), width, config.trunk_width, &mut params));
            width = config.trunk_width;
        }
        let mut heads = Vec::new();
        for spec in &config.tasks {
            let mut layers = Vec::new();
            let mut width = config.trunk_width;
            for i in 0..spec.head_depth {
                let out = if i + 1 == spec.head_depth {
                    spec.output_shape[0]
                } else {
                    config.head_width
                };
                layers.push(conv(format!("head.{}.{i}", spec.name), width, out, &mut params));
                width = out;
            }
            heads.push(Head {
                spec: spec.clone(),
                layers,
            });
        }

        Ok(Self {
            config,
            params,
            trunk,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.heads.iter().map(|h| &h.spec)
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.head(name).map(|h| &h.spec)
    }

    fn head(&self, name: &str) -> Result<&Head> {
        self.heads
            .iter()
            .find(|h| h.spec.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Indices into [`Self::params`] owned by the head of `task`.
    pub fn head_param_indices(&self, task: &str) -> Result<Vec<usize>> {
        Ok(self
            .head(task)?
            .layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect())
    }

    pub fn trunk_param_indices(&self) -> Vec<usize> {
        self.trunk.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn param_var(&self, tape: &mut Tape, vars: &mut [Option<Var>], idx: usize, mode: ParamMode) -> Var {
        if let Some(v) = vars[idx] {
            return v;
        }
        let value = self.params[idx].value.clone();
        let v = match mode {
            ParamMode::Trainable => tape.variable(value),
            ParamMode::Frozen => tape.constant(value),
        };
        vars[idx] = Some(v);
        v
    }

    fn conv_layer(
        &self,
        tape: &mut Tape,
        vars: &mut [Option<Var>],
        layer: &ConvLayer,
        x: Var,
        mode: ParamMode,
    ) -> Result<Var> {
        let w = self.param_var(tape, vars, layer.weight, mode);
        let b = self.param_var(tape, vars, layer.bias, mode);
        tape.conv2d(x, w, Some(b))
    }

    /// Runs the trunk once and the heads of `tasks`. `x` must be
    /// `[batch, channels, h, w]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, tasks: &[&str], mode: ParamMode) -> Result<Forward> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {:?} vs model input {:?}", shape, self.config.input_shape),
            ));
        }
        let heads = tasks
            .iter()
            .map(|t| self.head(t))
            .collect::<Result<Vec<_>>>()?;
        let mut vars = vec![None; self.params.len()];
        let mut h = x;
        for layer in &self.trunk {
            let c = self.conv_layer(tape, &mut vars, layer, h, mode)?;
            h = tape.relu(c)?;
        }
        let features = h;
        let mut outputs = BTreeMap::new();
        for head in heads {
            let mut h = features;
            for (i, layer) in head.layers.iter().enumerate() {
                h = self.conv_layer(tape, &mut vars, layer, h, mode)?;
                if i + 1 < head.layers.len() {
                    h = tape.relu(h)?;
                }
            }
            outputs.insert(head.spec.name.clone(), h);
        }
        Ok(Forward {
            outputs,
            param_vars: vars,
        })
    }

    /// Head outputs for `tasks` without gradient tracking.
    pub fn predict(&self, x: &Tensor, tasks: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, tasks, ParamMode::Frozen)?;
        Ok(fwd
            .outputs
            .into_iter()
            .map(|(k, v)| (k, tape.value(v).clone()))
            .collect())
    }

    /// Records `task`'s loss for an existing forward pass.
    pub fn task_loss_var(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        task: &str,
        target: &Target,
        selection: Option<&PixelWeights>,
    ) -> Result<Var> {
        let spec = self.task(task)?;
        let out = *fwd
            .outputs
            .get(task)
            .ok_or_else(|| Error::invalid(format!("task `{task}` was not part of the forward pass")))?;
        task_loss_var(tape, out, target, spec.loss, selection)
    }

    /// Records `Σ λ_c L_c` over `weights`.
    pub fn multitask_loss_var(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        targets: &TargetMap,
        weights: &[(String, f64)],
    ) -> Result<Var> {
        validate_weights(weights)?;
        let mut total: Option<Var> = None;
        for (task, lambda) in weights {
            let target = targets
                .get(task)
                .ok_or_else(|| Error::invalid(format!("no target for task `{task}`")))?;
            let l = self.task_loss_var(tape, fwd, task, target, None)?;
            let term = tape.scale(l, *lambda)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(total.expect("nonempty weights"))
    }

    /// Moves gradients of the parameters used in `fwd` into [`Param::grad`],
    /// accumulating onto anything already present.
    pub fn store_gradients(&mut self, fwd: &Forward, grads: &mut Gradients) {
        for (param, var) in self.params.iter_mut().zip(&fwd.param_vars) {
            let Some(g) = var.and_then(|v| grads.take(v)) else { continue };
            match &mut param.grad {
                Some(acc) => {
                    acc.add_scaled(&g, 1.0).expect("gradient shape matches parameter");
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

pub(crate) fn validate_weights(weights: &[(String, f64)]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("multi-task loss needs at least one task"));
    }
    if let Some((t, w)) = weights.iter().find(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::invalid(format!("negative weight {w} for task `{t}`")));
    }
    Ok(())
}

/// Value of `L_c(x, y_c)` for a single task.
pub fn task_loss(model: &SharedBackboneModel, x: &Tensor, target: &Target, task: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, &[task], ParamMode::Frozen)?;
    let l = model.task_loss_var(&mut tape, &fwd, task, target, None)?;
    tape.value(l).item()
}

/// Value of `Σ λ_c L_c(x, y_c)`.
pub fn multitask_loss(
    model: &SharedBackboneModel,
    x: &Tensor,
    targets: &TargetMap,
    weights: &[(String, f64)],
) -> Result<f64> {
    validate_weights(weights)?;
    let names: Vec<&str> = weights.iter().map(|(t, _)| t.as_str()).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, &names, ParamMode::Frozen)?;
    let l = model.multitask_loss_var(&mut tape, &fwd, targets, weights)?;
    tape.value(l).item()
}

/// λ_c = 1/M over the given tasks.
pub fn uniform_weights(tasks: &[&str]) -> Vec<(String, f64)> {
    let m = tasks.len() as f64;
    tasks.iter().map(|t| (t.to_string(), 1.0 / m)).collect()
}
