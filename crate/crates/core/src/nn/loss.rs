use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Loss families for dense prediction heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Per-pixel softmax cross-entropy against class indices.
    PixelCrossEntropy,
    L1,
    Mse,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::PixelCrossEntropy => "pixel-cross-entropy",
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixel-cross-entropy" | "cross-entropy" | "ce" => Ok(LossKind::PixelCrossEntropy),
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Ground truth for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Class index per pixel, laid out `[batch, h, w]`.
    Classes { shape: [usize; 3], labels: Vec<usize> },
    /// Dense regression target shaped like the head output.
    Dense(Tensor),
}

impl Target {
    pub fn batch(&self) -> usize {
        match self {
            Target::Classes { shape, .. } => shape[0],
            Target::Dense(t) => t.shape()[0],
        }
    }
}

pub type TargetMap = BTreeMap<String, Target>;

/// Per-pixel weights (`[batch, h, w]`, summing to one) restricting a loss
/// to a subset of output locations.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeights {
    pub shape: [usize; 3],
    pub weights: Vec<f64>,
}

impl PixelWeights {
    /// Equal weight on each listed flat pixel index.
    pub fn select(shape: [usize; 3], pixels: &[usize]) -> Result<Self> {
        let total = shape.iter().product::<usize>();
        if pixels.is_empty() {
            return Err(Error::invalid("empty pixel selection"));
        }
        let mut weights = vec![0.0; total];
        let w = 1.0 / pixels.len() as f64;
        for &p in pixels {
            if p >= total {
                return Err(Error::invalid(format!("pixel {p} outside {total}")));
            }
            weights[p] += w;
        }
        Ok(Self { shape, weights })
    }
}

fn output_dims(tape: &Tape, out: Var) -> Result<[usize; 4]> {
    let s = tape.shape(out);
    if s.len() != 4 {
        return Err(Error::shape("task_loss", format!("head output must be rank 4, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Records the loss of one head output against its target; the result
/// is a scalar averaged over pixels (and channels for dense targets).
pub fn task_loss_var(
    tape: &mut Tape,
    out: Var,
    target: &Target,
    kind: LossKind,
    selection: Option<&PixelWeights>,
) -> Result<Var> {
    let [n, c, h, w] = output_dims(tape, out)?;
    let plane = h * w;
    if let Some(sel) = selection {
        if sel.shape != [n, h, w] {
            return Err(Error::shape(
                "task_loss",
                format!("selection {:?} vs output {:?}", sel.shape, [n, h, w]),
            ));
        }
    }
    match (kind, target) {
        (LossKind::PixelCrossEntropy, Target::Classes { shape, labels }) => {
            if *shape != [n, h, w] || labels.len() != n * plane {
                return Err(Error::shape(
                    "task_loss",
                    format!("labels {shape:?} vs logits {:?}", tape.shape(out)),
                ));
            }
            let uniform = 1.0 / (n * plane) as f64;
            let mut coef = vec![0.0; n * c * plane];
            for b in 0..n {
                for p in 0..plane {
                    let label = labels[b * plane + p];
                    if label >= c {
                        return Err(Error::invalid(format!(
                            "class index {label} out of range for {c} classes"
                        )));
                    }
                    let wgt = selection.map_or(uniform, |s| s.weights[b * plane + p]);
                    coef[(b * c + label) * plane + p] = -wgt;
                }
            }
            let logp = tape.log_softmax(out, 1)?;
            let coef = tape.constant(Tensor::new(vec![n, c, h, w], coef)?);
            let picked = tape.mul(logp, coef)?;
            tape.sum(picked)
        }
        (LossKind::L1 | LossKind::Mse, Target::Dense(t)) => {
            if t.shape() != tape.shape(out) {
                return Err(Error::shape(
                    "task_loss",
                    format!("target {:?} vs output {:?}", t.shape(), tape.shape(out)),
                ));
            }
            let tv = tape.constant(t.clone());
            let diff = tape.sub(out, tv)?;
            let elem = if kind == LossKind::L1 {
                tape.abs(diff)?
            } else {
                tape.square(diff)?
            };
            match selection {
                None => tape.mean(elem),
                Some(sel) => {
                    let mut coef = vec![0.0; n * c * plane];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                coef[(b * c + ch) * plane + p] = sel.weights[b * plane + p] / c as f64;
                            }
                        }
                    }
                    let coef = tape.constant(Tensor::new(vec![n, c, h, w], coef)?);
                    let weighted = tape.mul(elem, coef)?;
                    tape.sum(weighted)
                }
            }
        }
        (kind, _) => Err(Error::invalid(format!(
            "target type does not match loss kind {}",
            kind.as_str()
        ))),
    }
}
