//! Evaluation metrics: mIoU for segmentation, mean absolute error and
//! mean squared error for dense regression.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K×K` confusion counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: usize,
    counts: Vec<u64>,
    ignore_label: Option<usize>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore_label: None,
        }
    }

    /// Pixels whose true label equals `label` are skipped.
    pub fn with_ignore_label(mut self, label: usize) -> Self {
        self.ignore_label = Some(label);
        self
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if Some(truth) == self.ignore_label {
            return Ok(());
        }
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(format!(
                "class pair ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("confusion", format!("{} vs {}", truth.len(), predicted.len())));
        }
        truth.iter().zip(predicted).try_for_each(|(&t, &p)| self.add(t, p))
    }

    /// Scores `[batch, K, h, w]` logits against `[batch, h, w]` labels.
    pub fn add_logits(&mut self, logits: &Tensor, labels: &[usize]) -> Result<()> {
        let predicted = argmax_classes(logits)?;
        self.add_all(labels, &predicted)
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge accumulators with different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-pixel argmax over the class axis of `[batch, K, h, w]`; ties go
/// to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::shape("argmax", format!("expected rank 4, got {s:?}")));
    }
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Mean over classes of `TP / (TP + FP + FN)`, skipping classes absent
/// from both truth and prediction.
pub fn miou(acc: &ConfusionAccumulator) -> Result<f64> {
    if acc.total() == 0 {
        return Err(Error::invalid("mIoU of an empty accumulator"));
    }
    let k = acc.classes;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = acc.count(c, c);
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| acc.count(c, p)).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| acc.count(t, c)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            continue;
        }
        sum += tp as f64 / union as f64;
        present += 1;
    }
    Ok(sum / present as f64)
}

pub fn abs_error(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "abs_error")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "mse")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Which metric scores a task and in which direction it improves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    MeanIou,
    AbsError,
    Mse,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::MeanIou)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanIou => "miou",
            MetricKind::AbsError => "abs_error",
            MetricKind::Mse => "mse",
        }
    }

    /// Relative improvement of `value` over `baseline`, positive when better.
    pub fn relative_improvement(self, value: f64, baseline: f64) -> f64 {
        let delta = if self.higher_is_better() {
            value - baseline
        } else {
            baseline - value
        };
        delta / baseline.abs().max(f64::MIN_POSITIVE)
    }
}

/// Running per-task score accumulated example by example.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricAccumulator {
    Confusion(ConfusionAccumulator),
    /// Sum of per-element errors and element count.
    Mean { kind: MetricKind, sum: f64, count: usize },
}

impl MetricAccumulator {
    pub fn new(kind: MetricKind, classes: usize) -> Self {
        match kind {
            MetricKind::MeanIou => MetricAccumulator::Confusion(ConfusionAccumulator::new(classes)),
            kind => MetricAccumulator::Mean { kind, sum: 0.0, count: 0 },
        }
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            MetricAccumulator::Confusion(_) => MetricKind::MeanIou,
            MetricAccumulator::Mean { kind, .. } => *kind,
        }
    }

    pub fn add_dense(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let MetricAccumulator::Mean { kind, sum, count } = self else {
            return Err(Error::invalid("dense prediction scored by a confusion accumulator"));
        };
        let m = match kind {
            MetricKind::AbsError => abs_error(pred, target)?,
            _ => mse(pred, target)?,
        };
        *sum += m * pred.len() as f64;
        *count += pred.len();
        Ok(())
    }

    pub fn add_classes(&mut self, logits: &Tensor, labels: &[usize]) -> Result<()> {
        let MetricAccumulator::Confusion(acc) = self else {
            return Err(Error::invalid("class labels scored by a dense accumulator"));
        };
        acc.add_logits(logits, labels)
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        match (self, other) {
            (MetricAccumulator::Confusion(a), MetricAccumulator::Confusion(b)) => a.merge(b),
            (
                MetricAccumulator::Mean { kind: ka, sum: sa, count: ca },
                MetricAccumulator::Mean { kind: kb, sum: sb, count: cb },
            ) if ka == kb => {
                *sa += sb;
                *ca += cb;
                Ok(())
            }
            _ => Err(Error::invalid("cannot merge accumulators of different kinds")),
        }
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            MetricAccumulator::Confusion(acc) => miou(acc),
            MetricAccumulator::Mean { count: 0, .. } => Err(Error::invalid("metric over zero elements")),
            MetricAccumulator::Mean { sum, count, .. } => Ok(sum / *count as f64),
        }
    }
}
