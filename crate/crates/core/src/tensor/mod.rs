//! Dense tensors and the reverse-mode tape that differentiates them.

mod conv;
mod dense;
mod tape;

pub use dense::{sign, Tensor};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;

/// Evaluates `loss_fn` on a fresh tape with `x` as the only
/// differentiable leaf and returns `(loss, ∂loss/∂x)`.
///
/// Anything `loss_fn` records with [`Tape::constant`] (model weights in
/// particular) receives no gradient.
pub fn grad_wrt_input<F>(x: &Tensor, loss_fn: F) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let loss = loss_fn(&mut tape, xv)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(xv).unwrap_or_else(|| Tensor::zeros_like(x));
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(vec![3.0, -1.0]);
        let (loss, g) = grad_wrt_input(&x, |t, v| {
            let sq = t.square(v)?;
            let s = t.sum(sq)?;
            t.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(g.data(), &[3.0, -1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let (loss, g) = grad_wrt_input(&x, |t, _| Ok(t.constant(Tensor::scalar(4.2)))).unwrap();
        assert_eq!(loss, 4.2);
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn cancelling_two_task_mean() {
        // L = (r1·x + r2·x) / 2 with r1 = (1,0), r2 = (-1,0)
        let x = Tensor::vector(vec![0.3, 0.7]);
        let (_, g) = grad_wrt_input(&x, |t, v| {
            let r1 = t.constant(Tensor::vector(vec![1.0, 0.0]));
            let r2 = t.constant(Tensor::vector(vec![-1.0, 0.0]));
            let a = t.mul(r1, v)?;
            let b = t.mul(r2, v)?;
            let l1 = t.sum(a)?;
            let l2 = t.sum(b)?;
            let s = t.add(l1, l2)?;
            t.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }
}
