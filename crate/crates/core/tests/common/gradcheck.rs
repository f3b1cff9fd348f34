//! Random small networks checked against central finite differences.

use mtrlab_core::nn::{build_model, LossKind, ModelConfig, ParamMode, SharedBackboneModel, TaskSpec};
use mtrlab_core::tensor::grad_wrt_input;
use mtrlab_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < 1e-7 || diff / analytic.abs().max(numeric.abs()) < 1e-4
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Small dense network `x → [W·x + b → act]×L → loss`.
pub struct Mlp {
    pub params: Vec<Tensor>,
    pub x: Tensor,
    y: Tensor,
    sigmoid: bool,
    cross_entropy: bool,
}

impl Mlp {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let layers = rng.random_range(1..=3);
        let batch = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=5)];
        for _ in 0..layers {
            dims.push(rng.random_range(2..=5));
        }
        let mut params = Vec::new();
        for w in dims.windows(2) {
            params.push(randn(rng, &[w[0], w[1]], 0.8));
            params.push(randn(rng, &[w[1]], 0.3));
        }
        let out = *dims.last().unwrap();
        let cross_entropy = rng.random_bool(0.5);
        let y = if cross_entropy {
            let mut t = Tensor::zeros(&[batch, out]);
            for b in 0..batch {
                let c = rng.random_range(0..out);
                t.data_mut()[b * out + c] = 1.0;
            }
            t
        } else {
            randn(rng, &[batch, out], 1.0)
        };
        Self {
            params,
            x: randn(rng, &[batch, dims[0]], 1.0),
            y,
            sigmoid: rng.random_bool(0.5),
            cross_entropy,
        }
    }

    pub fn record(&self, tape: &mut Tape, params: &[Tensor], x: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let mut h = x;
        let n = vars.len() / 2;
        for l in 0..n {
            let z = tape.matmul(h, vars[2 * l])?;
            let z = tape.add_row_bias(z, vars[2 * l + 1])?;
            h = if l + 1 == n {
                z
            } else if self.sigmoid {
                tape.sigmoid(z)?
            } else {
                tape.relu(z)?
            };
        }
        let y = tape.constant(self.y.clone());
        let loss = if self.cross_entropy {
            let lp = tape.log_softmax(h, 1)?;
            let picked = tape.mul(lp, y)?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0 / self.y.shape()[0] as f64)?
        } else {
            let d = tape.sub(h, y)?;
            let sq = tape.square(d)?;
            tape.mean(sq)?
        };
        Ok((loss, vars))
    }

    fn loss(&self, params: &[Tensor], x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (l, _) = self.record(&mut tape, params, xv).unwrap();
        tape.value(l).item().unwrap()
    }

    /// Analytic gradients for every parameter and the input.
    pub fn gradients(&self) -> (Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.variable(self.x.clone());
        let (l, vars) = self.record(&mut tape, &self.params, xv).unwrap();
        let mut g = tape.backward(l).unwrap();
        let pg = vars.iter().map(|v| g.take(*v).unwrap()).collect();
        (pg, g.take(xv).unwrap())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

/// Count of gradient components that disagree with central differences.
fn check_mlp(net: &Mlp) -> usize {
    let (pg, xg) = net.gradients();
    let mut bad = 0;
    for (i, g) in pg.iter().enumerate() {
        for j in 0..g.len() {
            let num = central(|h| {
                let mut p = net.params.clone();
                p[i].data_mut()[j] += h;
                net.loss(&p, &net.x)
            });
            bad += usize::from(!close(g.data()[j], num));
        }
    }
    for j in 0..net.x.len() {
        let num = central(|h| {
            let mut x = net.x.clone();
            x.data_mut()[j] += h;
            net.loss(&net.params, &x)
        });
        bad += usize::from(!close(xg.data()[j], num));
    }
    bad
}

fn tiny_conv_model(rng: &mut ChaCha8Rng) -> (SharedBackboneModel, Tensor, mtrlab_core::nn::TargetMap, String) {
    let side = rng.random_range(3..=4);
    let kind = [LossKind::PixelCrossEntropy, LossKind::L1, LossKind::Mse][rng.random_range(0..3)];
    let channels = if kind == LossKind::PixelCrossEntropy { 2 } else { 1 };
    let config = ModelConfig {
        input_shape: [1, side, side],
        trunk_width: 2,
        trunk_depth: rng.random_range(1..=2),
        head_width: 2,
        tasks: vec![TaskSpec::new("t", kind, &[channels, side, side]).with_head_depth(1)],
        seed: rng.random(),
    };
    let mut model = build_model(&config).unwrap();
    // nonzero biases exercise the bias gradient path
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = Tensor::new(
        vec![1, 1, side, side],
        (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let target = if kind == LossKind::PixelCrossEntropy {
        mtrlab_core::nn::Target::Classes {
            shape: [1, side, side],
            labels: (0..side * side).map(|_| rng.random_range(0..2)).collect(),
        }
    } else {
        mtrlab_core::nn::Target::Dense(randn(rng, &[1, 1, side, side], 1.0))
    };
    let mut targets = mtrlab_core::nn::TargetMap::new();
    targets.insert("t".to_string(), target);
    (model, x, targets, "t".to_string())
}

fn check_conv(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let (mut model, x, targets, task) = tiny_conv_model(rng);
    let weights = vec![(task.clone(), 1.0)];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, &[&task], ParamMode::Trainable).unwrap();
    let l = model.multitask_loss_var(&mut tape, &fwd, &targets, &weights).unwrap();
    let mut g = tape.backward(l).unwrap();
    model.zero_grad();
    model.store_gradients(&fwd, &mut g);
    let loss_at = |m: &SharedBackboneModel, x: &Tensor| mtrlab_core::nn::multitask_loss(m, x, &targets, &weights).unwrap();
    let mut bad = 0;
    let mut count = 0;
    for i in 0..model.params().len() {
        let grad = model.params()[i].grad.clone().unwrap();
        for j in 0..grad.len() {
            let num = central(|h| {
                let mut m = model.clone();
                m.params_mut()[i].value.data_mut()[j] += h;
                loss_at(&m, &x)
            });
            bad += usize::from(!close(grad.data()[j], num));
            count += 1;
        }
    }
    let (_, xg) = grad_wrt_input(&x, |tape, xv| {
        let fwd = model.forward(tape, xv, &[&task], ParamMode::Frozen)?;
        model.multitask_loss_var(tape, &fwd, &targets, &weights)
    })
    .unwrap();
    for j in 0..x.len() {
        let num = central(|h| {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            loss_at(&model, &xp)
        });
        bad += usize::from(!close(xg.data()[j], num));
    }
    (bad, count, x.len())
}


/// Outcome of checking one random network.
pub struct NetCheck {
    pub parameters: usize,
    pub components: usize,
    pub mismatches: usize,
}

/// Checks network `index` of the stream seeded by `seed`; even indices
/// are dense networks and odd ones conv models.
pub fn check_random_network(seed: u64, index: usize) -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    if index % 2 == 0 {
        let net = Mlp::random(&mut rng);
        NetCheck {
            parameters: net.num_params(),
            components: net.num_params() + net.x.len(),
            mismatches: check_mlp(&net),
        }
    } else {
        let (mismatches, parameters, inputs) = check_conv(&mut rng);
        NetCheck {
            parameters,
            components: parameters + inputs,
            mismatches,
        }
    }
}
