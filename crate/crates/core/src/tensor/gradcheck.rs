//! Finite-difference verification of the tape's gradient rules.
//!
//! Each case projects a kernel's output onto a fixed random direction, so a
//! single scalar loss exercises every output entry. Gradients are compared
//! against a fourth-order central difference, evaluated on fresh tapes.
//! Second-order cases differentiate a gradient norm, as the gradient penalty
//! does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{nn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::LatentAnchor;

/// Finite-difference step.
pub const FD_STEP: f32 = 1e-2;

/// Worst norm-wise relative error of one kernel over its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

/// How input values are drawn: away from kinks, or strictly positive.
#[derive(Clone, Copy)]
enum Domain {
    Normal,
    AwayFromZero,
    Positive,
}

struct Input {
    shape: Vec<usize>,
    domain: Domain,
}

fn inp(shape: &[usize], domain: Domain) -> Input {
    Input {
        shape: shape.to_vec(),
        domain,
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Input>,
    build: Build,
}

fn draw(rng: &mut ChaCha8Rng, input: &Input) -> Result<Tensor> {
    let n: usize = input.shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            match input.domain {
                Domain::Normal => v,
                Domain::AwayFromZero => v.signum() * (0.1 + v.abs()),
                Domain::Positive => rng.random_range(0.6f32..2.0),
            }
        })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

/// `Σ c ⊙ f(x)` with fixed random `c`, evaluated on a fresh tape.
fn projected(case: &Case, values: &[Tensor], proj: &Tensor) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let y = (case.build)(&mut tape, &vars)?;
    let c = tape.constant(proj.clone().reshaped(tape.shape(y))?);
    let yc = tape.mul(y, c)?;
    let loss = tape.sum_all(yc)?;
    Ok((tape, vars, loss))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference for tiny norms.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

fn check(make: &dyn Fn(&mut ChaCha8Rng) -> Case, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let case = make(&mut rng);
        let values = case.inputs.iter().map(|i| draw(&mut rng, i)).collect::<Result<Vec<_>>>()?;
        let n_out = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let y = (case.build)(&mut tape, &vars)?;
            tape.value(y).numel()
        };
        let scale = 1.0 / (n_out as f32).sqrt();
        let proj = Tensor::new(
            vec![n_out],
            (0..n_out).map(|_| StandardNormal.sample(&mut rng)).map(|v: f32| v * scale).collect(),
        )?;
        let (mut tape, vars, loss) = projected(&case, &values, &proj)?;
        let grads = tape.grad(loss, &vars)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (k, g) in grads.iter().enumerate() {
            let n = values[k].numel();
            match g {
                Some(g) => analytic.extend(tape.value(*g).data().iter().map(|&v| v as f64)),
                None => analytic.extend(std::iter::repeat_n(0.0, n)),
            }
            for i in 0..n {
                let eval = |delta: f32| -> Result<f64> {
                    let mut vs = values.clone();
                    vs[k].data_mut()[i] += delta;
                    let (tape, _, loss) = projected(&case, &vs, &proj)?;
                    Ok(tape.value(loss).item() as f64)
                };
                let near = eval(FD_STEP)? - eval(-FD_STEP)?;
                let far = eval(2.0 * FD_STEP)? - eval(-2.0 * FD_STEP)?;
                numeric.push((8.0 * near - far) / (12.0 * FD_STEP as f64));
            }
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn unary(f: fn(&mut Tape, Var) -> Result<Var>, domain: Domain) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
        Case {
            inputs: vec![inp(&shape, domain)],
            build: Box::new(move |t, v| f(t, v[0])),
        }
    }
}

fn binary_broadcast(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (r, c) = (dim(rng, 1, 3), dim(rng, 1, 4));
        let b_shape = match rng.random_range(0..3) {
            0 => [r, c],
            1 => [1, c],
            _ => [r, 1],
        };
        Case {
            inputs: vec![inp(&[r, c], Domain::Normal), inp(&b_shape, Domain::Normal)],
            build: Box::new(move |t, v| f(t, v[0], v[1])),
        }
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, c, o) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
    let stride = (dim(rng, 1, 2), dim(rng, 1, 2));
    Case {
        inputs: vec![inp(&[b, c, h, w], Domain::Normal), inp(&[o, c, 3, 3], Domain::Normal)],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, (1, 1))),
    }
}

fn conv_transpose_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, c, o) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
    let stride = (dim(rng, 1, 2), dim(rng, 1, 2));
    let out_hw = (h * stride.0, w * stride.1);
    Case {
        inputs: vec![inp(&[b, o, h, w], Domain::Normal), inp(&[o, c, 3, 3], Domain::Normal)],
        build: Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], stride, (1, 1), out_hw)),
    }
}

fn norm_case(batch_stats: bool) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (b, c, h, w) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 2, 3));
        Case {
            inputs: vec![
                inp(&[b, c, h, w], Domain::Normal),
                inp(&[c], Domain::Normal),
                inp(&[c], Domain::Normal),
            ],
            build: Box::new(move |t, v| {
                if batch_stats {
                    Ok(nn::batch_norm_train(t, v[0], v[1], v[2])?.0)
                } else {
                    nn::instance_norm(t, v[0], v[1], v[2])
                }
            }),
        }
    }
}

/// Squared input-gradient norm of a small critic-like head; its gradient
/// needs second-order rules of every kernel on the path.
fn penalty_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, c, o) = (dim(rng, 1, 2), 1, dim(rng, 1, 2));
    let (h, w) = (dim(rng, 3, 4), dim(rng, 3, 4));
    let proj: Vec<f32> = (0..b * o * h * w).map(|_| StandardNormal.sample(rng)).collect();
    Case {
        inputs: vec![
            inp(&[b, c, h, w], Domain::Normal),
            inp(&[o, c, 3, 3], Domain::Normal),
            inp(&[o], Domain::Positive),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], (1, 1), (1, 1))?;
            let y = t.tanh(y)?;
            let g = t.reshape(v[2], &[1, o, 1, 1])?;
            let y = t.mul(y, g)?;
            let p = t.constant(Tensor::new(vec![b, o, h, w], proj.clone())?);
            let s = t.mul(y, p)?;
            let s = t.sum_all(s)?;
            let dx = t.grad(s, &[v[0]])?[0].ok_or_else(|| Error::Degenerate("score ignores its input".into()))?;
            let sq = t.square(dx)?;
            let n = t.sum_all(sq)?;
            let n = t.add_scalar(n, 1.0)?;
            let n = t.sqrt(n)?;
            t.reshape(n, &[1])
        }),
    }
}

/// Second order through instance norm and leaky ReLU (the critic block).
fn critic_block_penalty_case(rng: &mut ChaCha8Rng) -> Case {
    let b = dim(rng, 1, 2);
    let (h, w) = (dim(rng, 3, 4), dim(rng, 3, 4));
    let proj: Vec<f32> = (0..b * 2 * h * w).map(|_| StandardNormal.sample(rng)).collect();
    Case {
        inputs: vec![inp(&[b, 1, h, w], Domain::Normal), inp(&[2, 1, 3, 3], Domain::Normal)],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], (1, 1), (1, 1))?;
            let one = t.constant(Tensor::full(&[2], 1.0));
            let zero = t.constant(Tensor::zeros(&[2]));
            let y = nn::instance_norm(t, y, one, zero)?;
            let y = t.tanh(y)?;
            let p = t.constant(Tensor::new(vec![b, 2, h, w], proj.clone())?);
            let s = t.mul(y, p)?;
            let s = t.sum_all(s)?;
            let dx = t.grad(s, &[v[0]])?[0].ok_or_else(|| Error::Degenerate("score ignores its input".into()))?;
            let sq = t.square(dx)?;
            let n = t.mean_all(sq)?;
            t.reshape(n, &[1])
        }),
    }
}

/// Runs every differentiable kernel through `trials` random cases each.
pub fn check_kernels(trials: usize) -> Result<Vec<KernelCheck>> {
    let mut report = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(&mut ChaCha8Rng) -> Case| -> Result<()> {
        let seed = report.len() as u64 + 1;
        let worst = check(make, trials, seed)?;
        report.push(KernelCheck { name, trials, worst });
        Ok(())
    };

    run("add", &binary_broadcast(|t, a, b| t.add(a, b)))?;
    run("sub", &binary_broadcast(|t, a, b| t.sub(a, b)))?;
    run("mul", &binary_broadcast(|t, a, b| t.mul(a, b)))?;
    run("neg", &unary(|t, a| t.neg(a), Domain::Normal))?;
    run("scale", &unary(|t, a| t.scale(a, -1.7), Domain::Normal))?;
    run("add_scalar", &unary(|t, a| t.add_scalar(a, 0.3), Domain::Normal))?;
    run("square", &unary(|t, a| t.square(a), Domain::Normal))?;
    run("cube", &unary(|t, a| t.cube(a), Domain::Normal))?;
    run("sqrt", &unary(|t, a| t.sqrt(a), Domain::Positive))?;
    run("log", &unary(|t, a| t.log(a), Domain::Positive))?;
    run("recip", &unary(|t, a| t.recip(a), Domain::Positive))?;
    run("tanh", &unary(|t, a| t.tanh(a), Domain::Normal))?;
    run("leaky_relu", &unary(|t, a| t.leaky_relu(a, 0.2), Domain::AwayFromZero))?;
    run("relu", &unary(|t, a| t.relu(a), Domain::AwayFromZero))?;
    run("abs", &unary(|t, a| t.abs(a), Domain::AwayFromZero))?;
    run("clamp_min", &unary(|t, a| t.clamp_min(a, 0.0), Domain::AwayFromZero))?;
    run("reshape", &unary(
        |t, a| {
            let n = t.value(a).numel();
            t.reshape(a, &[n])
        },
        Domain::Normal,
    ))?;
    run("transpose", &unary(|t, a| t.transpose(a), Domain::Normal))?;
    run("sum_to", &|rng: &mut ChaCha8Rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
        let target = [s[0], 1, s[2]];
        Case {
            inputs: vec![inp(&s, Domain::Normal)],
            build: Box::new(move |t, v| t.sum_to(v[0], &target)),
        }
    })?;
    run("broadcast_to", &|rng: &mut ChaCha8Rng| {
        let s = [dim(rng, 1, 3), 1, dim(rng, 1, 3)];
        let target = [s[0], dim(rng, 2, 3), s[2]];
        Case {
            inputs: vec![inp(&s, Domain::Normal)],
            build: Box::new(move |t, v| t.broadcast_to(v[0], &target)),
        }
    })?;
    run("sum_all", &unary(|t, a| t.sum_all(a), Domain::Normal))?;
    run("mean_all", &unary(|t, a| t.mean_all(a), Domain::Normal))?;
    run("matmul", &|rng: &mut ChaCha8Rng| {
        let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        Case {
            inputs: vec![inp(&[m, k], Domain::Normal), inp(&[k, n], Domain::Normal)],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        }
    })?;
    run("linear", &|rng: &mut ChaCha8Rng| {
        let (b, i, o) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
        Case {
            inputs: vec![inp(&[b, i], Domain::Normal), inp(&[i, o], Domain::Normal), inp(&[o], Domain::Normal)],
            build: Box::new(|t, v| nn::linear(t, v[0], v[1], v[2])),
        }
    })?;
    run("conv2d", &conv_case)?;
    run("conv_transpose2d", &conv_transpose_case)?;
    run("instance_norm", &norm_case(false))?;
    run("batch_norm", &norm_case(true))?;
    run("global_avg_pool", &|rng: &mut ChaCha8Rng| {
        let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
        Case {
            inputs: vec![inp(&s, Domain::Normal)],
            build: Box::new(|t, v| nn::global_avg_pool(t, v[0])),
        }
    })?;
    run("skewness", &|rng: &mut ChaCha8Rng| {
        let n = dim(rng, 4, 12);
        Case {
            inputs: vec![inp(&[n], Domain::Normal)],
            build: Box::new(|t, v| {
                let s = losses::skewness(t, v[0])?;
                t.reshape(s, &[1])
            }),
        }
    })?;
    run("kl_loss", &|rng: &mut ChaCha8Rng| {
        let (b, z) = (dim(rng, 6, 10), dim(rng, 2, 5));
        Case {
            inputs: vec![inp(&[b, z], Domain::Normal)],
            build: Box::new(|t, v| {
                let anchor = LatentAnchor::new(0.1, 0.8)?;
                let l = losses::kl_loss(t, v[0], anchor, 0.1)?;
                t.reshape(l, &[1])
            }),
        }
    })?;
    run("second_order_conv_tanh", &penalty_case)?;
    run("second_order_instance_norm", &critic_block_penalty_case)?;

    Ok(report)
}
