//! Layers composed from tape primitives. Because they are compositions, their
//! backward rules (and the rules of those backward rules) come for free.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f32 = 1e-5;

fn dims4(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

/// `x: [B, in] · w: [in, out] + b: [out]`
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let out = tape.shape(y)[1];
    let b = tape.reshape(b, &[1, out])?;
    tape.add(y, b)
}

/// Convolution plus per-channel bias `b: [O]`.
pub fn conv2d_bias(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, padding)?;
    add_channel_bias(tape, y, b)
}

pub fn add_channel_bias(tape: &mut Tape, y: Var, b: Var) -> Result<Var> {
    let c = tape.shape(y)[1];
    let b = tape.reshape(b, &[1, c, 1, 1])?;
    tape.add(y, b)
}

fn affine(tape: &mut Tape, y: Var, gamma: Var, beta: Var) -> Result<Var> {
    let c = tape.shape(y)[1];
    let g = tape.reshape(gamma, &[1, c, 1, 1])?;
    let b = tape.reshape(beta, &[1, c, 1, 1])?;
    let y = tape.mul(y, g)?;
    tape.add(y, b)
}

/// Centers and scales `x` by statistics taken over the axes where
/// `stat_shape` is 1. Returns the normalized value and the (biased) mean and
/// variance.
fn standardize(tape: &mut Tape, x: Var, stat_shape: &[usize]) -> Result<(Var, Var, Var)> {
    let n = tape.value(x).numel() / stat_shape.iter().product::<usize>();
    let s = tape.sum_to(x, stat_shape)?;
    let mean = tape.scale(s, 1.0 / n as f32)?;
    let xc = tape.sub(x, mean)?;
    let sq = tape.square(xc)?;
    let ss = tape.sum_to(sq, stat_shape)?;
    let var = tape.scale(ss, 1.0 / n as f32)?;
    let ve = tape.add_scalar(var, NORM_EPS)?;
    let sd = tape.sqrt(ve)?;
    let inv = tape.recip(sd)?;
    Ok((tape.mul(xc, inv)?, mean, var))
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let [b, c, _, _] = dims4(tape, x, "instance_norm")?;
    let (y, _, _) = standardize(tape, x, &[b, c, 1, 1])?;
    affine(tape, y, gamma, beta)
}

/// Training-mode batch normalization. Also returns the batch mean and
/// biased variance (each `[C]`) for running-statistic updates.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<(Var, Tensor, Tensor)> {
    let [_, c, _, _] = dims4(tape, x, "batch_norm")?;
    let (y, mean, var) = standardize(tape, x, &[1, c, 1, 1])?;
    let mean = tape.value(mean).clone().reshaped(&[c])?;
    let var = tape.value(var).clone().reshaped(&[c])?;
    Ok((affine(tape, y, gamma, beta)?, mean, var))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Var> {
    let [_, c, _, _] = dims4(tape, x, "batch_norm")?;
    if running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::shape("batch_norm", "running statistics do not match channels"));
    }
    let mean = tape.constant(running_mean.clone().reshaped(&[1, c, 1, 1])?);
    let inv: Vec<f32> = running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v + NORM_EPS).sqrt())
        .collect();
    let inv = tape.constant(Tensor::new(vec![1, c, 1, 1], inv)?);
    let xc = tape.sub(x, mean)?;
    let y = tape.mul(xc, inv)?;
    affine(tape, y, gamma, beta)
}

/// `[B, C, H, W] -> [B, C]`
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let [b, c, h, w] = dims4(tape, x, "global_avg_pool")?;
    let s = tape.sum_to(x, &[b, c, 1, 1])?;
    let m = tape.scale(s, 1.0 / (h * w) as f32)?;
    tape.reshape(m, &[b, c])
}

/// Mean over everything except the leading (batch) axis: `[B, ...] -> [B]`.
pub fn per_sample_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let b = *shape.first().ok_or_else(|| Error::shape("per_sample_mean", "rank 0 input"))?;
    let mut target = vec![1; shape.len()];
    target[0] = b;
    let n = tape.value(x).numel() / b.max(1);
    let s = tape.sum_to(x, &target)?;
    let m = tape.scale(s, 1.0 / n as f32)?;
    tape.reshape(m, &[b])
}
