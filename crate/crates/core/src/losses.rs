//! Critic and generator objectives.
//!
//! Critic: `L_D = L_f − L_r + L_gp`. Generator:
//! `L_G = −L_f + L_rec + L_KL + L_γ`. All reductions are means so loss scales
//! do not depend on the batch size.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::LatentAnchor;
use crate::tensor::{Tape, Tensor, Var};

/// Smallest standard deviation accepted by the skewness terms.
pub const SKEW_MIN_STD: f64 = 1e-6;
/// Per-dimension latent standard-deviation floor inside the KL term.
pub const KL_STD_FLOOR: f32 = 1e-6;
/// Keeps the penalty's norm differentiable at a zero gradient.
const GP_NORM_EPS: f32 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gp: f32,
    pub kl: f32,
    pub rec: f32,
    pub skew: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gp: 10.0,
            kl: 0.1,
            rec: 1.0,
            skew: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_gp", self.gp), ("lambda_kl", self.kl), ("lambda_rec", self.rec), ("lambda_skew", self.skew)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Every term of one training step, weighted as it enters its objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_f: f64,
    pub l_r: f64,
    pub l_gp: f64,
    pub l_d: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_skew: f64,
    pub l_g: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,L_f,L_r,L_gp,L_D,L_rec,L_KL,L_gamma,L_G";

impl LossReport {
    /// Assembles the report; `L_D` and `L_G` are derived from the terms.
    pub fn new(l_f: f64, l_r: f64, l_gp: f64, l_rec: f64, l_kl: f64, l_skew: f64) -> Self {
        Self {
            l_f,
            l_r,
            l_gp,
            l_d: l_f - l_r + l_gp,
            l_rec,
            l_kl,
            l_skew,
            l_g: -l_f + l_rec + l_kl + l_skew,
        }
    }

    pub fn identities_hold(&self, tol: f64) -> bool {
        (self.l_d - (self.l_f - self.l_r + self.l_gp)).abs() <= tol
            && (self.l_g - (-self.l_f + self.l_rec + self.l_kl + self.l_skew)).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        [self.l_f, self.l_r, self.l_gp, self.l_d, self.l_rec, self.l_kl, self.l_skew, self.l_g]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{},{},{},{},{},{},{},{}",
            self.l_f, self.l_r, self.l_gp, self.l_d, self.l_rec, self.l_kl, self.l_skew, self.l_g
        )
    }

    /// Parses a row written by [`csv_row`](Self::csv_row).
    pub fn parse_csv_row(line: &str) -> Result<(usize, usize, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!("loss row needs 10 fields: {line}")));
        }
        let bad = || Error::Format(format!("unparseable loss row: {line}"));
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            Self {
                l_f: n(2)?,
                l_r: n(3)?,
                l_gp: n(4)?,
                l_d: n(5)?,
                l_rec: n(6)?,
                l_kl: n(7)?,
                l_skew: n(8)?,
                l_g: n(9)?,
            },
        ))
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// `(L_f, L_r)`: mean critic score on generated and on true samples.
pub fn critic_loss(tape: &mut Tape, fake_scores: Var, real_scores: Var) -> Result<(Var, Var)> {
    Ok((tape.mean_all(fake_scores)?, tape.mean_all(real_scores)?))
}

pub struct GradientPenalty {
    /// `λ_gp · mean[(‖∇D(H̃)‖ − 1)²]`
    pub penalty: Var,
    /// Per-sample `‖∇D(H̃)‖`.
    pub grad_norms: Vec<f32>,
}

/// Draws one `ε ~ U(0, 1)` per sample, forms `H̃ = εH + (1 − ε)Ĥ`, and
/// penalizes the deviation of each sample's input-gradient norm from 1.
/// `score` must map a `[B, ...]` batch to `[B]` per-sample scores; the
/// result stays differentiable with respect to whatever `score` depends on.
pub fn gradient_penalty<R, F>(
    tape: &mut Tape,
    h: &Tensor,
    h_hat: &Tensor,
    lambda: f32,
    rng: &mut R,
    mut score: F,
) -> Result<GradientPenalty>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if h.shape() != h_hat.shape() || h.rank() == 0 || h.numel() == 0 {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?} vs {:?}", h.shape(), h_hat.shape()),
        ));
    }
    let b = h.shape()[0];
    let per = h.numel() / b;
    let eps: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
    let mut mix = h.clone();
    for (i, chunk) in mix.data_mut().chunks_mut(per).enumerate() {
        let e = eps[i];
        let fake = &h_hat.data()[i * per..(i + 1) * per];
        for (m, &f) in chunk.iter_mut().zip(fake) {
            *m = e * *m + (1.0 - e) * f;
        }
    }
    let x = tape.constant(mix);
    let s = score(tape, x)?;
    if tape.shape(s) != [b] {
        return Err(Error::shape(
            "gradient_penalty",
            format!("score must be [{b}], got {:?}", tape.shape(s)),
        ));
    }
    let total = tape.sum_all(s)?;
    let grad = tape.grad(total, &[x])?[0];
    let mut stat_shape = vec![1; h.rank()];
    stat_shape[0] = b;
    let sq_norm = match grad {
        Some(g) => {
            let sq = tape.square(g)?;
            tape.sum_to(sq, &stat_shape)?
        }
        None => tape.constant(Tensor::zeros(&stat_shape)),
    };
    let padded = tape.add_scalar(sq_norm, GP_NORM_EPS)?;
    let norm = tape.sqrt(padded)?;
    let grad_norms = tape.value(norm).data().to_vec();
    let dev = tape.add_scalar(norm, -1.0)?;
    let dev2 = tape.square(dev)?;
    let mean = tape.mean_all(dev2)?;
    let penalty = tape.scale(mean, lambda)?;
    Ok(GradientPenalty { penalty, grad_norms })
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(tape: &mut Tape, h_hat: Var, h: Var) -> Result<Var> {
    let d = tape.sub(h_hat, h)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

/// `λ/2 · Σ_d [log(σ_H²/σ_d²) + (σ_d² + (μ_d − μ_H)²)/σ_H² − 1]` with
/// per-dimension batch moments of `z: [B, D]` and scalar anchors.
pub fn kl_loss(tape: &mut Tape, z: Var, anchor: LatentAnchor, lambda: f32) -> Result<Var> {
    let (b, d) = match *tape.shape(z) {
        [b, d] if b >= 2 => (b, d),
        ref s => {
            return Err(Error::shape(
                "kl_loss",
                format!("need [B >= 2, D], got {s:?}"),
            ))
        }
    };
    let sum = tape.sum_to(z, &[1, d])?;
    let mu = tape.scale(sum, 1.0 / b as f32)?;
    let zc = tape.sub(z, mu)?;
    let sq = tape.square(zc)?;
    let ss = tape.sum_to(sq, &[1, d])?;
    let var = tape.scale(ss, 1.0 / b as f32)?;
    let var = tape.clamp_min(var, KL_STD_FLOOR * KL_STD_FLOOR)?;
    let s2 = anchor.sigma_h * anchor.sigma_h;
    // log σ_H² − log σ_d²
    let log_var = tape.log(var)?;
    let log_ratio = tape.neg(log_var)?;
    let log_ratio = tape.add_scalar(log_ratio, s2.ln())?;
    // (σ_d² + (μ_d − μ_H)²) / σ_H² − 1
    let dm = tape.add_scalar(mu, -anchor.mu_h)?;
    let dm2 = tape.square(dm)?;
    let num = tape.add(var, dm2)?;
    let frac = tape.scale(num, 1.0 / s2)?;
    let frac = tape.add_scalar(frac, -1.0)?;
    let per_dim = tape.add(log_ratio, frac)?;
    let total = tape.sum_all(per_dim)?;
    tape.scale(total, 0.5 * lambda)
}

/// Population skewness `m₃ / σ³` of all entries of `x`.
pub fn skewness(tape: &mut Tape, x: Var) -> Result<Var> {
    let mean = tape.mean_all(x)?;
    let xc = tape.sub(x, mean)?;
    let sq = tape.square(xc)?;
    let m2 = tape.mean_all(sq)?;
    if (scalar(tape, m2)).sqrt() < SKEW_MIN_STD {
        return Err(Error::Degenerate("skewness of a constant batch is undefined".into()));
    }
    let cu = tape.cube(xc)?;
    let m3 = tape.mean_all(cu)?;
    let sd = tape.sqrt(m2)?;
    let sd3 = tape.mul(sd, m2)?;
    let inv = tape.recip(sd3)?;
    tape.mul(m3, inv)
}

/// `|γ(H) − γ(Ĥ)|`
pub fn skewness_loss(tape: &mut Tape, h_hat: Var, h: Var) -> Result<Var> {
    let g = skewness(tape, h_hat)?;
    let r = skewness(tape, h)?;
    let d = tape.sub(r, g)?;
    tape.abs(d)
}

/// Population skewness in double precision, for reports.
pub fn skewness_of(data: &[f32]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("skewness of an empty sample".into()));
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in data {
        let d = v as f64 - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let (m2, m3) = (m2 / n, m3 / n);
    let sd = m2.sqrt();
    if sd < SKEW_MIN_STD {
        return Err(Error::Degenerate("skewness of a constant sample is undefined".into()));
    }
    Ok(m3 / (sd * sd * sd))
}

/// Generator terms of one step; `total` is `L_G`.
pub struct GeneratorLoss {
    pub total: Var,
    pub l_f: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_skew: f64,
}

/// `L_G = −L_f + λ_rec·L_rec + L_KL + λ_γ·L_γ`. Terms whose weight is zero
/// (or the skewness term when disabled) are left out of the graph.
pub fn generator_loss(
    tape: &mut Tape,
    fake_scores: Var,
    h_hat: Var,
    h: Var,
    z: Var,
    anchor: LatentAnchor,
    weights: &LossWeights,
    skewness_enabled: bool,
) -> Result<GeneratorLoss> {
    let l_f = tape.mean_all(fake_scores)?;
    let mut total = tape.neg(l_f)?;
    let mut report = GeneratorLoss {
        total,
        l_f: scalar(tape, l_f),
        l_rec: 0.0,
        l_kl: 0.0,
        l_skew: 0.0,
    };
    if weights.rec > 0.0 {
        let rec = reconstruction_loss(tape, h_hat, h)?;
        let rec = tape.scale(rec, weights.rec)?;
        report.l_rec = scalar(tape, rec);
        total = tape.add(total, rec)?;
    }
    if weights.kl > 0.0 {
        let kl = kl_loss(tape, z, anchor, weights.kl)?;
        report.l_kl = scalar(tape, kl);
        total = tape.add(total, kl)?;
    }
    if skewness_enabled && weights.skew > 0.0 {
        let sk = skewness_loss(tape, h_hat, h)?;
        let sk = tape.scale(sk, weights.skew)?;
        report.l_skew = scalar(tape, sk);
        total = tape.add(total, sk)?;
    }
    report.total = total;
    Ok(report)
}
