//! Generator (encoder, anchored latent, decoder) and critic networks.
//!
//! Channel features are `[B, 2·K_ant, K_sym, K_sc]` tensors in `[-1, 1]`.
//! The encoder maps an observation to `a_enc`, the latent is
//! `z = μ_H + a_enc·σ_H`, and the decoder maps `z` back to channel features
//! through a `tanh` head. The critic sees each sample as a single-channel
//! `(2·K_ant·K_sym) × K_sc` map.

mod critic;
mod generator;
mod persist;

pub use critic::{Critic, CriticOutput};
pub use generator::{Generator, GeneratorOutput, Inference, RunningStatUpdate};
pub use persist::{load_model, manifest_path, save_model, LoadedModel, ModelManifest};

use rand::Rng;

use crate::airsim::{GridDims, NormStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Layer widths and shapes of both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub antennas: usize,
    pub symbols: usize,
    pub subcarriers: usize,
    pub encoder_widths: Vec<usize>,
    pub z_dim: usize,
    pub critic_widths: Vec<usize>,
    pub leaky_slope: f32,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            antennas: 4,
            symbols: 8,
            subcarriers: 32,
            encoder_widths: vec![32, 64, 128, 256],
            z_dim: 128,
            critic_widths: vec![32, 64, 128],
            leaky_slope: 0.2,
            bn_momentum: 0.1,
        }
    }
}

/// Output extent of a 3×3, padding-1 convolution.
fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - KERNEL) / stride + 1
}

fn halve_if_even(n: usize) -> usize {
    if n >= 2 && n % 2 == 0 {
        2
    } else {
        1
    }
}

impl ArchConfig {
    pub fn for_dims(dims: GridDims) -> Self {
        Self {
            antennas: dims.antennas,
            symbols: dims.symbols,
            subcarriers: dims.subcarriers,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.antennas, self.symbols, self.subcarriers)
    }

    /// Per-sample feature shape `[2·K_ant, K_sym, K_sc]`.
    pub fn feature_shape(&self) -> [usize; 3] {
        [2 * self.antennas, self.symbols, self.subcarriers]
    }

    /// Critic input map `(2·K_ant·K_sym, K_sc)`.
    pub fn critic_input_hw(&self) -> (usize, usize) {
        (2 * self.antennas * self.symbols, self.subcarriers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.antennas == 0 || self.symbols == 0 || self.subcarriers == 0 {
            return bad("model grid dimensions must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be a non-empty list of positive widths");
        }
        if self.critic_widths.is_empty() || self.critic_widths.contains(&0) {
            return bad("critic_widths must be a non-empty list of positive widths");
        }
        if self.z_dim == 0 {
            return bad("z_dim must be positive");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        Ok(())
    }

    /// Strides and output extents of the encoder blocks. Blocks 1-2 halve
    /// the frequency axis, later blocks halve both axes; an axis is only
    /// halved while its length is even.
    pub fn encoder_geometry(&self) -> Vec<((usize, usize), (usize, usize))> {
        let (mut h, mut w) = (self.symbols, self.subcarriers);
        (0..self.encoder_widths.len())
            .map(|i| {
                let sh = if i < 2 { 1 } else { halve_if_even(h) };
                let sw = halve_if_even(w);
                h = conv_out(h, sh);
                w = conv_out(w, sw);
                ((sh, sw), (h, w))
            })
            .collect()
    }

    /// Strides and output extents of the critic blocks (stride 2 on both
    /// axes while even).
    pub fn critic_geometry(&self) -> Vec<((usize, usize), (usize, usize))> {
        let (mut h, mut w) = self.critic_input_hw();
        self.critic_widths
            .iter()
            .map(|_| {
                let (sh, sw) = (halve_if_even(h), halve_if_even(w));
                h = conv_out(h, sh);
                w = conv_out(w, sw);
                ((sh, sw), (h, w))
            })
            .collect()
    }
}

/// Scalar statistics the latent is anchored to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentAnchor {
    pub mu_h: f32,
    pub sigma_h: f32,
}

impl LatentAnchor {
    pub fn new(mu_h: f32, sigma_h: f32) -> Result<Self> {
        if !(sigma_h > 0.0) || !sigma_h.is_finite() || !mu_h.is_finite() {
            return Err(Error::Config(format!("latent anchor sigma_H = {sigma_h} must be positive")));
        }
        Ok(Self { mu_h, sigma_h })
    }

    /// Standard-normal anchoring, `z = a_enc`.
    pub fn standard() -> Self {
        Self { mu_h: 0.0, sigma_h: 1.0 }
    }

    pub fn from_norm(norm: &NormStats) -> Result<Self> {
        Self::new(norm.mu_h as f32, norm.sigma_h as f32)
    }
}

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform weights on `[-1/√fan_in, 1/√fan_in]`.
fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let a = ArchConfig::default();
        let enc: Vec<_> = a.encoder_geometry().into_iter().map(|(_, hw)| hw).collect();
        assert_eq!(enc, vec![(8, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(a.critic_input_hw(), (64, 32));
        let cr: Vec<_> = a.critic_geometry().into_iter().map(|(_, hw)| hw).collect();
        assert_eq!(cr, vec![(32, 16), (16, 8), (8, 4)]);
    }

    #[test]
    fn odd_axes_are_not_strided() {
        let a = ArchConfig {
            symbols: 7,
            subcarriers: 12,
            ..ArchConfig::default()
        };
        let enc: Vec<_> = a.encoder_geometry().into_iter().map(|(_, hw)| hw).collect();
        assert_eq!(enc, vec![(7, 6), (7, 3), (7, 3), (7, 3)]);
    }

    #[test]
    fn anchor_validation() {
        assert!(LatentAnchor::new(0.0, 0.0).is_err());
        assert!(LatentAnchor::new(0.1, 0.3).is_ok());
    }
}
