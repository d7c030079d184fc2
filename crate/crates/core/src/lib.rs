//! Time-frequency-space channel estimation laboratory.
//!
//! The crate simulates MIMO-OFDM channels and pilot observations ([`airsim`]),
//! provides a small reverse-mode autodiff engine ([`tensor`]), the VAE-WGAN-GP
//! generator/critic pair ([`models`], [`losses`], [`training`]), classical
//! LS/LMMSE estimators ([`baselines`]), NMSE benchmarking ([`evaluation`]) and
//! gradient-weighted activation maps of the critic ([`xai`]).

pub mod airsim;
pub mod baselines;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
mod par;
pub mod tensor;
pub mod training;
pub mod xai;

pub use error::{Error, Result};
