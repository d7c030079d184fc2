//! Channel, pilot and observation simulation.
//!
//! A channel realization is a complex grid `H[antenna][symbol][subcarrier]`
//! synthesized from a clustered multipath profile seen through a uniform
//! linear array. Observations are `R = H ⊙ X + N` with a Kronecker-structured
//! QPSK pilot grid `X` broadcast over antennas.

mod channel;
mod dataset;
mod grid;
mod norm;
mod observe;
mod pilot;
mod topology;

pub use channel::{
    array_response, channel_from_paths, draw_path_gains, draw_paths, generate_channel,
    PathComponent,
};
pub use dataset::{
    generate_dataset, load_dataset, sample_seed, save_dataset, ChannelSample, Dataset, SnrSpec,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use grid::{ComplexGrid, GridDims};
pub use norm::{fit_norm_stats, NormStats};
pub use observe::{noise_variance, observe};
pub use pilot::{build_pilot_pattern, PilotConfig, PilotPattern};
pub use topology::{DopplerMode, TopologyConfig};

use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> num_complex::Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    num_complex::Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}
