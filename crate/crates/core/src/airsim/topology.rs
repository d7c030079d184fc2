use std::f64::consts::PI;

use super::GridDims;
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Symbol-to-symbol evolution of the path amplitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DopplerMode {
    Static,
    /// `h(s) = rho h(s-1) + sqrt(1 - rho^2) w`, `w ~ CN(0, 1)`.
    Ar1 { rho: f64 },
}

/// Geometry and numerology of the simulated uplink.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyConfig {
    /// Hz
    pub carrier_frequency: f64,
    /// Hz
    pub subcarrier_spacing: f64,
    /// Element spacing of the base-station ULA in meters.
    pub antenna_spacing: f64,
    pub num_antennas: usize,
    pub num_symbols: usize,
    pub num_subcarriers: usize,
    pub num_paths: usize,
    /// Scale of the exponential power-delay profile, seconds.
    pub rms_delay_spread: f64,
    /// Elevation angle range (radians) paths are drawn from.
    pub elevation_range: (f64, f64),
    /// Azimuth angle range (radians) paths are drawn from.
    pub azimuth_range: (f64, f64),
    pub doppler: DopplerMode,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        let carrier_frequency = 3.5e9;
        Self {
            carrier_frequency,
            subcarrier_spacing: 30e3,
            antenna_spacing: SPEED_OF_LIGHT / carrier_frequency / 2.0,
            num_antennas: 4,
            num_symbols: 8,
            num_subcarriers: 32,
            num_paths: 8,
            rms_delay_spread: 300e-9,
            elevation_range: (PI / 3.0, 2.0 * PI / 3.0),
            azimuth_range: (-PI / 3.0, PI / 3.0),
            doppler: DopplerMode::Ar1 { rho: 0.98 },
        }
    }
}

impl TopologyConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn grid_dims(&self) -> GridDims {
        GridDims::new(self.num_antennas, self.num_symbols, self.num_subcarriers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_antennas == 0 || self.num_symbols == 0 || self.num_subcarriers == 0 {
            return bad("antenna, symbol and subcarrier counts must be at least 1");
        }
        if self.num_paths == 0 {
            return bad("num_paths must be at least 1");
        }
        if !(self.subcarrier_spacing > 0.0) {
            return bad("subcarrier_spacing must be positive");
        }
        if !(self.antenna_spacing > 0.0) {
            return bad("antenna_spacing must be positive");
        }
        if !(self.carrier_frequency > 0.0) {
            return bad("carrier_frequency must be positive");
        }
        if !(self.rms_delay_spread >= 0.0) {
            return bad("rms_delay_spread must be non-negative");
        }
        for (lo, hi) in [self.elevation_range, self.azimuth_range] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad("angle ranges must be finite with min <= max");
            }
        }
        if let DopplerMode::Ar1 { rho } = self.doppler {
            if !(0.0..=1.0).contains(&rho) {
                return bad("doppler rho must lie in [0, 1]");
            }
        }
        Ok(())
    }
}
