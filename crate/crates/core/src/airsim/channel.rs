use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng;

use super::{complex_normal, ComplexGrid, DopplerMode, TopologyConfig};
use crate::error::{Error, Result};

/// Large-scale parameters of one multipath component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    /// Seconds.
    pub delay: f64,
    /// Fraction of the total received power.
    pub power: f64,
    /// Elevation angle of arrival, radians.
    pub elevation: f64,
    /// Azimuth angle of arrival, radians.
    pub azimuth: f64,
}

/// Response of array element `n` (1-based) to a plane wave arriving from
/// `(elevation, azimuth)`. Elements are isotropic, so only the ULA phase
/// shift `-2π/λ (n-1) d sin(elevation) sin(azimuth)` remains.
pub fn array_response(n: usize, elevation: f64, azimuth: f64, topology: &TopologyConfig) -> Complex64 {
    debug_assert!(n >= 1 && n <= topology.num_antennas);
    let phase = -2.0 * PI / topology.wavelength()
        * (n as f64 - 1.0)
        * topology.antenna_spacing
        * elevation.sin()
        * azimuth.sin();
    Complex64::from_polar(1.0, phase)
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws the clustered multipath profile: truncated-exponential delays,
/// exponentially decaying powers normalized to unit sum, uniform angles.
/// Delays are truncated to one OFDM symbol period `1/Δf`.
pub fn draw_paths<R: Rng + ?Sized>(topology: &TopologyConfig, rng: &mut R) -> Vec<PathComponent> {
    let spread = topology.rms_delay_spread;
    let max_delay = 1.0 / topology.subcarrier_spacing;
    let tail = if spread > 0.0 { (-max_delay / spread).exp() } else { 0.0 };
    let mut paths: Vec<PathComponent> = (0..topology.num_paths)
        .map(|_| {
            let u: f64 = rng.random();
            let delay = if spread > 0.0 {
                -spread * (1.0 - u * (1.0 - tail)).ln()
            } else {
                0.0
            };
            let elevation = uniform_in(rng, topology.elevation_range);
            let azimuth = uniform_in(rng, topology.azimuth_range);
            PathComponent {
                delay,
                power: if spread > 0.0 { (-delay / spread).exp() } else { 1.0 },
                elevation,
                azimuth,
            }
        })
        .collect();
    let total: f64 = paths.iter().map(|p| p.power).sum();
    for p in &mut paths {
        p.power /= total;
    }
    paths
}

/// Complex amplitude of every path on every OFDM symbol, `[path][symbol]`,
/// starting from `CN(0, 1)` and evolving per the Doppler mode.
pub fn draw_path_gains<R: Rng + ?Sized>(
    topology: &TopologyConfig,
    num_paths: usize,
    rng: &mut R,
) -> Vec<Vec<Complex64>> {
    (0..num_paths)
        .map(|_| {
            let mut gains = Vec::with_capacity(topology.num_symbols);
            let mut g = complex_normal(rng);
            gains.push(g);
            for _ in 1..topology.num_symbols {
                if let DopplerMode::Ar1 { rho } = topology.doppler {
                    g = g * rho + complex_normal(rng) * (1.0 - rho * rho).sqrt();
                }
                gains.push(g);
            }
            gains
        })
        .collect()
}

/// `H[n,s,k] = Σ_ℓ g_ℓ(s) √P_ℓ e^{-j2π k Δf τ_ℓ} a_n(φ_ℓ, ϕ_ℓ)`
pub fn channel_from_paths(
    topology: &TopologyConfig,
    paths: &[PathComponent],
    gains: &[Vec<Complex64>],
) -> Result<ComplexGrid> {
    topology.validate()?;
    if paths.len() != gains.len() || gains.iter().any(|g| g.len() != topology.num_symbols) {
        return Err(Error::shape(
            "channel_from_paths",
            format!(
                "{} paths, {} gain tracks of {} symbols expected",
                paths.len(),
                gains.len(),
                topology.num_symbols
            ),
        ));
    }
    let dims = topology.grid_dims();
    // Per path: frequency phasor per subcarrier and array phasor per antenna.
    let freq: Vec<Vec<Complex64>> = paths
        .iter()
        .map(|p| {
            (0..dims.subcarriers)
                .map(|k| {
                    Complex64::from_polar(
                        p.power.sqrt(),
                        -2.0 * PI * k as f64 * topology.subcarrier_spacing * p.delay,
                    )
                })
                .collect()
        })
        .collect();
    let spatial: Vec<Vec<Complex64>> = paths
        .iter()
        .map(|p| {
            (1..=dims.antennas)
                .map(|n| array_response(n, p.elevation, p.azimuth, topology))
                .collect()
        })
        .collect();
    let mut grid = ComplexGrid::zeros(dims);
    for n in 0..dims.antennas {
        for s in 0..dims.symbols {
            for k in 0..dims.subcarriers {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..paths.len() {
                    acc += gains[l][s] * freq[l][k] * spatial[l][n];
                }
                grid.set(n, s, k, Complex32::new(acc.re as f32, acc.im as f32));
            }
        }
    }
    Ok(grid)
}

/// One random channel realization.
pub fn generate_channel<R: Rng + ?Sized>(topology: &TopologyConfig, rng: &mut R) -> Result<ComplexGrid> {
    topology.validate()?;
    let paths = draw_paths(topology, rng);
    let gains = draw_path_gains(topology, paths.len(), rng);
    channel_from_paths(topology, &paths, &gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topo() -> TopologyConfig {
        TopologyConfig::default()
    }

    #[test]
    fn first_element_has_zero_phase() {
        let t = topo();
        for (el, az) in [(0.3, 1.1), (PI / 2.0, -0.7), (2.0, 2.0)] {
            let a = array_response(1, el, az, &t);
            assert!((a - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn half_wavelength_broadside_flips_sign() {
        let t = topo();
        let a = array_response(2, PI / 2.0, PI / 2.0, &t);
        assert!((a - Complex64::new(-1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn third_element_matches_direct_phase() {
        let t = topo();
        let (el, az) = (PI / 2.0, PI / 6.0);
        // Independent scalar evaluation: psi = -(2π/λ)(n-1) d sin(el) sin(az)
        let lambda = 299_792_458.0 / 3.5e9;
        let psi = -(2.0 * PI / lambda) * 2.0 * (lambda / 2.0) * el.sin() * az.sin();
        let expected = Complex64::new(psi.cos(), psi.sin());
        let a = array_response(3, el, az, &t);
        assert!((a - expected).norm() < 1e-9);
        assert!((a - Complex64::new(-1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn single_flat_path_is_constant() {
        let t = TopologyConfig {
            num_paths: 1,
            doppler: DopplerMode::Static,
            ..topo()
        };
        let h0 = Complex64::new(0.6, -1.3);
        let paths = [PathComponent {
            delay: 0.0,
            power: 1.0,
            elevation: 1.0,
            azimuth: 0.0,
        }];
        let gains = vec![vec![h0; t.num_symbols]];
        let grid = channel_from_paths(&t, &paths, &gains).unwrap();
        for c in grid.data() {
            assert!((c.re - 0.6).abs() < 1e-6 && (c.im + 1.3).abs() < 1e-6);
        }
    }

    #[test]
    fn one_sample_delay_spirals_over_subcarriers() {
        let t = TopologyConfig {
            num_paths: 1,
            doppler: DopplerMode::Static,
            ..topo()
        };
        let h0 = Complex64::new(1.0, 0.0);
        let paths = [PathComponent {
            delay: 1.0 / (t.num_subcarriers as f64 * t.subcarrier_spacing),
            power: 1.0,
            elevation: 0.4,
            azimuth: 0.9,
        }];
        let grid = channel_from_paths(&t, &paths, &vec![vec![h0; t.num_symbols]]).unwrap();
        for s in 0..t.num_symbols {
            for k in 0..t.num_subcarriers {
                let ang = -2.0 * PI * k as f64 / t.num_subcarriers as f64;
                let v = grid.get(0, s, k);
                assert!((v.re as f64 - ang.cos()).abs() < 1e-6);
                assert!((v.im as f64 - ang.sin()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_paths_rejected() {
        let t = TopologyConfig {
            num_paths: 0,
            ..topo()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_channel(&t, &mut rng).is_err());
    }

    #[test]
    fn powers_sum_to_one_and_delays_truncated() {
        let t = topo();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let paths = draw_paths(&t, &mut rng);
            let total: f64 = paths.iter().map(|p| p.power).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(paths.iter().all(|p| p.delay >= 0.0 && p.delay <= 1.0 / t.subcarrier_spacing));
        }
    }
}
