use num_complex::Complex32;
use rand::Rng;

use super::{complex_normal, ComplexGrid, PilotPattern};
use crate::error::{Error, Result};

/// Noise variance per RE under unit-power pilots: `σ² = 10^(-snr/10)`.
/// `snr_db = +∞` gives a noiseless observation.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// `R = H ⊙ X_exd + N`, with the pilot grid broadcast over antennas and
/// `N ~ CN(0, σ²)` on every resource element.
///
/// Unit-variance noise is always drawn for the whole grid in storage order
/// and then scaled, so one rng state yields the same noise shape at every SNR.
pub fn observe<R: Rng + ?Sized>(
    h: &ComplexGrid,
    pilot: &PilotPattern,
    snr_db: f64,
    rng: &mut R,
) -> Result<ComplexGrid> {
    let dims = h.dims();
    if pilot.num_subcarriers() != dims.subcarriers || pilot.num_symbols() != dims.symbols {
        return Err(Error::shape(
            "observe",
            format!(
                "pilot grid {}x{} does not match channel {dims:?}",
                pilot.num_subcarriers(),
                pilot.num_symbols()
            ),
        ));
    }
    if snr_db.is_nan() {
        return Err(Error::Config("snr_db is NaN".into()));
    }
    let sigma = noise_variance(snr_db).sqrt();
    let mut r = ComplexGrid::zeros(dims);
    for n in 0..dims.antennas {
        for s in 0..dims.symbols {
            for k in 0..dims.subcarriers {
                let w = complex_normal(rng) * sigma;
                let v = h.get(n, s, k) * pilot.symbol(k, s) + Complex32::new(w.re as f32, w.im as f32);
                r.set(n, s, k, v);
            }
        }
    }
    if !r.is_finite() {
        return Err(Error::NonFinite { op: "observe" });
    }
    Ok(r)
}
