use std::f32::consts::FRAC_1_SQRT_2;

use num_complex::Complex32;
use rand::Rng;

use crate::error::{Error, Result};

/// Parameters of the orthogonal pilot pattern `M^{i,j}(k, s) = 1` iff
/// `s ∈ T` and `k ≡ i·K_str + j (mod K_seq)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PilotConfig {
    /// `T`, the OFDM symbols that carry pilots.
    pub pilot_symbols: Vec<usize>,
    pub tx_index: usize,
    pub stream_index: usize,
    pub k_str: usize,
    pub k_seq: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            pilot_symbols: vec![2, 6],
            tx_index: 0,
            stream_index: 0,
            k_str: 1,
            k_seq: 1,
        }
    }
}

/// Pilot mask and QPSK symbols on the `[subcarrier][symbol]` resource grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotPattern {
    config: Option<PilotConfig>,
    num_subcarriers: usize,
    num_symbols: usize,
    mask: Vec<bool>,
    symbols: Vec<Complex32>,
}

const QPSK: f32 = FRAC_1_SQRT_2;

/// Builds the mask from the congruence rule and fills every pilot RE with a
/// uniformly drawn QPSK point `±1/√2 ± j/√2`. Symbols are drawn in
/// subcarrier-major order.
pub fn build_pilot_pattern<R: Rng + ?Sized>(
    config: &PilotConfig,
    num_subcarriers: usize,
    num_symbols: usize,
    rng: &mut R,
) -> Result<PilotPattern> {
    let bad = |m: String| Err(Error::Config(m));
    if num_subcarriers == 0 || num_symbols == 0 {
        return bad("pilot grid must be non-empty".into());
    }
    if config.pilot_symbols.is_empty() {
        return bad("pilot symbol set T is empty; LS estimation needs at least one pilot".into());
    }
    if let Some(&s) = config.pilot_symbols.iter().find(|&&s| s >= num_symbols) {
        return bad(format!("pilot symbol {s} outside 0..{num_symbols}"));
    }
    if config.k_seq == 0 || config.k_str == 0 {
        return bad("k_seq and k_str must be at least 1".into());
    }
    if config.stream_index >= config.k_str {
        return bad(format!(
            "stream index {} must be below k_str = {}",
            config.stream_index, config.k_str
        ));
    }
    let residue = (config.tx_index * config.k_str + config.stream_index) % config.k_seq;
    let mut mask = vec![false; num_subcarriers * num_symbols];
    let mut symbols = vec![Complex32::new(0.0, 0.0); mask.len()];
    for k in 0..num_subcarriers {
        if k % config.k_seq != residue {
            continue;
        }
        for s in 0..num_symbols {
            if config.pilot_symbols.contains(&s) {
                let i = k * num_symbols + s;
                mask[i] = true;
                let re = if rng.random::<bool>() { QPSK } else { -QPSK };
                let im = if rng.random::<bool>() { QPSK } else { -QPSK };
                symbols[i] = Complex32::new(re, im);
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return bad("pilot mask is empty for this configuration".into());
    }
    Ok(PilotPattern {
        config: Some(config.clone()),
        num_subcarriers,
        num_symbols,
        mask,
        symbols,
    })
}

impl PilotPattern {
    /// Assembles a pattern from raw `[subcarrier][symbol]` mask and symbols,
    /// e.g. when reading a dataset. An empty mask is allowed here.
    pub fn from_parts(
        num_subcarriers: usize,
        num_symbols: usize,
        mask: Vec<bool>,
        symbols: Vec<Complex32>,
    ) -> Result<Self> {
        let n = num_subcarriers * num_symbols;
        if mask.len() != n || symbols.len() != n {
            return Err(Error::shape(
                "pilot_pattern",
                format!("expected {n} mask and symbol entries, got {} and {}", mask.len(), symbols.len()),
            ));
        }
        for (m, x) in mask.iter().zip(&symbols) {
            let zero = x.re == 0.0 && x.im == 0.0;
            if *m == zero {
                return Err(Error::Format(
                    "pilot symbols must be non-zero exactly on masked resource elements".into(),
                ));
            }
        }
        Ok(Self {
            config: None,
            num_subcarriers,
            num_symbols,
            mask,
            symbols,
        })
    }

    /// Generation parameters, when the pattern was built rather than loaded.
    pub fn config(&self) -> Option<&PilotConfig> {
        self.config.as_ref()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    #[inline]
    pub fn is_pilot(&self, subcarrier: usize, symbol: usize) -> bool {
        self.mask[subcarrier * self.num_symbols + symbol]
    }

    #[inline]
    pub fn symbol(&self, subcarrier: usize, symbol: usize) -> Complex32 {
        self.symbols[subcarrier * self.num_symbols + symbol]
    }

    /// `[subcarrier][symbol]`
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `[subcarrier][symbol]`
    pub fn symbols(&self) -> &[Complex32] {
        &self.symbols
    }

    pub fn num_pilots(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Pilot positions as `(symbol, subcarrier)`, symbol-major.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_pilots());
        for s in 0..self.num_symbols {
            for k in 0..self.num_subcarriers {
                if self.is_pilot(k, s) {
                    out.push((s, k));
                }
            }
        }
        out
    }

    /// Symbols that carry at least one pilot, ascending.
    pub fn pilot_symbol_indices(&self) -> Vec<usize> {
        (0..self.num_symbols)
            .filter(|&s| (0..self.num_subcarriers).any(|k| self.is_pilot(k, s)))
            .collect()
    }

    /// Binary vectors `(p_t, p_f)` over symbols and subcarriers with
    /// `M(k, s) = p_f(k) · p_t(s)`, or `None` if the mask is not rank one.
    pub fn kronecker_factors(&self) -> Option<(Vec<bool>, Vec<bool>)> {
        let p_t: Vec<bool> = (0..self.num_symbols)
            .map(|s| (0..self.num_subcarriers).any(|k| self.is_pilot(k, s)))
            .collect();
        let p_f: Vec<bool> = (0..self.num_subcarriers)
            .map(|k| (0..self.num_symbols).any(|s| self.is_pilot(k, s)))
            .collect();
        for k in 0..self.num_subcarriers {
            for s in 0..self.num_symbols {
                if self.is_pilot(k, s) != (p_f[k] && p_t[s]) {
                    return None;
                }
            }
        }
        Some((p_t, p_f))
    }
}
