use num_complex::Complex32;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub antennas: usize,
    pub symbols: usize,
    pub subcarriers: usize,
}

impl GridDims {
    pub fn new(antennas: usize, symbols: usize, subcarriers: usize) -> Self {
        Self {
            antennas,
            symbols,
            subcarriers,
        }
    }

    pub fn len(&self) -> usize {
        self.antennas * self.symbols * self.subcarriers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resource elements per antenna.
    pub fn plane(&self) -> usize {
        self.symbols * self.subcarriers
    }
}

/// One complex realization laid out as `[antenna][symbol][subcarrier]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    dims: GridDims,
    data: Vec<Complex32>,
}

impl ComplexGrid {
    pub fn zeros(dims: GridDims) -> Self {
        Self {
            dims,
            data: vec![Complex32::new(0.0, 0.0); dims.len()],
        }
    }

    pub fn from_vec(dims: GridDims, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(
                "complex_grid",
                format!("{dims:?} needs {} entries, got {}", dims.len(), data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    pub fn offset(&self, antenna: usize, symbol: usize, subcarrier: usize) -> usize {
        (antenna * self.dims.symbols + symbol) * self.dims.subcarriers + subcarrier
    }

    #[inline]
    pub fn get(&self, antenna: usize, symbol: usize, subcarrier: usize) -> Complex32 {
        self.data[self.offset(antenna, symbol, subcarrier)]
    }

    #[inline]
    pub fn set(&mut self, antenna: usize, symbol: usize, subcarrier: usize, value: Complex32) {
        let i = self.offset(antenna, symbol, subcarrier);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr() as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}
