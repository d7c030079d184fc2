//! Classical pilot-based estimators: least squares at the pilots, nearest and
//! linear interpolation over the resource grid, and an LMMSE smoother built
//! from empirical training covariances.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::{Complex32, Complex64};

use crate::airsim::{noise_variance, ComplexGrid, Dataset, GridDims, PilotPattern};
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Tensor};

/// Ridge added to the pilot auto-covariance, relative to its trace.
pub const LMMSE_RIDGE: f64 = 1e-6;
/// Largest condition number of the regularized pilot system accepted.
pub const LMMSE_MAX_CONDITION: f64 = 1e12;

const LMMSE_PREFIX: &str = "lmmse/";

/// Least-squares channel values at the pilot REs of every antenna.
#[derive(Clone, Debug, PartialEq)]
pub struct LsEstimate {
    dims: GridDims,
    /// `(symbol, subcarrier)` in symbol-major order.
    positions: Vec<(usize, usize)>,
    /// `[antenna][pilot]`
    values: Vec<Complex32>,
}

impl LsEstimate {
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn antenna(&self, antenna: usize) -> &[Complex32] {
        let p = self.positions.len();
        &self.values[antenna * p..(antenna + 1) * p]
    }
}

fn check_pilot(op: &'static str, dims: GridDims, pilot: &PilotPattern) -> Result<()> {
    if pilot.num_subcarriers() != dims.subcarriers || pilot.num_symbols() != dims.symbols {
        return Err(Error::shape(
            op,
            format!(
                "pilot grid {}x{} does not match {dims:?}",
                pilot.num_subcarriers(),
                pilot.num_symbols()
            ),
        ));
    }
    if pilot.num_pilots() == 0 {
        return Err(Error::Degenerate(format!("{op}: pilot mask is empty")));
    }
    Ok(())
}

/// `Ĥ_LS(k, s) = R(k, s) / X(k, s)` at every pilot RE.
pub fn ls_at_pilots(r: &ComplexGrid, pilot: &PilotPattern) -> Result<LsEstimate> {
    let dims = r.dims();
    check_pilot("ls_at_pilots", dims, pilot)?;
    let positions = pilot.positions();
    let mut values = Vec::with_capacity(dims.antennas * positions.len());
    for n in 0..dims.antennas {
        for &(s, k) in &positions {
            values.push(r.get(n, s, k) / pilot.symbol(k, s));
        }
    }
    Ok(LsEstimate {
        dims,
        positions,
        values,
    })
}

/// For every RE (`[symbol][subcarrier]`), the index of the closest pilot.
/// Ties go to the lower symbol, then the lower subcarrier.
pub fn nearest_pilot_map(dims: GridDims, positions: &[(usize, usize)]) -> Vec<usize> {
    let mut map = Vec::with_capacity(dims.plane());
    for s in 0..dims.symbols {
        for k in 0..dims.subcarriers {
            let mut best = (usize::MAX, 0);
            // positions are symbol-major, so keeping the first minimum
            // implements the tie-break.
            for (i, &(ps, pk)) in positions.iter().enumerate() {
                let d = ps.abs_diff(s).pow(2) + pk.abs_diff(k).pow(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            map.push(best.1);
        }
    }
    map
}

/// Copies the nearest pilot estimate into every RE.
pub fn interpolate_nearest(ls: &LsEstimate) -> ComplexGrid {
    let dims = ls.dims;
    let map = nearest_pilot_map(dims, &ls.positions);
    let mut out = ComplexGrid::zeros(dims);
    for n in 0..dims.antennas {
        let vals = ls.antenna(n);
        for (re, &i) in map.iter().enumerate() {
            out.set(n, re / dims.subcarriers, re % dims.subcarriers, vals[i]);
        }
    }
    out
}

/// Piecewise-linear interpolation of `(x, y)` knots (ascending `x`) at
/// `0..len`, holding the end values outside the knot range.
fn interp_line(knots: &[(usize, Complex32)], len: usize) -> Vec<Complex32> {
    let mut out = Vec::with_capacity(len);
    let mut seg = 0;
    for x in 0..len {
        let (first, last) = (knots[0], knots[knots.len() - 1]);
        if x <= first.0 {
            out.push(first.1);
        } else if x >= last.0 {
            out.push(last.1);
        } else {
            while knots[seg + 1].0 < x {
                seg += 1;
            }
            let (x0, y0) = knots[seg];
            let (x1, y1) = knots[seg + 1];
            let t = (x - x0) as f32 / (x1 - x0) as f32;
            out.push(y0 + (y1 - y0) * t);
        }
    }
    out
}

/// Linear interpolation along frequency inside each pilot symbol, then
/// along time between pilot symbols; edges are held constant.
pub fn interpolate_linear(ls: &LsEstimate) -> ComplexGrid {
    let dims = ls.dims;
    let mut pilot_symbols: Vec<usize> = ls.positions.iter().map(|&(s, _)| s).collect();
    pilot_symbols.dedup();
    let mut out = ComplexGrid::zeros(dims);
    for n in 0..dims.antennas {
        let vals = ls.antenna(n);
        let rows: Vec<Vec<Complex32>> = pilot_symbols
            .iter()
            .map(|&s| {
                let knots: Vec<(usize, Complex32)> = ls
                    .positions
                    .iter()
                    .zip(vals)
                    .filter(|((ps, _), _)| *ps == s)
                    .map(|(&(_, k), &v)| (k, v))
                    .collect();
                interp_line(&knots, dims.subcarriers)
            })
            .collect();
        for k in 0..dims.subcarriers {
            let knots: Vec<(usize, Complex32)> =
                pilot_symbols.iter().zip(&rows).map(|(&s, row)| (s, row[k])).collect();
            for (s, v) in interp_line(&knots, dims.symbols).into_iter().enumerate() {
                out.set(n, s, k, v);
            }
        }
    }
    out
}

/// Empirical second-order statistics for the per-antenna LMMSE smoother.
/// Statistics are pooled over antennas and training samples and stored at
/// single precision so that a persisted model reproduces exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LmmseModel {
    symbols: usize,
    subcarriers: usize,
    /// Pilot REs `(symbol, subcarrier)`, symbol-major.
    positions: Vec<(usize, usize)>,
    /// Cross-covariance `E[h_a h_p^H]`, `[RE][pilot]` row-major; REs are
    /// indexed `symbol · K_sc + subcarrier`.
    r_ap: Vec<Complex32>,
}

/// Fits `R_ap` (and hence `R_pp`, its pilot rows) from the training channels.
pub fn fit_lmmse(train: &Dataset, pilot: &PilotPattern) -> Result<LmmseModel> {
    let dims = train.dims();
    check_pilot("fit_lmmse", dims, pilot)?;
    if train.is_empty() {
        return Err(Error::Degenerate("fit_lmmse: no training channels".into()));
    }
    let positions = pilot.positions();
    let (a, p) = (dims.plane(), positions.len());
    let mut acc = vec![Complex64::new(0.0, 0.0); a * p];
    let mut h = vec![Complex64::new(0.0, 0.0); a];
    let mut hp = vec![Complex64::new(0.0, 0.0); p];
    for sample in &train.samples {
        for n in 0..dims.antennas {
            let plane = &sample.h.data()[n * a..(n + 1) * a];
            for (dst, src) in h.iter_mut().zip(plane) {
                *dst = Complex64::new(src.re as f64, src.im as f64);
            }
            for (dst, &(s, k)) in hp.iter_mut().zip(&positions) {
                *dst = h[s * dims.subcarriers + k].conj();
            }
            for (row, ha) in acc.chunks_exact_mut(p).zip(&h) {
                for (c, hpj) in row.iter_mut().zip(&hp) {
                    *c += ha * hpj;
                }
            }
        }
    }
    let count = (train.len() * dims.antennas) as f64;
    let r_ap = acc
        .iter()
        .map(|c| Complex32::new((c.re / count) as f32, (c.im / count) as f32))
        .collect();
    Ok(LmmseModel {
        symbols: dims.symbols,
        subcarriers: dims.subcarriers,
        positions,
        r_ap,
    })
}

/// The smoothing matrix `W = R_ap (R_pp + (σ² + ridge) I)⁻¹` at one SNR.
#[derive(Clone, Debug)]
pub struct LmmseFilter {
    w: DMatrix<Complex64>,
    condition: f64,
}

impl LmmseFilter {
    /// Condition number of the regularized pilot system.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn apply(&self, ls: &LsEstimate) -> ComplexGrid {
        let dims = ls.dims;
        let mut out = ComplexGrid::zeros(dims);
        let (a, p) = self.w.shape();
        for n in 0..dims.antennas {
            let x = ls.antenna(n);
            for re in 0..a {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..p {
                    let xv = Complex64::new(x[j].re as f64, x[j].im as f64);
                    acc += self.w[(re, j)] * xv;
                }
                out.set(
                    n,
                    re / dims.subcarriers,
                    re % dims.subcarriers,
                    Complex32::new(acc.re as f32, acc.im as f32),
                );
            }
        }
        out
    }
}

impl LmmseModel {
    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// `(symbols, subcarriers)` of the grid the model was fitted on.
    pub fn grid(&self) -> (usize, usize) {
        (self.symbols, self.subcarriers)
    }

    fn r_ap(&self) -> DMatrix<Complex64> {
        let (a, p) = (self.symbols * self.subcarriers, self.positions.len());
        DMatrix::from_fn(a, p, |i, j| {
            let c = self.r_ap[i * p + j];
            Complex64::new(c.re as f64, c.im as f64)
        })
    }

    /// Builds the filter for noise variance `10^(-snr_db/10)`.
    pub fn filter(&self, snr_db: f64) -> Result<LmmseFilter> {
        if snr_db.is_nan() {
            return Err(Error::Config("snr_db is NaN".into()));
        }
        let r_ap = self.r_ap();
        let p = self.positions.len();
        let sigma2 = noise_variance(snr_db);
        if sigma2.is_infinite() {
            return Ok(LmmseFilter {
                w: DMatrix::zeros(r_ap.nrows(), p),
                condition: 1.0,
            });
        }
        let rows: Vec<usize> = self.positions.iter().map(|&(s, k)| s * self.subcarriers + k).collect();
        let r_pp = DMatrix::from_fn(p, p, |i, j| r_ap[(rows[i], j)]);
        let trace: f64 = (0..p).map(|i| r_pp[(i, i)].re).sum();
        let mut m = (&r_pp + r_pp.adjoint()).map(|c| c * 0.5);
        let load = sigma2 + LMMSE_RIDGE * trace;
        for i in 0..p {
            m[(i, i)] += Complex64::new(load, 0.0);
        }
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0f64), |(lo, hi), &l| (lo.min(l.abs()), hi.max(l.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= LMMSE_MAX_CONDITION) {
            return Err(Error::Singular(format!(
                "regularized pilot covariance has condition number {condition:.3e}"
            )));
        }
        let chol = m.cholesky().ok_or_else(|| {
            Error::Singular(format!(
                "regularized pilot covariance is not positive definite (condition number {condition:.3e})"
            ))
        })?;
        // M is Hermitian, so W^H = M⁻¹ R_ap^H.
        let w = chol.solve(&r_ap.adjoint()).adjoint();
        Ok(LmmseFilter { w, condition })
    }

    /// LMMSE estimate of the whole grid from the observation `r`.
    pub fn estimate(&self, r: &ComplexGrid, pilot: &PilotPattern, snr_db: f64) -> Result<ComplexGrid> {
        let ls = ls_at_pilots(r, pilot)?;
        if ls.positions != self.positions || (r.dims().symbols, r.dims().subcarriers) != self.grid() {
            return Err(Error::shape("lmmse_estimate", "pilot layout differs from the fitted model"));
        }
        Ok(self.filter(snr_db)?.apply(&ls))
    }

    /// Checkpoint entries under the `lmmse/` section.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let (a, p) = (self.symbols * self.subcarriers, self.positions.len());
        let re = self.r_ap.iter().map(|c| c.re).collect();
        let im = self.r_ap.iter().map(|c| c.im).collect();
        let pos = self.positions.iter().flat_map(|&(s, k)| [s as f32, k as f32]).collect();
        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("lmmse entry shape");
        vec![
            (
                format!("{LMMSE_PREFIX}grid"),
                t(vec![2], vec![self.symbols as f32, self.subcarriers as f32]),
            ),
            (format!("{LMMSE_PREFIX}positions"), t(vec![p, 2], pos)),
            (format!("{LMMSE_PREFIX}r_ap.re"), t(vec![a, p], re)),
            (format!("{LMMSE_PREFIX}r_ap.im"), t(vec![a, p], im)),
        ]
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == &format!("{LMMSE_PREFIX}{name}"))
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint has no `{LMMSE_PREFIX}{name}` entry")))
        };
        let bad = |m: &str| Error::Format(format!("LMMSE section: {m}"));
        let grid = get("grid")?;
        let &[symbols, subcarriers] = grid.data() else {
            return Err(bad("grid entry must hold two values"));
        };
        let (symbols, subcarriers) = (symbols as usize, subcarriers as usize);
        let pos = get("positions")?;
        let positions: Vec<(usize, usize)> =
            pos.data().chunks_exact(2).map(|c| (c[0] as usize, c[1] as usize)).collect();
        if positions.iter().any(|&(s, k)| s >= symbols || k >= subcarriers) {
            return Err(bad("pilot position outside the grid"));
        }
        let (re, im) = (get("r_ap.re")?, get("r_ap.im")?);
        let want = [symbols * subcarriers, positions.len()];
        if re.shape() != want || im.shape() != want {
            return Err(bad("covariance shape does not match the grid"));
        }
        let r_ap = re.data().iter().zip(im.data()).map(|(&a, &b)| Complex32::new(a, b)).collect();
        Ok(Self {
            symbols,
            subcarriers,
            positions,
            r_ap,
        })
    }
}

pub fn save_lmmse(path: impl AsRef<Path>, model: &LmmseModel) -> Result<()> {
    checkpoint::save(path, &model.to_entries())
}

pub fn load_lmmse(path: impl AsRef<Path>) -> Result<LmmseModel> {
    LmmseModel::from_entries(&checkpoint::load(path)?)
}

/// The classical estimators by name, as used in sweeps and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    LsNearest,
    LsLinear,
    Lmmse,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::LsNearest, Baseline::LsLinear, Baseline::Lmmse];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::LsNearest => "ls_nearest",
            Baseline::LsLinear => "ls_linear",
            Baseline::Lmmse => "lmmse",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{name}`")))
    }
}
