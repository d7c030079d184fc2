use num_complex::Complex32;

use super::{ComplexGrid, GridDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training-set statistics: the global affine map of real and imaginary
/// parts onto `[-1, 1]`, and the mean/std of the mapped entries that anchor
/// the latent space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub scale_min: f64,
    pub scale_max: f64,
    pub mu_h: f64,
    pub sigma_h: f64,
}

/// Fits the scaling bounds over every real and imaginary part of the given
/// (training) channels, then `mu_H`/`sigma_H` over the normalized entries.
pub fn fit_norm_stats<'a, I>(channels: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a ComplexGrid>,
    I::IntoIter: Clone,
{
    let iter = channels.into_iter();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut count = 0usize;
    for g in iter.clone() {
        for c in g.data() {
            for v in [c.re as f64, c.im as f64] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        count += 2 * g.data().len();
    }
    if count == 0 {
        return Err(Error::Degenerate("no channel entries to fit normalization on".into()));
    }
    let mut stats = NormStats::new(lo, hi, 0.0, 1.0)?;
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for g in iter.clone() {
        for c in g.data() {
            for v in [c.re, c.im] {
                let x = stats.normalize_value(v) as f64;
                sum += x;
            }
        }
    }
    let mean = sum / count as f64;
    for g in iter {
        for c in g.data() {
            for v in [c.re, c.im] {
                let d = stats.normalize_value(v) as f64 - mean;
                sum_sq += d * d;
            }
        }
    }
    stats.mu_h = mean;
    stats.sigma_h = (sum_sq / count as f64).sqrt();
    if !(stats.sigma_h > 0.0) {
        return Err(Error::Degenerate("normalized channel entries have zero spread".into()));
    }
    Ok(stats)
}

impl NormStats {
    pub fn new(scale_min: f64, scale_max: f64, mu_h: f64, sigma_h: f64) -> Result<Self> {
        if !(scale_min.is_finite() && scale_max.is_finite()) || !(scale_min < scale_max) {
            return Err(Error::Degenerate(format!(
                "normalization bounds [{scale_min}, {scale_max}] are degenerate"
            )));
        }
        if !(sigma_h > 0.0) || !sigma_h.is_finite() || !mu_h.is_finite() {
            return Err(Error::Degenerate(format!("latent anchor sigma_H = {sigma_h} must be positive")));
        }
        Ok(Self {
            scale_min,
            scale_max,
            mu_h,
            sigma_h,
        })
    }

    /// Derivative of the affine map, `2 / (max - min)`.
    pub fn slope(&self) -> f64 {
        2.0 / (self.scale_max - self.scale_min)
    }

    /// Maps one real value into `[-1, 1]`, clamping outliers.
    #[inline]
    pub fn normalize_value(&self, x: f32) -> f32 {
        let y = -1.0 + (x as f64 - self.scale_min) * self.slope();
        y.clamp(-1.0, 1.0) as f32
    }

    #[inline]
    pub fn denormalize_value(&self, y: f32) -> f32 {
        (self.scale_min + (y as f64 + 1.0) / self.slope()) as f32
    }

    /// `[2·K_ant, K_sym, K_sc]` features: real parts in the first `K_ant`
    /// channels, imaginary parts in the rest, each mapped into `[-1, 1]`.
    pub fn to_features(&self, grid: &ComplexGrid) -> Tensor {
        let d = grid.dims();
        let plane = d.plane();
        let mut out = vec![0.0f32; 2 * d.len()];
        let (re, im) = out.split_at_mut(d.len());
        for (i, c) in grid.data().iter().enumerate() {
            re[i] = self.normalize_value(c.re);
            im[i] = self.normalize_value(c.im);
        }
        debug_assert_eq!(re.len(), d.antennas * plane);
        Tensor::new(vec![2 * d.antennas, d.symbols, d.subcarriers], out).expect("feature shape")
    }

    /// Inverse of [`to_features`](Self::to_features) for a single
    /// `[2·K_ant, K_sym, K_sc]` tensor.
    pub fn from_features(&self, features: &Tensor) -> Result<ComplexGrid> {
        let dims = match *features.shape() {
            [c, s, k] if c % 2 == 0 && c > 0 => GridDims::new(c / 2, s, k),
            ref other => {
                return Err(Error::shape(
                    "from_features",
                    format!("expected [2*K_ant, K_sym, K_sc], got {other:?}"),
                ))
            }
        };
        let (re, im) = features.data().split_at(dims.len());
        let data = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex32::new(self.denormalize_value(r), self.denormalize_value(i)))
            .collect();
        ComplexGrid::from_vec(dims, data)
    }

    /// Stacks the features of several grids into `[B, 2·K_ant, K_sym, K_sc]`.
    pub fn batch_features<'a, I>(&self, grids: I) -> Result<Tensor>
    where
        I: IntoIterator<Item = &'a ComplexGrid>,
    {
        let parts: Vec<Tensor> = grids.into_iter().map(|g| self.to_features(g)).collect();
        Tensor::stack(&parts)
    }

    /// Splits `[B, 2·K_ant, K_sym, K_sc]` back into complex grids.
    pub fn unbatch_features(&self, batch: &Tensor) -> Result<Vec<ComplexGrid>> {
        batch.unstack().iter().map(|t| self.from_features(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_from(values: &[(f32, f32)], dims: GridDims) -> ComplexGrid {
        ComplexGrid::from_vec(dims, values.iter().map(|&(r, i)| Complex32::new(r, i)).collect()).unwrap()
    }

    #[test]
    fn endpoints_map_to_unit_interval() {
        let s = NormStats::new(-3.0, 5.0, 0.0, 1.0).unwrap();
        let g = grid_from(&[(-3.0, 5.0), (1.0, 0.0)], GridDims::new(1, 1, 2));
        let f = s.to_features(&g);
        assert_eq!(f.shape(), &[2, 1, 2]);
        assert_eq!(f.data(), &[-1.0, 0.0, 1.0, -0.25]);
    }

    #[test]
    fn outliers_are_clamped() {
        let s = NormStats::new(-1.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(s.normalize_value(7.0), 1.0);
        assert_eq!(s.normalize_value(-7.0), -1.0);
    }

    #[test]
    fn degenerate_scale_rejected() {
        assert!(NormStats::new(2.0, 2.0, 0.0, 1.0).is_err());
        let g = grid_from(&[(0.5, 0.5); 4], GridDims::new(1, 2, 2));
        assert!(fit_norm_stats([&g]).is_err());
    }

    #[test]
    fn features_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = GridDims::new(4, 8, 32);
        let data: Vec<Complex32> = (0..dims.len())
            .map(|_| {
                let r: f32 = StandardNormal.sample(&mut rng);
                let i: f32 = StandardNormal.sample(&mut rng);
                Complex32::new(r, i)
            })
            .collect();
        let g = ComplexGrid::from_vec(dims, data).unwrap();
        let s = fit_norm_stats([&g]).unwrap();
        let back = s.from_features(&s.to_features(&g)).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).norm() <= 1e-6 * 4.0, "{a} vs {b}");
        }
        // Packing oracle: channel c < K_ant holds real parts of antenna c.
        let f = s.to_features(&g);
        for n in 0..4 {
            for sy in 0..8 {
                for k in 0..32 {
                    let c = g.get(n, sy, k);
                    let re_idx = (n * 8 + sy) * 32 + k;
                    let im_idx = ((n + 4) * 8 + sy) * 32 + k;
                    assert_eq!(f.data()[re_idx], s.normalize_value(c.re));
                    assert_eq!(f.data()[im_idx], s.normalize_value(c.im));
                }
            }
        }
    }

    #[test]
    fn anchors_track_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = GridDims::new(1, 1, 50_000);
        let data: Vec<Complex32> = (0..dims.len())
            .map(|_| Complex32::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let g = ComplexGrid::from_vec(dims, data).unwrap();
        let s = fit_norm_stats([&g]).unwrap();
        let image_of_zero = s.normalize_value(0.0) as f64;
        assert!((s.mu_h - image_of_zero).abs() < 0.02 * s.slope(), "{} vs {image_of_zero}", s.mu_h);
        assert!((s.sigma_h - s.slope()).abs() / s.slope() < 0.02);
    }

    #[test]
    fn batch_round_trip() {
        let s = NormStats::new(-2.0, 2.0, 0.0, 1.0).unwrap();
        let a = grid_from(&[(0.5, -0.5), (1.0, 1.5)], GridDims::new(1, 1, 2));
        let b = grid_from(&[(0.25, 0.0), (-1.0, 2.0)], GridDims::new(1, 1, 2));
        let t = s.batch_features([&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1, 2]);
        assert_eq!(s.unbatch_features(&t).unwrap(), vec![a, b]);
    }
}
