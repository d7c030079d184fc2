//! NMSE metrics, SNR sweeps over all estimators, and distribution
//! diagnostics of channel and latent populations.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::airsim::{observe, sample_seed, ChannelSample, ComplexGrid, Dataset, NormStats, PilotPattern};
use crate::baselines::{interpolate_linear, interpolate_nearest, ls_at_pilots, LmmseModel};
use crate::error::{Error, Result};
use crate::losses::skewness_of;
use crate::models::{Generator, LatentAnchor};

pub const NMSE_CSV_HEADER: &str = "estimator,snr_db,nmse,nmse_db,domain,n";
pub const DISTRIBUTION_CSV_HEADER: &str = "population,bin,lower,upper,count,n,mean,std,skewness";

/// Largest tolerated NMSE increase between neighbouring SNR points, in dB.
pub const MONOTONE_TOLERANCE_DB: f64 = 0.5;
/// Number of such increases tolerated per curve.
pub const MONOTONE_MAX_INVERSIONS: usize = 1;

/// Where the error is measured: on physical channel values, or after the
/// affine map into the generator's `[-1, 1]` feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Physical,
    Normalized,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Physical => "physical",
            Domain::Normalized => "normalized",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmseResult {
    pub estimator: String,
    pub snr_db: f64,
    pub nmse: f64,
    pub nmse_db: f64,
    pub domain: Domain,
    pub n: usize,
}

impl NmseResult {
    pub fn new(estimator: impl Into<String>, snr_db: f64, nmse: f64, domain: Domain, n: usize) -> Self {
        Self {
            estimator: estimator.into(),
            snr_db,
            nmse,
            nmse_db: to_db(nmse),
            domain,
            n,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.estimator,
            self.snr_db,
            self.nmse,
            self.nmse_db,
            self.domain.name(),
            self.n
        )
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Running sums `Σ‖H − Ĥ‖²` and `Σ‖H‖²` over complex entries.
#[derive(Clone, Copy, Debug, Default)]
struct NmseSum {
    error: f64,
    energy: f64,
}

impl NmseSum {
    fn add(&mut self, truth: &ComplexGrid, estimate: &ComplexGrid, map: impl Fn(f32) -> f64) -> Result<()> {
        if truth.dims() != estimate.dims() {
            return Err(Error::shape(
                "nmse",
                format!("{:?} vs {:?}", truth.dims(), estimate.dims()),
            ));
        }
        for (h, e) in truth.data().iter().zip(estimate.data()) {
            let (hr, hi) = (map(h.re), map(h.im));
            let (er, ei) = (map(e.re) - hr, map(e.im) - hi);
            self.error += er * er + ei * ei;
            self.energy += hr * hr + hi * hi;
        }
        Ok(())
    }

    fn value(self) -> Result<f64> {
        if !(self.energy > 0.0) {
            return Err(Error::Degenerate("nmse: truth set has zero energy".into()));
        }
        Ok(self.error / self.energy)
    }
}

fn nmse_with(truth: &[ComplexGrid], estimates: &[ComplexGrid], map: impl Fn(f32) -> f64 + Copy) -> Result<f64> {
    if truth.len() != estimates.len() {
        return Err(Error::shape(
            "nmse",
            format!("{} truths vs {} estimates", truth.len(), estimates.len()),
        ));
    }
    let mut sum = NmseSum::default();
    for (h, e) in truth.iter().zip(estimates) {
        sum.add(h, e, map)?;
    }
    sum.value()
}

/// `Σᵢ‖Hᵢ − Ĥᵢ‖² / Σᵢ‖Hᵢ‖²` on physical values.
pub fn nmse(truth: &[ComplexGrid], estimates: &[ComplexGrid]) -> Result<f64> {
    nmse_with(truth, estimates, |x| x as f64)
}

/// NMSE after mapping both sets through the (unclamped) affine
/// normalization `x ↦ -1 + (x - min)·slope`.
pub fn nmse_normalized(truth: &[ComplexGrid], estimates: &[ComplexGrid], norm: &NormStats) -> Result<f64> {
    let (min, slope) = (norm.scale_min, norm.slope());
    nmse_with(truth, estimates, move |x| -1.0 + (x as f64 - min) * slope)
}

/// An estimator that maps observations to full channel grids.
#[derive(Clone, Debug)]
pub enum Estimator {
    LsNearest,
    LsLinear,
    Lmmse(LmmseModel),
    /// Eval-mode generator through normalize, forward and denormalize.
    Generator {
        name: String,
        generator: Box<Generator>,
        norm: NormStats,
        anchor: LatentAnchor,
    },
}

/// Generator forward passes are chunked to bound tape memory.
const GENERATOR_CHUNK: usize = 64;

impl Estimator {
    pub fn name(&self) -> &str {
        match self {
            Estimator::LsNearest => "ls_nearest",
            Estimator::LsLinear => "ls_linear",
            Estimator::Lmmse(_) => "lmmse",
            Estimator::Generator { name, .. } => name,
        }
    }

    pub fn estimate_all(
        &self,
        observations: &[ComplexGrid],
        pilot: &PilotPattern,
        snr_db: f64,
    ) -> Result<Vec<ComplexGrid>> {
        match self {
            Estimator::LsNearest => observations
                .iter()
                .map(|r| Ok(interpolate_nearest(&ls_at_pilots(r, pilot)?)))
                .collect(),
            Estimator::LsLinear => observations
                .iter()
                .map(|r| Ok(interpolate_linear(&ls_at_pilots(r, pilot)?)))
                .collect(),
            Estimator::Lmmse(model) => {
                let filter = model.filter(snr_db)?;
                observations
                    .iter()
                    .map(|r| Ok(filter.apply(&ls_at_pilots(r, pilot)?)))
                    .collect()
            }
            Estimator::Generator {
                generator,
                norm,
                anchor,
                ..
            } => {
                let mut out = Vec::with_capacity(observations.len());
                for chunk in observations.chunks(GENERATOR_CHUNK) {
                    let features = norm.batch_features(chunk)?;
                    out.extend(norm.unbatch_features(&generator.estimate(&features, *anchor)?)?);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub snr_grid: Vec<f64>,
    /// Root of the per-sample noise streams.
    pub seed: u64,
    /// SNR points evaluated concurrently; results do not depend on it.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_grid: default_snr_grid(),
            seed: 0,
            threads: 1,
        }
    }
}

/// `-10, -5, ..., 20` dB.
pub fn default_snr_grid() -> Vec<f64> {
    (0..7).map(|i| -10.0 + 5.0 * i as f64).collect()
}

/// Re-observes every held-out channel at each SNR and scores every
/// estimator in both domains. Each sample keeps one noise stream across the
/// whole grid, so the curves differ only by the noise scale.
///
/// Rows are ordered by estimator, then SNR, then domain.
pub fn sweep(
    test: &Dataset,
    estimators: &[Estimator],
    config: &SweepConfig,
    norm: &NormStats,
) -> Result<Vec<NmseResult>> {
    if test.is_empty() {
        return Err(Error::Degenerate("sweep: empty test set".into()));
    }
    if estimators.is_empty() {
        return Err(Error::Config("sweep: no estimators selected".into()));
    }
    let truth: Vec<ComplexGrid> = test.samples.iter().map(|s| s.h.clone()).collect();
    let by_snr = crate::par::map(&config.snr_grid, config.threads, |_, &snr| {
        let observations = truth
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, i as u64));
                observe(h, &test.pilot, snr, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        estimators
            .iter()
            .map(|est| {
                let estimates = est.estimate_all(&observations, &test.pilot, snr)?;
                Ok((nmse(&truth, &estimates)?, nmse_normalized(&truth, &estimates, norm)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut results = Vec::new();
    for (e, est) in estimators.iter().enumerate() {
        for (&snr, row) in config.snr_grid.iter().zip(&by_snr) {
            let (phys, normed) = row[e];
            results.push(NmseResult::new(est.name(), snr, phys, Domain::Physical, truth.len()));
            results.push(NmseResult::new(est.name(), snr, normed, Domain::Normalized, truth.len()));
        }
    }
    Ok(results)
}

pub fn sweep_csv(results: &[NmseResult]) -> String {
    let mut s = format!("{NMSE_CSV_HEADER}\n");
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_sweep_csv(path: impl AsRef<Path>, results: &[NmseResult]) -> Result<()> {
    std::fs::write(path, sweep_csv(results))?;
    Ok(())
}

/// The NMSE increases (dB) between neighbouring SNR points of one curve,
/// after sorting by SNR.
pub fn curve_inversions(points: &[(f64, f64)]) -> Vec<f64> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .filter(|&d| d > 0.0)
        .collect()
}

/// Non-increasing in SNR up to at most `max_inversions` rises of at most
/// `tolerance_db` each.
pub fn is_monotone_within(points: &[(f64, f64)], tolerance_db: f64, max_inversions: usize) -> bool {
    let inv = curve_inversions(points);
    inv.len() <= max_inversions && inv.iter().all(|&d| d <= tolerance_db)
}

/// `(estimator, domain)` curves of a sweep that violate the monotonicity
/// tolerance.
pub fn non_monotone_curves(results: &[NmseResult]) -> Vec<(String, Domain)> {
    let mut keys: Vec<(String, Domain)> = Vec::new();
    for r in results {
        let key = (r.estimator.clone(), r.domain);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .filter(|(name, domain)| {
            let pts: Vec<(f64, f64)> = results
                .iter()
                .filter(|r| &r.estimator == name && r.domain == *domain)
                .map(|r| (r.snr_db, r.nmse_db))
                .collect();
            !is_monotone_within(&pts, MONOTONE_TOLERANCE_DB, MONOTONE_MAX_INVERSIONS)
        })
        .collect()
}

/// Histogram and moments of one real population.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    /// `n_bins + 1` equally spaced edges from the minimum to the maximum.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn summarize(name: &str, values: &[f32], n_bins: usize) -> Result<DistributionSummary> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let skewness = skewness_of(values).map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("population `{name}`: {m}")),
        other => other,
    })?;
    let n = values.len();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(DistributionSummary {
        name: name.to_string(),
        n,
        mean,
        std: var.sqrt(),
        skewness,
        edges,
        counts,
    })
}

pub fn distribution_report(populations: &[(&str, &[f32])], n_bins: usize) -> Result<Vec<DistributionSummary>> {
    populations
        .iter()
        .map(|(name, values)| summarize(name, values, n_bins))
        .collect()
}

pub fn distributions_csv(report: &[DistributionSummary]) -> String {
    let mut s = format!("{DISTRIBUTION_CSV_HEADER}\n");
    for d in report {
        for (b, count) in d.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{b},{},{},{count},{},{},{},{}",
                d.name,
                d.edges[b],
                d.edges[b + 1],
                d.n,
                d.mean,
                d.std,
                d.skewness
            );
        }
    }
    s
}

pub fn write_distributions_csv(path: impl AsRef<Path>, report: &[DistributionSummary]) -> Result<()> {
    std::fs::write(path, distributions_csv(report))?;
    Ok(())
}

/// Flattened populations in the generator's feature space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Populations {
    pub r: Vec<f32>,
    pub a_enc: Vec<f32>,
    pub z: Vec<f32>,
    pub h_hat: Vec<f32>,
    pub h: Vec<f32>,
}

impl Populations {
    pub fn named(&self) -> [(&str, &[f32]); 5] {
        [
            ("R", &self.r),
            ("a_enc", &self.a_enc),
            ("z", &self.z),
            ("H_hat", &self.h_hat),
            ("H", &self.h),
        ]
    }
}

/// Runs the generator in eval mode over `samples` and gathers normalized
/// observations, encoder outputs, latents, estimates and true channels.
pub fn collect_populations(
    generator: &Generator,
    norm: &NormStats,
    anchor: LatentAnchor,
    samples: &[ChannelSample],
) -> Result<Populations> {
    let mut pop = Populations::default();
    for chunk in samples.chunks(GENERATOR_CHUNK) {
        let r = norm.batch_features(chunk.iter().map(|s| &s.r))?;
        let h = norm.batch_features(chunk.iter().map(|s| &s.h))?;
        let out = generator.infer(&r, anchor)?;
        pop.r.extend_from_slice(r.data());
        pop.a_enc.extend_from_slice(out.a_enc.data());
        pop.z.extend_from_slice(out.z.data());
        pop.h_hat.extend_from_slice(out.h_hat.data());
        pop.h.extend_from_slice(h.data());
    }
    Ok(pop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airsim::{build_pilot_pattern, generate_dataset, GridDims, PilotConfig, SnrSpec, TopologyConfig};
    use num_complex::Complex32;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    fn grid(seed: u64) -> ComplexGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = GridDims::new(2, 3, 4);
        let data = (0..dims.len())
            .map(|_| Complex32::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        ComplexGrid::from_vec(dims, data).unwrap()
    }

    fn scaled(g: &ComplexGrid, a: f32) -> ComplexGrid {
        ComplexGrid::from_vec(g.dims(), g.data().iter().map(|c| c * a).collect()).unwrap()
    }

    #[test]
    fn nmse_identities() {
        let h = vec![grid(1), grid(2)];
        let zero: Vec<ComplexGrid> = h.iter().map(|g| ComplexGrid::zeros(g.dims())).collect();
        let double: Vec<ComplexGrid> = h.iter().map(|g| scaled(g, 2.0)).collect();
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert!((nmse(&h, &zero).unwrap() - 1.0).abs() <= 1e-6);
        assert!((nmse(&h, &double).unwrap() - 1.0).abs() <= 1e-6);
        assert!(matches!(nmse(&zero, &h), Err(Error::Degenerate(_))));
    }

    #[test]
    fn symmetric_bounds_make_domains_agree() {
        let norm = NormStats::new(-3.0, 3.0, 0.0, 1.0).unwrap();
        let h = vec![grid(3), grid(4)];
        let e = vec![grid(5), scaled(&grid(6), 0.3)];
        let ratio = nmse_normalized(&h, &e, &norm).unwrap() / nmse(&h, &e).unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_tolerance() {
        let down = [(-10.0, 0.0), (0.0, -3.0), (10.0, -6.0)];
        assert!(is_monotone_within(&down, 0.5, 1));
        let one_small = [(-10.0, 0.0), (0.0, 0.4), (10.0, -6.0)];
        assert!(is_monotone_within(&one_small, 0.5, 1));
        let one_big = [(-10.0, 0.0), (0.0, 0.6), (10.0, -6.0)];
        assert!(!is_monotone_within(&one_big, 0.5, 1));
        let two_small = [(-10.0, 0.0), (0.0, 0.1), (5.0, -1.0), (10.0, -0.9)];
        assert!(!is_monotone_within(&two_small, 0.5, 1));
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let pilot = build_pilot_pattern(&PilotConfig::default(), 32, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ds = generate_dataset(&TopologyConfig::default(), &pilot, 12, SnrSpec::Fixed(0.0), 5).unwrap();
        let norm = ds.fit_norm().unwrap();
        let est = [Estimator::LsNearest, Estimator::LsLinear];
        let cfg = SweepConfig::default();
        let a = sweep(&ds, &est, &cfg, &norm).unwrap();
        assert_eq!(a.len(), cfg.snr_grid.len() * est.len() * 2);
        assert_eq!(sweep_csv(&a), sweep_csv(&sweep(&ds, &est, &cfg, &norm).unwrap()));
        let threaded = SweepConfig { threads: 3, ..cfg.clone() };
        assert_eq!(sweep_csv(&a), sweep_csv(&sweep(&ds, &est, &threaded, &norm).unwrap()));
        assert!(non_monotone_curves(&a).is_empty(), "{}", sweep_csv(&a));
        let near = |snr: f64| {
            a.iter()
                .find(|r| r.estimator == "ls_nearest" && r.snr_db == snr && r.domain == Domain::Physical)
                .unwrap()
                .nmse
        };
        assert!(near(20.0) < near(-10.0));
    }

    #[test]
    fn gaussian_and_exponential_skewness() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal: Vec<f32> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let expo: Vec<f32> = (0..100_000).map(|_| Exp1.sample(&mut rng)).collect();
        let rep = distribution_report(&[("normal", &normal), ("exp", &expo)], 20).unwrap();
        assert!(rep[0].skewness.abs() < 0.05, "{}", rep[0].skewness);
        assert!((rep[1].skewness / 2.0 - 1.0).abs() < 0.1, "{}", rep[1].skewness);
        for d in &rep {
            assert_eq!(d.counts.iter().sum::<u64>(), 100_000);
        }
    }

    #[test]
    fn constant_population_is_degenerate() {
        assert!(matches!(summarize("c", &[0.5; 10], 4), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn histogram_counts_cover_population(values in proptest::collection::vec(-5.0f32..5.0, 2..200), bins in 1usize..30) {
            prop_assume!(skewness_of(&values).is_ok());
            let d = summarize("x", &values, bins).unwrap();
            prop_assert_eq!(d.counts.iter().sum::<u64>() as usize, values.len());
            prop_assert_eq!(d.edges.len(), bins + 1);
        }
    }
}
