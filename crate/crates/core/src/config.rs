//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, lists are comma-separated.
//! Unknown and repeated keys are rejected. [`RunConfig::to_text`] writes every
//! key and parses back to the same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::airsim::{build_pilot_pattern, DopplerMode, PilotConfig, PilotPattern, SnrSpec, TopologyConfig};
use crate::error::{Error, Result};
use crate::evaluation::{default_snr_grid, SweepConfig};
use crate::models::ArchConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root seed for dataset, pilot symbols, training and sweep noise.
    pub seed: u64,
    /// Worker threads for evaluation and explanation (0 = all cores).
    pub threads: usize,
    pub topology: TopologyConfig,
    /// `None` derives half-wavelength spacing from the carrier frequency.
    pub antenna_spacing: Option<f64>,
    /// Correlation used when `topology.doppler` is AR(1).
    pub ar1_rho: f64,
    pub pilot: PilotConfig,
    pub dataset_count: usize,
    /// Fraction of samples assigned to the training split.
    pub train_fraction: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub sweep_snr_db: Vec<f64>,
    pub distribution_bins: usize,
    /// Empty means "use the command-line argument".
    pub dataset_path: String,
    /// Empty means a run directory named by timestamp and seed.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            topology: TopologyConfig::default(),
            antenna_spacing: None,
            ar1_rho: 0.98,
            pilot: PilotConfig::default(),
            dataset_count: 2000,
            train_fraction: 0.8,
            snr_min_db: -10.0,
            snr_max_db: 20.0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            sweep_snr_db: default_snr_grid(),
            distribution_bins: 50,
            dataset_path: String::new(),
            output_dir: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|item| parse(key, item.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.topology;
        let tr = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "carrier_frequency" => t.carrier_frequency = parse(key, v)?,
            "subcarrier_spacing" => t.subcarrier_spacing = parse(key, v)?,
            "antenna_spacing" => {
                self.antenna_spacing = match v {
                    "half_wavelength" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "num_antennas" => t.num_antennas = parse(key, v)?,
            "num_symbols" => t.num_symbols = parse(key, v)?,
            "num_subcarriers" => t.num_subcarriers = parse(key, v)?,
            "num_paths" => t.num_paths = parse(key, v)?,
            "rms_delay_spread" => t.rms_delay_spread = parse(key, v)?,
            "elevation_min" => t.elevation_range.0 = parse(key, v)?,
            "elevation_max" => t.elevation_range.1 = parse(key, v)?,
            "azimuth_min" => t.azimuth_range.0 = parse(key, v)?,
            "azimuth_max" => t.azimuth_range.1 = parse(key, v)?,
            "doppler" => {
                t.doppler = match v {
                    "static" => DopplerMode::Static,
                    "ar1" => DopplerMode::Ar1 { rho: self.ar1_rho },
                    _ => return Err(Error::Config(format!("doppler: expected `static` or `ar1`, got `{v}`"))),
                }
            }
            "ar1_rho" => {
                self.ar1_rho = parse(key, v)?;
                if let DopplerMode::Ar1 { rho } = &mut t.doppler {
                    *rho = self.ar1_rho;
                }
            }
            "pilot_symbols" => self.pilot.pilot_symbols = parse_list(key, v)?,
            "tx_index" => self.pilot.tx_index = parse(key, v)?,
            "stream_index" => self.pilot.stream_index = parse(key, v)?,
            "k_str" => self.pilot.k_str = parse(key, v)?,
            "k_seq" => self.pilot.k_seq = parse(key, v)?,
            "dataset_count" => self.dataset_count = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "snr_min_db" => self.snr_min_db = parse(key, v)?,
            "snr_max_db" => self.snr_max_db = parse(key, v)?,
            "encoder_widths" => self.arch.encoder_widths = parse_list(key, v)?,
            "z_dim" => self.arch.z_dim = parse(key, v)?,
            "critic_widths" => self.arch.critic_widths = parse_list(key, v)?,
            "leaky_slope" => self.arch.leaky_slope = parse(key, v)?,
            "bn_momentum" => self.arch.bn_momentum = parse(key, v)?,
            "epochs" => tr.epochs = parse(key, v)?,
            "batch_size" => tr.batch_size = parse(key, v)?,
            "critic_iters" => tr.critic_iters = parse(key, v)?,
            "lr" => tr.adam.lr = parse(key, v)?,
            "beta1" => tr.adam.beta1 = parse(key, v)?,
            "beta2" => tr.adam.beta2 = parse(key, v)?,
            "adam_eps" => tr.adam.eps = parse(key, v)?,
            "checkpoint_every" => tr.checkpoint_every = parse(key, v)?,
            "skewness_enabled" => tr.skewness_enabled = parse(key, v)?,
            "anchored_latent" => tr.anchored_latent = parse(key, v)?,
            "lambda_gp" => tr.weights.gp = parse(key, v)?,
            "lambda_kl" => tr.weights.kl = parse(key, v)?,
            "lambda_rec" => tr.weights.rec = parse(key, v)?,
            "lambda_skew" => tr.weights.skew = parse(key, v)?,
            "sweep_snr_db" => self.sweep_snr_db = parse_list(key, v)?,
            "distribution_bins" => self.distribution_bins = parse(key, v)?,
            "dataset_path" => self.dataset_path = v.to_string(),
            "output_dir" => self.output_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.topology;
        let tr = &self.train;
        let doppler = match t.doppler {
            DopplerMode::Static => "static",
            DopplerMode::Ar1 { .. } => "ar1",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("carrier_frequency", t.carrier_frequency.to_string()),
            ("subcarrier_spacing", t.subcarrier_spacing.to_string()),
            (
                "antenna_spacing",
                self.antenna_spacing.map_or("half_wavelength".into(), |v| v.to_string()),
            ),
            ("num_antennas", t.num_antennas.to_string()),
            ("num_symbols", t.num_symbols.to_string()),
            ("num_subcarriers", t.num_subcarriers.to_string()),
            ("num_paths", t.num_paths.to_string()),
            ("rms_delay_spread", t.rms_delay_spread.to_string()),
            ("elevation_min", t.elevation_range.0.to_string()),
            ("elevation_max", t.elevation_range.1.to_string()),
            ("azimuth_min", t.azimuth_range.0.to_string()),
            ("azimuth_max", t.azimuth_range.1.to_string()),
            ("doppler", doppler.into()),
            ("ar1_rho", self.ar1_rho.to_string()),
            ("pilot_symbols", join(&self.pilot.pilot_symbols)),
            ("tx_index", self.pilot.tx_index.to_string()),
            ("stream_index", self.pilot.stream_index.to_string()),
            ("k_str", self.pilot.k_str.to_string()),
            ("k_seq", self.pilot.k_seq.to_string()),
            ("dataset_count", self.dataset_count.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("snr_min_db", self.snr_min_db.to_string()),
            ("snr_max_db", self.snr_max_db.to_string()),
            ("encoder_widths", join(&self.arch.encoder_widths)),
            ("z_dim", self.arch.z_dim.to_string()),
            ("critic_widths", join(&self.arch.critic_widths)),
            ("leaky_slope", self.arch.leaky_slope.to_string()),
            ("bn_momentum", self.arch.bn_momentum.to_string()),
            ("epochs", tr.epochs.to_string()),
            ("batch_size", tr.batch_size.to_string()),
            ("critic_iters", tr.critic_iters.to_string()),
            ("lr", tr.adam.lr.to_string()),
            ("beta1", tr.adam.beta1.to_string()),
            ("beta2", tr.adam.beta2.to_string()),
            ("adam_eps", tr.adam.eps.to_string()),
            ("checkpoint_every", tr.checkpoint_every.to_string()),
            ("skewness_enabled", tr.skewness_enabled.to_string()),
            ("anchored_latent", tr.anchored_latent.to_string()),
            ("lambda_gp", tr.weights.gp.to_string()),
            ("lambda_kl", tr.weights.kl.to_string()),
            ("lambda_rec", tr.weights.rec.to_string()),
            ("lambda_skew", tr.weights.skew.to_string()),
            ("sweep_snr_db", join(&self.sweep_snr_db)),
            ("distribution_bins", self.distribution_bins.to_string()),
            ("dataset_path", self.dataset_path.clone()),
            ("output_dir", self.output_dir.clone()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.topology_config().validate()?;
        if self.dataset_count == 0 {
            return bad("dataset_count must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return bad(format!("invalid SNR range [{}, {}]", self.snr_min_db, self.snr_max_db));
        }
        if self.sweep_snr_db.is_empty() || self.sweep_snr_db.iter().any(|v| !v.is_finite()) {
            return bad("sweep_snr_db must be a non-empty list of finite values".into());
        }
        if self.distribution_bins == 0 {
            return bad("distribution_bins must be positive".into());
        }
        if self.dataset_path.contains('#') || self.output_dir.contains('#') {
            return bad("paths may not contain `#`".into());
        }
        self.arch_config().validate()?;
        self.train_config().validate()?;
        // Pilot parameters are checked against the grid without drawing symbols.
        self.pilot_pattern().map(|_| ())
    }

    pub fn topology_config(&self) -> TopologyConfig {
        let mut t = self.topology.clone();
        t.antenna_spacing = self.antenna_spacing.unwrap_or_else(|| t.wavelength() / 2.0);
        if let DopplerMode::Ar1 { rho } = &mut t.doppler {
            *rho = self.ar1_rho;
        }
        t
    }

    /// Pilot mask and QPSK symbols; symbols are drawn from a stream derived
    /// from `seed`, independent of the per-sample streams.
    pub fn pilot_pattern(&self) -> Result<PilotPattern> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ PILOT_STREAM);
        build_pilot_pattern(
            &self.pilot,
            self.topology.num_subcarriers,
            self.topology.num_symbols,
            &mut rng,
        )
    }

    pub fn snr_spec(&self) -> SnrSpec {
        if self.snr_min_db == self.snr_max_db {
            SnrSpec::Fixed(self.snr_min_db)
        } else {
            SnrSpec::Uniform {
                min: self.snr_min_db,
                max: self.snr_max_db,
            }
        }
    }

    /// Network shapes follow the simulated grid.
    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            antennas: self.topology.num_antennas,
            symbols: self.topology.num_symbols,
            subcarriers: self.topology.num_subcarriers,
            ..self.arch.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            snr_grid: self.sweep_snr_db.clone(),
            seed: self.seed,
            threads: self.worker_threads(),
        }
    }

    /// Number of training samples out of `count`.
    pub fn train_count(&self, count: usize) -> usize {
        ((count as f64 * self.train_fraction).round() as usize).clamp(1, count.saturating_sub(1).max(1))
    }

    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

const PILOT_STREAM: u64 = 0x5049_4c4f_5453_594d;

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_reference_settings() {
        let text = RunConfig::default().to_text();
        for line in [
            "num_antennas = 4",
            "num_symbols = 8",
            "num_subcarriers = 32",
            "lambda_gp = 10",
            "lambda_kl = 0.1",
            "pilot_symbols = 2,6",
        ] {
            assert!(text.lines().any(|l| l == line), "missing `{line}`");
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.threads = 0;
        cfg.ar1_rho = 0.9;
        cfg.topology.doppler = DopplerMode::Ar1 { rho: 0.9 };
        cfg.antenna_spacing = Some(0.0375);
        cfg.train.adam.lr = 3e-5;
        cfg.train.weights.rec = 100.0;
        cfg.arch.critic_widths = vec![8, 16, 32];
        cfg.sweep_snr_db = vec![-7.5, 0.0, 12.25];
        cfg.output_dir = "runs/a b".into();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_blank_lines_and_order_are_tolerated() {
        let cfg = RunConfig::parse(
            "# header\n\nar1_rho = 0.5   # trailing\n  doppler = ar1\nepochs=3\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.topology.doppler, DopplerMode::Ar1 { rho: 0.5 });
        assert_eq!(cfg.topology_config().doppler, DopplerMode::Ar1 { rho: 0.5 });
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        for text in [
            "epoch = 3",
            "epochs = 3\nepochs = 4",
            "epochs 3",
            "epochs = three",
            "doppler = jakes",
            "lambda_kl = -1",
            "train_fraction = 1",
            "pilot_symbols = 2,9",
            "sweep_snr_db =",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn derived_configs_follow_shared_keys() {
        let cfg = RunConfig::parse("seed = 9\nnum_antennas = 2\nsnr_min_db = 5\nsnr_max_db = 5").unwrap();
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(cfg.sweep_config().seed, 9);
        assert_eq!(cfg.arch_config().antennas, 2);
        assert_eq!(cfg.snr_spec(), SnrSpec::Fixed(5.0));
        let t = cfg.topology_config();
        assert!((t.antenna_spacing - t.wavelength() / 2.0).abs() < 1e-15);
        assert_eq!(cfg.pilot_pattern().unwrap(), cfg.pilot_pattern().unwrap());
        assert_eq!(cfg.pilot_pattern().unwrap().num_pilots(), 64);
    }

    #[test]
    fn split_counts_leave_both_sides_non_empty() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_count(2000), 1600);
        assert_eq!(cfg.train_count(4), 3);
        assert_eq!(cfg.train_count(2), 1);
    }
}
