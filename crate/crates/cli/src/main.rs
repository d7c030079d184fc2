use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use chanest_core::airsim::{generate_dataset, load_dataset, save_dataset, ComplexGrid, Dataset};
use chanest_core::baselines::{fit_lmmse, save_lmmse};
use chanest_core::config::RunConfig;
use chanest_core::evaluation::{
    collect_populations, distribution_report, sweep, write_distributions_csv, write_sweep_csv, Estimator,
};
use chanest_core::models::load_model;
use chanest_core::training::{checkpoint_name, train, RunOutputs};
use chanest_core::xai;
use chanest_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const TRAIN_FILE: &str = "train.bin";
const TEST_FILE: &str = "test.bin";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(name = "chanest", version, about = "MIMO-OFDM channel estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, else a fresh run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArg {
    /// Directory holding train.bin and test.bin (default: config `dataset_path`).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    LsNearest,
    LsLinear,
    Lmmse,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate channels and observations, split and write them.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Fraction of samples in the training split.
        #[arg(long)]
        split: Option<f64>,
    },
    /// Train the generator/critic pair.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        /// Continue from a checkpoint (optimizer state included).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Fit one classical estimator and sweep it over SNR.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// NMSE sweep of a checkpoint and/or the baselines, plus distributions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        baselines: bool,
    },
    /// Critic activation maps for test samples.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long, conflicts_with = "ckpt_series", required_unless_present = "ckpt_series")]
        ckpt: Option<PathBuf>,
        /// Directory of `ckpt_epoch_<n>.bin` files; one map set per checkpoint.
        #[arg(long)]
        ckpt_series: Option<PathBuf>,
        /// Critic layers (1-based, comma-separated).
        #[arg(long, value_delimiter = ',', default_value = "1")]
        layer: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match (&common.out, cfg.output_dir.as_str()) {
        (Some(p), _) => p.clone(),
        (None, "") => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("run_{secs}_seed{}", cfg.seed))
        }
        (None, p) => PathBuf::from(p),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.save(dir.join(CONFIG_ECHO))?;
    Ok(())
}

fn dataset_dir(arg: &DatasetArg, cfg: &RunConfig) -> Result<PathBuf> {
    match (&arg.dataset, cfg.dataset_path.as_str()) {
        (Some(p), _) => Ok(p.clone()),
        (None, "") => Err(config_error("no dataset given (use --dataset or the `dataset_path` key)")),
        (None, p) => Ok(PathBuf::from(p)),
    }
}

/// Train and test splits, both carrying the statistics fitted on train.
fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    let read = |name: &str| {
        let p = dir.join(name);
        load_dataset(&p).with_context(|| format!("reading {}", p.display()))
    };
    let mut train = read(TRAIN_FILE)?;
    let mut test = read(TEST_FILE)?;
    if train.dims() != test.dims() || train.pilot != test.pilot {
        return Err(anyhow::Error::from(Error::Format(
            "train and test files disagree on grid or pilot pattern".into(),
        )));
    }
    test.norm = Some(train.fit_norm()?);
    Ok((train, test))
}

fn run_dataset(common: Common, count: Option<usize>, split: Option<f64>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(c) = count {
        cfg.dataset_count = c;
    }
    if let Some(s) = split {
        cfg.train_fraction = s;
    }
    cfg.validate()?;
    if cfg.dataset_count < 2 {
        return Err(config_error("a train/test split needs at least 2 samples"));
    }
    let dir = output_dir(&common, &cfg)?;
    let ds = generate_dataset(
        &cfg.topology_config(),
        &cfg.pilot_pattern()?,
        cfg.dataset_count,
        cfg.snr_spec(),
        cfg.seed,
    )?;
    let (mut train, test) = ds.split(cfg.train_count(cfg.dataset_count))?;
    let norm = train.fit_norm()?;
    save_dataset(dir.join(TRAIN_FILE), &train)?;
    save_dataset(dir.join(TEST_FILE), &test)?;
    let energy = |d: &Dataset| d.samples.iter().map(|s| s.h.energy()).sum::<f64>() / (d.len() * d.dims().len()) as f64;
    let snr = |d: &Dataset| {
        d.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.snr_db), hi.max(s.snr_db)))
    };
    let d = train.dims();
    let mut report = String::new();
    report.push_str(&format!("antennas={}\nsymbols={}\nsubcarriers={}\n", d.antennas, d.symbols, d.subcarriers));
    report.push_str(&format!("pilots={}\n", train.pilot.num_pilots()));
    for (name, part) in [("train", &train), ("test", &test)] {
        let (lo, hi) = snr(part);
        report.push_str(&format!("{name}_count={}\n", part.len()));
        report.push_str(&format!("{name}_snr_db_min={lo}\n{name}_snr_db_max={hi}\n"));
        report.push_str(&format!("{name}_mean_re_power={}\n", energy(part)));
    }
    report.push_str(&format!(
        "norm_scale_min={}\nnorm_scale_max={}\nnorm_mu_h={}\nnorm_sigma_h={}\n",
        norm.scale_min, norm.scale_max, norm.mu_h, norm.sigma_h
    ));
    std::fs::write(dir.join("dataset_stats.txt"), report)?;
    echo_config(&dir, &cfg)?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), dir.display());
    Ok(())
}

fn run_train(common: Common, data: DatasetArg, resume: Option<PathBuf>, epochs: Option<usize>, batch: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = batch {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    let (train_set, _) = load_split(&dataset_dir(&data, &cfg)?)?;
    let d = train_set.dims();
    let arch = chanest_core::models::ArchConfig {
        antennas: d.antennas,
        symbols: d.symbols,
        subcarriers: d.subcarriers,
        ..cfg.arch_config()
    };
    let dir = output_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let outputs = RunOutputs { dir: dir.clone() };
    let outcome = train(&train_set, &arch, &cfg.train_config(), Some(&outputs), resume.as_deref(), |log| {
        let m = log.mean();
        eprintln!(
            "epoch {} L_D={:.5} L_G={:.5} L_rec={:.5} L_gamma={:.5}",
            log.epoch, m.l_d, m.l_g, m.l_rec, m.l_skew
        );
    })?;
    println!(
        "trained to epoch {}; {} checkpoint(s) in {}",
        outcome.trainer.epochs_done(),
        outcome.checkpoints.len(),
        dir.display()
    );
    Ok(())
}

fn baseline_estimators(train: &Dataset) -> Result<Vec<Estimator>> {
    Ok(vec![
        Estimator::LsNearest,
        Estimator::LsLinear,
        Estimator::Lmmse(fit_lmmse(train, &train.pilot)?),
    ])
}

fn run_baseline(common: Common, data: DatasetArg, method: Method) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let (train_set, test) = load_split(&dataset_dir(&data, &cfg)?)?;
    let dir = output_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let est = match method {
        Method::LsNearest => Estimator::LsNearest,
        Method::LsLinear => Estimator::LsLinear,
        Method::Lmmse => {
            let model = fit_lmmse(&train_set, &train_set.pilot)?;
            save_lmmse(dir.join("lmmse_model.bin"), &model)?;
            Estimator::Lmmse(model)
        }
    };
    let norm = train_set.norm()?;
    let results = sweep(&test, std::slice::from_ref(&est), &cfg.sweep_config(), &norm)?;
    let path = dir.join(format!("baseline_{}.csv", est.name()));
    write_sweep_csv(&path, &results)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_eval(common: Common, data: DatasetArg, ckpt: Option<PathBuf>, baselines: bool) -> Result<()> {
    if ckpt.is_none() && !baselines {
        return Err(config_error("nothing to evaluate: pass --ckpt and/or --baselines"));
    }
    let cfg = load_config(common.config.as_deref())?;
    let (train_set, test) = load_split(&dataset_dir(&data, &cfg)?)?;
    let dir = output_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let mut norm = train_set.norm()?;
    let mut estimators = Vec::new();
    let mut model = None;
    if let Some(p) = &ckpt {
        let loaded = load_model(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
        if loaded.manifest.arch.dims() != test.dims() {
            return Err(config_error("checkpoint dimensions do not match the dataset"));
        }
        norm = loaded.manifest.norm;
        let anchor = loaded.manifest.anchor()?;
        estimators.push(Estimator::Generator {
            name: "generator".into(),
            generator: Box::new(loaded.generator.clone()),
            norm,
            anchor,
        });
        model = Some((loaded.generator, anchor));
    }
    if baselines {
        estimators.extend(baseline_estimators(&train_set)?);
    }
    let results = sweep(&test, &estimators, &cfg.sweep_config(), &norm)?;
    let sweep_path = dir.join("nmse_sweep.csv");
    write_sweep_csv(&sweep_path, &results)?;
    println!("wrote {}", sweep_path.display());
    if let Some((generator, anchor)) = model {
        let pop = collect_populations(&generator, &norm, anchor, &test.samples)?;
        let report = distribution_report(&pop.named(), cfg.distribution_bins)?;
        let path = dir.join("distributions.csv");
        write_distributions_csv(&path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// `ckpt_epoch_<n>.bin` files of `dir`, ascending by epoch.
fn checkpoint_series(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let epoch = name
            .strip_prefix("ckpt_epoch_")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch.filter(|&e| checkpoint_name(e) == name) {
            found.push((e, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(config_error(format!("no checkpoints found in {}", dir.display())));
    }
    Ok(found)
}

fn run_explain(
    common: Common,
    data: DatasetArg,
    ckpt: Option<PathBuf>,
    series: Option<PathBuf>,
    layers: Vec<usize>,
    samples: usize,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if samples == 0 {
        return Err(config_error("--samples must be positive"));
    }
    let (_, test) = load_split(&dataset_dir(&data, &cfg)?)?;
    let checkpoints = match (ckpt, series) {
        (Some(p), None) => {
            let m = load_model(&p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            vec![(m.manifest.epoch().unwrap_or(0), p)]
        }
        (None, Some(d)) => checkpoint_series(&d)?,
        _ => return Err(config_error("pass exactly one of --ckpt and --ckpt-series")),
    };
    let dir = output_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let channels: Vec<&ComplexGrid> = test.samples.iter().take(samples).map(|s| &s.h).collect();
    let mut all = Vec::new();
    for (epoch, path) in &checkpoints {
        let loaded = load_model(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        if loaded.manifest.arch.dims() != test.dims() {
            return Err(config_error("checkpoint dimensions do not match the dataset"));
        }
        let results = xai::explain_samples(&loaded.critic, &loaded.manifest.norm, &channels, &layers, cfg.worker_threads())?;
        let rows = xai::write_maps(&dir, *epoch, &results)?;
        for (layer, med) in xai::median_by_layer(&rows) {
            println!("epoch {epoch} layer {layer}: median alignment {med:.4} over {} samples", channels.len());
        }
        all.push((*epoch, rows));
    }
    let text = if all.len() == 1 {
        xai::alignment_csv(&all[0].1)
    } else {
        xai::alignment_series_csv(&all)
    };
    std::fs::write(dir.join("alignment.csv"), text)?;
    println!("wrote maps and alignment.csv to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { common, count, split } => run_dataset(common, count, split),
        Command::Train {
            common,
            data,
            resume,
            epochs,
            batch,
        } => run_train(common, data, resume, epochs, batch),
        Command::Baseline { common, data, method } => run_baseline(common, data, method),
        Command::Eval {
            common,
            data,
            ckpt,
            baselines,
        } => run_eval(common, data, ckpt, baselines),
        Command::Explain {
            common,
            data,
            ckpt,
            ckpt_series,
            layer,
            samples,
        } => run_explain(common, data, ckpt, ckpt_series, layer, samples),
    }
}

/// Exit code and error class of a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Shape { .. } => (2, "config"),
                Error::Io(_) | Error::Format(_) => (3, "io"),
                Error::NonFinite { .. }
                | Error::NonFiniteGradient { .. }
                | Error::Degenerate(_)
                | Error::Singular(_)
                | Error::Diverged { .. }
                | Error::BackwardTwice => (4, "numerical"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (3, "io");
        }
    }
    (1, "internal")
}

fn report(code: u8, kind: &str, message: String) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(2, "usage", first.to_string());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            report(code, kind, message)
        }
    }
}
