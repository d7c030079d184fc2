//! Adversarial training: per batch, `n_c` critic updates followed by one
//! generator update, with checkpointing and CSV loss logs.
//!
//! An epoch is one pass over the shuffled training set in batches of `b`
//! (a trailing partial batch is dropped). Every epoch draws its shuffling and
//! penalty mixing weights from its own stream derived from `(seed, epoch)`,
//! so a run resumed from a checkpoint continues exactly as the uninterrupted
//! run would have.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::airsim::{sample_seed, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights, LOSS_CSV_HEADER};
use crate::models::{load_model, save_model, ArchConfig, Critic, Generator, LatentAnchor, Mode, ModelManifest};
use crate::tensor::{adam_step, AdamConfig, OptimizerState, ParamSet, Tape, Tensor};

pub const CRITIC_CSV_HEADER: &str = "epoch,step,critic_iter,L_f,L_r,L_gp,L_D";

const INIT_STREAM: u64 = 0x1D17;
const EPOCH_STREAM: u64 = 0xE90C;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_iters: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables; the final
    /// epoch is always written when an output directory is given).
    pub checkpoint_every: usize,
    pub skewness_enabled: bool,
    /// Anchor the latent to `(μ_H, σ_H)`; otherwise `z = a_enc`.
    pub anchored_latent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            critic_iters: 5,
            adam: AdamConfig {
                lr: 1e-4,
                beta1: 0.5,
                beta2: 0.9,
                eps: 1e-8,
            },
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 100,
            skewness_enabled: true,
            anchored_latent: true,
        }
    }
}

impl TrainConfig {
    /// Plain WGAN-GP: adversarial term only, standard-normal latent.
    pub fn plain_wgan_gp(mut self) -> Self {
        self.weights.rec = 0.0;
        self.weights.kl = 0.0;
        self.skewness_enabled = false;
        self.anchored_latent = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.critic_iters == 0 {
            return Err(Error::Config("critic_iters must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyper-parameters".into()));
        }
        self.weights.validate()
    }
}

/// Paired `(H, R)` batches for one epoch: a random permutation cut into
/// `batch_size` chunks, dropping the remainder.
pub fn pair_batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Config(format!(
            "batch size {batch_size} must lie in 1..={len} (dataset size)"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Normalized features of every training sample.
pub struct TrainingData {
    h: Vec<Tensor>,
    r: Vec<Tensor>,
}

impl TrainingData {
    pub fn new(dataset: &Dataset, norm: &NormStats) -> Self {
        Self {
            h: dataset.samples.iter().map(|s| norm.to_features(&s.h)).collect(),
            r: dataset.samples.iter().map(|s| norm.to_features(&s.r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let h: Vec<Tensor> = idx.iter().map(|&i| self.h[i].clone()).collect();
        let r: Vec<Tensor> = idx.iter().map(|&i| self.r[i].clone()).collect();
        Ok((Tensor::stack(&h)?, Tensor::stack(&r)?))
    }
}

/// One critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStep {
    pub l_f: f64,
    pub l_r: f64,
    pub l_gp: f64,
}

impl CriticStep {
    pub fn l_d(&self) -> f64 {
        self.l_f - self.l_r + self.l_gp
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    /// `(global generator step, report)` per batch.
    pub steps: Vec<(usize, LossReport)>,
    /// `(global generator step, critic iteration, terms)`.
    pub critic_steps: Vec<(usize, usize, CriticStep)>,
}

impl EpochLog {
    /// Per-term mean over the epoch's generator steps.
    pub fn mean(&self) -> LossReport {
        let n = self.steps.len().max(1) as f64;
        let mut m = LossReport::default();
        for (_, r) in &self.steps {
            m.l_f += r.l_f / n;
            m.l_r += r.l_r / n;
            m.l_gp += r.l_gp / n;
            m.l_rec += r.l_rec / n;
            m.l_kl += r.l_kl / n;
            m.l_skew += r.l_skew / n;
        }
        LossReport::new(m.l_f, m.l_r, m.l_gp, m.l_rec, m.l_kl, m.l_skew)
    }
}

/// Both networks, their optimizer state and the training position.
pub struct Trainer {
    pub generator: Generator,
    pub critic: Critic,
    gen_opt: OptimizerState,
    critic_opt: OptimizerState,
    config: TrainConfig,
    norm: NormStats,
    epochs_done: usize,
    steps_done: usize,
}

fn optimizer_entries(prefix: &str, params: &ParamSet, opt: &OptimizerState) -> Vec<(String, Tensor)> {
    let mut out = vec![(format!("{prefix}.step"), Tensor::scalar(opt.step as f32))];
    for (i, p) in params.iter().enumerate() {
        out.push((format!("{prefix}.m/{}", p.name), opt.first[i].clone()));
        out.push((format!("{prefix}.v/{}", p.name), opt.second[i].clone()));
    }
    out
}

fn restore_optimizer(
    prefix: &str,
    params: &ParamSet,
    config: AdamConfig,
    extra: &[(String, Tensor)],
) -> Result<OptimizerState> {
    let find = |name: String| {
        extra
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))
    };
    let mut state = OptimizerState::new(config, params);
    state.step = find(format!("{prefix}.step"))?.item() as u64;
    for (i, p) in params.iter().enumerate() {
        for (slot, tag) in [(&mut state.first[i], "m"), (&mut state.second[i], "v")] {
            let t = find(format!("{prefix}.{tag}/{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("optimizer moment for `{}` has the wrong shape", p.name)));
            }
            *slot = t;
        }
    }
    Ok(state)
}

impl Trainer {
    pub fn new(arch: &ArchConfig, config: &TrainConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, INIT_STREAM));
        let generator = Generator::new(arch, &mut rng)?;
        let critic = Critic::new(arch, &mut rng)?;
        Ok(Self {
            gen_opt: OptimizerState::new(config.adam, generator.params()),
            critic_opt: OptimizerState::new(config.adam, critic.params()),
            generator,
            critic,
            config: config.clone(),
            norm,
            epochs_done: 0,
            steps_done: 0,
        })
    }

    /// Restores networks, optimizer moments and position from a checkpoint
    /// written by [`Trainer::save_checkpoint`].
    pub fn resume(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let loaded = load_model(path)?;
        let meta = |k: &str| -> Result<usize> {
            loaded
                .manifest
                .meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `meta.{k}`")))
        };
        let (epochs_done, steps_done) = (meta("epoch")?, meta("step")?);
        let gen_opt = restore_optimizer("opt.gen", loaded.generator.params(), config.adam, &loaded.extra)?;
        let critic_opt = restore_optimizer("opt.critic", loaded.critic.params(), config.adam, &loaded.extra)?;
        Ok(Self {
            generator: loaded.generator,
            critic: loaded.critic,
            gen_opt,
            critic_opt,
            config: config.clone(),
            norm: loaded.manifest.norm,
            epochs_done,
            steps_done,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn anchor(&self) -> Result<LatentAnchor> {
        if self.config.anchored_latent {
            LatentAnchor::from_norm(&self.norm)
        } else {
            Ok(LatentAnchor::standard())
        }
    }

    pub fn manifest(&self) -> ModelManifest {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), self.epochs_done.to_string());
        meta.insert("step".to_string(), self.steps_done.to_string());
        meta.insert("seed".to_string(), self.config.seed.to_string());
        meta.insert("anchored_latent".to_string(), self.config.anchored_latent.to_string());
        ModelManifest {
            arch: self.generator.arch().clone(),
            norm: self.norm,
            meta,
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut extra = optimizer_entries("opt.gen", self.generator.params(), &self.gen_opt);
        extra.extend(optimizer_entries("opt.critic", self.critic.params(), &self.critic_opt));
        save_model(path, &self.generator, &self.critic, &self.manifest(), &extra)
    }

    fn diverged(&self, step: usize, detail: impl Into<String>) -> Error {
        Error::Diverged {
            epoch: self.epochs_done + 1,
            step,
            detail: detail.into(),
        }
    }

    fn critic_step(&mut self, h: &Tensor, h_hat: &Tensor, rng: &mut ChaCha8Rng) -> Result<CriticStep> {
        let mut tape = Tape::new();
        let bind = self.critic.params().bind(&mut tape);
        let critic = &self.critic;
        let fake_in = tape.constant(h_hat.clone());
        let real_in = tape.constant(h.clone());
        let fake = critic.forward(&mut tape, &bind, fake_in)?.score;
        let real = critic.forward(&mut tape, &bind, real_in)?.score;
        let (l_f, l_r) = losses::critic_loss(&mut tape, fake, real)?;
        let gp = losses::gradient_penalty(&mut tape, h, h_hat, self.config.weights.gp, rng, |t, x| {
            Ok(critic.forward(t, &bind, x)?.score)
        })?;
        let diff = tape.sub(l_f, l_r)?;
        let l_d = tape.add(diff, gp.penalty)?;
        tape.backward(l_d)?;
        let grads = bind.gradients(&tape);
        adam_step(self.critic.params_mut(), grads, &mut self.critic_opt)?;
        let v = |x| tape.value(x).item() as f64;
        Ok(CriticStep {
            l_f: v(l_f),
            l_r: v(l_r),
            l_gp: v(gp.penalty),
        })
    }

    /// Generator update; returns `(L_f, L_r)` under the frozen critic and the
    /// generator terms.
    fn generator_step(&mut self, h: &Tensor, r: &Tensor) -> Result<(f64, losses::GeneratorLoss)> {
        let anchor = self.anchor()?;
        let mut tape = Tape::new();
        let gbind = self.generator.params().bind(&mut tape);
        let cbind = self.critic.params().bind_frozen(&mut tape);
        let r = tape.constant(r.clone());
        let out = self.generator.forward(&mut tape, &gbind, r, anchor, Mode::Train)?;
        let fake = self.critic.forward(&mut tape, &cbind, out.h_hat)?.score;
        let h_var = tape.constant(h.clone());
        let real = self.critic.forward(&mut tape, &cbind, h_var)?.score;
        let l_r = tape.mean_all(real)?;
        let l_r = tape.value(l_r).item() as f64;
        let loss = losses::generator_loss(
            &mut tape,
            fake,
            out.h_hat,
            h_var,
            out.z,
            anchor,
            &self.config.weights,
            self.config.skewness_enabled,
        )?;
        tape.backward(loss.total)?;
        let grads = gbind.gradients(&tape);
        adam_step(self.generator.params_mut(), grads, &mut self.gen_opt)?;
        self.generator.apply_running_stats(&out.running);
        Ok((l_r, loss))
    }

    /// Generated features for the critic updates (train-mode statistics, no
    /// gradient to the generator).
    fn generate(&self, r: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.generator.params().bind_frozen(&mut tape);
        let r = tape.constant(r.clone());
        let out = self.generator.forward(&mut tape, &bind, r, self.anchor()?, Mode::Train)?;
        Ok(tape.value(out.h_hat).clone())
    }

    /// Runs one epoch over `data`.
    pub fn train_epoch(&mut self, data: &TrainingData) -> Result<EpochLog> {
        let epoch = self.epochs_done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed ^ EPOCH_STREAM, epoch as u64));
        let batches = pair_batches(data.len(), self.config.batch_size, &mut rng)?;
        let mut log = EpochLog {
            epoch,
            steps: Vec::with_capacity(batches.len()),
            critic_steps: Vec::with_capacity(batches.len() * self.config.critic_iters),
        };
        for idx in &batches {
            let step = self.steps_done + 1;
            let (h, r) = data.batch(idx)?;
            let h_hat = self.generate(&r).map_err(|e| self.diverged(step, e.to_string()))?;
            let mut last = None;
            for it in 0..self.config.critic_iters {
                let c = self
                    .critic_step(&h, &h_hat, &mut rng)
                    .map_err(|e| self.diverged(step, e.to_string()))?;
                if !(c.l_f.is_finite() && c.l_r.is_finite() && c.l_gp.is_finite()) {
                    return Err(self.diverged(step, "non-finite critic loss"));
                }
                log.critic_steps.push((step, it + 1, c));
                last = Some(c);
            }
            let (l_r, g) = self
                .generator_step(&h, &r)
                .map_err(|e| self.diverged(step, e.to_string()))?;
            let l_gp = last.map_or(0.0, |c| c.l_gp);
            let report = LossReport::new(g.l_f, l_r, l_gp, g.l_rec, g.l_kl, g.l_skew);
            if !report.is_finite() {
                return Err(self.diverged(step, "non-finite generator loss"));
            }
            log.steps.push((step, report));
            self.steps_done = step;
        }
        self.epochs_done = epoch;
        Ok(log)
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.bin")
}

/// Where a full run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn losses_csv(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn critic_csv(&self) -> PathBuf {
        self.dir.join("critic_losses.csv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(checkpoint_name(epoch))
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("train_summary.txt")
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Keeps only CSV rows whose epoch is at most `epoch`, so a resumed run
/// appends after the checkpoint it started from.
fn truncate_log(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
            if e.is_some_and(|e| e <= epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Full training run. With `outputs`, writes `losses.csv`,
/// `critic_losses.csv`, periodic checkpoints and a summary; a non-finite
/// loss aborts with the checkpoints written so far left in place.
pub fn train<F>(
    dataset: &Dataset,
    arch: &ArchConfig,
    config: &TrainConfig,
    outputs: Option<&RunOutputs>,
    resume: Option<&Path>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog),
{
    let started = Instant::now();
    let norm = dataset.norm()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, config)?,
        None => Trainer::new(arch, config, norm)?,
    };
    if trainer.generator.arch().dims() != dataset.dims() {
        return Err(Error::Config("model dimensions do not match the dataset".into()));
    }
    let data = TrainingData::new(dataset, trainer.norm());
    if config.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            data.len()
        )));
    }
    let mut loss_file = None;
    let mut critic_file = None;
    if let Some(out) = outputs {
        fs::create_dir_all(&out.dir)?;
        truncate_log(&out.losses_csv(), LOSS_CSV_HEADER, trainer.epochs_done())?;
        truncate_log(&out.critic_csv(), CRITIC_CSV_HEADER, trainer.epochs_done())?;
        loss_file = Some(fs::OpenOptions::new().append(true).open(out.losses_csv())?);
        critic_file = Some(fs::OpenOptions::new().append(true).open(out.critic_csv())?);
    }
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.epochs_done() < config.epochs {
        let log = trainer.train_epoch(&data)?;
        if let (Some(lf), Some(cf)) = (loss_file.as_mut(), critic_file.as_mut()) {
            let mut rows = String::new();
            for (step, r) in &log.steps {
                rows.push_str(&r.csv_row(log.epoch, *step));
                rows.push('\n');
            }
            lf.write_all(rows.as_bytes())?;
            let mut rows = String::new();
            for (step, it, c) in &log.critic_steps {
                rows.push_str(&format!(
                    "{},{step},{it},{},{},{},{}\n",
                    log.epoch,
                    c.l_f,
                    c.l_r,
                    c.l_gp,
                    c.l_d()
                ));
            }
            cf.write_all(rows.as_bytes())?;
        }
        let epoch = log.epoch;
        on_epoch(&log);
        epochs.push(log);
        if let Some(out) = outputs {
            let periodic = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
            if periodic || epoch == config.epochs {
                let p = out.checkpoint(epoch);
                trainer.save_checkpoint(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(out) = outputs {
        let mut s = String::new();
        s.push_str(&format!("epochs_run={}\n", epochs.len()));
        s.push_str(&format!("epochs_total={}\n", trainer.epochs_done()));
        if let Some(last) = epochs.last() {
            let m = last.mean();
            s.push_str(&format!(
                "final_L_f={}\nfinal_L_r={}\nfinal_L_gp={}\nfinal_L_D={}\nfinal_L_rec={}\nfinal_L_KL={}\nfinal_L_gamma={}\nfinal_L_G={}\n",
                m.l_f, m.l_r, m.l_gp, m.l_d, m.l_rec, m.l_kl, m.l_skew, m.l_g
            ));
        }
        s.push_str(&format!("wall_time_s={:.3}\n", started.elapsed().as_secs_f64()));
        fs::write(out.summary(), s)?;
    }
    Ok(TrainOutcome {
        trainer,
        epochs,
        checkpoints,
    })
}

/// Means of `values` over consecutive non-overlapping windows of `window`.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Fraction of consecutive window-mean pairs that do not increase.
pub fn non_increasing_fraction(means: &[f64]) -> f64 {
    if means.len() < 2 {
        return 1.0;
    }
    let ok = means.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (means.len() - 1) as f64
}
