use chanest_core::airsim::{build_pilot_pattern, generate_dataset, Dataset, PilotConfig, SnrSpec, TopologyConfig};
use chanest_core::losses::{LossReport, LOSS_CSV_HEADER};
use chanest_core::models::{ArchConfig, Critic, Generator};
use chanest_core::training::{non_increasing_fraction, train, window_means, RunOutputs, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, snr: SnrSpec, seed: u64) -> Dataset {
    let t = TopologyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = build_pilot_pattern(&PilotConfig::default(), t.num_subcarriers, t.num_symbols, &mut rng).unwrap();
    let mut d = generate_dataset(&t, &p, n, snr, seed).unwrap();
    d.fit_norm().unwrap();
    d
}

fn narrow(divisor: usize) -> ArchConfig {
    let base = ArchConfig::default();
    ArchConfig {
        encoder_widths: base.encoder_widths.iter().map(|w| w / divisor).collect(),
        critic_widths: base.critic_widths.iter().map(|w| w / divisor).collect(),
        ..base
    }
}

/// Trainable parameters counted layer by layer from the architecture.
fn expected_counts(arch: &ArchConfig) -> (usize, usize) {
    let k2 = 9;
    let in_ch = 2 * arch.antennas;
    let w = &arch.encoder_widths;
    let (mut h, mut s) = (arch.symbols, arch.subcarriers);
    for i in 0..w.len() {
        if i >= 2 && h % 2 == 0 {
            h /= 2;
        }
        if s % 2 == 0 {
            s /= 2;
        }
    }
    let flat = w.last().unwrap() * h * s;
    let mut chans = vec![in_ch];
    chans.extend(w);
    let convs: usize = chans.windows(2).map(|c| c[0] * c[1] * k2).sum();
    let enc_bn: usize = w.iter().map(|c| 2 * c).sum();
    let dec_bn: usize = w[..w.len() - 1].iter().map(|c| 2 * c).sum();
    let fcs = flat * arch.z_dim + arch.z_dim + arch.z_dim * flat + flat;
    let generator = 2 * convs + enc_bn + dec_bn + fcs + in_ch;

    let mut c_in = 1;
    let mut critic = 0;
    for &c in &arch.critic_widths {
        critic += c * c_in * k2 + 2 * c;
        c_in = c;
    }
    critic += c_in + 1;
    (generator, critic)
}

#[test]
fn parameter_counts_match_the_documented_table() {
    // (width divisor, generator, critic)
    let table = [(1, 1_043_464, 93_025), (2, 328_264, 23_473), (4, 115_816, 5_977)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (divisor, generator, critic) in table {
        let arch = narrow(divisor);
        let g = Generator::new(&arch, &mut rng).unwrap();
        let c = Critic::new(&arch, &mut rng).unwrap();
        assert_eq!(expected_counts(&arch), (generator, critic), "formula, divisor {divisor}");
        assert_eq!(g.params().trainable_count(), generator, "generator, divisor {divisor}");
        assert_eq!(c.params().trainable_count(), critic, "critic, divisor {divisor}");
    }
}

#[test]
fn smoke_run_halves_the_reconstruction_loss() {
    let data = dataset(512, SnrSpec::Fixed(10.0), 3);
    let arch = narrow(4);
    let mut config = TrainConfig {
        epochs: 50,
        batch_size: 16,
        critic_iters: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    config.adam.lr = 1e-3;
    config.weights.rec = 100.0;
    let outcome = train(&data, &arch, &config, None, None, |_| {}).unwrap();
    let means: Vec<LossReport> = outcome.epochs.iter().map(|e| e.mean()).collect();
    let rec: Vec<f64> = means.iter().map(|m| m.l_rec).collect();
    let skew: Vec<f64> = means.iter().map(|m| m.l_skew).collect();
    let ratio = rec[49] / rec[0];
    println!("L_rec epoch 1 {:.4}, epoch 50 {:.4}, ratio {ratio:.3}", rec[0], rec[49]);
    assert!(ratio <= 0.5, "L_rec ratio {ratio}");
    let (fr, fs) = (
        non_increasing_fraction(&window_means(&rec, 10)),
        non_increasing_fraction(&window_means(&skew, 10)),
    );
    println!("non-increasing windows: L_rec {fr:.2}, L_gamma {fs:.2}");
    assert!(fr >= 0.8 && fs >= 0.8);
}

fn small_config(epochs: usize) -> (ArchConfig, TrainConfig) {
    let arch = ArchConfig {
        encoder_widths: vec![4, 4, 8, 8],
        z_dim: 8,
        critic_widths: vec![4, 4, 8],
        ..ArchConfig::default()
    };
    let config = TrainConfig {
        epochs,
        batch_size: 4,
        critic_iters: 3,
        checkpoint_every: 1,
        seed: 17,
        ..TrainConfig::default()
    };
    (arch, config)
}

#[test]
fn logs_satisfy_the_loss_identities_and_critic_cadence() {
    let tmp = tempfile::tempdir().unwrap();
    let out = RunOutputs { dir: tmp.path().to_path_buf() };
    let data = dataset(12, SnrSpec::Uniform { min: -10.0, max: 20.0 }, 1);
    let (arch, config) = small_config(2);
    train(&data, &arch, &config, Some(&out), None, |_| {}).unwrap();

    let losses = std::fs::read_to_string(out.losses_csv()).unwrap();
    let mut lines = losses.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    let rows: Vec<_> = lines.map(|l| LossReport::parse_csv_row(l).unwrap()).collect();
    assert_eq!(rows.len(), 2 * 3);
    for (_, _, r) in &rows {
        assert!((r.l_d - (r.l_f - r.l_r + r.l_gp)).abs() <= 1e-5);
        assert!((r.l_g - (-r.l_f + r.l_rec + r.l_kl + r.l_skew)).abs() <= 1e-5);
        assert!(r.l_gp >= 0.0 && r.l_rec >= 0.0 && r.l_kl >= 0.0 && r.l_skew >= 0.0);
    }

    let critic = std::fs::read_to_string(out.critic_csv()).unwrap();
    let critic_rows: Vec<Vec<usize>> = critic
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(critic_rows.len(), rows.len() * config.critic_iters);
    for (_, step, _) in &rows {
        let iters: Vec<usize> = critic_rows.iter().filter(|r| r[1] == *step).map(|r| r[2]).collect();
        assert_eq!(iters.len(), config.critic_iters, "step {step}");
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = dataset(12, SnrSpec::Uniform { min: -10.0, max: 20.0 }, 2);
    let (arch, config) = small_config(3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = RunOutputs { dir: a.path().to_path_buf() };
    let split = RunOutputs { dir: b.path().to_path_buf() };
    train(&data, &arch, &config, Some(&full), None, |_| {}).unwrap();

    let first = TrainConfig { epochs: 1, ..config.clone() };
    train(&data, &arch, &first, Some(&split), None, |_| {}).unwrap();
    train(&data, &arch, &config, Some(&split), Some(&split.checkpoint(1)), |_| {}).unwrap();

    for (x, y) in [
        (full.losses_csv(), split.losses_csv()),
        (full.critic_csv(), split.critic_csv()),
        (full.checkpoint(3), split.checkpoint(3)),
    ] {
        assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap(), "{}", x.display());
    }
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let data = dataset(12, SnrSpec::Uniform { min: -10.0, max: 20.0 }, 4);
    let (arch, config) = small_config(2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<RunOutputs> = dirs.iter().map(|d| RunOutputs { dir: d.path().to_path_buf() }).collect();
    for o in &outs {
        train(&data, &arch, &config, Some(o), None, |_| {}).unwrap();
    }
    for f in [outs[0].losses_csv(), outs[0].critic_csv(), outs[0].checkpoint(2)] {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(outs[1].dir.join(name)).unwrap());
    }
    let other = TrainConfig { seed: 18, ..config };
    let c = tempfile::tempdir().unwrap();
    let oc = RunOutputs { dir: c.path().to_path_buf() };
    train(&data, &arch, &other, Some(&oc), None, |_| {}).unwrap();
    assert_ne!(std::fs::read(oc.losses_csv()).unwrap(), std::fs::read(outs[0].losses_csv()).unwrap());
}
