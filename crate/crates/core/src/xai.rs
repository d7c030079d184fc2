//! Gradient-weighted activation maps of the critic (AM4C).
//!
//! For critic block `n` with outputs `A_k` (after normalization and
//! activation), the channel weights are `a_k = mean_ij ∂D/∂A_k(i,j)` and the
//! map is `ReLU(Σ_k a_k · A_k)`, upsampled bilinearly to the critic input
//! grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::airsim::{ComplexGrid, NormStats};
use crate::error::{Error, Result};
use crate::models::Critic;
use crate::tensor::{Tape, Tensor, Var};

/// Fraction of resource elements treated as "high magnitude".
pub const TOP_FRACTION: f64 = 0.2;

pub const ALIGNMENT_CSV_HEADER: &str = "sample,layer,score";

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    /// 1-based convolution block index.
    pub layer: usize,
    /// Per-channel weights `a_k`.
    pub weights: Vec<f32>,
    /// `Σ_k a_k · A_k` before rectification, at layer resolution.
    pub combination: Vec<f32>,
    /// Rectified map at layer resolution.
    pub map: Vec<f32>,
    pub map_hw: (usize, usize),
    /// Bilinear overlay at critic-input resolution.
    pub upsampled: Vec<f32>,
    pub input_hw: (usize, usize),
}

impl ActivationMap {
    /// Overlay scaled to [0, 1] by its maximum; an all-zero map stays zero.
    pub fn normalized(&self) -> Vec<f32> {
        let max = self.upsampled.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            self.upsampled.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; self.upsampled.len()]
        }
    }
}

/// Output of convolution block `layer` for a batch of feature tensors,
/// shape `[B, C_n, h_n, w_n]`.
pub fn capture_activations(critic: &Critic, features: &Tensor, layer: usize) -> Result<Tensor> {
    check_layer(critic, layer)?;
    let mut tape = Tape::new();
    let bind = critic.params().bind_frozen(&mut tape);
    let x = tape.constant(batched(critic, features)?);
    let out = critic.forward(&mut tape, &bind, x)?;
    Ok(tape.value(out.activations[layer - 1]).clone())
}

/// Activation map of one sample (`[2K_ant, K_sym, K_sc]` or a batch of one).
pub fn am4c(critic: &Critic, features: &Tensor, layer: usize) -> Result<ActivationMap> {
    check_layer(critic, layer)?;
    let x = batched(critic, features)?;
    if x.shape()[0] != 1 {
        return Err(Error::shape("am4c", format!("expected one sample, got {:?}", x.shape())));
    }
    let mut tape = Tape::new();
    let bind = critic.params().bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = critic.forward(&mut tape, &bind, xv)?;
    let score = tape.sum_all(out.score)?;
    am4c_on_tape(&mut tape, out.activations[layer - 1], score, layer, critic.arch().critic_input_hw())
}

/// Activation map of `activation` (`[1, K, h, w]`) with respect to the
/// scalar `score`, both recorded on `tape`.
pub fn am4c_on_tape(
    tape: &mut Tape,
    activation: Var,
    score: Var,
    layer: usize,
    input_hw: (usize, usize),
) -> Result<ActivationMap> {
    let shape = tape.shape(activation).to_vec();
    let [1, k, h, w] = shape[..] else {
        return Err(Error::shape("am4c", format!("activation must be [1, K, h, w], got {shape:?}")));
    };
    let plane = h * w;
    let grad = tape.grad(score, &[activation])?[0];
    let weights: Vec<f32> = match grad {
        Some(g) => tape
            .value(g)
            .data()
            .chunks_exact(plane)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect(),
        None => vec![0.0; k],
    };
    let acts = tape.value(activation).data();
    let mut combination = vec![0.0f64; plane];
    for (a_k, fmap) in weights.iter().zip(acts.chunks_exact(plane)) {
        for (c, &v) in combination.iter_mut().zip(fmap) {
            *c += *a_k as f64 * v as f64;
        }
    }
    let combination: Vec<f32> = combination.into_iter().map(|v| v as f32).collect();
    let map: Vec<f32> = combination.iter().map(|&v| v.max(0.0)).collect();
    let upsampled = upsample_bilinear(&map, (h, w), input_hw);
    Ok(ActivationMap {
        layer,
        weights,
        combination,
        map,
        map_hw: (h, w),
        upsampled,
        input_hw,
    })
}

/// Half-pixel-centred bilinear resampling with edge clamping. Every output is
/// a convex combination of inputs, so nonnegativity is preserved.
pub fn upsample_bilinear(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let coord = |o: usize, n: usize, on: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..ow).map(|x| coord(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// `|H|` in critic-input layout: row `c·K_sym + s` holds the magnitude of
/// `H[c mod K_ant, s, :]`, so real and imaginary rows of one RE share it.
pub fn magnitude_layout(h: &ComplexGrid) -> Vec<f32> {
    let d = h.dims();
    let mut out = Vec::with_capacity(2 * d.len());
    for _part in 0..2 {
        for n in 0..d.antennas {
            for s in 0..d.symbols {
                out.extend((0..d.subcarriers).map(|k| h.get(n, s, k).norm()));
            }
        }
    }
    out
}

/// Mean overlay value on the top-20% `|H|` entries divided by the mean
/// elsewhere. Ties in `|H|` are broken by position. A map that is zero
/// everywhere scores 1; zero outside but positive inside scores infinity.
pub fn alignment_score(map: &ActivationMap, h: &ComplexGrid) -> Result<f64> {
    let mag = magnitude_layout(h);
    if mag.len() != map.upsampled.len() {
        return Err(Error::shape(
            "alignment_score",
            format!("|H| has {} entries, map has {}", mag.len(), map.upsampled.len()),
        ));
    }
    alignment_ratio(&map.upsampled, &mag)
}

pub(crate) fn alignment_ratio(values: &[f32], magnitude: &[f32]) -> Result<f64> {
    let n = values.len();
    let top = ((n as f64 * TOP_FRACTION).ceil() as usize).min(n);
    if top == 0 || top == n {
        return Err(Error::Degenerate(format!("cannot split {n} entries into top/rest")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| magnitude[b].total_cmp(&magnitude[a]).then(a.cmp(&b)));
    let mean = |idx: &[usize]| idx.iter().map(|&i| values[i] as f64).sum::<f64>() / idx.len() as f64;
    let inside = mean(&order[..top]);
    let outside = mean(&order[top..]);
    Ok(if outside > 0.0 {
        inside / outside
    } else if inside > 0.0 {
        f64::INFINITY
    } else {
        1.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRow {
    pub sample: usize,
    pub layer: usize,
    pub score: f64,
}

/// Maps for `layers` of every sample on up to `threads` workers. Result
/// order is sample-major, then layer, regardless of `threads`.
pub fn explain_samples(
    critic: &Critic,
    norm: &NormStats,
    channels: &[&ComplexGrid],
    layers: &[usize],
    threads: usize,
) -> Result<Vec<(usize, ActivationMap, f64)>> {
    for &l in layers {
        check_layer(critic, l)?;
    }
    let per_sample = crate::par::map(channels, threads, |i, h| {
        let x = norm.to_features(h);
        layers
            .iter()
            .map(|&l| {
                let m = am4c(critic, &x, l)?;
                let score = alignment_score(&m, h)?;
                Ok((i, m, score))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Blue-to-red palette: entry `i` is `(i, 0, 255 - i)`.
pub fn colormap(i: u8) -> [u8; 3] {
    [i, 0, 255 - i]
}

/// Writes the overlay (critic-input resolution, raw values) as a CSV grid.
pub fn write_map_csv(path: impl AsRef<Path>, map: &ActivationMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for row in map.upsampled.chunks_exact(map.input_hw.1) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Binary P6 rendering of the max-normalized overlay.
pub fn ppm_bytes(map: &ActivationMap) -> Vec<u8> {
    let (h, w) = map.input_hw;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in map.normalized() {
        out.extend(colormap((v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn write_map_ppm(path: impl AsRef<Path>, map: &ActivationMap) -> Result<()> {
    std::fs::write(path, ppm_bytes(map))?;
    Ok(())
}

/// File stem `am4c_<epoch>_<sample>_<layer>`.
pub fn map_stem(epoch: usize, sample: usize, layer: usize) -> String {
    format!("am4c_{epoch}_{sample}_{layer}")
}

/// Writes `am4c_<epoch>_<sample>_<layer>.csv` and `.ppm` for every map into
/// `dir` and returns the alignment rows.
pub fn write_maps(
    dir: impl AsRef<Path>,
    epoch: usize,
    results: &[(usize, ActivationMap, f64)],
) -> Result<Vec<AlignmentRow>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(results.len());
    for (sample, m, score) in results {
        let stem = map_stem(epoch, *sample, m.layer);
        write_map_csv(dir.join(format!("{stem}.csv")), m)?;
        write_map_ppm(dir.join(format!("{stem}.ppm")), m)?;
        rows.push(AlignmentRow {
            sample: *sample,
            layer: m.layer,
            score: *score,
        });
    }
    Ok(rows)
}

pub fn alignment_csv(rows: &[AlignmentRow]) -> String {
    let mut s = format!("{ALIGNMENT_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.sample, r.layer, r.score));
    }
    s
}

/// Alignment rows of several checkpoints, with a leading `epoch` column.
pub fn alignment_series_csv(series: &[(usize, Vec<AlignmentRow>)]) -> String {
    let mut s = format!("epoch,{ALIGNMENT_CSV_HEADER}\n");
    for (epoch, rows) in series {
        for r in rows {
            s.push_str(&format!("{epoch},{},{},{}\n", r.sample, r.layer, r.score));
        }
    }
    s
}

/// [`write_maps`] plus `alignment.csv`.
pub fn write_explanations(
    dir: impl AsRef<Path>,
    epoch: usize,
    results: &[(usize, ActivationMap, f64)],
) -> Result<Vec<AlignmentRow>> {
    let rows = write_maps(&dir, epoch, results)?;
    std::fs::write(dir.as_ref().join("alignment.csv"), alignment_csv(&rows))?;
    Ok(rows)
}

/// Median score per layer, in ascending layer order.
pub fn median_by_layer(rows: &[AlignmentRow]) -> Vec<(usize, f64)> {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .filter_map(|l| {
            let v: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.score).collect();
            median(&v).map(|m| (l, m))
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn check_layer(critic: &Critic, layer: usize) -> Result<()> {
    if layer == 0 || layer > critic.num_layers() {
        return Err(Error::Config(format!(
            "critic layer {layer} outside 1..={}",
            critic.num_layers()
        )));
    }
    Ok(())
}

fn batched(critic: &Critic, features: &Tensor) -> Result<Tensor> {
    let fs = critic.arch().feature_shape();
    match features.shape() {
        s if s == fs => features.clone().reshaped(&[1, fs[0], fs[1], fs[2]]),
        [_, a, b, c] if [*a, *b, *c] == fs => Ok(features.clone()),
        s => Err(Error::shape("am4c", format!("expected features {fs:?}, got {s:?}"))),
    }
}
