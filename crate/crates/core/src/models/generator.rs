use rand::Rng;

use super::{fan_in_uniform, ArchConfig, LatentAnchor, Mode, KERNEL};
use crate::error::{Error, Result};
use crate::tensor::nn;
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct BatchNormIdx {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    weight: usize,
    stride: (usize, usize),
    bn: BatchNormIdx,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    weight: usize,
    stride: (usize, usize),
    out_hw: (usize, usize),
    /// Hidden blocks are normalized; the head has a bias and `tanh`.
    bn: Option<BatchNormIdx>,
    bias: Option<usize>,
}

/// Batch statistics observed in a training-mode forward pass, to be folded
/// into the running estimates once the step is accepted.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    mean_idx: usize,
    var_idx: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

pub struct GeneratorOutput {
    /// `[B, 2·K_ant, K_sym, K_sc]`, strictly inside `(-1, 1)`.
    pub h_hat: Var,
    /// `[B, z_dim]`
    pub z: Var,
    /// `[B, z_dim]`
    pub a_enc: Var,
    pub running: Vec<RunningStatUpdate>,
}

/// Plain values of one eval-mode pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[B, z_dim]`
    pub a_enc: Tensor,
    /// `[B, z_dim]`
    pub z: Tensor,
    /// `[B, 2·K_ant, K_sym, K_sc]`
    pub h_hat: Tensor,
}

/// Encoder, anchored latent and decoder.
#[derive(Clone, Debug)]
pub struct Generator {
    arch: ArchConfig,
    params: ParamSet,
    encoder: Vec<EncoderBlock>,
    enc_fc: (usize, usize),
    dec_fc: (usize, usize),
    decoder: Vec<DecoderBlock>,
    /// Shape `[C, h, w]` the decoder's linear layer is reshaped to.
    bottleneck: [usize; 3],
}

fn add_bn(params: &mut ParamSet, prefix: &str, c: usize) -> BatchNormIdx {
    BatchNormIdx {
        gamma: params.add(format!("{prefix}.bn.gamma"), Tensor::full(&[c], 1.0), true),
        beta: params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]), true),
        running_mean: params.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c]), false),
        running_var: params.add(format!("{prefix}.bn.running_var"), Tensor::full(&[c], 1.0), false),
    }
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let geometry = arch.encoder_geometry();
        let widths = &arch.encoder_widths;
        let in_ch = 2 * arch.antennas;
        let k2 = KERNEL * KERNEL;
        let mut params = ParamSet::new();

        let mut encoder = Vec::with_capacity(widths.len());
        let mut c_in = in_ch;
        for (i, (&c_out, &(stride, _))) in widths.iter().zip(&geometry).enumerate() {
            let weight = params.add(
                format!("enc.{i}.conv.w"),
                fan_in_uniform(&[c_out, c_in, KERNEL, KERNEL], c_in * k2, rng),
                true,
            );
            let bn = add_bn(&mut params, &format!("enc.{i}"), c_out);
            encoder.push(EncoderBlock { weight, stride, bn });
            c_in = c_out;
        }
        let (bh, bw) = geometry.last().expect("non-empty widths").1;
        let bottleneck = [c_in, bh, bw];
        let flat = c_in * bh * bw;
        let enc_fc = (
            params.add("enc.fc.w", fan_in_uniform(&[flat, arch.z_dim], flat, rng), true),
            params.add("enc.fc.b", Tensor::zeros(&[arch.z_dim]), true),
        );
        let dec_fc = (
            params.add("dec.fc.w", fan_in_uniform(&[arch.z_dim, flat], arch.z_dim, rng), true),
            params.add("dec.fc.b", Tensor::zeros(&[flat]), true),
        );

        let mut decoder = Vec::with_capacity(widths.len());
        for i in (0..widths.len()).rev() {
            let c_from = widths[i];
            let (c_to, out_hw) = if i == 0 {
                (in_ch, (arch.symbols, arch.subcarriers))
            } else {
                (widths[i - 1], geometry[i - 1].1)
            };
            let stride = geometry[i].0;
            let weight = params.add(
                format!("dec.{i}.convt.w"),
                fan_in_uniform(&[c_from, c_to, KERNEL, KERNEL], c_from * k2, rng),
                true,
            );
            let (bn, bias) = if i == 0 {
                (None, Some(params.add("dec.0.convt.b", Tensor::zeros(&[c_to]), true)))
            } else {
                (Some(add_bn(&mut params, &format!("dec.{i}"), c_to)), None)
            };
            decoder.push(DecoderBlock {
                weight,
                stride,
                out_hw,
                bn,
                bias,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            encoder,
            enc_fc,
            dec_fc,
            decoder,
            bottleneck,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        x: Var,
        idx: &BatchNormIdx,
        mode: Mode,
        running: &mut Vec<RunningStatUpdate>,
    ) -> Result<Var> {
        let (gamma, beta) = (bind.var(idx.gamma), bind.var(idx.beta));
        match mode {
            Mode::Train => {
                let (y, mean, var) = nn::batch_norm_train(tape, x, gamma, beta)?;
                running.push(RunningStatUpdate {
                    mean_idx: idx.running_mean,
                    var_idx: idx.running_var,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => nn::batch_norm_eval(
                tape,
                x,
                gamma,
                beta,
                self.params.value(idx.running_mean),
                self.params.value(idx.running_var),
            ),
        }
    }

    fn check_input(&self, tape: &Tape, r: Var) -> Result<usize> {
        let [c, h, w] = self.arch.feature_shape();
        match *tape.shape(r) {
            [b, c2, h2, w2] if (c2, h2, w2) == (c, h, w) && b > 0 => Ok(b),
            ref s => Err(Error::shape(
                "generator",
                format!("expected [B, {c}, {h}, {w}], got {s:?}"),
            )),
        }
    }

    /// `R` features `[B, 2·K_ant, K_sym, K_sc]` to `a_enc: [B, z_dim]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        r: Var,
        mode: Mode,
        running: &mut Vec<RunningStatUpdate>,
    ) -> Result<Var> {
        let b = self.check_input(tape, r)?;
        let slope = self.arch.leaky_slope;
        let mut x = r;
        for block in &self.encoder {
            x = tape.conv2d(x, bind.var(block.weight), block.stride, (1, 1))?;
            x = self.batch_norm(tape, bind, x, &block.bn, mode, running)?;
            x = tape.leaky_relu(x, slope)?;
        }
        let flat: usize = self.bottleneck.iter().product();
        let x = tape.reshape(x, &[b, flat])?;
        nn::linear(tape, x, bind.var(self.enc_fc.0), bind.var(self.enc_fc.1))
    }

    /// `z = μ_H + a_enc·σ_H`
    pub fn reparameterize(tape: &mut Tape, a_enc: Var, anchor: LatentAnchor) -> Result<Var> {
        let scaled = tape.scale(a_enc, anchor.sigma_h)?;
        tape.add_scalar(scaled, anchor.mu_h)
    }

    /// `z: [B, z_dim]` to channel features through the `tanh` head.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        z: Var,
        mode: Mode,
        running: &mut Vec<RunningStatUpdate>,
    ) -> Result<Var> {
        let b = match *tape.shape(z) {
            [b, d] if d == self.arch.z_dim => b,
            ref s => {
                return Err(Error::shape(
                    "decoder",
                    format!("expected [B, {}], got {s:?}", self.arch.z_dim),
                ))
            }
        };
        let slope = self.arch.leaky_slope;
        let x = nn::linear(tape, z, bind.var(self.dec_fc.0), bind.var(self.dec_fc.1))?;
        let x = tape.leaky_relu(x, slope)?;
        let [c, h, w] = self.bottleneck;
        let mut x = tape.reshape(x, &[b, c, h, w])?;
        for block in &self.decoder {
            x = tape.conv_transpose2d(x, bind.var(block.weight), block.stride, (1, 1), block.out_hw)?;
            if let Some(bn) = &block.bn {
                x = self.batch_norm(tape, bind, x, bn, mode, running)?;
                x = tape.leaky_relu(x, slope)?;
            }
            if let Some(bias) = block.bias {
                x = nn::add_channel_bias(tape, x, bind.var(bias))?;
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Full pass: encode, anchor, decode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        r: Var,
        anchor: LatentAnchor,
        mode: Mode,
    ) -> Result<GeneratorOutput> {
        let mut running = Vec::new();
        let a_enc = self.encode(tape, bind, r, mode, &mut running)?;
        let z = Self::reparameterize(tape, a_enc, anchor)?;
        let h_hat = self.decode(tape, bind, z, mode, &mut running)?;
        Ok(GeneratorOutput {
            h_hat,
            z,
            a_enc,
            running,
        })
    }

    /// Eval-mode pass for a batch of feature tensors, off any caller tape.
    pub fn infer(&self, r: &Tensor, anchor: LatentAnchor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let r = tape.constant(r.clone());
        let out = self.forward(&mut tape, &bind, r, anchor, Mode::Eval)?;
        Ok(Inference {
            a_enc: tape.value(out.a_enc).clone(),
            z: tape.value(out.z).clone(),
            h_hat: tape.value(out.h_hat).clone(),
        })
    }

    /// Eval-mode channel estimate `Ĥ` for a batch of feature tensors.
    pub fn estimate(&self, r: &Tensor, anchor: LatentAnchor) -> Result<Tensor> {
        Ok(self.infer(r, anchor)?.h_hat)
    }

    /// Folds batch statistics into the running estimates:
    /// `running ← (1 - m)·running + m·batch`.
    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate]) {
        let m = self.arch.bn_momentum;
        for u in updates {
            for (idx, batch) in [(u.mean_idx, &u.mean), (u.var_idx, &u.var)] {
                let run = self.params.value_mut(idx);
                for (r, &v) in run.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch() -> ArchConfig {
        ArchConfig {
            encoder_widths: vec![4, 6, 8, 8],
            z_dim: 6,
            critic_widths: vec![4, 4, 4],
            ..ArchConfig::default()
        }
    }

    fn random_input(b: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = b * 8 * 8 * 32;
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f32>>();
        Tensor::new(vec![b, 8, 8, 32], data).unwrap()
    }

    #[test]
    fn output_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small_arch(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = g.params().bind(&mut tape);
        let mut input = random_input(3, &mut rng);
        input.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        let r = tape.constant(input);
        let out = g.forward(&mut tape, &bind, r, LatentAnchor::new(0.1, 0.4).unwrap(), Mode::Train).unwrap();
        assert_eq!(tape.shape(out.h_hat), &[3, 8, 8, 32]);
        assert_eq!(tape.shape(out.z), &[3, 6]);
        assert!(tape.value(out.h_hat).data().iter().all(|v| v.abs() < 1.0));
        // One update per batch-norm layer: 4 encoder + 3 hidden decoder blocks.
        assert_eq!(out.running.len(), 7);
        let a = tape.value(out.a_enc).data().to_vec();
        let z = tape.value(out.z).data().to_vec();
        for (a, z) in a.iter().zip(&z) {
            assert!(((z - 0.1) - 0.4 * a).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_latent_maps_to_anchor_mean() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 5]));
        let z = Generator::reparameterize(&mut tape, a, LatentAnchor::new(0.3, 0.2).unwrap()).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small_arch(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = g.params().bind(&mut tape);
        let r = tape.constant(Tensor::zeros(&[1, 8, 8, 16]));
        assert!(g.forward(&mut tape, &bind, r, LatentAnchor::standard(), Mode::Eval).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Generator::new(&small_arch(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = g.params().bind_frozen(&mut tape);
        let r = tape.constant(random_input(4, &mut rng));
        let out = g.forward(&mut tape, &bind, r, LatentAnchor::standard(), Mode::Train).unwrap();
        let idx = g.params().index_of("enc.0.bn.running_mean").unwrap();
        let before = g.params().value(idx).clone();
        g.apply_running_stats(&out.running);
        let after = g.params().value(idx);
        for ((b, a), m) in before.data().iter().zip(after.data()).zip(out.running[0].mean.data()) {
            assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-6);
        }
    }
}
