use rand::Rng;

use super::{fan_in_uniform, ArchConfig, KERNEL};
use crate::error::{Error, Result};
use crate::tensor::nn;
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct CriticBlock {
    weight: usize,
    gamma: usize,
    beta: usize,
    stride: (usize, usize),
}

pub struct CriticOutput {
    /// `[B]`, one unbounded score per sample.
    pub score: Var,
    /// Output of every block after normalization and activation,
    /// `[B, C_n, h_n, w_n]`. The raw convolution output is not exposed: the
    /// score is invariant to per-channel shifts of it, so its gradient has
    /// zero spatial mean.
    pub activations: Vec<Var>,
}

/// Convolution blocks with instance normalization, global average pooling
/// and a linear head. Instance norm keeps every score a function of its own
/// sample, which the per-sample gradient penalty relies on.
#[derive(Clone, Debug)]
pub struct Critic {
    arch: ArchConfig,
    params: ParamSet,
    blocks: Vec<CriticBlock>,
    head: (usize, usize),
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, (&c_out, &(stride, _))) in arch.critic_widths.iter().zip(&arch.critic_geometry()).enumerate() {
            blocks.push(CriticBlock {
                weight: params.add(
                    format!("critic.{i}.conv.w"),
                    fan_in_uniform(&[c_out, c_in, KERNEL, KERNEL], c_in * KERNEL * KERNEL, rng),
                    true,
                ),
                gamma: params.add(format!("critic.{i}.in.gamma"), Tensor::full(&[c_out], 1.0), true),
                beta: params.add(format!("critic.{i}.in.beta"), Tensor::zeros(&[c_out]), true),
                stride,
            });
            c_in = c_out;
        }
        let head = (
            params.add("critic.head.w", fan_in_uniform(&[c_in, 1], c_in, rng), true),
            params.add("critic.head.b", Tensor::zeros(&[1]), true),
        );
        Ok(Self {
            arch: arch.clone(),
            params,
            blocks,
            head,
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

    /// Scores channel features `[B, 2·K_ant, K_sym, K_sc]`; each sample is
    /// viewed as one `(2·K_ant·K_sym) × K_sc` map.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<CriticOutput> {
        let [c, h, w] = self.arch.feature_shape();
        let b = match *tape.shape(x) {
            [b, c2, h2, w2] if (c2, h2, w2) == (c, h, w) && b > 0 => b,
            ref s => {
                return Err(Error::shape(
                    "critic",
                    format!("expected [B, {c}, {h}, {w}], got {s:?}"),
                ))
            }
        };
        let (mh, mw) = self.arch.critic_input_hw();
        let mut x = tape.reshape(x, &[b, 1, mh, mw])?;
        let mut activations = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = tape.conv2d(x, bind.var(block.weight), block.stride, (1, 1))?;
            x = self.block_tail(tape, bind, block, x)?;
            activations.push(x);
        }
        let score = self.head(tape, bind, x, b)?;
        Ok(CriticOutput { score, activations })
    }

    fn block_tail(&self, tape: &mut Tape, bind: &Bindings, block: &CriticBlock, x: Var) -> Result<Var> {
        let x = nn::instance_norm(tape, x, bind.var(block.gamma), bind.var(block.beta))?;
        tape.leaky_relu(x, self.arch.leaky_slope)
    }

    fn head(&self, tape: &mut Tape, bind: &Bindings, x: Var, b: usize) -> Result<Var> {
        let pooled = nn::global_avg_pool(tape, x)?;
        let s = nn::linear(tape, pooled, bind.var(self.head.0), bind.var(self.head.1))?;
        tape.reshape(s, &[b])
    }

    /// Scores from the output of block `layer` (1-based), running only the
    /// remainder of the network.
    pub fn score_from_activation(&self, layer: usize, activation: &Tensor) -> Result<Vec<f32>> {
        if layer == 0 || layer > self.blocks.len() {
            return Err(Error::Config(format!(
                "critic layer {layer} outside 1..={}",
                self.blocks.len()
            )));
        }
        let b = activation.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let mut x = tape.constant(activation.clone());
        for block in &self.blocks[layer..] {
            x = tape.conv2d(x, bind.var(block.weight), block.stride, (1, 1))?;
            x = self.block_tail(&mut tape, &bind, block, x)?;
        }
        let s = self.head(&mut tape, &bind, x, b)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Scores off any caller tape.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let x = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bind, x)?;
        Ok(tape.value(out.score).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn input(rng: &mut ChaCha8Rng) -> Tensor {
        let d: Vec<f32> = (0..2 * 8 * 8 * 32).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(vec![2, 8, 8, 32], d).unwrap()
    }

    #[test]
    fn activation_shapes_follow_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Critic::new(&ArchConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = c.params().bind(&mut tape);
        let x = tape.constant(input(&mut rng));
        let out = c.forward(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.shape(out.score), &[2]);
        let shapes: Vec<Vec<usize>> = out.activations.iter().map(|&a| tape.shape(a).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 32, 32, 16], vec![2, 64, 16, 8], vec![2, 128, 8, 4]]);
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Critic::new(&ArchConfig::default(), &mut rng).unwrap();
        let idx = c.params().index_of("critic.head.w").unwrap();
        c.params_mut().value_mut(idx).data_mut().fill(0.0);
        assert_eq!(c.score(&input(&mut rng)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn resuming_from_an_activation_reproduces_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Critic::new(&ArchConfig::default(), &mut rng).unwrap();
        let x = input(&mut rng);
        let mut tape = Tape::new();
        let bind = c.params().bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = c.forward(&mut tape, &bind, xv).unwrap();
        let full = tape.value(out.score).data().to_vec();
        for layer in 1..=3 {
            let act = tape.value(out.activations[layer - 1]);
            let resumed = c.score_from_activation(layer, act).unwrap();
            for (a, b) in resumed.iter().zip(&full) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert!(c.score_from_activation(4, tape.value(out.activations[2])).is_err());
    }

    #[test]
    fn scores_are_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Critic::new(&ArchConfig::default(), &mut rng).unwrap();
        let x = input(&mut rng);
        let both = c.score(&x).unwrap();
        let parts = x.unstack();
        for (i, p) in parts.iter().enumerate() {
            let single = c.score(&Tensor::stack(std::slice::from_ref(p)).unwrap()).unwrap();
            assert!((single[0] - both[i]).abs() < 1e-5);
        }
    }
}
