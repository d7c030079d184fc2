use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every entry of one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected adaptive-moment update. `grads` holds one slot per
/// parameter and is consumed; missing gradients count as zero. Nothing is
/// modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: Vec<Option<Tensor>>,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (idx, g) in grads.iter().enumerate() {
        let p = params.param(idx);
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of `{}` has shape {:?}", p.name, g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - (beta1 as f64).powi(t);
    let c2 = 1.0 - (beta2 as f64).powi(t);
    let step_size = (lr as f64 / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;

    for (idx, g) in grads.into_iter().enumerate() {
        if !params.param(idx).trainable {
            continue;
        }
        let m = state.first[idx].data_mut();
        let v = state.second[idx].data_mut();
        let w = params.value_mut(idx).data_mut();
        match g {
            Some(g) => {
                for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(g.data()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                }
            }
            None => {
                for ((w, m), v) in w.iter_mut().zip(m).zip(v) {
                    *m *= beta1;
                    *v *= beta2;
                    *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("x", Tensor::new(vec![1], vec![value]).unwrap(), true);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam_step(&mut p, vec![Some(Tensor::zeros(&[1]))], &mut st).unwrap();
        }
        assert_eq!(p.value(0).item(), 0.3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2 after one step, so |dx| = lr * |g| / (|g| + eps).
        for g in [0.5f32, -3.0, 1e-2] {
            let mut p = single(0.0);
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            let mut st = OptimizerState::new(cfg, &p);
            adam_step(&mut p, vec![Some(Tensor::new(vec![1], vec![g]).unwrap())], &mut st).unwrap();
            let dx = p.value(0).item();
            assert!((dx.abs() - 0.01).abs() < 1e-6, "g={g} dx={dx}");
            assert_eq!(dx.signum(), -g.signum());
        }
    }

    #[test]
    fn descends_quadratic_bowl() {
        let mut p = single(1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        for _ in 0..500 {
            let x = p.value(0).item();
            adam_step(&mut p, vec![Some(Tensor::new(vec![1], vec![2.0 * x]).unwrap())], &mut st).unwrap();
        }
        assert!(p.value(0).item().abs() < 1e-2, "x = {}", p.value(0).item());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, vec![Some(Tensor::new(vec![1], vec![f32::NAN]).unwrap())], &mut st)
            .unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(p.value(0).item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
