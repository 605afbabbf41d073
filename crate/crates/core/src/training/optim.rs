use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::params::{Component, VLMParams};
use crate::tensor::all_finite;

/// AdamW hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update of `theta` in place; `step` counts from 1.
    pub fn update(&self, theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            theta[i] -= lr * self.weight_decay * theta[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers for trainable parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(params: &VLMParams, trainable: impl Fn(Component) -> bool) -> Self {
        let moments = params
            .params()
            .iter()
            .map(|p| {
                trainable(p.component).then(|| Moments {
                    m: vec![0.0; p.tensor.numel()],
                    v: vec![0.0; p.tensor.numel()],
                })
            })
            .collect();
        OptimizerState { step: 0, moments }
    }

    /// Number of parameters carrying optimizer state.
    pub fn tracked(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }
}

/// `min + ½(peak − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, min_lr: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Schedule { step, total });
    }
    Ok(min_lr + 0.5 * (peak - min_lr) * (1.0 + (PI * step as f64 / total as f64).cos()))
}

/// Scales every present gradient so the global L2 norm is at most
/// `max_norm`. Returns the factor applied.
pub fn clip_grad_norm(params: &mut VLMParams, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for p in params.params() {
        if let Some(g) = &p.tensor.grad {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "clip_grad_norm" });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in params.params_mut() {
        if let Some(g) = &mut p.tensor.grad {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(scale)
}

/// One AdamW step using each parameter's stored gradient. `lr` gives the
/// current rate per component; parameters without optimizer state are left
/// untouched.
pub fn adamw_step(params: &mut VLMParams, opt: &mut OptimizerState, lr: impl Fn(Component) -> f64, hp: &AdamW) -> Result<()> {
    opt.step += 1;
    for (p, state) in params.params_mut().iter_mut().zip(&mut opt.moments) {
        let Some(state) = state else { continue };
        let grad = p
            .tensor
            .grad
            .take()
            .ok_or_else(|| Error::Input(format!("parameter {} has no gradient", p.name)))?;
        hp.update(p.tensor.data_mut(), &grad, &mut state.m, &mut state.v, opt.step, lr(p.component));
        if !all_finite(p.tensor.data()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::VLMConfig;

    #[test]
    fn single_scalar_step() {
        let mut theta = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        AdamW::default().update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1);
        let expected = 0.999 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((theta[0] - expected).abs() < 1e-12, "{}", theta[0]);
        assert!((theta[0] - 0.899).abs() < 1e-5);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut theta = [0.7, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        hp.update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 0.5);
        assert_eq!(theta, [0.7, -2.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-8).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-8).unwrap() - 1e-8).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-3, 1e-8).unwrap() - (1e-3 + 1e-8) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-3, 1e-8).is_err());
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 2e-3, 1e-8).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn params_with_grad(value: f64) -> VLMParams {
        let mut p = VLMParams::zeros(&VLMConfig::desk()).unwrap();
        let n: usize = p.params().iter().map(|p| p.tensor.numel()).sum();
        // every gradient entry equal, global norm = value
        let each = value / (n as f64).sqrt();
        for q in p.params_mut() {
            q.tensor.grad = Some(vec![each; q.tensor.numel()]);
        }
        p
    }

    fn global_norm(p: &VLMParams) -> f64 {
        p.params()
            .iter()
            .flat_map(|p| p.tensor.grad.as_ref().unwrap())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn clipping_scales() {
        let mut p = params_with_grad(10.0);
        assert!((clip_grad_norm(&mut p, 1.0).unwrap() - 0.1).abs() < 1e-12);
        assert!((global_norm(&p) - 1.0).abs() < 1e-9);
        let mut p = params_with_grad(0.5);
        assert_eq!(clip_grad_norm(&mut p, 1.0).unwrap(), 1.0);
        assert!((global_norm(&p) - 0.5).abs() < 1e-9);
        let mut p = params_with_grad(1.0);
        p.params_mut()[0].tensor.grad.as_mut().unwrap()[0] = f64::NAN;
        assert!(clip_grad_norm(&mut p, 1.0).is_err());
    }

    #[test]
    fn frozen_components_have_no_state_and_do_not_move() {
        let cfg = VLMConfig::desk();
        let mut p = VLMParams::init(&cfg, 0).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, |c| c == Component::Projector);
        assert_eq!(opt.tracked(), 4);
        for q in p.params_mut() {
            q.tensor.grad = Some(vec![0.1; q.tensor.numel()]);
        }
        adamw_step(&mut p, &mut opt, |_| 1e-3, &AdamW::default()).unwrap();
        assert!(p.bitwise_eq_component(&before, Component::Vision));
        assert!(p.bitwise_eq_component(&before, Component::Language));
        assert!(!p.bitwise_eq_component(&before, Component::Projector));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = VLMParams::init(&VLMConfig::desk(), 0).unwrap();
        let mut opt = OptimizerState::new(&p, |_| true);
        assert!(adamw_step(&mut p, &mut opt, |_| 1e-3, &AdamW::default()).is_err());
    }
}
