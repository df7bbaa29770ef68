//! AMSGrad with bias correction on the first moment only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmsGradConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        AmsGradConfig { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmsGrad {
    pub config: AmsGradConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_max: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(config: AmsGradConfig) -> Self {
        AmsGrad { config, step: 0, m: Vec::new(), v: Vec::new(), v_max: Vec::new() }
    }

    /// One update. Nothing is modified when a gradient is non-finite or
    /// shapes disagree.
    pub fn step<F: Real>(&mut self, params: &mut [&mut Vec<F>], grads: &[Vec<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Dimension(format!("tensor {t}: {} gradients for {} values", g.len(), p.len())));
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: t, index });
            }
        }
        if self.m.is_empty() {
            let zeros: Vec<Vec<f64>> = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.m = zeros.clone();
            self.v = zeros.clone();
            self.v_max = zeros;
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Dimension("gradient shapes differ from optimizer state".into()));
        }
        let AmsGradConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        self.step += 1;
        let correction = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        for (t, g) in grads.iter().enumerate() {
            let (m, v, vmax) = (&mut self.m[t], &mut self.v[t], &mut self.v_max[t]);
            for (i, gi) in g.iter().enumerate() {
                let gi = gi.f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                vmax[i] = vmax[i].max(v[i]);
                let m_hat = m[i] / correction;
                let p = &mut params[t][i];
                *p = F::of(p.f64() - lr * m_hat / (vmax[i].sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut opt = AmsGrad::new(AmsGradConfig::default());
        let mut p = vec![1.5f64, -2.0];
        opt.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn single_step_hand_arithmetic() {
        let cfg = AmsGradConfig { learning_rate: 0.1, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 };
        let mut opt = AmsGrad::new(cfg);
        let mut p = vec![1.0f64];
        opt.step(&mut [&mut p], &[vec![2.0]]).unwrap();
        // m = 1, v = 0.004, m_hat = 2, theta = 1 - 0.1 * 2 / (sqrt(0.004) + 1e-8)
        let expected = 1.0 - 0.1 * 2.0 / (0.004f64.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AmsGradConfig { learning_rate: 0.05, ..Default::default() };
        let mut opt = AmsGrad::new(cfg);
        let mut theta = vec![0.0f64];
        for _ in 0..2000 {
            let g = 2.0 * (theta[0] - 3.0);
            opt.step(&mut [&mut theta], &[vec![g]]).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 0.01, "{}", theta[0]);
    }

    #[test]
    fn rejects_non_finite_without_side_effects() {
        let mut opt = AmsGrad::new(AmsGradConfig::default());
        let mut a = vec![1.0f32, 2.0];
        let mut b = vec![3.0f32];
        let err = opt.step(&mut [&mut a, &mut b], &[vec![0.1, 0.2], vec![f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 1, index: 0 }));
        assert_eq!((a, b, opt.step), (vec![1.0, 2.0], vec![3.0], 0));
        let mut c = vec![0.0f32];
        assert!(matches!(opt.step(&mut [&mut c], &[vec![1.0, 2.0]]), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn vmax_monotone_and_step_bounded(gs in proptest::collection::vec(-10.0f64..10.0, 1..60)) {
            let cfg = AmsGradConfig::default();
            let mut opt = AmsGrad::new(cfg);
            let mut p = vec![0.0f64];
            let mut last_vmax = 0.0;
            for g in gs {
                let before = p[0];
                opt.step(&mut [&mut p], &[vec![g]]).unwrap();
                let vmax = opt.v_max[0][0];
                prop_assert!(vmax >= last_vmax && vmax >= opt.v[0][0] && opt.v[0][0] >= 0.0);
                last_vmax = vmax;
                let m_hat = opt.m[0][0] / (1.0 - cfg.beta1.powi(opt.step as i32));
                if vmax > 0.0 {
                    prop_assert!((p[0] - before).abs() <= cfg.learning_rate * (1.0 + 1e-6) * m_hat.abs() / vmax.sqrt());
                }
            }
        }

        #[test]
        fn deterministic_trajectories(gs in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let run = || {
                let mut opt = AmsGrad::new(AmsGradConfig::default());
                let mut p = vec![0.5f64, -0.5];
                for g in &gs {
                    opt.step(&mut [&mut p], &[vec![*g, -g]]).unwrap();
                }
                p
            };
            prop_assert!(run() == run());
        }
    }
}
