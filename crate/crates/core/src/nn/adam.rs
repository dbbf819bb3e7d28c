use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First/second moment accumulators shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update. Tensors with `trainable[i] == false`
    /// are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut [Array2<f64>],
        grads: &[Array2<f64>],
        trainable: Option<&[bool]>,
    ) -> Result<()> {
        check_dim("adam parameter count", self.first.len(), params.len())?;
        check_dim("adam gradient count", params.len(), grads.len())?;
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if trainable.is_some_and(|mask| !mask[i]) {
                continue;
            }
            check_dim("adam tensor size", params[i].len(), grads[i].len())?;
            Zip::from(&mut params[i])
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    mut state: AdamState,
    mut params: Vec<Array2<f64>>,
    grads: &[Array2<f64>],
) -> Result<(AdamState, Vec<Array2<f64>>)> {
    state.step(&mut params, grads, None)?;
    Ok((state, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = vec![array![[1.0, -2.0]]];
        let s = AdamState::new(AdamConfig::with_learning_rate(0.1), &p);
        let (s, q) = adam_step(s, p.clone(), &[array![[0.0, 0.0]]]).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = vec![array![[1.0]]];
        let s = AdamState::new(AdamConfig::with_learning_rate(0.1), &p);
        // f = θ²/2, gradient θ = 1
        let (_, q) = adam_step(s, p, &[array![[1.0]]]).unwrap();
        assert!((q[0][[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let scales = array![[1.0, 4.0, 0.25]];
        let mut p = vec![array![[1.0, -1.5, 2.0]]];
        let mut s = AdamState::new(AdamConfig::with_learning_rate(0.05), &p);
        for _ in 0..500 {
            let g = vec![&p[0] * &scales];
            s.step(&mut p, &g, None).unwrap();
        }
        let norm = p[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut p = vec![array![[1.0]], array![[1.0]]];
        let mut s = AdamState::new(AdamConfig::with_learning_rate(0.1), &p);
        let g = vec![array![[1.0]], array![[1.0]]];
        s.step(&mut p, &g, Some(&[true, false])).unwrap();
        assert!(p[0][[0, 0]] < 1.0);
        assert_eq!(p[1][[0, 0]], 1.0);
        assert_eq!(s.first[1][[0, 0]], 0.0);
    }
}
