//! Bias-corrected adaptive-moment (Adam) parameter updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    Shape {
        index: usize,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("{params} parameters but {grads} gradients")]
    Count { params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update of every parameter. The step counter advances even when
    /// all gradients are zero.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<(), AdamError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AdamError::Count {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[index].shape() {
                return Err(AdamError::Shape {
                    index,
                    param: p.shape(),
                    grad: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Matrix::from_rows(&[vec![1.0, -2.0]])];
        let mut s = AdamState::new(cfg(0.1), [(1, 2)]);
        s.step(&mut p, &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn constant_unit_gradient_moves_by_lr() {
        // m_hat = v_hat = 1 after bias correction, so each step is lr / (1 + eps).
        let mut p = vec![Matrix::scalar(0.0)];
        let mut s = AdamState::new(cfg(0.1), [(1, 1)]);
        let mut prev = 0.0;
        for _ in 0..5 {
            s.step(&mut p, &[Matrix::scalar(1.0)]).unwrap();
            let now = p[0].get(0, 0);
            assert!(((prev - now) - 0.1).abs() < 1e-3);
            prev = now;
        }
        assert!((p[0].get(0, 0) + 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![Matrix::zeros(2, 2)];
        let mut s = AdamState::new(cfg(0.1), [(2, 2)]);
        let err = s.step(&mut p, &[Matrix::zeros(1, 2)]).unwrap_err();
        assert!(matches!(err, AdamError::Shape { index: 0, .. }));
        assert_eq!(s.step, 0);
    }
}
