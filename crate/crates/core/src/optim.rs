//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim(
                "adam_step",
                &[params.len(), self.m.len()],
                &[grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
            if p.shape() != m.shape() {
                return Err(Error::dim("adam_step", p.shape(), m.shape()));
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
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            st.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &params);
        let g = Tensor::new(vec![3], vec![3.0, -0.5, 1e-3]).unwrap();
        st.step(&mut params, &[g]).unwrap();
        for (p, s) in params[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-7, "{p}");
        }
    }

    // Scalar reference, written out independently of the tensor loop.
    fn scalar_adam(x0: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn three_steps_on_quadratic_match_scalar_reference() {
        let lr = 0.1;
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(
            AdamConfig {
                lr,
                ..Default::default()
            },
            &params,
        );
        for _ in 0..3 {
            let x = params[0].data()[0];
            st.step(&mut params, &[Tensor::scalar(2.0 * (x - 3.0))]).unwrap();
        }
        let want = scalar_adam(0.0, 3, lr);
        assert!((params[0].data()[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let err = st.step(&mut params, &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
