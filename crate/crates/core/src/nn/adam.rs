use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

/// Adam optimizer state with 64-bit moment accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    /// Applies one bias-corrected update. A non-finite gradient rejects the whole step.
    pub fn update<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NnError::ShapeMismatch {
                layer: "adam".into(),
                expected: vec![self.m.len()],
                found: vec![params.len(), grads.len()],
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(NnError::ShapeMismatch {
                    layer: format!("adam tensor {i}"),
                    expected: vec![m.len()],
                    found: vec![p.len(), g.len()],
                });
            }
            if let Some(j) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    tensor: i,
                    index: j,
                    value: g.data[j].to_f64(),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.data.len() {
                let gk = g.data[k].to_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[k] = T::from_f64(p.data[k].to_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()]
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let g = vec![Tensor::zeros(&[3])];
        for _ in 0..10 {
            s.update(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut p = params();
        let mut s = AdamState::new(&p, 1e-3);
        let g = vec![Tensor::from_vec(&[3], vec![0.7, -3.0, 1e-3]).unwrap()];
        let mut last = p.clone();
        for _ in 0..500 {
            last = p.clone();
            s.update(&mut p, &g).unwrap();
        }
        for k in 0..3 {
            let step = p[0].data[k] - last[0].data[k];
            assert!((step.abs() - 1e-3).abs() < 1e-5 * 1e-3 + 1e-8);
            assert_eq!(step.signum(), -g[0].data[k].signum());
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = params();
        let mut s = AdamState::new(&p, 0.01);
        let g = vec![Tensor::from_vec(&[3], vec![2.0, -1.0, 0.0]).unwrap()];
        s.update(&mut p, &g).unwrap();
        // After one step mhat = g and vhat = g^2, so the update is lr * g / (|g| + eps).
        assert!((p[0].data[0] - (1.0 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0].data[1] - (-2.0 + 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[0].data[2], 0.5);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let g = vec![Tensor::from_vec(&[3], vec![0.1, f64::NAN, 0.0]).unwrap()];
        let err = s.update(&mut p, &g).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { tensor: 0, index: 1, .. }));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }
}
