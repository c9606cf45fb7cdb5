use haze_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            steps: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[&[3]]);
        adam.step(&mut [&mut p], &[g]);
        let d = p.data();
        assert!((d[0] - (1.0 - 2e-4)).abs() < 1e-7);
        assert!((d[1] - (-2.0 + 2e-4)).abs() < 1e-7);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let cfg = AdamConfig { learning_rate: 0.05, ..Default::default() };
        let mut adam = Adam::new(cfg, &[&[1]]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            adam.step(&mut [&mut p], &[g]);
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
