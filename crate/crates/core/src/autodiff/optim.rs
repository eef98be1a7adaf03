use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::AutodiffError;

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![], v: vec![] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. `names` is only used for diagnostics.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::Shape {
                node: "adam".into(),
                detail: format!("{} parameters, {} gradients", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(AutodiffError::Shape {
                    node: names.get(i).cloned().unwrap_or_else(|| format!("param {i}")),
                    detail: format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(
                    names.get(i).cloned().unwrap_or_else(|| format!("param {i}")),
                ));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let mut opt = Adam::new(0.1);
        let mut w = Tensor::scalar(1.0);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            opt.step(&mut [&mut w], &[g], &[]).unwrap();
        }
        assert!(w.data()[0].abs() < 0.05, "{}", w.data()[0]);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut opt = Adam::default();
        let mut w = Tensor::from_vec(vec![0.3, -1.2]);
        opt.step(&mut [&mut w], &[Tensor::zeros(&[2])], &[]).unwrap();
        assert_eq!(w.data(), &[0.3, -1.2]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut opt = Adam::default();
        let mut w = Tensor::scalar(0.0);
        for _ in 0..50 {
            opt.step(&mut [&mut w], &[Tensor::scalar(0.5)], &[]).unwrap();
        }
        assert!(w.data()[0] < 0.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = Adam::default();
        let mut w = Tensor::scalar(0.0);
        let err = opt.step(&mut [&mut w], &[Tensor::scalar(f64::NAN)], &["layer.weight".into()]).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(w.data(), &[0.0]);
    }
}
