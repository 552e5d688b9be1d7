//! Adam with bias correction, operating on named parameter sets.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive and finite, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Optimizer state tied to one parameter layout.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: ParamSet<T>,
    v: ParamSet<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(layout: &ParamSet<T>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            m: layout.zeros_like(),
            v: layout.zeros_like(),
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update in place. `params` and `grads` must both match the
    /// layout captured at construction.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !self.m.same_layout(params) || !self.m.same_layout(grads) {
            return Err(Error::shape(
                "adam_step",
                "parameter or gradient layout differs from optimizer state".to_string(),
            ));
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        // Bias corrections in f64: beta^t underflows gracefully there.
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));

        for i in 0..self.m.len() {
            let name = self.m.by_index(i).0.to_string();
            let g = grads.get(&name).expect("layout checked").clone();
            let m = self.m.get(&name).expect("layout checked");
            let v = self.v.get(&name).expect("layout checked");
            let m_new = m.zip_map(&g, "adam_m", |mi, gi| b1 * mi + (one - b1) * gi)?;
            let v_new = v.zip_map(&g, "adam_v", |vi, gi| b2 * vi + (one - b2) * gi * gi)?;

            let theta = params.get(&name).expect("layout checked");
            let updated = {
                let mut out = theta.clone();
                for ((o, &mi), &vi) in out
                    .data_mut()
                    .iter_mut()
                    .zip(m_new.data().iter())
                    .zip(v_new.data().iter())
                {
                    let m_hat = mi / c1;
                    let v_hat = vi / c2;
                    *o = *o - lr * m_hat / (v_hat.sqrt() + eps);
                }
                out
            };
            updated.check_finite("adam_step")?;
            params.set(&name, updated)?;
            self.m.set(&name, m_new)?;
            self.v.set(&name, v_new)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn layout(vals: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let n = vals.len();
        p.add("theta", Tensor::from_vec(&[n], vals).unwrap()).unwrap();
        p
    }

    #[test]
    fn rejects_non_positive_lr() {
        let p = layout(vec![1.0]);
        assert!(Adam::new(&p, AdamConfig::with_lr(0.0)).is_err());
        assert!(Adam::new(&p, AdamConfig::with_lr(-0.1)).is_err());
        assert!(Adam::new(&p, AdamConfig::with_lr(f64::NAN)).is_err());
    }

    #[test]
    fn first_step_is_closed_form() {
        // At t=1 bias correction cancels the moment decay exactly:
        // delta = -lr * g / (|g| + eps).
        let mut params = layout(vec![1.0, -2.0, 0.5]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut opt = Adam::new(&params, cfg).unwrap();
        let mut grads = params.zeros_like();
        grads
            .set("theta", Tensor::from_vec(&[3], vec![0.3, -0.7, 2.0]).unwrap())
            .unwrap();
        let before = params.get("theta").unwrap().clone();
        opt.step(&mut params, &grads).unwrap();
        let after = params.get("theta").unwrap();
        for i in 0..3 {
            let g: f64 = grads.get("theta").unwrap().data()[i];
            let expected = before.data()[i] - cfg.lr * g / (g.abs() + cfg.eps);
            assert!(
                (after.data()[i] - expected).abs() < 1e-15,
                "component {i}: got {} expected {expected}",
                after.data()[i]
            );
        }
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_fixed() {
        let mut params = layout(vec![3.0, -1.0]);
        let mut opt = Adam::new(&params, AdamConfig::with_lr(0.1)).unwrap();
        let grads = params.zeros_like();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("theta").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (theta - 5)^2; Adam should close most of the gap.
        let mut params = layout(vec![0.0]);
        let mut opt = Adam::new(&params, AdamConfig::with_lr(0.2)).unwrap();
        for _ in 0..200 {
            let x = params.get("theta").unwrap().data()[0];
            let mut grads = params.zeros_like();
            grads
                .set("theta", Tensor::from_vec(&[1], vec![2.0 * (x - 5.0)]).unwrap())
                .unwrap();
            opt.step(&mut params, &grads).unwrap();
        }
        let x = params.get("theta").unwrap().data()[0];
        assert!((x - 5.0).abs() < 0.1, "ended at {x}");
    }

    #[test]
    fn rejects_layout_mismatch() {
        let mut params = layout(vec![1.0]);
        let mut opt = Adam::new(&params, AdamConfig::with_lr(0.1)).unwrap();
        let other = layout(vec![1.0, 2.0]);
        assert!(opt.step(&mut params, &other).is_err());
    }
}
