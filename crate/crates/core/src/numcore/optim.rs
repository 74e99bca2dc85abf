//! First-order optimizers operating on a [`ParamStore`].

use ndarray::Zip;

use super::params::ParamStore;
use super::tape::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    /// GAN settings: no first-moment averaging.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub hyper: AdamHyper,
}

fn check_grads(params: &ParamStore, grads: &[Matrix]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.dim() != params.get(id).dim() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                params.name(id),
                g.dim(),
                params.get(id).dim()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.name(id).to_string(),
            });
        }
    }
    Ok(())
}

impl AdamState {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros = || params.values().iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            hyper,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified on error.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + epsilon);
            });
        }
        Ok(())
    }
}

/// Heavy-ball SGD with decoupled-into-gradient weight decay.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl MomentumSgd {
    pub fn new(params: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.values().iter().map(|p| Matrix::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        check_grads(params, grads)?;
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((p, g), vel) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            Zip::from(p).and(g).and(vel).for_each(|p, &g, vel| {
                let g = g + wd * *p;
                *vel = mu * *vel + g;
                *p -= lr * *vel;
            });
        }
        Ok(())
    }
}
