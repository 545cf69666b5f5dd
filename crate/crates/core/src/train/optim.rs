use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0f32; p.numel()]).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// One bias-corrected update. The arithmetic is done in f64 and the
    /// result rounded once into the f32 parameter.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and non-negative, got {lr}"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err!("param {k} is {:?} but its gradient is {:?}", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

/// Learning-rate decay on a stalled maximised metric: after more than
/// `patience` epochs without a relative improvement of `threshold`, the
/// rate is multiplied by `factor` and the count restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub lr: f64,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) || patience == 0 || !(lr >= 0.0) || threshold < 0.0 {
            return Err(invalid!(
                "plateau needs factor in (0, 1), patience >= 1, lr >= 0, threshold >= 0; got {factor}, {patience}, {lr}, {threshold}"
            ));
        }
        Ok(Self { factor, patience, threshold, best: None, bad_epochs: 0, lr })
    }

    /// Feed one epoch's metric; returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b * (1.0 + self.threshold),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
