use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Matrix, Parameter};

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Matrix,
    pub second: Matrix,
}

/// Bias-corrected Adam. Moments are keyed by parameter name so they survive a checkpoint round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter. Any non-finite gradient aborts the
    /// whole step before a single value is touched.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NanGradient { id: p.id(), name: p.name().to_string() });
            }
            if let Some(m) = self.moments.get(p.name()) {
                if m.first.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("moments for {} are {:?}, parameter is {:?}", p.name(), m.first.shape(), p.value.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for p in params.iter_mut() {
            let (r, c) = p.value.shape();
            let m = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| Moments { first: Matrix::zeros(r, c), second: Matrix::zeros(r, c) });
            let g = p.grad.data();
            let w = p.value.data_mut();
            let mf = m.first.data_mut();
            let ms = m.second.data_mut();
            for i in 0..g.len() {
                mf[i] = b1 * mf[i] + (1.0 - b1) * g[i];
                ms[i] = b2 * ms[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = mf[i] / c1;
                let vhat = ms[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
