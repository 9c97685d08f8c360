//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `peak · ½(1 + cos(π·t/total))`; `total = 0` gives `peak`.
pub fn cosine_lr(peak: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return peak;
    }
    let frac = t.min(total) as f64 / total as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-tensor first and second moment estimates.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`. The decay only applies
    /// where `decay[i]` is set and never enters the moments. Gradients are
    /// taken from `params[i].grad`; tensors without a gradient still decay.
    pub fn step(&mut self, params: &mut [&mut RealTensor], decay: &[bool], lr: f64, weight_decay: f64) -> Result<()> {
        if decay.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} decay flags for {} parameters",
                decay.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::InvalidArgument("parameter set changed between optimizer steps".into()));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { weight_decay } else { 0.0 };
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= lr * (mhat / (vhat.sqrt() + EPS) + wd * data[j]);
            }
        }
        Ok(())
    }
}
