//! Label-smoothed cross-entropy and soft targets.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Row-major `[n, classes]` target distributions: `1 − ε + ε/K` on the label
/// and `ε/K` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let off = smoothing / classes as f64;
    let mut t = vec![off; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        t[i * classes + l] += 1.0 - smoothing;
    }
    Ok(t)
}

/// Precomputed teacher logits mixed into the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Distillation {
    /// `[n, classes]` for the batch being trained.
    pub teacher_logits: RealTensor,
    /// Weight of the teacher distribution in `[0, 1]`.
    pub weight: f64,
}

impl Distillation {
    /// `(1 − w)·targets + w·softmax(teacher)`.
    pub fn mix(&self, targets: &mut [f64]) -> Result<()> {
        if targets.len() != self.teacher_logits.len() {
            return Err(Error::dim(format!(
                "teacher logits {:?} for {} targets",
                self.teacher_logits.shape(),
                targets.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::InvalidArgument(format!("distillation weight {} outside [0, 1]", self.weight)));
        }
        let (_, k) = self.teacher_logits.matrix_dims()?;
        for (row, t) in self.teacher_logits.data().chunks_exact(k).zip(targets.chunks_exact_mut(k)) {
            let p = softmax(row);
            for (tj, pj) in t.iter_mut().zip(p) {
                *tj = (1.0 - self.weight) * *tj + self.weight * pj;
            }
        }
        Ok(())
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean label-smoothed cross-entropy of `logits: [n, classes]`.
pub fn loss(logits: &RealTensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let (n, k) = logits.matrix_dims()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} logit rows", labels.len())));
    }
    let t = smoothed_targets(labels, k, smoothing)?;
    let mut total = 0.0;
    for (row, tr) in logits.data().chunks_exact(k).zip(t.chunks_exact(k)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total -= row.iter().zip(tr).map(|(l, t)| t * (l - lse)).sum::<f64>();
    }
    Ok(total / n.max(1) as f64)
}
