//! Straight-through estimators for sign binarization.
//!
//! Forward passes binarize with the hard sign (`x ≤ threshold → -1`). The
//! backward pass uses the derivative of the clipped polynomial
//! `qb(x) = 2x ± x²` on `[-1, 1)`, which is zero outside that interval.
//! [`qb_forward`] itself is only used as the smooth surrogate when checking
//! gradients numerically.

use crate::bits::{pack, BitTensor};
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Piecewise polynomial approximation of `sign`.
pub fn qb_forward(x: f64) -> f64 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        2.0 * x + x * x
    } else if x < 1.0 {
        2.0 * x - x * x
    } else {
        1.0
    }
}

/// `upstream · qb'(x)`; zero whenever `|x| ≥ 1`.
pub fn qb_backward(x: f64, upstream: f64) -> f64 {
    qb_grad(x) * upstream
}

#[inline]
pub(crate) fn qb_grad(x: f64) -> f64 {
    if x < -1.0 {
        0.0
    } else if x < 0.0 {
        2.0 + 2.0 * x
    } else if x < 1.0 {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

/// Per-channel binarization threshold learned directly (no dynamic
/// embedding), with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableThreshold {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl LearnableThreshold {
    pub fn zeros(channels: usize) -> Self {
        Self::new(vec![0.0; channels])
    }

    pub fn new(values: Vec<f64>) -> Self {
        let grad = vec![0.0; values.len()];
        Self { values, grad }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Saved state of one [`sign_ste`] call.
#[derive(Clone, Debug)]
pub struct SignSteBackward {
    shape: Vec<usize>,
    diff: Vec<f64>,
}

impl SignSteBackward {
    /// Gradient w.r.t. the input, accumulating the threshold gradient
    /// (`d(x − β)/dβ = −1`, summed over each channel).
    pub fn backward(
        &self,
        upstream: &RealTensor,
        threshold: &mut LearnableThreshold,
    ) -> Result<RealTensor> {
        if upstream.shape() != self.shape.as_slice() {
            return Err(Error::dim(format!(
                "upstream {:?} does not match input {:?}",
                upstream.shape(),
                self.shape
            )));
        }
        let (c, inner) = channel_layout(&self.shape)?;
        let gx: Vec<f64> = self
            .diff
            .iter()
            .zip(upstream.data())
            .map(|(&d, &u)| qb_backward(d, u))
            .collect();
        for (i, g) in gx.iter().enumerate() {
            threshold.grad[(i / inner) % c] -= g;
        }
        RealTensor::new(self.shape.clone(), gx)
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, c, h, w] => Ok((c, h * w)),
        [_, c] => Ok((c, 1)),
        _ => Err(Error::dim(format!("expected NCHW or [n, c], got {shape:?}"))),
    }
}

/// Binarizes `x` with a learnable per-channel threshold and returns the
/// packed bits together with the rule that back-propagates through them.
pub fn sign_ste(x: &RealTensor, threshold: &LearnableThreshold) -> Result<(BitTensor, SignSteBackward)> {
    let (c, inner) = channel_layout(x.shape())?;
    if threshold.len() != c {
        return Err(Error::dim(format!(
            "threshold has {} channels, input has {c}",
            threshold.len()
        )));
    }
    let bits = pack(x, &threshold.values)?;
    let diff = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v - threshold.values[(i / inner) % c])
        .collect();
    Ok((
        bits,
        SignSteBackward {
            shape: x.shape().to_vec(),
            diff,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::unpack;

    #[test]
    fn forward_examples() {
        assert_eq!(qb_forward(-2.0), -1.0);
        assert_eq!(qb_forward(0.5), 0.75);
        assert_eq!(qb_forward(0.0), 0.0);
        assert_eq!(qb_forward(1.0), 1.0);
        assert_eq!(qb_forward(-1.0), -1.0);
    }

    #[test]
    fn backward_examples() {
        assert_eq!(qb_backward(0.5, 1.0), 1.0);
        assert_eq!(qb_backward(-3.0, 7.0), 0.0);
        // right-closed branches: x = -1 uses 2 + 2x, x = 1 is outside
        assert_eq!(qb_backward(-1.0, 1.0), 0.0);
        assert_eq!(qb_backward(1.0, 1.0), 0.0);
        assert_eq!(qb_backward(0.0, 1.0), 2.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-5;
        for x in [-0.7, -0.2, 0.3, 0.8] {
            let fd = (qb_forward(x + h) - qb_forward(x - h)) / (2.0 * h);
            let an = qb_backward(x, 1.0);
            assert!(((fd - an) / an).abs() < 1e-4, "x={x}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn sign_ste_examples() {
        let x = RealTensor::new([1, 1], vec![0.5]).unwrap();
        let mut t = LearnableThreshold::zeros(1);
        let (bits, rule) = sign_ste(&x, &t).unwrap();
        assert_eq!(unpack(&bits).data(), &[1.0]);
        let up = RealTensor::new([1, 1], vec![1.0]).unwrap();
        let g = rule.backward(&up, &mut t).unwrap();
        assert_eq!(g.data(), &[1.0]);
        assert_eq!(t.grad, vec![-1.0]);

        let boundary = LearnableThreshold::new(vec![0.5]);
        let (bits, _) = sign_ste(&x, &boundary).unwrap();
        assert_eq!(unpack(&bits).data(), &[-1.0]);
    }

    #[test]
    fn sign_ste_channel_mismatch() {
        let x = RealTensor::zeros([1, 3, 2, 2]);
        assert!(sign_ste(&x, &LearnableThreshold::zeros(2)).is_err());
    }
}
