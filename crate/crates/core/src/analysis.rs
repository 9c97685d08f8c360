//! Binarization error statistics.
//!
//! The average error of a weight tensor is `(1/n)·Σ|α·sign(w) − w|` with one
//! scale per output filter. Two scales are available: [`ErrorMode::Xnor`]
//! uses the mean magnitude of the filter (the scale that minimizes the L2
//! error and the one the kernels use), [`ErrorMode::Literal`] uses
//! `‖sign(w)‖₁ / c_in`, which is the number of kernel taps and equals 1 for
//! the MLP's 1x1 weights.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::sampling::SamplingRange;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::RealTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    #[default]
    Xnor,
    Literal,
}

impl std::str::FromStr for ErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xnor" => Ok(Self::Xnor),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::InvalidArgument(format!("unknown error mode `{s}` (xnor or literal)"))),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean binarization error of `w`, whose first dimension indexes filters.
/// A 1-D tensor is one filter.
pub fn binarization_error(w: &RealTensor, mode: ErrorMode) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("binarization error of an empty tensor".into()));
    }
    let shape = w.shape();
    let filters = if shape.len() > 1 { shape[0] } else { 1 };
    let fan_in = w.len() / filters;
    let c_in = if shape.len() > 1 { shape[1] } else { fan_in };
    let mut total = 0.0;
    for f in w.data().chunks_exact(fan_in) {
        let alpha = match mode {
            ErrorMode::Xnor => f.iter().map(|v| v.abs()).sum::<f64>() / fan_in as f64,
            ErrorMode::Literal => f.iter().map(|&v| sign(v).abs()).sum::<f64>() / c_in as f64,
        };
        total += f.iter().map(|&v| (alpha * sign(v) - v).abs()).sum::<f64>();
    }
    Ok(total / w.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinErrRow {
    /// Layer index in the network spec.
    pub layer: usize,
    /// Ordinal of the MLP block, counted from the input side.
    pub block: usize,
    /// Branch slot 0..3.
    pub branch: usize,
    pub range: SamplingRange,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BinErrReport {
    pub mode: ErrorMode,
    pub rows: Vec<BinErrRow>,
}

impl BinErrReport {
    /// Mean error over all rows with the given sampling range.
    pub fn mean_for(&self, range: SamplingRange) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.range == range).map(|r| r.error).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sampling ranges ordered from largest to smallest mean error.
    pub fn ordering(&self) -> Vec<(SamplingRange, f64)> {
        let mut v: Vec<_> = [SamplingRange::Pointwise, SamplingRange::Short, SamplingRange::Long]
            .into_iter()
            .filter_map(|r| self.mean_for(r).map(|m| (r, m)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn to_delimited(&self, sep: char) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layer{sep}block{sep}branch{sep}range{sep}error");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}{sep}{}{sep}{}{sep}{}{sep}{}",
                r.layer,
                r.block,
                r.branch,
                r.range.tag(),
                r.error
            );
        }
        s
    }
}

/// One row per (MLP block, branch), in depth order.
pub fn per_branch_report(net: &Network, mode: ErrorMode) -> Result<BinErrReport> {
    let mut rows = Vec::new();
    for (block, (layer, p)) in net.mlp_blocks().into_iter().enumerate() {
        for (branch, (w, &range)) in p.weights.iter().zip(&p.ranges).enumerate() {
            rows.push(BinErrRow {
                layer,
                block,
                branch,
                range,
                error: binarization_error(w, mode)?,
            });
        }
    }
    Ok(BinErrReport { mode, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::preset;

    #[test]
    fn hand_case() {
        let w = RealTensor::new([1, 3], vec![1.0, -1.0, 3.0]).unwrap();
        let e = binarization_error(&w, ErrorMode::Xnor).unwrap();
        assert!((e - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn literal_mode_on_unit_magnitudes() {
        let w = RealTensor::from_fn([4, 4, 1, 1], |i| if i % 3 == 0 { 1.0 } else { -1.0 });
        assert_eq!(binarization_error(&w, ErrorMode::Literal).unwrap(), 0.0);
        // 3x3 taps: literal scale is 9
        let w = RealTensor::full([2, 2, 3, 3], 9.0);
        assert_eq!(binarization_error(&w, ErrorMode::Literal).unwrap(), 0.0);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(binarization_error(&RealTensor::zeros([0]), ErrorMode::Xnor).is_err());
    }

    #[test]
    fn report_rows_and_ordering() {
        let net = Network::build(&preset("desk-tiny").unwrap(), 3).unwrap();
        let r = per_branch_report(&net, ErrorMode::Xnor).unwrap();
        assert_eq!(r.rows.len(), 9);
        assert_eq!(r.ordering().len(), 3);
        assert_eq!(r.to_delimited(',').lines().count(), 10);
        assert!(r.rows.iter().all(|x| x.error >= 0.0));
    }
}
