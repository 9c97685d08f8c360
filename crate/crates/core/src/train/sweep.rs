//! Conv-to-MLP replacement sweeps.
//!
//! Point `n` replaces the last `n` replaceable 3x3 convs of the base spec,
//! each by `mlp_per_conv` MLP blocks. Downsampling and width-changing convs
//! are never replaced.

use serde::{Deserialize, Serialize};

use super::data::Split;
use super::{evaluate, train_step1, train_step2, TrainConfig};
use crate::cost::{count_network, CostOptions, CostReport};
use crate::error::{Error, Result};
use crate::network::spec::{LayerKind, NetworkSpec, PSL};
use crate::network::Network;

/// Which OPs figure the budget band applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandMetric {
    /// BOPs/64 plus full FLOPs.
    Ops,
    /// BOPs/64 plus conv/fc FLOPs only.
    #[default]
    ConvFcOps,
}

impl BandMetric {
    pub fn of(self, r: &CostReport) -> f64 {
        match self {
            BandMetric::Ops => r.ops(),
            BandMetric::ConvFcOps => r.conv_fc_ops(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Number of replaced convs per point.
    pub points: Vec<usize>,
    pub mlp_per_conv: usize,
    /// Allowed relative OPs change between consecutive points.
    pub band: f64,
    pub metric: BandMetric,
    /// Training phases per point; `None` only counts operations.
    pub training: Option<(TrainConfig, TrainConfig)>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            points: vec![0, 1, 2, 3],
            mlp_per_conv: 3,
            band: 0.03,
            metric: BandMetric::default(),
            training: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub replaced: usize,
    pub conv_layers: usize,
    pub mlp_layers: usize,
    pub ops: f64,
    pub conv_fc_ops: f64,
    /// Band metric relative to the base spec.
    pub ratio_to_base: f64,
    /// Band metric relative to the previous point.
    pub ratio_to_prev: f64,
    pub within_band: bool,
    pub top1: Option<f64>,
}

/// The spec of one sweep point.
pub fn replaced_spec(base: &NetworkSpec, n: usize, mlp_per_conv: usize) -> Result<NetworkSpec> {
    let slots = base.replaceable_layers();
    if n > slots.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot replace {n} convs in `{}`: only {} are stride-1 width-preserving 3x3 convs",
            base.name,
            slots.len()
        )));
    }
    let mut spec = base.clone();
    // back to front so earlier indices stay valid
    for &i in slots.iter().rev().take(n) {
        spec = spec.replace_with_mlp(i, mlp_per_conv, PSL)?;
    }
    if n > 0 {
        spec.name = format!("{}-mlp{n}", base.name);
    }
    Ok(spec)
}

fn conv_layers(s: &NetworkSpec) -> usize {
    s.layers.iter().filter(|l| l.kind.is_binary_conv()).count()
}

/// One row per point, in the given order. With training configured, each
/// point is trained from seed `step1.seed` and evaluated on the test split.
pub fn sweep_replacement(base: &NetworkSpec, cfg: &SweepConfig, data: Option<&Split>) -> Result<Vec<SweepRow>> {
    if cfg.training.is_some() && data.is_none() {
        return Err(Error::Dataset("sweep training needs a dataset".into()));
    }
    let opts = CostOptions::default();
    let base_cost = cfg.metric.of(&count_network(base, opts)?);
    let mut prev = base_cost;
    let mut rows = Vec::with_capacity(cfg.points.len());
    for &n in &cfg.points {
        let spec = replaced_spec(base, n, cfg.mlp_per_conv)?;
        let report = count_network(&spec, opts)?;
        let m = cfg.metric.of(&report);
        let ratio_to_prev = m / prev;
        prev = m;
        let top1 = match (&cfg.training, data) {
            (Some((c1, c2)), Some(d)) => {
                let mut net = Network::build(&spec, c1.seed)?;
                let s1 = train_step1(&mut net, &d.train, c1)?;
                train_step2(&mut net, &s1.checkpoint, &d.train, c2)?;
                Some(evaluate(&net, &d.test, &d.train.normalization(), 100)?.top1)
            }
            _ => None,
        };
        rows.push(SweepRow {
            replaced: n,
            conv_layers: conv_layers(&spec),
            mlp_layers: spec.count_kind(LayerKind::BinaryMlp),
            ops: report.ops(),
            conv_fc_ops: report.conv_fc_ops(),
            ratio_to_base: m / base_cost,
            ratio_to_prev,
            within_band: (ratio_to_prev - 1.0).abs() <= cfg.band,
            top1,
        });
    }
    Ok(rows)
}
