//! Analytic operation counts.
//!
//! Conventions (one multiply-accumulate counts as one operation unless
//! [`CostOptions::mac_factor`] says otherwise):
//!
//! - binary conv: `k²·c_in·c_out·h_out·w_out` BOPs; small FLOPs of one per
//!   input element (RSign) and three per output element (fused scale and
//!   normalization, shortcut add, activation).
//! - binary MLP block: `3·c²·h·w` BOPs; `6·c·h·w` small FLOPs (RSign, three
//!   fused branch scale/normalization terms, shortcut, activation). Token
//!   shifts are free.
//! - stem and classifier: their MACs are conv/fc FLOPs; the stem
//!   normalization folds into the conv, the classifier adds one FLOP per
//!   pooled element.
//! - dynamic embeddings: the three bottleneck matmuls are conv/fc FLOPs; the
//!   pooling and bias additions are small FLOPs.
//!
//! `OPs = BOPs/64 + FLOPs`. The conv/fc subtotal leaves out the small FLOPs.

use std::fmt::Write as _;

use crate::bits::conv_out_dim;
use crate::error::Result;
use crate::network::spec::{LayerKind, LayerSpec, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostOptions {
    /// Operations per multiply-accumulate (1, or 2 to count mul and add).
    pub mac_factor: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self { mac_factor: 1 }
    }
}

/// Operation counts of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub bops: u64,
    /// FLOPs of full-precision convolutions and fully connected layers.
    pub conv_fc_flops: u64,
    /// Scaling, normalization, activation, pooling and shortcut FLOPs.
    pub small_flops: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.conv_fc_flops + self.small_flops
    }

    pub fn ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.flops() as f64
    }

    pub fn conv_fc_ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.conv_fc_flops as f64
    }

    fn add(&mut self, o: &LayerCost) {
        self.bops += o.bops;
        self.conv_fc_flops += o.conv_fc_flops;
        self.small_flops += o.small_flops;
    }
}

/// Counts one layer at input shape `(c, h, w)`.
pub fn count_layer(layer: &LayerSpec, input: (usize, usize, usize), opts: CostOptions) -> Result<LayerCost> {
    let (c, h, w) = input;
    let out = layer.output_shape(input)?;
    let (co, ho, wo) = (out.0 as u64, out.1 as u64, out.2 as u64);
    let (c, h, w) = (c as u64, h as u64, w as u64);
    let k = layer.kernel_size() as u64;
    let f = opts.mac_factor;
    let mut cost = LayerCost::default();
    match layer.kind {
        LayerKind::StemConv => {
            // MACs happen before the optional max pooling
            let hc = conv_out_dim(h as usize, k as usize, layer.stride, k as usize / 2)? as u64;
            let wc = conv_out_dim(w as usize, k as usize, layer.stride, k as usize / 2)? as u64;
            cost.conv_fc_flops = k * k * c * co * hc * wc * f;
        }
        LayerKind::BinaryConv3x3 | LayerKind::BinaryConv1x1 | LayerKind::Downsample => {
            cost.bops = k * k * c * co * ho * wo * f;
            cost.small_flops = c * h * w + 3 * co * ho * wo;
            if layer.dynamic {
                let q = c / 4;
                cost.conv_fc_flops += (c * q + q * c + q * co) * f;
                cost.small_flops += c * h * w + q + c + co;
            }
        }
        LayerKind::BinaryMlp => {
            cost.bops = 3 * c * c * h * w * f;
            cost.small_flops = 6 * c * h * w;
        }
        LayerKind::Classifier => {
            cost.conv_fc_flops = c * co * f;
            cost.small_flops = c * h * w;
        }
    }
    Ok(cost)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub index: usize,
    pub kind: LayerKind,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub cost: LayerCost,
}

/// Per-layer costs plus totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub rows: Vec<CostRow>,
    pub total: LayerCost,
}

impl CostReport {
    pub fn bops(&self) -> u64 {
        self.total.bops
    }

    pub fn flops(&self) -> u64 {
        self.total.flops()
    }

    pub fn conv_fc_flops(&self) -> u64 {
        self.total.conv_fc_flops
    }

    pub fn ops(&self) -> f64 {
        self.total.ops()
    }

    /// OPs counting only binary layers and full-precision conv/fc layers.
    pub fn conv_fc_ops(&self) -> f64 {
        self.total.conv_fc_ops()
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "network: {}", self.name);
        let _ = writeln!(
            s,
            "{:>5}  {:<10}  {:>16}  {:>16}  {:>14}  {:>14}  {:>14}",
            "layer", "kind", "input", "output", "BOPs", "FLOPs", "OPs"
        );
        let shape = |(c, h, w): (usize, usize, usize)| format!("{c}x{h}x{w}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5}  {:<10}  {:>16}  {:>16}  {:>14}  {:>14}  {:>14.0}",
                r.index,
                r.kind.label(),
                shape(r.input),
                shape(r.output),
                r.cost.bops,
                r.cost.flops(),
                r.cost.ops()
            );
        }
        let _ = writeln!(s, "total BOPs          {:.4e}", self.bops() as f64);
        let _ = writeln!(s, "total FLOPs         {:.4e}", self.flops() as f64);
        let _ = writeln!(s, "total OPs           {:.4e}", self.ops());
        let _ = writeln!(s, "conv+fc FLOPs       {:.4e}", self.conv_fc_flops() as f64);
        let _ = writeln!(s, "conv+fc OPs         {:.4e}", self.conv_fc_ops());
        s
    }

    /// Machine-readable rows with a header line, the last row being totals.
    pub fn to_delimited(&self, sep: char) -> String {
        let mut s = String::new();
        let cols = ["layer", "kind", "in_c", "in_h", "in_w", "out_c", "out_h", "out_w", "bops", "conv_fc_flops", "small_flops", "flops", "ops"];
        let _ = writeln!(s, "{}", cols.join(&sep.to_string()));
        let mut line = |fields: Vec<String>| {
            let _ = writeln!(s, "{}", fields.join(&sep.to_string()));
        };
        for r in &self.rows {
            line(vec![
                r.index.to_string(),
                r.kind.label().into(),
                r.input.0.to_string(),
                r.input.1.to_string(),
                r.input.2.to_string(),
                r.output.0.to_string(),
                r.output.1.to_string(),
                r.output.2.to_string(),
                r.cost.bops.to_string(),
                r.cost.conv_fc_flops.to_string(),
                r.cost.small_flops.to_string(),
                r.cost.flops().to_string(),
                format!("{}", r.cost.ops()),
            ]);
        }
        let t = &self.total;
        let mut totals = vec!["total".to_string(), String::new()];
        totals.extend(std::iter::repeat(String::new()).take(6));
        totals.extend([
            t.bops.to_string(),
            t.conv_fc_flops.to_string(),
            t.small_flops.to_string(),
            t.flops().to_string(),
            format!("{}", t.ops()),
        ]);
        line(totals);
        s
    }
}

/// Counts every layer of a spec. The spec only needs a consistent shape
/// chain; parameter values never matter.
pub fn count_network(spec: &NetworkSpec, opts: CostOptions) -> Result<CostReport> {
    let mut report = CostReport {
        name: spec.name.clone(),
        ..Default::default()
    };
    for r in spec.resolve()? {
        let cost = count_layer(&r.spec, r.input, opts)?;
        report.total.add(&cost);
        report.rows.push(CostRow {
            index: r.index,
            kind: r.spec.kind,
            input: r.input,
            output: r.output,
            cost,
        });
    }
    Ok(report)
}
