//! Binary convolution blocks, three-branch binary MLP blocks and dynamic
//! contextual embeddings.
//!
//! Every block has two implementations: a direct one used for inference
//! (bit kernels when weights are binarized) and a graph one used for
//! training. In evaluation mode the two produce identical values.
//!
//! Block wiring:
//!
//! ```text
//! conv: a ─ RSign(θ + β) ─ conv ─ ·α ─ +γ ─ BN ─ + skip(a) ─ RPReLU
//! mlp:  a ─ RSign(θ) ─┬─ P ──────────────┐
//!                     ├─ shift_S ─ S ─────┼─ Σ ─ BN ─ + a ─ RPReLU
//!                     └─ shift_L ─ L ─────┘
//! ```

pub mod sampling;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, NodeId};
use crate::bits::{binary_conv2d, pack, pack_filters, unpack, weight_scale_with, ScaleMode, ScaleVector};
use crate::dense::{self, ConvGeom, GemmOrder};
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

use sampling::{quartile_offsets, reconstruct, shift_real, SamplingRange};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const RPRELU_INIT_SLOPE: f64 = 0.25;

/// Which weights the binary layers see in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Full-precision shadow weights, binary activations (first training step).
    Real,
    /// `α ⊙ (sign(A) ⊛ sign(W))` (second step and deployment).
    #[default]
    Binary,
}

/// Execution settings shared by every block of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecMode {
    pub weights: WeightMode,
    pub scale_mode: ScaleMode,
}

/// Graph construction settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphMode {
    pub exec: ExecMode,
    /// Normalize with batch statistics (training) instead of running ones.
    pub batch_stats: bool,
}

/// Role of a stored tensor; decides optimization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Shadow weight of a binary layer.
    Binary,
    /// Full-precision weight matrix (decayed).
    Dense,
    /// Thresholds, biases, affine and activation parameters (not decayed).
    Affine,
    /// Running statistics: stored, never optimized.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Binary | ParamKind::Dense)
    }
}

/// Enumerates stored tensors in a fixed order. `visit` and `visit_mut`
/// must agree; the graph binding and the optimizer both rely on it.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind));
}

/// Graph nodes of one block's trainable tensors, keyed by name.
pub(crate) struct Bound(Vec<(String, NodeId)>);

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}

/// Creates parameter nodes for every trainable tensor of `p`, numbering them
/// from `*next` onwards in visit order.
pub(crate) fn bind(p: &dyn Params, g: &mut Graph, next: &mut usize) -> Bound {
    let mut out = Vec::new();
    p.visit("", &mut |name, t, kind| {
        if kind.trainable() {
            out.push((name, g.param(*next, t)));
            *next += 1;
        }
    });
    Bound(out)
}

pub(crate) fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> RealTensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    RealTensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

/// Affine normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: RealTensor,
    pub beta: RealTensor,
    pub running_mean: RealTensor,
    pub running_var: RealTensor,
}

impl BatchNormParams {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: RealTensor::full([c], 1.0),
            beta: RealTensor::zeros([c]),
            running_mean: RealTensor::zeros([c]),
            running_var: RealTensor::full([c], 1.0),
        }
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        dense::batch_norm(
            x,
            self.running_mean.data(),
            self.running_var.data(),
            self.gamma.data(),
            self.beta.data(),
            BN_EPS,
        )
    }

    /// Exponential running average; the variance is stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let count = stats.count;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }

    fn graph(&self, g: &mut Graph, x: NodeId, ids: &Bound, prefix: &str, batch: bool) -> Result<(NodeId, Option<BatchStats>)> {
        let gamma = ids.get(&format!("{prefix}bn.gamma"));
        let beta = ids.get(&format!("{prefix}bn.beta"));
        if batch {
            let (id, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            Ok((id, Some(stats)))
        } else {
            let id = g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                BN_EPS,
            )?;
            Ok((id, None))
        }
    }
}

impl Params for BatchNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}bn.gamma"), &self.gamma, ParamKind::Affine);
        f(format!("{prefix}bn.beta"), &self.beta, ParamKind::Affine);
        f(format!("{prefix}bn.running_mean"), &self.running_mean, ParamKind::Buffer);
        f(format!("{prefix}bn.running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}bn.gamma"), &mut self.gamma, ParamKind::Affine);
        f(format!("{prefix}bn.beta"), &mut self.beta, ParamKind::Affine);
        f(format!("{prefix}bn.running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(format!("{prefix}bn.running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

/// Per-channel parametric activation with learnable input and output shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct RpreluParams {
    pub shift_in: RealTensor,
    pub slope: RealTensor,
    pub shift_out: RealTensor,
}

impl RpreluParams {
    pub fn new(c: usize) -> Self {
        Self {
            shift_in: RealTensor::zeros([c]),
            slope: RealTensor::full([c], RPRELU_INIT_SLOPE),
            shift_out: RealTensor::zeros([c]),
        }
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        dense::rprelu(x, self.shift_in.data(), self.slope.data(), self.shift_out.data())
    }

    fn graph(&self, g: &mut Graph, x: NodeId, ids: &Bound) -> Result<NodeId> {
        g.rprelu(x, ids.get("act.shift_in"), ids.get("act.slope"), ids.get("act.shift_out"))
    }
}

impl Params for RpreluParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}act.shift_in"), &self.shift_in, ParamKind::Affine);
        f(format!("{prefix}act.slope"), &self.slope, ParamKind::Affine);
        f(format!("{prefix}act.shift_out"), &self.shift_out, ParamKind::Affine);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}act.shift_in"), &mut self.shift_in, ParamKind::Affine);
        f(format!("{prefix}act.slope"), &mut self.slope, ParamKind::Affine);
        f(format!("{prefix}act.shift_out"), &mut self.shift_out, ParamKind::Affine);
    }
}

/// Input-conditioned threshold `β` and output bias `γ` of a conv block,
/// computed through a `c/4` bottleneck of globally pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicEmbeddingParams {
    /// `[c, c/4]`
    pub w1: RealTensor,
    pub b_alpha: RealTensor,
    /// `[c/4, c]`
    pub w2: RealTensor,
    pub b_beta: RealTensor,
    /// `[c/4, c_out]`
    pub w3: RealTensor,
    pub b_gamma: RealTensor,
}

impl DynamicEmbeddingParams {
    /// `W1` random, `W2`, `W3` and all biases zero, so a freshly attached
    /// embedding leaves its block's function unchanged.
    pub fn new(c: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if c == 0 || c % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "dynamic embeddings need channels divisible by 4, got {c}"
            )));
        }
        let q = c / 4;
        Ok(Self {
            w1: uniform_fan_in(&[c, q], c, rng),
            b_alpha: RealTensor::zeros([q]),
            w2: RealTensor::zeros([q, c]),
            b_beta: RealTensor::zeros([c]),
            w3: RealTensor::zeros([q, c_out]),
            b_gamma: RealTensor::zeros([c_out]),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w3.shape()[1]
    }

    fn graph(&self, g: &mut Graph, a: NodeId, ids: &Bound) -> Result<(NodeId, NodeId)> {
        let pooled = g.global_avg_pool(a)?;
        let alpha = g.linear(pooled, ids.get("dyn.w1"), Some(ids.get("dyn.b_alpha")))?;
        let beta = g.linear(alpha, ids.get("dyn.w2"), Some(ids.get("dyn.b_beta")))?;
        let gamma = g.linear(alpha, ids.get("dyn.w3"), Some(ids.get("dyn.b_gamma")))?;
        Ok((beta, gamma))
    }
}

impl Params for DynamicEmbeddingParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}dyn.w1"), &self.w1, ParamKind::Dense);
        f(format!("{prefix}dyn.b_alpha"), &self.b_alpha, ParamKind::Affine);
        f(format!("{prefix}dyn.w2"), &self.w2, ParamKind::Dense);
        f(format!("{prefix}dyn.b_beta"), &self.b_beta, ParamKind::Affine);
        f(format!("{prefix}dyn.w3"), &self.w3, ParamKind::Dense);
        f(format!("{prefix}dyn.b_gamma"), &self.b_gamma, ParamKind::Affine);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}dyn.w1"), &mut self.w1, ParamKind::Dense);
        f(format!("{prefix}dyn.b_alpha"), &mut self.b_alpha, ParamKind::Affine);
        f(format!("{prefix}dyn.w2"), &mut self.w2, ParamKind::Dense);
        f(format!("{prefix}dyn.b_beta"), &mut self.b_beta, ParamKind::Affine);
        f(format!("{prefix}dyn.w3"), &mut self.w3, ParamKind::Dense);
        f(format!("{prefix}dyn.b_gamma"), &mut self.b_gamma, ParamKind::Affine);
    }
}

/// Bottleneck features: `GAP(a)·W1 + b_α`, shape `[n, c/4]`.
pub fn dynamic_alpha(a: &RealTensor, p: &DynamicEmbeddingParams) -> Result<RealTensor> {
    let pooled = dense::global_avg_pool(a)?;
    dense::linear(&pooled, &p.w1, Some(p.b_alpha.data()))
}

/// Per-sample, per-channel thresholds `β = α·W2 + b_β`, shape `[n, c]`.
pub fn dynamic_thresholds(alpha: &RealTensor, p: &DynamicEmbeddingParams) -> Result<RealTensor> {
    dense::linear(alpha, &p.w2, Some(p.b_beta.data()))
}

/// Per-sample output bias `γ = α·W3 + b_γ`, shape `[n, c_out]`.
pub fn dynamic_gamma(alpha: &RealTensor, p: &DynamicEmbeddingParams) -> Result<RealTensor> {
    dense::linear(alpha, &p.w3, Some(p.b_gamma.data()))
}

/// Binary convolution against `±1` activations, in either weight mode.
/// Binary mode runs the packed XNOR kernel on `bits`.
fn binary_layer(
    bits: &crate::bits::BitTensor,
    weight: &RealTensor,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> Result<RealTensor> {
    match exec.weights {
        WeightMode::Binary => {
            let scale = weight_scale_with(weight, exec.scale_mode)?;
            binary_conv2d(bits, &pack_filters(weight)?, &scale, stride, pad)
        }
        WeightMode::Real => {
            let kernel = weight.shape()[2];
            let geom = ConvGeom { kernel, stride, pad, pad_value: -1.0 };
            dense::conv2d(&unpack(bits), weight, &geom, GemmOrder::Blocked)
        }
    }
}

/// Graph counterpart of [`binary_layer`] on `±1` activation nodes.
fn binary_layer_graph(
    g: &mut Graph,
    signs: NodeId,
    weight: NodeId,
    shadow: &RealTensor,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> Result<NodeId> {
    let kernel = shadow.shape()[2];
    let geom = ConvGeom { kernel, stride, pad, pad_value: -1.0 };
    match exec.weights {
        WeightMode::Binary => {
            let scale: ScaleVector = weight_scale_with(shadow, exec.scale_mode)?;
            let wb = g.binarize_weight(weight);
            let conv = g.conv2d(signs, wb, geom, GemmOrder::Blocked)?;
            g.scale_channels(conv, scale.as_slice().to_vec())
        }
        WeightMode::Real => g.conv2d(signs, weight, geom, GemmOrder::Blocked),
    }
}

/// Shortcut path: average-pooled when strided, channel-duplicated when the
/// block doubles its width.
fn skip_shape_check(cin: usize, cout: usize) -> Result<()> {
    if cout != cin && cout != 2 * cin {
        return Err(Error::Spec(format!(
            "binary block output channels must equal or double the input ({cin} -> {cout})"
        )));
    }
    Ok(())
}

fn skip(a: &RealTensor, stride: usize, cout: usize) -> Result<RealTensor> {
    let mut s = if stride == 2 { dense::avg_pool2(a)? } else { a.clone() };
    if s.shape()[1] != cout {
        s = dense::dup_channels(&s)?;
    }
    Ok(s)
}

fn skip_graph(g: &mut Graph, a: NodeId, stride: usize, cout: usize) -> Result<NodeId> {
    let mut s = if stride == 2 { g.avg_pool2(a)? } else { a };
    if g.value(s).shape()[1] != cout {
        s = g.dup_channels(s)?;
    }
    Ok(s)
}

/// Parameters of a binary convolution block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    /// Shadow weights `[c_out, c_in, k, k]`.
    pub weight: RealTensor,
    /// Static RSign threshold `[c_in]`.
    pub threshold: RealTensor,
    pub bn: BatchNormParams,
    pub act: RpreluParams,
    pub stride: usize,
    pub dynamic: Option<DynamicEmbeddingParams>,
}

impl ConvBlockParams {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, dynamic: bool, rng: &mut impl Rng) -> Result<Self> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::Spec(format!("binary conv stride must be 1 or 2, got {stride}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Spec(format!("binary conv kernel must be odd, got {kernel}")));
        }
        skip_shape_check(cin, cout)?;
        let weight = uniform_fan_in(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let dynamic = if dynamic {
            Some(DynamicEmbeddingParams::new(cin, cout, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            threshold: RealTensor::zeros([cin]),
            bn: BatchNormParams::identity(cout),
            act: RpreluParams::new(cout),
            stride,
            dynamic,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn pad(&self) -> usize {
        self.kernel() / 2
    }

    /// RSign thresholds for `a`: `θ` alone (`[c]`) or `θ + β(a)` (`[n, c]`),
    /// plus the dynamic alpha features when present.
    fn thresholds(&self, a: &RealTensor) -> Result<(Vec<f64>, Option<RealTensor>)> {
        match &self.dynamic {
            None => Ok((self.threshold.data().to_vec(), None)),
            Some(d) => {
                let alpha = dynamic_alpha(a, d)?;
                let beta = dynamic_thresholds(&alpha, d)?;
                let thr = dense::add_row(&beta, self.threshold.data())?;
                Ok((thr.into_data(), Some(alpha)))
            }
        }
    }

    /// Everything before normalization: `α ⊙ conv(sign(a − θ − β)) + γ`.
    pub fn pre_norm(&self, a: &RealTensor, exec: ExecMode) -> Result<RealTensor> {
        let (_, c, _, _) = a.nchw()?;
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "conv block expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let (thr, alpha) = self.thresholds(a)?;
        let bits = pack(a, &thr)?;
        let mut out = binary_layer(&bits, &self.weight, self.stride, self.pad(), exec)?;
        if let (Some(d), Some(alpha)) = (&self.dynamic, alpha) {
            out = dense::add_channel_bias(&out, &dynamic_gamma(&alpha, d)?)?;
        }
        Ok(out)
    }

    pub(crate) fn graph(
        &self,
        g: &mut Graph,
        a: NodeId,
        ids: &Bound,
        mode: GraphMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let threshold = ids.get("threshold");
        let (thr, gamma) = match &self.dynamic {
            None => (threshold, None),
            Some(d) => {
                let (beta, gamma) = d.graph(g, a, ids)?;
                (g.add_row(beta, threshold)?, Some(gamma))
            }
        };
        let signs = g.sign(a, Some(thr))?;
        let mut out = binary_layer_graph(g, signs, ids.get("weight"), &self.weight, self.stride, self.pad(), mode.exec)?;
        if let Some(gamma) = gamma {
            out = g.add_channel_bias(out, gamma)?;
        }
        let (normed, stats) = self.bn.graph(g, out, ids, "", mode.batch_stats)?;
        let s = skip_graph(g, a, self.stride, self.out_channels())?;
        let sum = g.add(normed, s)?;
        Ok((self.act.graph(g, sum, ids)?, stats))
    }
}

impl Params for ConvBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &self.weight, ParamKind::Binary);
        f(format!("{prefix}threshold"), &self.threshold, ParamKind::Affine);
        if let Some(d) = &self.dynamic {
            d.visit(prefix, f);
        }
        self.bn.visit(prefix, f);
        self.act.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &mut self.weight, ParamKind::Binary);
        f(format!("{prefix}threshold"), &mut self.threshold, ParamKind::Affine);
        if let Some(d) = &mut self.dynamic {
            d.visit_mut(prefix, f);
        }
        self.bn.visit_mut(prefix, f);
        self.act.visit_mut(prefix, f);
    }
}

/// Binary convolution block (evaluation mode).
pub fn binary_conv_block(a: &RealTensor, p: &ConvBlockParams, exec: ExecMode) -> Result<RealTensor> {
    let pre = p.pre_norm(a, exec)?;
    let normed = p.bn.forward(&pre)?;
    let sum = dense::add(&normed, &skip(a, p.stride, p.out_channels())?)?;
    p.act.forward(&sum)
}

/// Parameters of a three-branch binary MLP block.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlockParams {
    /// Shadow weights `[c, c, 1, 1]`, one per branch.
    pub weights: [RealTensor; 3],
    /// One shared RSign threshold `[c]`, or one per branch.
    pub thresholds: Vec<RealTensor>,
    pub ranges: [SamplingRange; 3],
    pub bn: BatchNormParams,
    pub act: RpreluParams,
}

impl MlpBlockParams {
    pub fn new(c: usize, ranges: [SamplingRange; 3], shared_threshold: bool, rng: &mut impl Rng) -> Result<Self> {
        if c == 0 || c % 4 != 0 {
            return Err(Error::Spec(format!("binary MLP blocks need channels divisible by 4, got {c}")));
        }
        let weights = [0, 1, 2].map(|_| uniform_fan_in(&[c, c, 1, 1], c, rng));
        let n_thr = if shared_threshold { 1 } else { 3 };
        Ok(Self {
            weights,
            thresholds: vec![RealTensor::zeros([c]); n_thr],
            ranges,
            bn: BatchNormParams::identity(c),
            act: RpreluParams::new(c),
        })
    }

    pub fn channels(&self) -> usize {
        self.weights[0].shape()[0]
    }

    fn threshold(&self, branch: usize) -> &RealTensor {
        &self.thresholds[if self.thresholds.len() == 1 { 0 } else { branch }]
    }

    fn threshold_name(&self, branch: usize) -> String {
        if self.thresholds.len() == 1 {
            "threshold".into()
        } else {
            format!("branch{branch}.threshold")
        }
    }

    fn check_input(&self, a: &RealTensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = a.nchw()?;
        if c != self.channels() {
            return Err(Error::dim(format!("MLP block expects {} channels, got {c}", self.channels())));
        }
        Ok((h, w))
    }

    /// Reconstructed binary tokens feeding each branch.
    fn branch_inputs(&self, a: &RealTensor) -> Result<Vec<crate::bits::BitTensor>> {
        let (h, w) = self.check_input(a)?;
        let shared = match self.thresholds.len() {
            1 => Some(pack(a, self.threshold(0).data())?),
            _ => None,
        };
        (0..3)
            .map(|b| {
                let bits = match &shared {
                    Some(bits) => bits.clone(),
                    None => pack(a, self.threshold(b).data())?,
                };
                match self.ranges[b] {
                    SamplingRange::Pointwise => Ok(bits),
                    r => reconstruct(&bits, &quartile_offsets(r, h, w)),
                }
            })
            .collect()
    }

    /// Unscaled XNOR counts of each branch (`sign(W)` against the
    /// reconstructed tokens), before any scaling or normalization.
    pub fn branch_counts(&self, a: &RealTensor) -> Result<[RealTensor; 3]> {
        let inputs = self.branch_inputs(a)?;
        let mut out = Vec::with_capacity(3);
        for (bits, w) in inputs.iter().zip(&self.weights) {
            let ones = ScaleVector::ones(self.channels());
            out.push(binary_conv2d(bits, &pack_filters(w)?, &ones, 1, 0)?);
        }
        Ok(out.try_into().expect("three branches"))
    }

    /// Per-branch outputs (scaled in binary mode) before summation.
    pub fn branch_outputs(&self, a: &RealTensor, exec: ExecMode) -> Result<[RealTensor; 3]> {
        let inputs = self.branch_inputs(a)?;
        let mut out = Vec::with_capacity(3);
        for (bits, w) in inputs.iter().zip(&self.weights) {
            out.push(binary_layer(bits, w, 1, 0, exec)?);
        }
        Ok(out.try_into().expect("three branches"))
    }

    /// Branch sum `(P + S) + L` before normalization.
    pub fn pre_norm(&self, a: &RealTensor, exec: ExecMode) -> Result<RealTensor> {
        let [p, s, l] = self.branch_outputs(a, exec)?;
        dense::add(&dense::add(&p, &s)?, &l)
    }

    pub(crate) fn graph(
        &self,
        g: &mut Graph,
        a: NodeId,
        ids: &Bound,
        mode: GraphMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (_, _, h, w) = g.value(a).nchw()?;
        let mut shared = None;
        let mut branches = Vec::with_capacity(3);
        for b in 0..3 {
            let signs = if self.thresholds.len() == 1 {
                match shared {
                    Some(s) => s,
                    None => {
                        let s = g.sign(a, Some(ids.get("threshold")))?;
                        shared = Some(s);
                        s
                    }
                }
            } else {
                g.sign(a, Some(ids.get(&self.threshold_name(b))))?
            };
            let tokens = match self.ranges[b] {
                SamplingRange::Pointwise => signs,
                r => g.shift(signs, quartile_offsets(r, h, w))?,
            };
            let weight = ids.get(&format!("branch{b}.weight"));
            branches.push(binary_layer_graph(g, tokens, weight, &self.weights[b], 1, 0, mode.exec)?);
        }
        let ps = g.add(branches[0], branches[1])?;
        let sum = g.add(ps, branches[2])?;
        let (normed, stats) = self.bn.graph(g, sum, ids, "", mode.batch_stats)?;
        let res = g.add(normed, a)?;
        Ok((self.act.graph(g, res, ids)?, stats))
    }
}

impl Params for MlpBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        for (b, w) in self.weights.iter().enumerate() {
            f(format!("{prefix}branch{b}.weight"), w, ParamKind::Binary);
        }
        for b in 0..self.thresholds.len() {
            f(format!("{prefix}{}", self.threshold_name(b)), &self.thresholds[b], ParamKind::Affine);
        }
        self.bn.visit(prefix, f);
        self.act.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        let names: Vec<String> = (0..self.thresholds.len()).map(|b| self.threshold_name(b)).collect();
        for (b, w) in self.weights.iter_mut().enumerate() {
            f(format!("{prefix}branch{b}.weight"), w, ParamKind::Binary);
        }
        for (name, t) in names.into_iter().zip(self.thresholds.iter_mut()) {
            f(format!("{prefix}{name}"), t, ParamKind::Affine);
        }
        self.bn.visit_mut(prefix, f);
        self.act.visit_mut(prefix, f);
    }
}

/// Three-branch binary MLP block (evaluation mode).
pub fn binary_mlp_block(a: &RealTensor, p: &MlpBlockParams, exec: ExecMode) -> Result<RealTensor> {
    let pre = p.pre_norm(a, exec)?;
    let normed = p.bn.forward(&pre)?;
    p.act.forward(&dense::add(&normed, a)?)
}

/// Full-precision shift of `x` for a branch range (identity for pointwise).
pub fn branch_shift(x: &RealTensor, range: SamplingRange) -> Result<RealTensor> {
    let (_, _, h, w) = x.nchw()?;
    match range {
        SamplingRange::Pointwise => Ok(x.clone()),
        r => shift_real(x, &quartile_offsets(r, h, w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PSL: [SamplingRange; 3] = [SamplingRange::Pointwise, SamplingRange::Short, SamplingRange::Long];

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> RealTensor {
        RealTensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn visit_orders_agree() {
        let mut r = rng();
        let mut p = ConvBlockParams::new(8, 16, 3, 2, true, &mut r).unwrap();
        let mut a = Vec::new();
        p.visit("x.", &mut |n, t, k| a.push((n, t.shape().to_vec(), k)));
        let mut b = Vec::new();
        p.visit_mut("x.", &mut |n, t, k| b.push((n, t.shape().to_vec(), k)));
        assert_eq!(a, b);
        let mut m = MlpBlockParams::new(8, PSL, false, &mut r).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        m.visit("", &mut |n, _, k| a.push((n, k)));
        m.visit_mut("", &mut |n, _, k| b.push((n, k)));
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 + 3 + 4 + 3);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut r = rng();
        let p = ConvBlockParams::new(4, 8, 3, 2, false, &mut r).unwrap();
        let x = random(&[2, 4, 8, 8], &mut r);
        let y = binary_conv_block(&x, &p, ExecMode::default()).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn zero_dynamic_embedding_is_identity() {
        let mut r = rng();
        let plain = ConvBlockParams::new(8, 8, 3, 1, false, &mut r).unwrap();
        let mut dynamic = plain.clone();
        dynamic.dynamic = Some(DynamicEmbeddingParams::new(8, 8, &mut r).unwrap());
        for _ in 0..5 {
            let x = random(&[3, 8, 5, 5], &mut r);
            for weights in [WeightMode::Real, WeightMode::Binary] {
                let exec = ExecMode { weights, ..Default::default() };
                assert_eq!(
                    binary_conv_block(&x, &plain, exec).unwrap(),
                    binary_conv_block(&x, &dynamic, exec).unwrap()
                );
            }
        }
    }

    #[test]
    fn dynamic_alpha_of_constant_input() {
        let mut r = rng();
        let mut d = DynamicEmbeddingParams::new(8, 8, &mut r).unwrap();
        d.w1 = random(&[8, 2], &mut r);
        let v = 0.75;
        let x = RealTensor::full([1, 8, 3, 3], v);
        let alpha = dynamic_alpha(&x, &d).unwrap();
        for j in 0..2 {
            let col: f64 = (0..8).map(|i| d.w1.data()[i * 2 + j]).sum();
            assert!((alpha.data()[j] - v * col).abs() < 1e-12);
        }
        let zero = dynamic_alpha(&RealTensor::zeros([2, 8, 3, 3]), &d).unwrap();
        assert!(zero.data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn uniform_bias_thresholds() {
        let mut r = rng();
        let mut d = DynamicEmbeddingParams::new(4, 4, &mut r).unwrap();
        d.b_beta = RealTensor::full([4], 0.3);
        d.b_gamma = RealTensor::full([4], -0.2);
        let alpha = random(&[2, 1], &mut r);
        assert!(dynamic_thresholds(&alpha, &d).unwrap().data().iter().all(|&v| v == 0.3));
        assert!(dynamic_gamma(&alpha, &d).unwrap().data().iter().all(|&v| v == -0.2));
        assert!(dynamic_thresholds(&random(&[2, 3], &mut r), &d).is_err());
    }

    #[test]
    fn constant_field_branches_agree() {
        let mut r = rng();
        let mut p = MlpBlockParams::new(8, PSL, true, &mut r).unwrap();
        let w = p.weights[0].clone();
        p.weights = [w.clone(), w.clone(), w];
        let x = RealTensor::from_fn([1, 8, 4, 4], |i| if (i / 16) % 3 == 0 { 0.5 } else { -0.5 });
        let [a, b, c] = p.branch_counts(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn nulled_context_branches_reduce_to_pointwise() {
        let mut r = rng();
        let mut p = MlpBlockParams::new(8, PSL, true, &mut r).unwrap();
        p.weights[1] = RealTensor::zeros([8, 8, 1, 1]);
        p.weights[2] = RealTensor::zeros([8, 8, 1, 1]);
        let x = random(&[2, 8, 4, 4], &mut r);
        let exec = ExecMode::default();
        let full = binary_mlp_block(&x, &p, exec).unwrap();
        let pointwise = binary_layer(&pack(&x, &[0.0]).unwrap(), &p.weights[0], 1, 0, exec).unwrap();
        let expect = p.act.forward(&dense::add(&p.bn.forward(&pointwise).unwrap(), &x).unwrap()).unwrap();
        assert_eq!(full, expect);
    }

    #[test]
    fn graph_eval_matches_direct_forward() {
        let mut r = rng();
        let mut conv = ConvBlockParams::new(8, 16, 3, 2, true, &mut r).unwrap();
        let d = conv.dynamic.as_mut().unwrap();
        d.w2 = random(&[2, 8], &mut r);
        d.w3 = random(&[2, 16], &mut r);
        conv.bn.running_mean = random(&[16], &mut r);
        let mlp = MlpBlockParams::new(16, PSL, false, &mut r).unwrap();
        let x = random(&[2, 8, 6, 6], &mut r);
        for weights in [WeightMode::Real, WeightMode::Binary] {
            let exec = ExecMode { weights, ..Default::default() };
            let direct = binary_mlp_block(&binary_conv_block(&x, &conv, exec).unwrap(), &mlp, exec).unwrap();
            let mut g = Graph::new();
            let mut next = 0;
            let cb = bind(&conv, &mut g, &mut next);
            let mb = bind(&mlp, &mut g, &mut next);
            let xi = g.input(x.clone());
            let mode = GraphMode { exec, batch_stats: false };
            let (y, _) = conv.graph(&mut g, xi, &cb, mode).unwrap();
            let (z, _) = mlp.graph(&mut g, y, &mb, mode).unwrap();
            assert_eq!(g.value(z), &direct);
        }
    }
}
