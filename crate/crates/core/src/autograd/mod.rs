//! Minimal reverse-mode differentiation for the binary network operator set.
//!
//! A [`Graph`] is a define-by-run tape: every operation evaluates eagerly and
//! appends a node whose parents were created earlier, so creation order is a
//! topological order. [`Graph::backward`] walks the tape once in reverse.
//! Learnable tensors enter through [`Graph::param`] and receive their
//! gradient in [`RealTensor::grad`]; repeated backward passes accumulate.

pub mod ste;

use crate::blocks::sampling::{shift_real, shift_real_adjoint, SamplingOffset};
use crate::dense::{self, col2im, conv2d_with_cols, gemm, nchw_to_flat, ConvDims, ConvGeom, GemmOrder, MatRef};
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub use ste::{qb_backward, qb_forward, sign_ste, LearnableThreshold, SignSteBackward};

use ste::qb_grad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward rule for sign-type nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignForward {
    /// `x ≤ threshold → -1`, else `+1`.
    #[default]
    Hard,
    /// The polynomial surrogate `qb(x − threshold)`, used for numerical
    /// gradient checks (its derivative is exactly the backward rule).
    Polynomial,
}

/// Operator tag plus whatever its backward rule needs.
#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Sign {
        x: NodeId,
        thr: Option<NodeId>,
        diff: Vec<f64>,
    },
    BinarizeWeight {
        w: NodeId,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
        dims: ConvDims,
        col: Vec<f64>,
    },
    ScaleChannels {
        x: NodeId,
        scale: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    RPrelu {
        x: NodeId,
        shift_in: NodeId,
        slope: NodeId,
        shift_out: NodeId,
    },
    AvgPool2 {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    DupChannels {
        x: NodeId,
    },
    Shift {
        x: NodeId,
        offsets: [SamplingOffset; 4],
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    AddChannelBias {
        x: NodeId,
        v: NodeId,
    },
    AddRow {
        m: NodeId,
        v: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: RealTensor,
}

/// Batch statistics computed by a training-mode normalization node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Values per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sign_forward: SignForward,
}

/// Gradients of every node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn channel_inner(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h * w),
        [n, c] => (n, c, 1),
        _ => unreachable!("validated at node creation"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sign_forward(sign_forward: SignForward) -> Self {
        Self {
            nodes: Vec::new(),
            sign_forward,
        }
    }

    pub fn sign_forward(&self) -> SignForward {
        self.sign_forward
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &RealTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: RealTensor) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients stop here but remain queryable.
    pub fn input(&mut self, value: RealTensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Learnable tensor `index` of the parameter list handed to
    /// [`Graph::backward`].
    pub fn param(&mut self, index: usize, value: &RealTensor) -> NodeId {
        let mut v = value.clone();
        v.grad = None;
        self.push(Op::Param(index), v)
    }

    /// Binarizes activations against an optional threshold node of shape
    /// `[c]` (per channel) or `[n, c]` (per sample and channel).
    pub fn sign(&mut self, x: NodeId, thr: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if !matches!(shape.len(), 2 | 4) {
            return Err(Error::dim(format!("sign expects NCHW or [n, c], got {shape:?}")));
        }
        let (n, c, inner) = channel_inner(&shape);
        let diff: Vec<f64> = match thr {
            None => xv.data().to_vec(),
            Some(t) => {
                let tv = self.value(t).data();
                let per_sample = match self.value(t).shape() {
                    [tc] if *tc == c => false,
                    [tn, tc] if *tn == n && *tc == c => true,
                    s => {
                        return Err(Error::dim(format!(
                            "threshold {s:?} does not fit input {shape:?}"
                        )))
                    }
                };
                xv.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / inner) % c;
                        let t = if per_sample { tv[(i / (inner * c)) * c + ch] } else { tv[ch] };
                        v - t
                    })
                    .collect()
            }
        };
        let out: Vec<f64> = match self.sign_forward {
            SignForward::Hard => diff.iter().map(|&d| if d > 0.0 { 1.0 } else { -1.0 }).collect(),
            SignForward::Polynomial => diff.iter().map(|&d| qb_forward(d)).collect(),
        };
        let value = RealTensor::new(shape, out)?;
        Ok(self.push(Op::Sign { x, thr, diff }, value))
    }

    /// Weight binarization with the straight-through estimator.
    pub fn binarize_weight(&mut self, w: NodeId) -> NodeId {
        let wv = self.value(w);
        let out: Vec<f64> = match self.sign_forward {
            SignForward::Hard => wv.data().iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect(),
            SignForward::Polynomial => wv.data().iter().map(|&v| qb_forward(v)).collect(),
        };
        let value = RealTensor::new(wv.shape().to_vec(), out).expect("same shape");
        self.push(Op::BinarizeWeight { w }, value)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geom: ConvGeom, order: GemmOrder) -> Result<NodeId> {
        let (value, col, dims) = conv2d_with_cols(self.value(x), self.value(w), &geom, order)?;
        Ok(self.push(Op::Conv { x, w, geom, dims, col }, value))
    }

    /// Multiplies channels by constants (treated as detached).
    pub fn scale_channels(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId> {
        let value = dense::scale_channels(self.value(x), &scale)?;
        Ok(self.push(Op::ScaleChannels { x, scale }, value))
    }

    /// Normalization with statistics of the current batch. Returns the node
    /// and the (biased) batch mean/variance for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let d = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..n {
                acc += d[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = acc / count;
            let mut sq = 0.0;
            for s in 0..n {
                sq += d[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = sq / count;
        }
        let id = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((id, BatchStats { mean, var, count: n * hw }))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::dim(format!("normalization parameters do not match {c} channels")));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + b[ch];
                }
            }
        }
        let value = RealTensor::new([n, c, h, w], out)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            value,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = dense::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn rprelu(&mut self, x: NodeId, shift_in: NodeId, slope: NodeId, shift_out: NodeId) -> Result<NodeId> {
        let value = dense::rprelu(
            self.value(x),
            self.value(shift_in).data(),
            self.value(slope).data(),
            self.value(shift_out).data(),
        )?;
        Ok(self.push(
            Op::RPrelu {
                x,
                shift_in,
                slope,
                shift_out,
            },
            value,
        ))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = dense::avg_pool2(self.value(x))?;
        Ok(self.push(Op::AvgPool2 { x }, value))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = dense::max_pool2(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    pub fn dup_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let value = dense::dup_channels(self.value(x))?;
        Ok(self.push(Op::DupChannels { x }, value))
    }

    /// Quartile token shift (see [`crate::blocks::sampling`]).
    pub fn shift(&mut self, x: NodeId, offsets: [SamplingOffset; 4]) -> Result<NodeId> {
        let value = shift_real(self.value(x), &offsets)?;
        Ok(self.push(Op::Shift { x, offsets }, value))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = dense::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool { x }, value))
    }

    /// `x·w (+ b)` with `x: [n, k]`, `w: [k, m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = dense::linear(self.value(x), self.value(w), b.map(|b| self.value(b).data()))?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Adds `v: [n, c]` over every position of NCHW `x`.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let value = dense::add_channel_bias(self.value(x), self.value(v))?;
        Ok(self.push(Op::AddChannelBias { x, v }, value))
    }

    /// `m[i, j] + v[j]`.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let value = dense::add_row(self.value(m), self.value(v).data())?;
        Ok(self.push(Op::AddRow { m, v }, value))
    }

    /// Mean cross-entropy of `logits: [n, k]` against target distributions
    /// (row-major `[n, k]`, each row summing to one).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = lv.matrix_dims()?;
        if targets.len() != n * k {
            return Err(Error::dim(format!("{} targets for logits {:?}", targets.len(), lv.shape())));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[i * k + j] = logp.exp();
                loss -= targets[i * k + j] * logp;
            }
        }
        let value = RealTensor::new([1], vec![loss / n as f64])?;
        Ok(self.push(Op::CrossEntropy { logits, targets, probs }, value))
    }

    /// `Σ weights_i · x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::dim(format!("{} weights for {} values", weights.len(), xv.len())));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let value = RealTensor::new([1], vec![s])?;
        Ok(self.push(Op::WeightedSum { x, weights }, value))
    }

    /// Reverse pass from a scalar `root`. Parameter gradients are added to
    /// `params[i].grad`; node gradients are returned.
    pub fn backward(&self, root: NodeId, params: &mut [&mut RealTensor]) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            self.backward_node(id, &up, &mut grads, params)?;
            grads[id] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        id: usize,
        up: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut [&mut RealTensor],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let mut acc = |target: NodeId, g: Vec<f64>| {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                let t = params.get_mut(*p).ok_or_else(|| {
                    Error::InvalidArgument(format!("parameter index {p} outside the supplied list"))
                })?;
                if t.len() != up.len() {
                    return Err(Error::dim(format!("parameter {p} changed shape during backward")));
                }
                t.accumulate_grad(up);
            }
            Op::Sign { x, thr, diff } => {
                let gx: Vec<f64> = diff.iter().zip(up).map(|(&d, &u)| qb_backward(d, u)).collect();
                if let Some(t) = thr {
                    let (_, c, inner) = channel_inner(node.value.shape());
                    let tlen = self.value(*t).len();
                    let mut gt = vec![0.0; tlen];
                    for (i, g) in gx.iter().enumerate() {
                        let ch = (i / inner) % c;
                        let slot = if tlen == c { ch } else { (i / (inner * c)) * c + ch };
                        gt[slot] -= g;
                    }
                    acc(*t, gt);
                }
                acc(*x, gx);
            }
            Op::BinarizeWeight { w } => {
                let wv = self.value(*w).data();
                acc(*w, wv.iter().zip(up).map(|(&v, &u)| qb_grad(v) * u).collect());
            }
            Op::Conv { x, w, geom, dims, col } => {
                let taps = dims.taps(geom.kernel);
                let ncols = dims.cols();
                let up_flat = nchw_to_flat(up, dims);
                let mut gw = vec![0.0; dims.co * taps];
                gemm(
                    MatRef::new(&up_flat, dims.co, ncols),
                    MatRef::t(col, ncols, taps),
                    &mut gw,
                    0.0,
                    GemmOrder::Blocked,
                );
                let mut gcol = vec![0.0; taps * ncols];
                gemm(
                    MatRef::t(self.value(*w).data(), taps, dims.co),
                    MatRef::new(&up_flat, dims.co, ncols),
                    &mut gcol,
                    0.0,
                    GemmOrder::Blocked,
                );
                let mut gx = vec![0.0; self.value(*x).len()];
                col2im(&gcol, dims, geom, &mut gx);
                acc(*w, gw);
                acc(*x, gx);
            }
            Op::ScaleChannels { x, scale } => {
                let (_, c, inner) = channel_inner(node.value.shape());
                acc(
                    *x,
                    up.iter().enumerate().map(|(i, u)| u * scale[(i / inner) % c]).collect(),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = channel_inner(node.value.shape());
                let g = self.value(*gamma).data();
                let count = (n * inner) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, u) in up.iter().enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += u * xhat[i];
                    dbeta[ch] += u;
                }
                let mut gx = vec![0.0; up.len()];
                for (i, gxi) in gx.iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    *gxi = if *batch_stats {
                        g[ch] * inv_std[ch] / count * (count * up[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    } else {
                        up[i] * g[ch] * inv_std[ch]
                    };
                }
                acc(*x, gx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Add { a, b } => {
                acc(*a, up.to_vec());
                acc(*b, up.to_vec());
            }
            Op::RPrelu {
                x,
                shift_in,
                slope,
                shift_out,
            } => {
                let (_, c, inner) = channel_inner(node.value.shape());
                let xv = self.value(*x).data();
                let (si, sl) = (self.value(*shift_in).data(), self.value(*slope).data());
                let mut gx = vec![0.0; up.len()];
                let mut gsi = vec![0.0; c];
                let mut gsl = vec![0.0; c];
                let mut gso = vec![0.0; c];
                for (i, &u) in up.iter().enumerate() {
                    let ch = (i / inner) % c;
                    let z = xv[i] - si[ch];
                    let dz = if z > 0.0 { u } else { u * sl[ch] };
                    gx[i] = dz;
                    gsi[ch] -= dz;
                    if z <= 0.0 {
                        gsl[ch] += u * z;
                    }
                    gso[ch] += u;
                }
                acc(*x, gx);
                acc(*shift_in, gsi);
                acc(*slope, gsl);
                acc(*shift_out, gso);
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).nchw()?;
                let (ho, wo) = (dense::pool_out(h), dense::pool_out(w));
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let ys = 2 * oy..(2 * oy + 2).min(h);
                            let xs = 2 * ox..(2 * ox + 2).min(w);
                            let cnt = (ys.len() * xs.len()) as f64;
                            let g = up[(p * ho + oy) * wo + ox] / cnt;
                            for y in ys {
                                for xx in xs.clone() {
                                    gx[(p * h + y) * w + xx] += g;
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += up[o];
                }
                acc(*x, gx);
            }
            Op::DupChannels { x } => {
                let (n, c, h, w) = self.value(*x).nchw()?;
                let per = c * h * w;
                let mut gx = vec![0.0; n * per];
                for s in 0..n {
                    for i in 0..per {
                        gx[s * per + i] = up[s * 2 * per + i] + up[s * 2 * per + per + i];
                    }
                }
                acc(*x, gx);
            }
            Op::Shift { x, offsets } => {
                let shape = self.value(*x).nchw()?;
                acc(*x, shift_real_adjoint(up, shape, offsets));
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).nchw()?;
                let hw = h * w;
                let gx = (0..up.len() * hw).map(|i| up[i / hw] / hw as f64).collect();
                acc(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).matrix_dims()?;
                let m = self.value(*w).matrix_dims()?.1;
                let mut gx = vec![0.0; n * k];
                gemm(
                    MatRef::new(up, n, m),
                    MatRef::t(self.value(*w).data(), m, k),
                    &mut gx,
                    0.0,
                    GemmOrder::Blocked,
                );
                let mut gw = vec![0.0; k * m];
                gemm(
                    MatRef::t(self.value(*x).data(), k, n),
                    MatRef::new(up, n, m),
                    &mut gw,
                    0.0,
                    GemmOrder::Blocked,
                );
                if let Some(b) = b {
                    let mut gb = vec![0.0; m];
                    for row in up.chunks(m) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, gb);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::AddChannelBias { x, v } => {
                let (_, _, h, w) = node.value.nchw()?;
                let hw = h * w;
                let gv = up.chunks(hw).map(|c| c.iter().sum()).collect();
                acc(*x, up.to_vec());
                acc(*v, gv);
            }
            Op::AddRow { m, v } => {
                let c = self.value(*v).len();
                let mut gv = vec![0.0; c];
                for row in up.chunks(c) {
                    for (a, u) in gv.iter_mut().zip(row) {
                        *a += u;
                    }
                }
                acc(*m, up.to_vec());
                acc(*v, gv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).shape()[0] as f64;
                let g = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| up[0] * (p - t) / n)
                    .collect();
                acc(*logits, g);
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|w| w * up[0]).collect());
            }
        }
        Ok(())
    }
}
