//! Executable networks assembled from a [`NetworkSpec`].

pub mod checkpoint;
pub mod presets;
pub mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Graph, NodeId};
use crate::blocks::{
    self, bind, binary_conv_block, binary_mlp_block, uniform_fan_in, BatchNormParams, ConvBlockParams, ExecMode,
    GraphMode, MlpBlockParams, ParamKind, Params, WeightMode,
};
use crate::dense::{self, ConvGeom, GemmOrder};
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub use checkpoint::Checkpoint;
pub use presets::{preset, PRESETS};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, ResolvedLayer, PSL, P_ONLY};

/// Full-precision input convolution with normalization and optional pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct StemParams {
    pub weight: RealTensor,
    pub bn: BatchNormParams,
    pub stride: usize,
    pub max_pool: bool,
}

impl StemParams {
    fn geom(&self) -> ConvGeom {
        let kernel = self.weight.shape()[2];
        ConvGeom { kernel, stride: self.stride, pad: kernel / 2, pad_value: 0.0 }
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let y = dense::conv2d(x, &self.weight, &self.geom(), GemmOrder::Sequential)?;
        let y = self.bn.forward(&y)?;
        if self.max_pool {
            Ok(dense::max_pool2(&y)?.0)
        } else {
            Ok(y)
        }
    }
}

impl Params for StemParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &self.weight, ParamKind::Dense);
        self.bn.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &mut self.weight, ParamKind::Dense);
        self.bn.visit_mut(prefix, f);
    }
}

/// Global average pooling followed by `x·W + b`, `W: [c, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: RealTensor,
    pub bias: RealTensor,
}

impl ClassifierParams {
    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        dense::linear(&dense::global_avg_pool(x)?, &self.weight, Some(self.bias.data()))
    }
}

impl Params for ClassifierParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &self.weight, ParamKind::Dense);
        f(format!("{prefix}bias"), &self.bias, ParamKind::Affine);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut RealTensor, ParamKind)) {
        f(format!("{prefix}weight"), &mut self.weight, ParamKind::Dense);
        f(format!("{prefix}bias"), &mut self.bias, ParamKind::Affine);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Stem(StemParams),
    Conv(ConvBlockParams),
    Mlp(MlpBlockParams),
    Classifier(ClassifierParams),
}

impl Layer {
    fn params(&self) -> &dyn Params {
        match self {
            Layer::Stem(p) => p,
            Layer::Conv(p) => p,
            Layer::Mlp(p) => p,
            Layer::Classifier(p) => p,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Params {
        match self {
            Layer::Stem(p) => p,
            Layer::Conv(p) => p,
            Layer::Mlp(p) => p,
            Layer::Classifier(p) => p,
        }
    }

    fn bn_mut(&mut self) -> Option<&mut BatchNormParams> {
        match self {
            Layer::Stem(p) => Some(&mut p.bn),
            Layer::Conv(p) => Some(&mut p.bn),
            Layer::Mlp(p) => Some(&mut p.bn),
            Layer::Classifier(_) => None,
        }
    }

    pub fn forward(&self, x: &RealTensor, exec: ExecMode) -> Result<RealTensor> {
        match self {
            Layer::Stem(p) => p.forward(x),
            Layer::Conv(p) => binary_conv_block(x, p, exec),
            Layer::Mlp(p) => binary_mlp_block(x, p, exec),
            Layer::Classifier(p) => p.forward(x),
        }
    }
}

/// Training progress recorded alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainMeta {
    /// 0 = untrained, 1 = binary activations only, 2 = fully binary.
    pub step: u32,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    resolved: Vec<ResolvedLayer>,
    layers: Vec<Layer>,
    pub weight_mode: WeightMode,
    pub meta: TrainMeta,
}

fn layer_prefix(i: usize) -> String {
    format!("layer{i:02}.")
}

impl Network {
    /// Builds and initializes a network. Parameters depend only on `spec`
    /// and `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let resolved = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(resolved.len());
        for r in &resolved {
            let l = &r.spec;
            let layer = match l.kind {
                LayerKind::StemConv => {
                    let k = l.kernel_size();
                    Layer::Stem(StemParams {
                        weight: uniform_fan_in(&[l.out_channels, l.in_channels, k, k], l.in_channels * k * k, &mut rng),
                        bn: BatchNormParams::identity(l.out_channels),
                        stride: l.stride,
                        max_pool: l.max_pool,
                    })
                }
                LayerKind::BinaryConv3x3 | LayerKind::BinaryConv1x1 | LayerKind::Downsample => {
                    Layer::Conv(ConvBlockParams::new(
                        l.in_channels,
                        l.out_channels,
                        l.kernel_size(),
                        l.stride,
                        l.dynamic,
                        &mut rng,
                    )?)
                }
                LayerKind::BinaryMlp => Layer::Mlp(MlpBlockParams::new(
                    l.in_channels,
                    l.branch_ranges(),
                    spec.shared_thresholds,
                    &mut rng,
                )?),
                LayerKind::Classifier => Layer::Classifier(ClassifierParams {
                    weight: uniform_fan_in(&[l.in_channels, l.out_channels], l.in_channels, &mut rng),
                    bias: RealTensor::zeros([l.out_channels]),
                }),
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            resolved,
            layers,
            weight_mode: WeightMode::Binary,
            meta: TrainMeta::default(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn resolved(&self) -> &[ResolvedLayer] {
        &self.resolved
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn exec_mode(&self) -> ExecMode {
        ExecMode {
            weights: self.weight_mode,
            scale_mode: self.spec.scale_mode,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        match *shape {
            [n, c, h, w] if n > 0 && c == s.input_channels && h == s.resolution && w == s.resolution => Ok(()),
            _ => Err(Error::dim(format!(
                "network `{}` expects input [n, {}, {}, {}], got {shape:?}",
                s.name, s.input_channels, s.resolution, s.resolution
            ))),
        }
    }

    /// Evaluation-mode logits `[n, classes]`.
    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        Ok(self.forward_trace(x)?.pop().expect("validated networks have layers"))
    }

    /// Output of every layer in order; the last entry is the logits.
    pub fn forward_trace(&self, x: &RealTensor) -> Result<Vec<RealTensor>> {
        self.check_input(x.shape())?;
        let exec = self.exec_mode();
        let mut outs: Vec<RealTensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outs.last().unwrap_or(x);
            let y = layer.forward(input, exec)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Builds the network on a tape. Parameter node `i` refers to the `i`-th
    /// entry of [`Network::trainable_mut`]. With `batch_stats` the returned
    /// vector holds one entry per normalized layer.
    pub fn graph_forward(&self, g: &mut Graph, x: NodeId, batch_stats: bool) -> Result<(NodeId, Vec<BatchStats>)> {
        self.check_input(g.value(x).shape())?;
        let mode = GraphMode {
            exec: self.exec_mode(),
            batch_stats,
        };
        let mut next = 0;
        let mut cur = x;
        let mut stats = Vec::new();
        for layer in &self.layers {
            let ids = bind(layer.params(), g, &mut next);
            let (out, s) = match layer {
                Layer::Stem(p) => {
                    let y = g.conv2d(cur, ids.get("weight"), p.geom(), GemmOrder::Sequential)?;
                    let bn_gamma = ids.get("bn.gamma");
                    let bn_beta = ids.get("bn.beta");
                    let (y, s) = if batch_stats {
                        let (y, s) = g.batch_norm_train(y, bn_gamma, bn_beta, blocks::BN_EPS)?;
                        (y, Some(s))
                    } else {
                        let bn = &p.bn;
                        let y = g.batch_norm_eval(
                            y,
                            bn_gamma,
                            bn_beta,
                            bn.running_mean.data(),
                            bn.running_var.data(),
                            blocks::BN_EPS,
                        )?;
                        (y, None)
                    };
                    let y = if p.max_pool { g.max_pool2(y)? } else { y };
                    (y, s)
                }
                Layer::Conv(p) => p.graph(g, cur, &ids, mode)?,
                Layer::Mlp(p) => p.graph(g, cur, &ids, mode)?,
                Layer::Classifier(_) => {
                    let pooled = g.global_avg_pool(cur)?;
                    (g.linear(pooled, ids.get("weight"), Some(ids.get("bias")))?, None)
                }
            };
            stats.extend(s);
            cur = out;
        }
        Ok((cur, stats))
    }

    /// Folds batch statistics from [`Network::graph_forward`] into the
    /// running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut bns: Vec<&mut BatchNormParams> = self.layers.iter_mut().filter_map(Layer::bn_mut).collect();
        if bns.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {} normalized layers",
                stats.len(),
                bns.len()
            )));
        }
        for (bn, s) in bns.iter_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    /// Every stored tensor with its qualified name.
    pub fn tensors(&self) -> Vec<(String, &RealTensor, ParamKind)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params().visit(&layer_prefix(i), &mut |n, t, k| out.push((n, t, k)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut RealTensor, ParamKind)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.params_mut().visit_mut(&layer_prefix(i), &mut |n, t, k| out.push((n, t, k)));
        }
        out
    }

    /// Trainable tensors in graph parameter order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut RealTensor, ParamKind)> {
        self.tensors_mut().into_iter().filter(|(_, _, k)| k.trainable()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, _, k)| k.trainable())
            .map(|(_, t, _)| t.len())
            .sum()
    }

    /// MLP blocks with their layer indices, in depth order.
    pub fn mlp_blocks(&self) -> Vec<(usize, &MlpBlockParams)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Mlp(p) => Some((i, p)),
                _ => None,
            })
            .collect()
    }

    /// Copies tensors from a checkpoint. With `strict`, the checkpoint must
    /// hold exactly this network's spec. Otherwise every checkpoint tensor
    /// must exist here with the same shape, and tensors absent from the
    /// checkpoint keep their current values (used to attach dynamic
    /// embeddings to a trained network). Returns the names left untouched.
    pub fn load_state(&mut self, ckpt: &Checkpoint, strict: bool) -> Result<Vec<String>> {
        if strict && ckpt.spec.hash()? != self.spec.hash()? {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained for `{}`, not `{}`",
                ckpt.spec.name, self.spec.name
            )));
        }
        let mut targets = self.tensors_mut();
        for (name, t) in &ckpt.tensors {
            let slot = targets
                .iter_mut()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Incompatible(format!("network has no tensor `{name}`")))?;
            if slot.1.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint and {:?} in the network",
                    t.shape(),
                    slot.1.shape()
                )));
            }
            slot.1.data_mut().copy_from_slice(t.data());
        }
        let untouched: Vec<String> = targets
            .iter()
            .filter(|(n, _, _)| !ckpt.tensors.iter().any(|(c, _)| c == n))
            .map(|(n, _, _)| n.clone())
            .collect();
        if strict && !untouched.is_empty() {
            return Err(Error::Incompatible(format!("checkpoint lacks {} tensors", untouched.len())));
        }
        drop(targets);
        self.weight_mode = ckpt.weight_mode;
        self.meta = ckpt.meta;
        Ok(untouched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(net: &Network, n: usize, seed: u64) -> RealTensor {
        let s = net.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealTensor::from_fn([n, s.input_channels, s.resolution, s.resolution], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = preset("desk-tiny").unwrap();
        assert_eq!(Network::build(&spec, 3).unwrap(), Network::build(&spec, 3).unwrap());
        assert_ne!(Network::build(&spec, 3).unwrap(), Network::build(&spec, 4).unwrap());
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let spec = preset("desk-tiny").unwrap();
        let mut net = Network::build(&spec, 1).unwrap();
        if let Some(Layer::Classifier(c)) = net.layers_mut().last_mut() {
            c.weight.data_mut().fill(0.0);
        }
        let y = net.forward(&random_input(&net, 2, 0)).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_samples_identical_logits() {
        let spec = preset("desk-tiny").unwrap();
        let net = Network::build(&spec, 1).unwrap();
        let one = random_input(&net, 1, 5);
        let two = RealTensor::new([2, 3, 32, 32], [one.data(), one.data()].concat()).unwrap();
        let y = net.forward(&two).unwrap();
        assert_eq!(y.sample(0), y.sample(1));
    }

    #[test]
    fn rejects_wrong_resolution() {
        let net = Network::build(&preset("desk-tiny").unwrap(), 1).unwrap();
        assert!(matches!(net.forward(&RealTensor::zeros([1, 3, 28, 28])), Err(Error::Dimension(_))));
    }

    #[test]
    fn graph_eval_equals_forward_in_both_modes() {
        let mut net = Network::build(&preset("desk-tiny").unwrap(), 2).unwrap();
        let x = random_input(&net, 3, 9);
        for mode in [WeightMode::Real, WeightMode::Binary] {
            net.weight_mode = mode;
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let (y, stats) = net.graph_forward(&mut g, xi, false).unwrap();
            assert!(stats.is_empty());
            assert_eq!(g.value(y), &net.forward(&x).unwrap());
        }
    }

    #[test]
    fn parameter_nodes_follow_trainable_order() {
        let mut net = Network::build(&preset("desk-tiny").unwrap(), 2).unwrap();
        let x = random_input(&net, 2, 0);
        let mut g = Graph::new();
        let xi = g.input(x);
        let (y, stats) = net.graph_forward(&mut g, xi, true).unwrap();
        assert_eq!(stats.len(), 8);
        let loss = g.cross_entropy(y, vec![0.1; 20]).unwrap();
        let mut params: Vec<&mut RealTensor> = net.trainable_mut().into_iter().map(|(_, t, _)| t).collect();
        // backward fails on any length mismatch between node and parameter
        g.backward(loss, &mut params).unwrap();
        assert!(params.iter().all(|t| t.grad.is_some()));
    }
}
