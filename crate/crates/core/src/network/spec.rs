//! Declarative architecture description and shape resolution.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bits::{conv_out_dim, ScaleMode};
use crate::blocks::sampling::SamplingRange;
use crate::error::{Error, Result};

pub const PSL: [SamplingRange; 3] = [SamplingRange::Pointwise, SamplingRange::Short, SamplingRange::Long];
pub const P_ONLY: [SamplingRange; 3] = [SamplingRange::Pointwise; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Full-precision input convolution followed by normalization.
    StemConv,
    BinaryConv3x3,
    BinaryConv1x1,
    BinaryMlp,
    /// Stride-2 binary 3x3 convolution; never replaced by MLP blocks.
    Downsample,
    /// Global average pooling and a full-precision linear layer.
    Classifier,
}

impl LayerKind {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            LayerKind::BinaryConv3x3 | LayerKind::BinaryConv1x1 | LayerKind::BinaryMlp | LayerKind::Downsample
        )
    }

    pub fn is_binary_conv(self) -> bool {
        matches!(self, LayerKind::BinaryConv3x3 | LayerKind::BinaryConv1x1 | LayerKind::Downsample)
    }

    pub fn label(self) -> &'static str {
        match self {
            LayerKind::StemConv => "stem",
            LayerKind::BinaryConv3x3 => "conv3x3",
            LayerKind::BinaryConv1x1 => "conv1x1",
            LayerKind::BinaryMlp => "mlp",
            LayerKind::Downsample => "downsample",
            LayerKind::Classifier => "classifier",
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_false(v: &bool) -> bool {
    !*v
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    /// Dynamic threshold/bias embeddings (binary conv kinds only).
    #[serde(default, skip_serializing_if = "is_false")]
    pub dynamic: bool,
    /// Branch ranges of an MLP block; P-S-L when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<[SamplingRange; 3]>,
    /// Stem kernel size; 3 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// 2x2 max pooling after the stem.
    #[serde(default, skip_serializing_if = "is_false")]
    pub max_pool: bool,
}

impl LayerSpec {
    fn new(kind: LayerKind, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            kind,
            in_channels: cin,
            out_channels: cout,
            stride,
            dynamic: false,
            ranges: None,
            kernel: None,
            max_pool: false,
        }
    }

    pub fn stem(cin: usize, cout: usize, kernel: usize, stride: usize, max_pool: bool) -> Self {
        Self {
            kernel: Some(kernel),
            max_pool,
            ..Self::new(LayerKind::StemConv, cin, cout, stride)
        }
    }

    pub fn conv3x3(c: usize) -> Self {
        Self::new(LayerKind::BinaryConv3x3, c, c, 1)
    }

    pub fn conv1x1(cin: usize, cout: usize) -> Self {
        Self::new(LayerKind::BinaryConv1x1, cin, cout, 1)
    }

    pub fn downsample(cin: usize, cout: usize) -> Self {
        Self::new(LayerKind::Downsample, cin, cout, 2)
    }

    pub fn mlp(c: usize, ranges: [SamplingRange; 3]) -> Self {
        Self {
            ranges: Some(ranges),
            ..Self::new(LayerKind::BinaryMlp, c, c, 1)
        }
    }

    pub fn classifier(c: usize, classes: usize) -> Self {
        Self::new(LayerKind::Classifier, c, classes, 1)
    }

    pub fn with_dynamic(mut self, dynamic: bool) -> Self {
        self.dynamic = dynamic;
        self
    }

    pub fn branch_ranges(&self) -> [SamplingRange; 3] {
        self.ranges.unwrap_or(PSL)
    }

    /// Output `(c, h, w)` for input `(c, h, w)`, checking every constraint
    /// local to this layer.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let err = |msg: String| Err(Error::Spec(msg));
        let (c, h, w) = input;
        if self.in_channels != c {
            return err(format!("expects {} input channels, previous layer gives {c}", self.in_channels));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.dynamic && !self.kind.is_binary_conv() {
            return err("dynamic embeddings only attach to binary conv layers".into());
        }
        if self.dynamic && c % 4 != 0 {
            return err(format!("dynamic embeddings need channels divisible by 4, got {c}"));
        }
        if self.ranges.is_some() && self.kind != LayerKind::BinaryMlp {
            return err("sampling ranges only apply to MLP blocks".into());
        }
        if (self.kernel.is_some() || self.max_pool) && self.kind != LayerKind::StemConv {
            return err("kernel and max_pool only apply to the stem".into());
        }
        let k = self.kernel_size();
        match self.kind {
            LayerKind::StemConv => {
                if k % 2 == 0 {
                    return err(format!("stem kernel must be odd, got {k}"));
                }
                let mut ho = conv_out_dim(h, k, self.stride, k / 2)?;
                let mut wo = conv_out_dim(w, k, self.stride, k / 2)?;
                if self.max_pool {
                    ho = ho.div_ceil(2);
                    wo = wo.div_ceil(2);
                }
                Ok((self.out_channels, ho, wo))
            }
            LayerKind::BinaryConv3x3 | LayerKind::BinaryConv1x1 | LayerKind::Downsample => {
                if self.out_channels != c && self.out_channels != 2 * c {
                    return err(format!(
                        "output channels must equal or double the input ({c} -> {})",
                        self.out_channels
                    ));
                }
                match (self.kind, self.stride) {
                    (LayerKind::Downsample, 2) | (LayerKind::BinaryConv3x3, 1 | 2) | (LayerKind::BinaryConv1x1, 1) => {}
                    (_, s) => return err(format!("stride {s} is not allowed for this kind")),
                }
                Ok((
                    self.out_channels,
                    conv_out_dim(h, k, self.stride, k / 2)?,
                    conv_out_dim(w, k, self.stride, k / 2)?,
                ))
            }
            LayerKind::BinaryMlp => {
                if self.out_channels != c || self.stride != 1 {
                    return err("MLP blocks preserve channels and resolution".into());
                }
                if c % 4 != 0 {
                    return err(format!("channels must be divisible by 4, got {c}"));
                }
                if h < 2 || w < 2 {
                    return err(format!("MLP blocks need at least a 2x2 map, got {h}x{w}"));
                }
                Ok(input)
            }
            LayerKind::Classifier => {
                if self.stride != 1 {
                    return err("the classifier has no stride".into());
                }
                Ok((self.out_channels, 1, 1))
            }
        }
    }

    /// Spatial kernel size of the layer's main operator.
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::StemConv => self.kernel.unwrap_or(3),
            LayerKind::BinaryConv3x3 | LayerKind::Downsample => 3,
            LayerKind::BinaryConv1x1 | LayerKind::BinaryMlp | LayerKind::Classifier => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    /// Square input resolution.
    pub resolution: usize,
    pub classes: usize,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// One RSign threshold per MLP block (true) or one per branch (false).
    #[serde(default = "yes")]
    pub shared_thresholds: bool,
    pub layers: Vec<LayerSpec>,
}

/// Layer with its resolved input and output `(c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub index: usize,
    pub spec: LayerSpec,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

impl NetworkSpec {
    /// Walks the layer list, checking every local constraint and the
    /// channel/resolution chain.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let mut cur = (self.input_channels, self.resolution, self.resolution);
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, l) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Spec(format!("layer {index} ({}): {msg}", l.kind.label()));
            if l.kind == LayerKind::StemConv && index != 0 {
                return Err(err("the stem must be the first layer".into()));
            }
            if l.kind == LayerKind::Classifier {
                if index + 1 != self.layers.len() {
                    return Err(err("the classifier must be the last layer".into()));
                }
                if l.out_channels != self.classes {
                    return Err(err(format!("produces {} outputs for {} classes", l.out_channels, self.classes)));
                }
            }
            let output = l.output_shape(cur).map_err(|e| match e {
                Error::Spec(m) => err(m),
                other => err(other.to_string()),
            })?;
            out.push(ResolvedLayer {
                index,
                spec: l.clone(),
                input: cur,
                output,
            });
            cur = output;
        }
        Ok(out)
    }

    /// Full validation for building an executable network: a valid chain
    /// that starts with a stem and ends with a classifier.
    pub fn validate(&self) -> Result<Vec<ResolvedLayer>> {
        let resolved = self.resolve()?;
        match (self.layers.first(), self.layers.last()) {
            (Some(f), Some(l)) if f.kind == LayerKind::StemConv && l.kind == LayerKind::Classifier => {}
            _ => {
                return Err(Error::Spec(
                    "a network starts with a stem conv and ends with a classifier".into(),
                ))
            }
        }
        Ok(resolved)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(format!("cannot serialize spec: {e}")))
    }

    /// Parses a spec, reporting the key path of schema errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    /// Stable 64-bit digest of the canonical serialization.
    pub fn hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    /// Replaces the 3x3 conv at `index` with `count` MLP blocks of the same
    /// width. Only stride-1, width-preserving 3x3 convs can be replaced.
    pub fn replace_with_mlp(&self, index: usize, count: usize, ranges: [SamplingRange; 3]) -> Result<Self> {
        let l = self
            .layers
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {index}")))?;
        if !is_replaceable(l) {
            return Err(Error::InvalidArgument(format!(
                "layer {index} ({}) cannot be replaced by MLP blocks",
                l.kind.label()
            )));
        }
        if l.in_channels % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {index} has {} channels, not divisible by 4",
                l.in_channels
            )));
        }
        let mut out = self.clone();
        let mlp = LayerSpec::mlp(l.in_channels, ranges);
        out.layers.splice(index..=index, std::iter::repeat(mlp).take(count));
        Ok(out)
    }

    /// Indices of layers that [`NetworkSpec::replace_with_mlp`] accepts.
    pub fn replaceable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| is_replaceable(l) && l.in_channels % 4 == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    /// Attaches dynamic embeddings to every binary conv layer except those
    /// fed directly by an MLP block.
    pub fn with_dynamic_convs(mut self) -> Self {
        let mut prev_mlp = false;
        for l in &mut self.layers {
            if l.kind.is_binary_conv() {
                l.dynamic = !prev_mlp;
            }
            prev_mlp = l.kind == LayerKind::BinaryMlp;
        }
        self
    }

    /// Applies one set of branch ranges to every MLP block.
    pub fn with_mlp_ranges(mut self, ranges: [SamplingRange; 3]) -> Self {
        for l in &mut self.layers {
            if l.kind == LayerKind::BinaryMlp {
                l.ranges = Some(ranges);
            }
        }
        self
    }
}

fn is_replaceable(l: &LayerSpec) -> bool {
    l.kind == LayerKind::BinaryConv3x3 && l.stride == 1 && l.in_channels == l.out_channels
}
