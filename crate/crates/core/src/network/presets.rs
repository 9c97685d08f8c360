//! Built-in architectures.
//!
//! The ImageNet-scale presets follow a MobileNet-V1 style CNN stage (a 3x3
//! binary conv followed by a 1x1 binary conv per block) with nine MLP blocks
//! replacing the 3x3 convs of the two last 14x14 blocks and the final 7x7
//! block. The tail width is 1024.

use super::spec::{LayerSpec, NetworkSpec, PSL, P_ONLY};
use crate::bits::ScaleMode;
use crate::error::{Error, Result};

pub const PRESETS: &[&str] = &[
    "reactnet-a-like",
    "bcdnet-a-like",
    "bcdnet-b-like",
    "reactnet18-like",
    "reactnet18-mlp-like",
    "desk-tiny",
    "desk-tiny-p-only",
    "desk-tiny-conv",
];

pub fn preset(name: &str) -> Result<NetworkSpec> {
    match name {
        "reactnet-a-like" => Ok(mobilenet_stage("reactnet-a-like", 0, false)),
        "bcdnet-a-like" => Ok(mobilenet_stage("bcdnet-a-like", 3, false)),
        "bcdnet-b-like" => Ok(mobilenet_stage("bcdnet-b-like", 3, true)),
        "reactnet18-like" => Ok(resnet18("reactnet18-like", false)),
        "reactnet18-mlp-like" => Ok(resnet18("reactnet18-mlp-like", true)),
        "desk-tiny" => Ok(desk_tiny()),
        "desk-tiny-p-only" => {
            let mut s = desk_tiny().with_mlp_ranges(P_ONLY);
            s.name = name.into();
            Ok(s)
        }
        "desk-tiny-conv" => Ok(desk_tiny_conv()),
        _ => Err(Error::InvalidArgument(format!(
            "unknown preset `{name}` (available: {})",
            PRESETS.join(", ")
        ))),
    }
}

fn base(name: &str, resolution: usize, classes: usize, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec {
        name: name.into(),
        input_channels: 3,
        resolution,
        classes,
        scale_mode: ScaleMode::PerFilter,
        shared_thresholds: true,
        layers,
    }
}

/// 224x224 MobileNet-V1 style binary network. `mlp` is the number of MLP
/// blocks substituted for each of the three replaced 3x3 convs.
fn mobilenet_stage(name: &str, mlp: usize, dynamic: bool) -> NetworkSpec {
    // (3x3 kind, input channels, 1x1 output channels) per block
    #[derive(Clone, Copy)]
    enum K {
        Conv,
        Down,
        Mlp,
    }
    let blocks: [(K, usize, usize); 13] = [
        (K::Conv, 32, 64),
        (K::Down, 64, 128),
        (K::Conv, 128, 128),
        (K::Down, 128, 256),
        (K::Conv, 256, 256),
        (K::Down, 256, 512),
        (K::Conv, 512, 512),
        (K::Conv, 512, 512),
        (K::Conv, 512, 512),
        (K::Mlp, 512, 512),
        (K::Mlp, 512, 512),
        (K::Down, 512, 1024),
        (K::Mlp, 1024, 1024),
    ];
    let mut layers = vec![LayerSpec::stem(3, 32, 3, 2, false)];
    for (kind, c, co) in blocks {
        match kind {
            K::Conv => layers.push(LayerSpec::conv3x3(c).with_dynamic(dynamic)),
            K::Down => layers.push(LayerSpec::downsample(c, c).with_dynamic(dynamic)),
            K::Mlp if mlp == 0 => layers.push(LayerSpec::conv3x3(c).with_dynamic(dynamic)),
            K::Mlp => layers.extend(std::iter::repeat(LayerSpec::mlp(c, PSL)).take(mlp)),
        }
        // the 1x1 convs of replaced blocks sit in the MLP stage
        let in_cnn_stage = !matches!(kind, K::Mlp);
        layers.push(LayerSpec::conv1x1(c, co).with_dynamic(dynamic && in_cnn_stage));
    }
    layers.push(LayerSpec::classifier(1024, 1000));
    base(name, 224, 1000, layers)
}

/// ResNet-18 layout with binary 3x3 convs; the MLP variant replaces the last
/// three 512-wide 3x3 convs with nine MLP blocks.
fn resnet18(name: &str, mlp: bool) -> NetworkSpec {
    let mut layers = vec![LayerSpec::stem(3, 64, 7, 2, true)];
    layers.extend(std::iter::repeat(LayerSpec::conv3x3(64)).take(4));
    for c in [128, 256, 512] {
        layers.push(LayerSpec::downsample(c / 2, c));
        if mlp && c == 512 {
            layers.extend(std::iter::repeat(LayerSpec::mlp(512, PSL)).take(9));
        } else {
            layers.extend(std::iter::repeat(LayerSpec::conv3x3(c)).take(3));
        }
    }
    layers.push(LayerSpec::classifier(512, 1000));
    base(name, 224, 1000, layers)
}

const TINY_WIDTH: usize = 16;

/// 32x32, ten classes: four binary conv blocks and three P-S-L MLP blocks.
fn desk_tiny() -> NetworkSpec {
    let c = TINY_WIDTH;
    let layers = vec![
        LayerSpec::stem(3, c, 3, 2, false),
        LayerSpec::conv3x3(c),
        LayerSpec::downsample(c, 2 * c),
        LayerSpec::conv3x3(2 * c),
        LayerSpec::conv3x3(2 * c),
        LayerSpec::mlp(2 * c, PSL),
        LayerSpec::mlp(2 * c, PSL),
        LayerSpec::mlp(2 * c, PSL),
        LayerSpec::classifier(2 * c, 10),
    ];
    base("desk-tiny", 32, 10, layers)
}

/// All-convolution baseline of the same depth, used by replacement sweeps.
fn desk_tiny_conv() -> NetworkSpec {
    let c = TINY_WIDTH;
    let layers = vec![
        LayerSpec::stem(3, c, 3, 2, false),
        LayerSpec::conv3x3(c),
        LayerSpec::downsample(c, 2 * c),
        LayerSpec::conv3x3(2 * c),
        LayerSpec::conv3x3(2 * c),
        LayerSpec::conv3x3(2 * c),
        LayerSpec::classifier(2 * c, 10),
    ];
    base("desk-tiny-conv", 32, 10, layers)
}
