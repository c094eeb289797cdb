//! Desk-scale model zoo for 1x16x16 inputs and 4 classes.

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::layer::LayerKind;
use crate::error::{bail, Result};
use crate::tensor::DType;
use crate::SeededRng;

pub const ZOO_NAMES: [&str; 3] = ["tiny-mlp", "tiny-lenet", "tiny-vgg"];
pub const INPUT_SHAPE: [usize; 3] = [1, 16, 16];
pub const CLASSES: usize = 4;

/// Hand-propagated facts about a zoo entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooManifest {
    pub name: &'static str,
    pub layers: usize,
    pub params: usize,
    pub macs: u64,
    pub classes: usize,
}

pub const MANIFESTS: [ZooManifest; 3] = [
    // fc0 256*32+32, fc2 32*4+4
    ZooManifest {
        name: "tiny-mlp",
        layers: 3,
        params: 8356,
        macs: 8320,
        classes: CLASSES,
    },
    // conv 80, conv 1168, fc 16448, fc 260; MACs 9*8*256 + 9*8*16*64 + 256*64 + 64*4
    ZooManifest {
        name: "tiny-lenet",
        layers: 10,
        params: 17956,
        macs: 108_800,
        classes: CLASSES,
    },
    // six 3x3 convs 18040, four-tensor batchnorms 448, fc 516
    ZooManifest {
        name: "tiny-vgg",
        layers: 24,
        params: 19004,
        macs: 608_768,
        classes: CLASSES,
    },
];

pub fn manifest(name: &str) -> Option<ZooManifest> {
    MANIFESTS.iter().copied().find(|m| m.name == name)
}

/// A zoo name or an inline layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchDescriptor {
    Zoo(String),
    Inline {
        name: String,
        input_shape: Vec<usize>,
        layers: Vec<LayerKind>,
    },
}

fn conv(cin: usize, cout: usize) -> LayerKind {
    LayerKind::Conv {
        in_ch: cin,
        out_ch: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
        groups: 1,
        bias: true,
    }
}

fn fc(i: usize, o: usize) -> LayerKind {
    LayerKind::Fc {
        in_features: i,
        out_features: o,
        bias: true,
    }
}

fn pool() -> LayerKind {
    LayerKind::MaxPool { k: 2, stride: 2 }
}

pub fn zoo_layers(name: &str) -> Result<Vec<LayerKind>> {
    use LayerKind::*;
    Ok(match name {
        "tiny-mlp" => vec![fc(256, 32), Relu, fc(32, CLASSES)],
        "tiny-lenet" => vec![
            conv(1, 8),
            Relu,
            pool(),
            conv(8, 16),
            Relu,
            pool(),
            Flatten,
            fc(256, 64),
            Relu,
            fc(64, CLASSES),
        ],
        "tiny-vgg" => vec![
            conv(1, 8),
            BatchNorm { channels: 8 },
            Relu,
            conv(8, 8),
            BatchNorm { channels: 8 },
            Relu,
            pool(),
            conv(8, 16),
            BatchNorm { channels: 16 },
            Relu,
            conv(16, 16),
            BatchNorm { channels: 16 },
            Relu,
            ResidualAdd { from: 10 },
            pool(),
            conv(16, 32),
            BatchNorm { channels: 32 },
            Relu,
            conv(32, 32),
            BatchNorm { channels: 32 },
            Relu,
            pool(),
            Flatten,
            fc(128, CLASSES),
        ],
        other => bail!(
            Config,
            "unknown zoo model {:?}; expected one of {:?}",
            other,
            ZOO_NAMES
        ),
    })
}

pub fn build_model(arch: &ArchDescriptor, dtype: DType, rng: &mut SeededRng) -> Result<ModelGraph> {
    match arch {
        ArchDescriptor::Zoo(name) => {
            ModelGraph::new(name, &INPUT_SHAPE, zoo_layers(name)?, dtype, rng)
        }
        ArchDescriptor::Inline {
            name,
            input_shape,
            layers,
        } => ModelGraph::new(name, input_shape, layers.clone(), dtype, rng),
    }
}

pub fn build_zoo(name: &str, dtype: DType, seed: u64) -> Result<ModelGraph> {
    use rand::SeedableRng;
    build_model(
        &ArchDescriptor::Zoo(name.to_string()),
        dtype,
        &mut SeededRng::seed_from_u64(seed),
    )
}
