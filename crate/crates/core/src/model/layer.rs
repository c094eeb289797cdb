use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::strategy::TechniqueId;

/// One unit of the flat layer sequence.
///
/// The first group of kinds appears in base models. The rewrite kinds are
/// produced by compression and occupy the flat index of the layer they replace,
/// so strategy indices stay stable across rewrites. The decoder kinds are only
/// used by attack networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    /// Adds the activation that entered layer `from` (0 = graph input).
    ResidualAdd {
        from: usize,
    },
    Identity,

    /// F1/F2: `in -> rank -> out` factorized fully-connected layer.
    LowRankFc {
        in_features: usize,
        out_features: usize,
        rank: usize,
    },
    /// F3: global average pooling over `channels` followed by one classifier.
    GapFc {
        channels: usize,
        classes: usize,
    },
    /// C1: depthwise KxK then pointwise 1x1.
    DepthwiseSeparable {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// C2: 1x1 expand, depthwise KxK, 1x1 project, skip when shapes match.
    InvertedResidual {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        expansion: usize,
        skip: bool,
    },
    /// C3: 1x1 squeeze then parallel 1x1 / 3x3 expands concatenated.
    Fire {
        in_ch: usize,
        out_ch: usize,
        squeeze: usize,
        stride: usize,
    },

    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Upsample {
        factor: usize,
    },
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InplaceKind {
    Relu,
    BatchNorm,
    Dropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// In-place ops directly following this layer.
    #[serde(default)]
    pub attached_inplace: Vec<InplaceKind>,
    /// Compression applied to this position, if any.
    #[serde(default)]
    pub technique: Option<TechniqueId>,
}

/// Role of a parameter, used for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

pub struct ParamSpec {
    pub suffix: &'static str,
    pub dims: Vec<usize>,
    pub role: ParamRole,
}

fn w(suffix: &'static str, dims: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec {
        suffix,
        dims,
        role: ParamRole::Weight { fan_in },
    }
}

fn b(suffix: &'static str, n: usize) -> ParamSpec {
    ParamSpec {
        suffix,
        dims: vec![n],
        role: ParamRole::Bias,
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd { .. } => "residual-add",
            LayerKind::Identity => "identity",
            LayerKind::LowRankFc { .. } => "low-rank-fc",
            LayerKind::GapFc { .. } => "gap-fc",
            LayerKind::DepthwiseSeparable { .. } => "depthwise-separable",
            LayerKind::InvertedResidual { .. } => "inverted-residual",
            LayerKind::Fire { .. } => "fire",
            LayerKind::ConvTranspose { .. } => "conv-transpose",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Unflatten { .. } => "unflatten",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    /// Only plain conv and fc layers accept a compression technique.
    pub fn is_compressible(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn inplace(&self) -> Option<InplaceKind> {
        match self {
            LayerKind::Relu => Some(InplaceKind::Relu),
            LayerKind::BatchNorm { .. } => Some(InplaceKind::BatchNorm),
            LayerKind::Dropout { .. } => Some(InplaceKind::Dropout),
            _ => None,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                bias,
                ..
            } => {
                let cin_g = in_ch / groups.max(1);
                let mut v = vec![w(
                    "weight",
                    vec![out_ch, cin_g, kernel, kernel],
                    cin_g * kernel * kernel,
                )];
                if bias {
                    v.push(b("bias", out_ch));
                }
                v
            }
            LayerKind::Fc {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![w("weight", vec![out_features, in_features], in_features)];
                if bias {
                    v.push(b("bias", out_features));
                }
                v
            }
            LayerKind::BatchNorm { channels } => vec![
                ParamSpec {
                    suffix: "gamma",
                    dims: vec![channels],
                    role: ParamRole::Gamma,
                },
                ParamSpec {
                    suffix: "beta",
                    dims: vec![channels],
                    role: ParamRole::Beta,
                },
                ParamSpec {
                    suffix: "running_mean",
                    dims: vec![channels],
                    role: ParamRole::RunningMean,
                },
                ParamSpec {
                    suffix: "running_var",
                    dims: vec![channels],
                    role: ParamRole::RunningVar,
                },
            ],
            LayerKind::LowRankFc {
                in_features,
                out_features,
                rank,
            } => vec![
                w("in.weight", vec![rank, in_features], in_features),
                w("out.weight", vec![out_features, rank], rank),
                b("out.bias", out_features),
            ],
            LayerKind::GapFc { channels, classes } => {
                vec![
                    w("weight", vec![classes, channels], channels),
                    b("bias", classes),
                ]
            }
            LayerKind::DepthwiseSeparable {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                w("dw.weight", vec![in_ch, 1, kernel, kernel], kernel * kernel),
                w("pw.weight", vec![out_ch, in_ch, 1, 1], in_ch),
                b("pw.bias", out_ch),
            ],
            LayerKind::InvertedResidual {
                in_ch,
                out_ch,
                kernel,
                expansion,
                ..
            } => {
                let e = in_ch * expansion;
                vec![
                    w("expand.weight", vec![e, in_ch, 1, 1], in_ch),
                    w("dw.weight", vec![e, 1, kernel, kernel], kernel * kernel),
                    w("project.weight", vec![out_ch, e, 1, 1], e),
                    b("project.bias", out_ch),
                ]
            }
            LayerKind::Fire {
                in_ch,
                out_ch,
                squeeze,
                ..
            } => {
                let half = out_ch / 2;
                vec![
                    w("squeeze.weight", vec![squeeze, in_ch, 1, 1], in_ch),
                    w("e1.weight", vec![half, squeeze, 1, 1], squeeze),
                    b("e1.bias", half),
                    w("e3.weight", vec![half, squeeze, 3, 3], squeeze * 9),
                    b("e3.bias", half),
                ]
            }
            LayerKind::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                w(
                    "weight",
                    vec![in_ch, out_ch, kernel, kernel],
                    in_ch * kernel * kernel,
                ),
                b("bias", out_ch),
            ],
            _ => Vec::new(),
        }
    }

    /// Output shape (without batch axis) given the input shape and the
    /// activations that entered every earlier layer.
    pub fn output_shape(&self, input: &[usize], entering: &[Vec<usize>]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => bail!(Config, "{} needs a CxHxW input, got {:?}", what, input),
            }
        };
        let conv_out = |h: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if s == 0 || k == 0 || k > h + 2 * p {
                bail!(
                    Config,
                    "kernel {} stride {} padding {} invalid for extent {}",
                    k,
                    s,
                    p,
                    h
                );
            }
            Ok((h + 2 * p - k) / s + 1)
        };
        let numel: usize = input.iter().product();
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                ..
            } => {
                let (c, h, w) = spatial("conv")?;
                if c != in_ch {
                    bail!(Config, "conv expects {} channels, got {}", in_ch, c);
                }
                if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
                    bail!(
                        Config,
                        "groups {} must divide {} and {}",
                        groups,
                        in_ch,
                        out_ch
                    );
                }
                Ok(vec![
                    out_ch,
                    conv_out(h, kernel, stride, padding)?,
                    conv_out(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::DepthwiseSeparable {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            }
            | LayerKind::InvertedResidual {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = spatial(self.name())?;
                if c != in_ch {
                    bail!(
                        Config,
                        "{} expects {} channels, got {}",
                        self.name(),
                        in_ch,
                        c
                    );
                }
                Ok(vec![
                    out_ch,
                    conv_out(h, kernel, stride, padding)?,
                    conv_out(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::Fire {
                in_ch,
                out_ch,
                stride,
                ..
            } => {
                let (c, h, w) = spatial("fire")?;
                if c != in_ch || out_ch % 2 != 0 {
                    bail!(
                        Config,
                        "fire expects {} channels and an even output, got {} / {}",
                        in_ch,
                        c,
                        out_ch
                    );
                }
                Ok(vec![
                    out_ch,
                    conv_out(h, 1, stride, 0)?,
                    conv_out(w, 1, stride, 0)?,
                ])
            }
            LayerKind::Fc {
                in_features,
                out_features,
                ..
            }
            | LayerKind::LowRankFc {
                in_features,
                out_features,
                ..
            } => {
                if numel != in_features {
                    bail!(
                        Config,
                        "fc expects {} features, got {:?}",
                        in_features,
                        input
                    );
                }
                Ok(vec![out_features])
            }
            LayerKind::GapFc { channels, classes } => {
                let c = if input.len() == 3 { input[0] } else { channels };
                if c != channels || numel % channels != 0 {
                    bail!(
                        Config,
                        "gap-fc expects {} channels, got {:?}",
                        channels,
                        input
                    );
                }
                Ok(vec![classes])
            }
            LayerKind::Relu
            | LayerKind::Dropout { .. }
            | LayerKind::Identity
            | LayerKind::Sigmoid => Ok(input.to_vec()),
            LayerKind::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    bail!(
                        Config,
                        "batchnorm expects {} channels, got {:?}",
                        channels,
                        input
                    );
                }
                Ok(input.to_vec())
            }
            LayerKind::MaxPool { k, stride } | LayerKind::AvgPool { k, stride } => {
                let (c, h, w) = spatial("pool")?;
                if k == 0 || stride == 0 || k > h || k > w {
                    bail!(Config, "pool window {} invalid for {}x{}", k, h, w);
                }
                Ok(vec![c, (h - k) / stride + 1, (w - k) / stride + 1])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial("global-avg-pool")?;
                Ok(vec![c, 1, 1])
            }
            LayerKind::Flatten => Ok(vec![numel]),
            LayerKind::ResidualAdd { from } => match entering.get(from) {
                Some(s) if s.as_slice() == input => Ok(input.to_vec()),
                Some(s) => bail!(
                    Config,
                    "residual from {} has shape {:?}, expected {:?}",
                    from,
                    s,
                    input
                ),
                None => bail!(Config, "residual source {} is not an earlier layer", from),
            },
            LayerKind::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                let (c, h, w) = spatial("conv-transpose")?;
                if c != in_ch || stride == 0 || output_padding >= stride {
                    bail!(
                        Config,
                        "conv-transpose expects {} channels, got {}",
                        in_ch,
                        c
                    );
                }
                let up = |e: usize| {
                    ((e - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
                };
                match (up(h), up(w)) {
                    (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(vec![out_ch, ho, wo]),
                    _ => bail!(Config, "conv-transpose output collapses"),
                }
            }
            LayerKind::Upsample { factor } => {
                let (c, h, w) = spatial("upsample")?;
                if factor == 0 {
                    bail!(Config, "upsample factor must be positive");
                }
                Ok(vec![c, h * factor, w * factor])
            }
            LayerKind::Unflatten {
                channels,
                height,
                width,
            } => {
                if numel != channels * height * width {
                    bail!(
                        Config,
                        "cannot unflatten {:?} into {}x{}x{}",
                        input,
                        channels,
                        height,
                        width
                    );
                }
                Ok(vec![channels, height, width])
            }
        }
    }

    /// Multiply-accumulate count for one sample. Only conv-like and fc-like
    /// kinds contribute; grouped convolutions divide the input channels.
    pub fn macs(&self, input: &[usize], output: &[usize]) -> u64 {
        let hw_out = || (output[1] * output[2]) as u64;
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                ..
            } => (kernel * kernel) as u64 * (in_ch / groups) as u64 * out_ch as u64 * hw_out(),
            LayerKind::Fc {
                in_features,
                out_features,
                ..
            } => in_features as u64 * out_features as u64,
            LayerKind::LowRankFc {
                in_features,
                out_features,
                rank,
            } => (in_features * rank + rank * out_features) as u64,
            LayerKind::GapFc { channels, classes } => (channels * classes) as u64,
            LayerKind::DepthwiseSeparable {
                in_ch,
                out_ch,
                kernel,
                ..
            } => ((kernel * kernel * in_ch) as u64 + (in_ch * out_ch) as u64) * hw_out(),
            LayerKind::InvertedResidual {
                in_ch,
                out_ch,
                kernel,
                expansion,
                ..
            } => {
                let e = (in_ch * expansion) as u64;
                let hw_in = (input[1] * input[2]) as u64;
                in_ch as u64 * e * hw_in
                    + (kernel * kernel) as u64 * e * hw_out()
                    + e * out_ch as u64 * hw_out()
            }
            LayerKind::Fire {
                in_ch,
                out_ch,
                squeeze,
                ..
            } => {
                let hw_in = (input[1] * input[2]) as u64;
                let half = (out_ch / 2) as u64;
                (in_ch * squeeze) as u64 * hw_in + squeeze as u64 * half * hw_out() * 10
            }
            LayerKind::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (kernel * kernel * in_ch * out_ch) as u64 * (input[1] * input[2]) as u64,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize, k: usize) -> LayerKind {
        LayerKind::Conv {
            in_ch: cin,
            out_ch: cout,
            kernel: k,
            stride: 1,
            padding: k / 2,
            groups: 1,
            bias: true,
        }
    }

    #[test]
    fn conv_macs_match_closed_form() {
        let l = conv(16, 32, 3);
        assert_eq!(l.macs(&[16, 8, 8], &[32, 8, 8]), 294_912);
    }

    #[test]
    fn fc_macs_match_closed_form() {
        let l = LayerKind::Fc {
            in_features: 120,
            out_features: 84,
            bias: true,
        };
        assert_eq!(l.macs(&[120], &[84]), 10_080);
    }

    #[test]
    fn conv_output_shape() {
        let l = LayerKind::Conv {
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 1,
            bias: false,
        };
        assert_eq!(l.output_shape(&[3, 16, 16], &[]).unwrap(), vec![4, 8, 8]);
        assert!(l.output_shape(&[2, 16, 16], &[]).is_err());
    }

    #[test]
    fn zero_cost_kinds() {
        for l in [
            LayerKind::Relu,
            LayerKind::BatchNorm { channels: 4 },
            LayerKind::MaxPool { k: 2, stride: 2 },
        ] {
            assert_eq!(l.macs(&[4, 8, 8], &[4, 8, 8]), 0);
        }
    }
}
