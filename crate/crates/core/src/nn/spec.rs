use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Valid-padding, stride-1 convolution. Weight shape `O×I×H×W`, bias `O`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
    },
    /// Weight shape `O×I`, bias `O`.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Tanh,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    Maxpool2x2,
    Flatten,
    /// Fused log-softmax + negative log-likelihood, averaged over the batch.
    SoftmaxCrossEntropy,
    /// Per-sample loss is the plain sum of the inputs. Labels are ignored.
    /// Gives a loss that is exactly linear in the preceding layer's output.
    SumHead,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, k: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: (k, k),
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Maxpool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SoftmaxCrossEntropy => "softmax-cross-entropy",
            LayerSpec::SumHead => "sum-head",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxCrossEntropy | LayerSpec::SumHead)
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Relu => Some(Activation::Relu),
            LayerSpec::Tanh => Some(Activation::Tanh),
            _ => None,
        }
    }

    /// `(weight shape, bias length)` for parametered layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (kh, kw),
            } => Some((vec![out_channels, in_channels, kh, kw], out_channels)),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], out_features)),
            _ => None,
        }
    }

    /// Parameter count `O·(I·H·W+1)` or `O·(I+1)`.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .unwrap_or(0)
    }

    /// Fan-in of one unit, the number of incoming weights.
    pub fn fan_in(&self) -> Option<usize> {
        self.param_shapes().map(|(w, _)| w[1..].iter().product())
    }

    /// Per-sample output shape for a given per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (kh, kw),
            } => {
                let [c, h, w] = match input {
                    &[c, h, w] => [c, h, w],
                    _ => return Err(format!("conv2d needs a C×H×W input, got {input:?}")),
                };
                if c != in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                if kh == 0 || kw == 0 || kh > h || kw > w {
                    return Err(format!("kernel {kh}×{kw} does not fit a {h}×{w} input"));
                }
                if out_channels == 0 {
                    return Err("conv2d with zero output channels".into());
                }
                Ok(vec![out_channels, h - kh + 1, w - kw + 1])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let n = match input {
                    &[n] => n,
                    _ => return Err(format!("linear needs a flat input, got {input:?}")),
                };
                if n != in_features {
                    return Err(format!("expected {in_features} input features, got {n}"));
                }
                if out_features == 0 {
                    return Err("linear with zero output features".into());
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Maxpool2x2 => match input {
                &[c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(format!(
                    "maxpool2x2 needs a C×H×W input with H,W ≥ 2, got {input:?}"
                )),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::SoftmaxCrossEntropy | LayerSpec::SumHead => match input {
                &[_] => Ok(vec![1]),
                _ => Err(format!("loss head needs a flat input, got {input:?}")),
            },
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(
                f,
                "conv2d({in_channels}→{out_channels}, {}×{})",
                kernel.0, kernel.1
            ),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear({in_features}→{out_features})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn layer(self) -> LayerSpec {
        match self {
            Activation::Relu => LayerSpec::Relu,
            Activation::Tanh => LayerSpec::Tanh,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// A sequential architecture: per-sample input shape plus layers, ending in a
/// loss head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

impl NetworkSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input,
            layers,
            preset: None,
        }
    }

    /// Checks shape consistency and returns every layer's per-sample output
    /// shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        if self.input.contains(&0) {
            return Err(Error::shape(format!(
                "zero extent in input {:?}",
                self.input
            )));
        }
        let last = self.layers.len() - 1;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let prev_name = if i == 0 {
                "input".to_string()
            } else {
                format!("layer {} ({})", i - 1, self.layers[i - 1])
            };
            let this_name = format!("layer {i} ({layer})");
            if layer.is_head() && i != last {
                return Err(Error::IncompatibleLayers {
                    first: this_name,
                    second: format!("layer {} ({})", i + 1, self.layers[i + 1]),
                    reason: "a loss head must be the final layer".into(),
                });
            }
            current = layer
                .output_shape(&current)
                .map_err(|reason| Error::IncompatibleLayers {
                    first: prev_name,
                    second: this_name,
                    reason,
                })?;
            shapes.push(current.clone());
        }
        if !self.layers[last].is_head() {
            return Err(Error::shape("the final layer must be a loss head"));
        }
        if !self.layers.iter().any(LayerSpec::has_params) {
            return Err(Error::shape("network has no parametered layers"));
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Layer indices of conv/linear layers, in order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

pub const PRESET_NAMES: &[&str] = &["mnist-fc32", "mnist-fc64", "mnist-fc256", "cifar", "tiny"];

/// Small CNN for 1×28×28 inputs: two 5×5 convs (8, 16 channels) with pooling,
/// then `fc1_width` hidden units and 10 outputs.
pub fn mnist_spec(fc1_width: usize, activation: Activation) -> NetworkSpec {
    let act = activation.layer();
    NetworkSpec {
        input: [1, 28, 28],
        layers: vec![
            LayerSpec::conv(1, 8, 5),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::conv(8, 16, 5),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::Flatten,
            LayerSpec::linear(256, fc1_width),
            act,
            LayerSpec::linear(fc1_width, 10),
            LayerSpec::SoftmaxCrossEntropy,
        ],
        preset: Some(format!("mnist-fc{fc1_width}")),
    }
}

/// Small CNN for 3×32×32 inputs; flattens to 400 features.
pub fn cifar_spec(activation: Activation) -> NetworkSpec {
    let act = activation.layer();
    NetworkSpec {
        input: [3, 32, 32],
        layers: vec![
            LayerSpec::conv(3, 8, 5),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::conv(8, 16, 5),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::Flatten,
            LayerSpec::linear(400, 64),
            act,
            LayerSpec::linear(64, 10),
            LayerSpec::SoftmaxCrossEntropy,
        ],
        preset: Some("cifar".into()),
    }
}

/// A scaled-down conv net (1×12×12 input, 3 classes) for fast tests.
pub fn tiny_spec(activation: Activation) -> NetworkSpec {
    let act = activation.layer();
    NetworkSpec {
        input: [1, 12, 12],
        layers: vec![
            LayerSpec::conv(1, 3, 3),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::conv(3, 4, 2),
            act.clone(),
            LayerSpec::Maxpool2x2,
            LayerSpec::Flatten,
            LayerSpec::linear(16, 6),
            act,
            LayerSpec::linear(6, 3),
            LayerSpec::SoftmaxCrossEntropy,
        ],
        preset: Some("tiny".into()),
    }
}

/// Resolves a preset name. `fc1_width` overrides the hidden width of the MNIST
/// presets (the name's own width is used otherwise).
pub fn preset(name: &str, activation: Activation, fc1_width: Option<usize>) -> Result<NetworkSpec> {
    let spec = match name {
        "mnist" | "mnist-fc32" | "mnist-fc64" | "mnist-fc256" => {
            let default = match name {
                "mnist-fc32" => 32,
                "mnist-fc256" => 256,
                _ => 64,
            };
            mnist_spec(fc1_width.unwrap_or(default), activation)
        }
        "cifar" => cifar_spec(activation),
        "tiny" => tiny_spec(activation),
        other => {
            return Err(Error::invalid(format!(
                "unknown preset `{other}` (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(spec)
}
