use serde::{Deserialize, Serialize};

fn default_stride() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

fn default_slope() -> f64 {
    0.2
}

/// One layer of a sequential network. Shapes are per sample (batch excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Relu,
    LeakyRelu {
        #[serde(default = "default_slope")]
        slope: f64,
    },
    Tanh,
    Sigmoid,
    /// Appends a label code to the input along its leading axis. With `dim`
    /// the code is a learned embedding row, otherwise a one-hot vector.
    /// `reshape` turns the code into a feature map (e.g. `[1, 28, 28]`).
    EmbedConcat {
        classes: usize,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        reshape: Option<Vec<usize>>,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: ParamName,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Fan-in and fan-out for weight initializers.
    pub fans: (usize, usize),
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv_t_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((size - 1) * stride + kernel).checked_sub(2 * padding).filter(|&v| v > 0)
}

impl LayerSpec {
    /// Layers holding weight matrices or kernels. Everything else rides along
    /// with the major layer before it.
    pub fn is_major(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. }
        )
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, LayerSpec::EmbedConcat { .. })
    }

    pub fn is_relu_family(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::LeakyRelu { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::EmbedConcat { .. } => "embed_concat",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Short human label used in assignment tables, e.g. `ConvT 4x4 s2`.
    pub fn describe(&self) -> String {
        match self {
            LayerSpec::Dense { outputs, .. } => format!("FC {outputs}"),
            LayerSpec::Conv2d { kernel, stride, .. } => format!("Conv {kernel}x{kernel} s{stride}"),
            LayerSpec::ConvTranspose2d { kernel, stride, .. } => {
                format!("ConvT {kernel}x{kernel} s{stride}")
            }
            other => other.name().to_string(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != *inputs {
                    return Err(format!("expects [{inputs}], got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(format!("expects [{in_channels}, H, W], got {input:?}"));
                }
                let h = conv_out(input[1], *kernel, *stride, *padding);
                let w = conv_out(input[2], *kernel, *stride, *padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => Err(format!("kernel {kernel} does not fit {input:?}")),
                }
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels || input[1] == 0 || input[2] == 0 {
                    return Err(format!("expects [{in_channels}, H, W], got {input:?}"));
                }
                let h = conv_t_out(input[1], *kernel, *stride, *padding);
                let w = conv_t_out(input[2], *kernel, *stride, *padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => Err(format!("padding {padding} too large for {input:?}")),
                }
            }
            LayerSpec::BatchNorm { .. } => {
                if input.len() != 1 && input.len() != 3 {
                    return Err(format!("expects [C] or [C, H, W], got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input.to_vec())
            }
            LayerSpec::EmbedConcat {
                classes,
                dim,
                reshape,
            } => {
                if *classes < 2 {
                    return Err("needs at least 2 classes".into());
                }
                let code_len = dim.unwrap_or(*classes);
                let code_shape = match reshape {
                    Some(shape) => {
                        if shape.iter().product::<usize>() != code_len {
                            return Err(format!("reshape {shape:?} does not hold {code_len} values"));
                        }
                        shape.clone()
                    }
                    None => vec![code_len],
                };
                if code_shape.len() != input.len() || code_shape[1..] != input[1..] {
                    return Err(format!(
                        "label code {code_shape:?} cannot be concatenated with {input:?}"
                    ));
                }
                let mut out = input.to_vec();
                out[0] += code_shape[0];
                Ok(out)
            }
            LayerSpec::Flatten => Ok(vec![numel]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    pub fn param_shapes(&self, input: &[usize]) -> Vec<ParamShape> {
        let p = |name, shape: Vec<usize>, trainable, fans| ParamShape {
            name,
            shape,
            trainable,
            fans,
        };
        match self {
            LayerSpec::Dense { inputs, outputs } => vec![
                p(ParamName::Weight, vec![*outputs, *inputs], true, (*inputs, *outputs)),
                p(ParamName::Bias, vec![*outputs], true, (0, 0)),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let k2 = kernel * kernel;
                vec![
                    p(
                        ParamName::Weight,
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        true,
                        (in_channels * k2, out_channels * k2),
                    ),
                    p(ParamName::Bias, vec![*out_channels], true, (0, 0)),
                ]
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let k2 = kernel * kernel;
                vec![
                    p(
                        ParamName::Weight,
                        vec![*in_channels, *out_channels, *kernel, *kernel],
                        true,
                        // PyTorch convention: fan-in is taken over dim 1 of the weight.
                        (out_channels * k2, in_channels * k2),
                    ),
                    p(ParamName::Bias, vec![*out_channels], true, (0, 0)),
                ]
            }
            LayerSpec::BatchNorm { .. } => {
                let c = input[0];
                vec![
                    p(ParamName::Gamma, vec![c], true, (0, 0)),
                    p(ParamName::Beta, vec![c], true, (0, 0)),
                    p(ParamName::RunningMean, vec![c], false, (0, 0)),
                    p(ParamName::RunningVar, vec![c], false, (0, 0)),
                ]
            }
            LayerSpec::EmbedConcat {
                classes,
                dim: Some(dim),
                ..
            } => vec![p(ParamName::Table, vec![*classes, *dim], true, (0, 0))],
            _ => Vec::new(),
        }
    }

    /// Forward floating-point operations per sample (2 per multiply-accumulate).
    /// Auxiliary layers count as zero.
    pub fn flops_fwd(&self, input: &[usize]) -> u64 {
        match self {
            LayerSpec::Dense { inputs, outputs } => 2 * (*inputs as u64) * (*outputs as u64),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let out = self.output_shape(input).unwrap_or_default();
                let (ho, wo) = (out.get(1).copied().unwrap_or(0), out.get(2).copied().unwrap_or(0));
                2 * (kernel * kernel * in_channels * out_channels * ho * wo) as u64
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                // every input pixel scatters a full kernel into each output channel
                let (hi, wi) = (input[1], input[2]);
                2 * (kernel * kernel * in_channels * out_channels * hi * wi) as u64
            }
            _ => 0,
        }
    }
}
