use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Least squares on a linear predictor, coefficients split into blocks.
    LinearL2,
    /// Binary logistic regression, coefficients split into blocks.
    LogisticL2,
    Mlp,
    /// Two 5x5 valid convolutions (each followed by 2x2 max pooling) and two
    /// dense layers.
    CnnSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    SoftmaxCe,
    SquaredError,
    /// Binary cross-entropy on a single logit; used by `logistic-l2`.
    SigmoidCe,
}

pub const CNN_KERNEL: usize = 5;

/// Architecture description.
///
/// `layer_dims` is read per kind:
/// * `linear-l2` / `logistic-l2`: the coefficient block sizes, input layer first;
///   the input dimension is their sum.
/// * `mlp`: layer widths `[input, hidden.., output]`.
/// * `cnn-small`: `[side, in_channels, conv1_channels, conv2_channels, hidden, classes]`
///   for square `side x side` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub l2_coeff: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputKind>,
}

/// Geometry of one parameterized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerGeom {
    /// Slice `offset..offset+len` of a linear predictor's coefficients.
    Block { offset: usize, len: usize },
    Dense { inputs: usize, outputs: usize },
    /// Valid convolution on `cin x side x side` input, then 2x2 max pooling.
    Conv { cin: usize, cout: usize, side: usize },
}

impl LayerGeom {
    pub(crate) fn param_count(&self) -> usize {
        match *self {
            LayerGeom::Block { len, .. } => len,
            LayerGeom::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerGeom::Conv { cin, cout, .. } => cout * cin * CNN_KERNEL * CNN_KERNEL + cout,
        }
    }

    pub(crate) fn fans(&self, input_dim: usize) -> (usize, usize) {
        match *self {
            LayerGeom::Block { .. } => (input_dim, 1),
            LayerGeom::Dense { inputs, outputs } => (inputs, outputs),
            LayerGeom::Conv { cin, cout, .. } => (cin * CNN_KERNEL * CNN_KERNEL, cout * CNN_KERNEL * CNN_KERNEL),
        }
    }
}

impl ModelSpec {
    pub fn linear(blocks: Vec<usize>, l2_coeff: f64) -> Self {
        Self { kind: ModelKind::LinearL2, layer_dims: blocks, l2_coeff, activation: Activation::Identity, output: None }
    }

    pub fn logistic(blocks: Vec<usize>, l2_coeff: f64) -> Self {
        Self { kind: ModelKind::LogisticL2, layer_dims: blocks, l2_coeff, activation: Activation::Identity, output: None }
    }

    pub fn mlp(widths: Vec<usize>) -> Self {
        Self { kind: ModelKind::Mlp, layer_dims: widths, l2_coeff: 0.0, activation: Activation::Relu, output: None }
    }

    /// MNIST-shaped CNN with the given channel and hidden widths.
    pub fn cnn_small(conv1: usize, conv2: usize, hidden: usize) -> Self {
        Self {
            kind: ModelKind::CnnSmall,
            layer_dims: vec![28, 1, conv1, conv2, hidden, 10],
            l2_coeff: 0.0,
            activation: Activation::Relu,
            output: None,
        }
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output.unwrap_or(match self.kind {
            ModelKind::LinearL2 => OutputKind::SquaredError,
            ModelKind::LogisticL2 => OutputKind::SigmoidCe,
            ModelKind::Mlp | ModelKind::CnnSmall => OutputKind::SoftmaxCe,
        })
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.kind, ModelKind::LinearL2 | ModelKind::LogisticL2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2_coeff >= 0.0) || !self.l2_coeff.is_finite() {
            return Err(config("l2_coeff must be a finite nonnegative number"));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(config("layer dimensions must be positive"));
        }
        let out = self.output_kind();
        match self.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => {
                if self.layer_dims.is_empty() {
                    return Err(config("convex models need at least one coefficient block"));
                }
                if self.l2_coeff <= 0.0 {
                    return Err(config("linear-l2 and logistic-l2 require l2_coeff > 0 for strong convexity"));
                }
                let expected = if self.kind == ModelKind::LinearL2 { OutputKind::SquaredError } else { OutputKind::SigmoidCe };
                if out != expected {
                    return Err(config(format!("{:?} requires output {:?}", self.kind, expected)));
                }
            }
            ModelKind::Mlp => {
                if self.layer_dims.len() < 2 {
                    return Err(config("mlp needs at least an input and an output width"));
                }
                if out == OutputKind::SigmoidCe && self.output_dim() != 1 {
                    return Err(config("sigmoid-ce output needs a single output unit"));
                }
            }
            ModelKind::CnnSmall => {
                if self.layer_dims.len() != 6 {
                    return Err(config("cnn-small layer_dims must be [side, in_channels, conv1, conv2, hidden, classes]"));
                }
                let side = self.layer_dims[0];
                if side < CNN_KERNEL || (side - CNN_KERNEL + 1) / 2 <= CNN_KERNEL {
                    return Err(config(format!("cnn-small input side {side} too small for two 5x5 conv + pool stages")));
                }
                if out != OutputKind::SoftmaxCe && out != OutputKind::SquaredError {
                    return Err(config("cnn-small supports softmax-ce or squared-error outputs"));
                }
            }
        }
        Ok(())
    }

    /// Number of parameterized layers `L`.
    pub fn num_layers(&self) -> usize {
        match self.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => self.layer_dims.len(),
            ModelKind::Mlp => self.layer_dims.len() - 1,
            ModelKind::CnnSmall => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => self.layer_dims.iter().sum(),
            ModelKind::Mlp => self.layer_dims[0],
            ModelKind::CnnSmall => self.layer_dims[0] * self.layer_dims[0] * self.layer_dims[1],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => 1,
            ModelKind::Mlp => *self.layer_dims.last().expect("validated"),
            ModelKind::CnnSmall => self.layer_dims[5],
        }
    }

    pub(crate) fn geometry(&self) -> Vec<LayerGeom> {
        match self.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => {
                let mut offset = 0;
                self.layer_dims
                    .iter()
                    .map(|&len| {
                        let g = LayerGeom::Block { offset, len };
                        offset += len;
                        g
                    })
                    .collect()
            }
            ModelKind::Mlp => self
                .layer_dims
                .windows(2)
                .map(|w| LayerGeom::Dense { inputs: w[0], outputs: w[1] })
                .collect(),
            ModelKind::CnnSmall => {
                let [side, cin, c1, c2, hidden, classes] = self.layer_dims[..] else {
                    unreachable!("validated cnn layer_dims")
                };
                let side2 = (side - CNN_KERNEL + 1) / 2;
                let side3 = (side2 - CNN_KERNEL + 1) / 2;
                vec![
                    LayerGeom::Conv { cin, cout: c1, side },
                    LayerGeom::Conv { cin: c1, cout: c2, side: side2 },
                    LayerGeom::Dense { inputs: c2 * side3 * side3, outputs: hidden },
                    LayerGeom::Dense { inputs: hidden, outputs: classes },
                ]
            }
        }
    }

    /// Parameter count of each layer block, input layer first.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.geometry().iter().map(LayerGeom::param_count).collect()
    }
}
