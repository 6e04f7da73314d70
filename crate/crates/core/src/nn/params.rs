use rand::Rng;

use crate::linalg::DenseMatrix;

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    GraphConv,
    Conv2d { kernel: usize },
    BatchNorm,
    FullyConnected,
}

impl LayerKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            LayerKind::GraphConv => 1,
            LayerKind::Conv2d { .. } => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::FullyConnected => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::GraphConv => "graph_conv",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::FullyConnected => "fully_connected",
        }
    }
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Parameters of one layer. Fields a kind does not use are empty.
///
/// Weight layouts: graph conv and fully connected use `in × out`; a `k × k`
/// convolution uses `(k·k·C_in) × C_out` with row index `(dy·k + dx)·C_in + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    /// Running-statistics momentum; runtime setting, not checkpointed.
    pub bn_momentum: f64,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

impl LayerParams {
    fn empty(kind: LayerKind) -> Self {
        Self {
            kind,
            weights: DenseMatrix::zeros(0, 0),
            bias: Vec::new(),
            bn_gamma: Vec::new(),
            bn_beta: Vec::new(),
            bn_running_mean: Vec::new(),
            bn_running_var: Vec::new(),
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn graph_conv<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weights: glorot(d_in, d_out, d_in, d_out, rng),
            bias: vec![0.0; d_out],
            ..Self::empty(LayerKind::GraphConv)
        }
    }

    pub fn fully_connected<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weights: glorot(d_in, d_out, d_in, d_out, rng),
            bias: vec![0.0; d_out],
            ..Self::empty(LayerKind::FullyConnected)
        }
    }

    pub fn conv2d<R: Rng + ?Sized>(kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let area = kernel * kernel;
        Self {
            weights: glorot(area * c_in, c_out, area * c_in, area * c_out, rng),
            bias: vec![0.0; c_out],
            ..Self::empty(LayerKind::Conv2d { kernel })
        }
    }

    pub fn batch_norm(width: usize) -> Self {
        Self {
            bn_gamma: vec![1.0; width],
            bn_beta: vec![0.0; width],
            bn_running_mean: vec![0.0; width],
            bn_running_var: vec![1.0; width],
            ..Self::empty(LayerKind::BatchNorm)
        }
    }

    /// Output width (features or channels).
    pub fn width(&self) -> usize {
        match self.kind {
            LayerKind::BatchNorm => self.bn_gamma.len(),
            _ => self.weights.cols(),
        }
    }

    /// Trainable arrays in a fixed order: weights, bias, gamma, beta.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.weights.data_mut(),
            &mut self.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }

    pub fn trainable(&self) -> [&[f64]; 4] {
        [self.weights.data(), &self.bias, &self.bn_gamma, &self.bn_beta]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    /// Zero gradient buffers shaped like this layer.
    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weights: DenseMatrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
            gamma: vec![0.0; self.bn_gamma.len()],
            beta: vec![0.0; self.bn_beta.len()],
        }
    }
}

/// Gradients aligned with [`LayerParams::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerGrads {
    pub fn slices(&self) -> [&[f64]; 4] {
        [self.weights.data(), &self.bias, &self.gamma, &self.beta]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.weights.data_mut(),
            &mut self.bias,
            &mut self.gamma,
            &mut self.beta,
        ]
    }
}
