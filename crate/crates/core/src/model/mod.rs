//! Classification heads and their hand-derived gradients.
//!
//! Two families:
//! - MLP: `input -> [Linear -> ReLU]* -> Linear`, 1 to 4 linear layers.
//! - Conv: `grid -> Conv -> ReLU -> Conv -> ReLU -> flatten -> [Linear -> ReLU]* -> Linear`.
//!
//! Heads output logits; the sigmoid lives in the loss and the metrics.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{self, DenseMatrix, FeatureGrid, GridShape, KernelBank};
use crate::par;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

pub const DEFAULT_INPUT_DIM: usize = 1024;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_CLASSES: usize = 20;
pub const DEFAULT_CONV_CHANNELS: [usize; 2] = [64, 32];
pub const DEFAULT_CONV_KERNEL: usize = 3;
pub const MAX_HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Mlp,
    Conv,
}

/// Architecture of a classification head.
///
/// For conv heads `grid` gives the (channels, height, width) layout of the
/// input vector, and `hidden_dims` describes the linear layers after the
/// flatten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub head_kind: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 3]>,
}

impl Default for HeadConfig {
    /// 1024 -> 256 -> 20, the head used for CLIP features.
    fn default() -> Self {
        Self::mlp(DEFAULT_INPUT_DIM, &[DEFAULT_HIDDEN], DEFAULT_CLASSES)
    }
}

/// Shape of one layer, derived from a [`HeadConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Linear { fan_in: usize, fan_out: usize },
    Conv { input: GridShape, kernel: usize, out_channels: usize },
}

impl LayerShape {
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerShape::Linear { fan_in, fan_out } => fan_in * fan_out + fan_out,
            LayerShape::Conv { input, kernel, out_channels } => {
                out_channels * input.channels * kernel * kernel + out_channels
            }
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Linear { fan_in, .. } => fan_in,
            LayerShape::Conv { input, kernel, .. } => input.channels * kernel * kernel,
        }
    }
}

impl HeadConfig {
    pub fn mlp(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            head_kind: HeadKind::Mlp,
            conv_kernel: None,
            conv_channels: None,
            grid: None,
        }
    }

    pub fn conv(grid: GridShape, kernel: usize, channels: [usize; 2], hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim: grid.len(),
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            head_kind: HeadKind::Conv,
            conv_kernel: Some(kernel),
            conv_channels: Some(channels),
            grid: Some([grid.channels, grid.height, grid.width]),
        }
    }

    /// Layer shapes in forward order. Also performs all validation.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        if self.output_dim == 0 {
            return Err(Error::Config("output_dim must be >= 1".into()));
        }
        if self.hidden_dims.len() > MAX_HIDDEN_LAYERS {
            return Err(Error::Config(format!(
                "at most {MAX_HIDDEN_LAYERS} hidden layers supported, got {}",
                self.hidden_dims.len()
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be >= 1".into()));
        }
        let mut shapes = Vec::new();
        let mut width = self.input_dim;
        match self.head_kind {
            HeadKind::Mlp => {
                if self.conv_kernel.is_some() || self.conv_channels.is_some() || self.grid.is_some() {
                    return Err(Error::Config("conv_* / grid fields only apply to conv heads".into()));
                }
            }
            HeadKind::Conv => {
                let [c, h, w] = self
                    .grid
                    .ok_or_else(|| Error::Config("conv head needs a grid = [channels, height, width]".into()))?;
                let grid = GridShape::new(c, h, w);
                if grid.len() != self.input_dim {
                    return Err(Error::Config(format!(
                        "grid {c}x{h}x{w} has {} features but input_dim is {}",
                        grid.len(),
                        self.input_dim
                    )));
                }
                let kernel = self.conv_kernel.unwrap_or(DEFAULT_CONV_KERNEL);
                let channels = self.conv_channels.unwrap_or(DEFAULT_CONV_CHANNELS);
                if kernel == 0 || channels.contains(&0) || grid.is_empty() {
                    return Err(Error::Config("conv kernel, channels and grid must be >= 1".into()));
                }
                let mut shape = grid;
                for out_channels in channels {
                    let next = shape.after_conv(kernel, out_channels).map_err(|_| {
                        Error::Config(format!(
                            "kernel {kernel} too large for a {}x{} feature map",
                            shape.height, shape.width
                        ))
                    })?;
                    shapes.push(LayerShape::Conv { input: shape, kernel, out_channels });
                    shape = next;
                }
                width = shape.len();
            }
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            shapes.push(LayerShape::Linear { fan_in: width, fan_out: h });
            width = h;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// Closed-form number of learnable parameters.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.iter().map(LayerShape::parameter_count).sum())
    }

    pub fn grid_shape(&self) -> Option<GridShape> {
        self.grid.map(|[c, h, w]| GridShape::new(c, h, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight` is (fan_out x fan_in).
    Linear { weight: DenseMatrix, bias: Vec<f64> },
    Conv { kernels: KernelBank, bias: Vec<f64>, input: GridShape },
}

impl Layer {
    fn zeros(shape: &LayerShape) -> Self {
        match *shape {
            LayerShape::Linear { fan_in, fan_out } => Layer::Linear {
                weight: DenseMatrix::zeros(fan_out, fan_in),
                bias: vec![0.0; fan_out],
            },
            LayerShape::Conv { input, kernel, out_channels } => Layer::Conv {
                kernels: KernelBank::zeros(out_channels, input.channels, kernel),
                bias: vec![0.0; out_channels],
                input,
            },
        }
    }

    fn weights(&self) -> &[f64] {
        match self {
            Layer::Linear { weight, .. } => weight.data(),
            Layer::Conv { kernels, .. } => &kernels.data,
        }
    }

    fn bias(&self) -> &[f64] {
        match self {
            Layer::Linear { bias, .. } | Layer::Conv { bias, .. } => bias,
        }
    }

    fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        match self {
            Layer::Linear { weight, bias } => (weight.data_mut(), bias),
            Layer::Conv { kernels, bias, .. } => (&mut kernels.data, bias),
        }
    }
}

/// Learnable weights of a head. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    config: HeadConfig,
    layers: Vec<Layer>,
}

impl HeadParams {
    pub fn zeros(config: &HeadConfig) -> Result<Self> {
        let layers = config.layer_shapes()?.iter().map(Layer::zeros).collect();
        Ok(Self { config: config.clone(), layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Linear { weight, bias } => Layer::Linear {
                        weight: DenseMatrix::zeros(weight.rows(), weight.cols()),
                        bias: vec![0.0; bias.len()],
                    },
                    Layer::Conv { kernels, bias, input } => Layer::Conv {
                        kernels: KernelBank::zeros(kernels.out_channels, kernels.in_channels, kernels.size),
                        bias: vec![0.0; bias.len()],
                        input: *input,
                    },
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Parameter tensors in canonical order: for each layer, its weights
    /// (row-major, or (out, in, dy, dx) for kernels) then its bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights(), l.bias()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let (w, b) = l.parts_mut();
                [w, b]
            })
            .collect()
    }

    /// Number of learnable parameters actually held.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat copy in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values supplied for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &HeadParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            numkernel::add_assign(a, b);
        }
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(config: &HeadConfig, seed: u64) -> Result<HeadParams> {
    let shapes = config.layer_shapes()?;
    let mut params = HeadParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (layer, shape) in params.layers.iter_mut().zip(&shapes) {
        let bound = 1.0 / (shape.fan_in() as f64).sqrt();
        let (w, _) = layer.parts_mut();
        w.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
    }
    Ok(params)
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input of each layer (flattened).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry is the logits.
    pub pre_activations: Vec<Vec<f64>>,
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Result<Vec<f64>> {
    match layer {
        Layer::Linear { weight, bias } => numkernel::affine(weight, bias, x),
        Layer::Conv { kernels, bias, input } => {
            let grid = FeatureGrid::new(*input, x.to_vec())?;
            let out = numkernel::conv2d_valid(&grid, kernels, kernels.size)?;
            let plane = out.shape().plane();
            let mut data = out.into_data();
            for (o, b) in bias.iter().enumerate() {
                data[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
            Ok(data)
        }
    }
}

fn check_input(params: &HeadParams, features: &[f64]) -> Result<()> {
    if features.len() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "head expects {} input features, got {}",
            params.config.input_dim,
            features.len()
        )));
    }
    Ok(())
}

/// Runs the head on one feature vector, returning logits and the trace.
pub fn forward(params: &HeadParams, features: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
    check_input(params, features)?;
    let n = params.layers.len();
    let mut trace = ForwardTrace {
        inputs: Vec::with_capacity(n),
        pre_activations: Vec::with_capacity(n),
    };
    let mut x = features.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let pre = layer_forward(layer, &x)?;
        let next = if i + 1 < n { numkernel::relu_slice(&pre) } else { pre.clone() };
        trace.inputs.push(x);
        trace.pre_activations.push(pre);
        x = next;
    }
    Ok((x, trace))
}

/// Logits only, without keeping a trace.
pub fn logits(params: &HeadParams, features: &[f64]) -> Result<Vec<f64>> {
    check_input(params, features)?;
    let n = params.layers.len();
    let mut x = features.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer_forward(layer, &x)?;
        if i + 1 < n {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(x)
}

/// Conv-head forward pass over a feature grid.
pub fn forward_conv(params: &HeadParams, grid: &FeatureGrid) -> Result<(Vec<f64>, ForwardTrace)> {
    if params.config.head_kind != HeadKind::Conv {
        return Err(Error::Shape("forward_conv called on an MLP head".into()));
    }
    if params.config.grid_shape() != Some(grid.shape()) {
        return Err(Error::Shape(format!(
            "grid {:?} does not match head grid {:?}",
            grid.shape(),
            params.config.grid
        )));
    }
    forward(params, grid.data())
}

/// Logits for every row of `features` (one sample per row).
///
/// MLP heads run as batched matrix products; the result is bit-identical to
/// calling [`logits`] per row.
pub fn logits_batch(params: &HeadParams, features: &DenseMatrix) -> Result<DenseMatrix> {
    if features.cols() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "head expects {} input features, got {}",
            params.config.input_dim,
            features.cols()
        )));
    }
    if params.config.head_kind == HeadKind::Conv {
        let rows = par::map_range(features.rows(), |i| logits(params, features.row(i)));
        return DenseMatrix::from_rows(&rows.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let n = params.layers.len();
    let mut x = features.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let Layer::Linear { weight, bias } = layer else {
            unreachable!("mlp heads only hold linear layers")
        };
        x = numkernel::matmul(&x, &weight.transpose())?;
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
                if i + 1 < n {
                    *v = v.max(0.0);
                }
            }
        }
    }
    Ok(x)
}

/// Gradients of `logit_grad · logits` with respect to every parameter.
pub fn backward(params: &HeadParams, trace: &ForwardTrace, logit_grad: &[f64]) -> Result<HeadParams> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, logit_grad, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], accumulating into `grads`.
pub fn backward_into(
    params: &HeadParams,
    trace: &ForwardTrace,
    logit_grad: &[f64],
    grads: &mut HeadParams,
) -> Result<()> {
    let n = params.layers.len();
    if trace.inputs.len() != n || trace.pre_activations.len() != n || !params.same_shape(grads) {
        return Err(Error::Shape("trace or gradient buffer does not match the head".into()));
    }
    if logit_grad.len() != params.config.output_dim {
        return Err(Error::Shape(format!(
            "logit gradient has length {}, head has {} outputs",
            logit_grad.len(),
            params.config.output_dim
        )));
    }
    let mut g = logit_grad.to_vec();
    for i in (0..n).rev() {
        if i + 1 < n {
            for (gv, &pre) in g.iter_mut().zip(&trace.pre_activations[i]) {
                if pre <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = &trace.inputs[i];
        match (&params.layers[i], &mut grads.layers[i]) {
            (Layer::Linear { weight, .. }, Layer::Linear { weight: gw, bias: gb }) => {
                numkernel::add_outer(gw, &g, input);
                numkernel::add_assign(gb, &g);
                if i > 0 {
                    g = numkernel::affine_input_grad(weight, &g);
                }
            }
            (Layer::Conv { kernels, input: shape, .. }, Layer::Conv { kernels: gk, bias: gb, .. }) => {
                let out_shape = shape.after_conv(kernels.size, kernels.out_channels)?;
                let plane = out_shape.plane();
                for (o, b) in gb.iter_mut().enumerate() {
                    *b += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                }
                let (gi, gkern) = numkernel::conv2d_valid_backward(
                    &FeatureGrid::new(*shape, input.clone())?,
                    kernels,
                    &FeatureGrid::new(out_shape, g)?,
                )?;
                numkernel::add_assign(&mut gk.data, &gkern.data);
                g = gi.into_data();
            }
            _ => return Err(Error::Shape("gradient buffer layer kinds differ".into())),
        }
    }
    Ok(())
}
