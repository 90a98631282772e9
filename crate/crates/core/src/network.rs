//! Feedforward classifier with a hand-written backward pass and RMSprop.
//!
//! Weights are stored `input_dim × output_dim`, so a layer computes
//! `Y = act(X · W + b)` for a batch `X` with one sample per row. The last
//! layer is always linear; its outputs are the logits fed to the losses.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Linear => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Hidden layers of the given widths followed by a linear output layer.
pub fn mlp_specs(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    activation: Activation,
) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &h in hidden {
        specs.push(LayerSpec::new(prev, h, activation));
        prev = h;
    }
    specs.push(LayerSpec::new(prev, num_classes, Activation::Linear));
    specs
}

/// Checks dims, chaining, and that the final layer is linear.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let Some(last) = specs.last() else {
        return Err(Error::InvalidSpec(
            "network needs at least one layer".into(),
        ));
    };
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {k} has a zero dimension"
            )));
        }
        if let Some(next) = specs.get(k + 1) {
            if next.input_dim != s.output_dim {
                return Err(Error::InvalidSpec(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    s.output_dim,
                    k + 1,
                    next.input_dim
                )));
            }
        }
    }
    if last.activation != Activation::Linear {
        return Err(Error::InvalidSpec("final layer must be linear".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `input_dim × output_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of a whole network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Per-layer values kept by [`ModelParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ModelParams {
    /// Assembles parameters from explicit layers, checking every shape.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (k, l) in layers.iter().enumerate() {
            if l.weights.shape() != (l.spec.input_dim, l.spec.output_dim)
                || l.bias.len() != l.spec.output_dim
            {
                return Err(Error::InvalidSpec(format!(
                    "layer {k} parameter shapes do not match its spec"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// A zero-valued copy with identical shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weights: Matrix::zeros(l.spec.input_dim, l.spec.output_dim),
                    bias: vec![0.0; l.spec.output_dim],
                })
                .collect(),
        }
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len()
            })
    }

    /// Every parameter in layer order: weights row-major, then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the `i`-th parameter in [`ModelParams::flat`] order.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            if i < nw {
                return &mut l.weights.data_mut()[i];
            }
            i -= nw;
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Logits for a batch plus the activations needed by [`ModelParams::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.clone();
        for l in &self.layers {
            let mut pre = x.matmul(&l.weights)?;
            pre.add_row_vector(&l.bias)?;
            let mut out = pre.clone();
            out.map_inplace(|v| l.spec.activation.apply(v));
            cache.inputs.push(x);
            cache.pre_activations.push(pre);
            x = out.clone();
            cache.outputs.push(out);
        }
        Ok((x, cache))
    }

    /// Logits only.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut x = batch.clone();
        for l in &self.layers {
            let mut pre = x.matmul(&l.weights)?;
            pre.add_row_vector(&l.bias)?;
            pre.map_inplace(|v| l.spec.activation.apply(v));
            x = pre;
        }
        Ok(x)
    }

    /// Gradient of the loss w.r.t. every parameter, given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<ModelParams> {
        let last = cache
            .outputs
            .last()
            .ok_or_else(|| Error::ShapeMismatch("empty forward cache".into()))?;
        if cache.outputs.len() != self.layers.len() || d_logits.shape() != last.shape() {
            return Err(Error::ShapeMismatch(format!(
                "dLoss/dLogits is {:?}, forward produced {:?}",
                d_logits.shape(),
                last.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let pre = &cache.pre_activations[k];
            let out = &cache.outputs[k];
            if layer.spec.activation != Activation::Linear {
                for ((g, &p), &o) in upstream
                    .data_mut()
                    .iter_mut()
                    .zip(pre.data())
                    .zip(out.data())
                {
                    *g *= layer.spec.activation.derivative(p, o);
                }
            }
            let d_w = cache.inputs[k].t_matmul(&upstream)?;
            let d_b = upstream.sum_rows();
            if k > 0 {
                upstream = upstream.matmul_t(&layer.weights)?;
            }
            grads.push(Layer {
                spec: layer.spec,
                weights: d_w,
                bias: d_b,
            });
        }
        grads.reverse();
        Ok(ModelParams { layers: grads })
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(save_model(self)).into()
    }
}

/// Weights drawn from `N(0, 1/input_dim)`, biases zero.
pub fn init_params(specs: &[LayerSpec], rng: &mut SeededRng) -> Result<ModelParams> {
    validate_specs(specs)?;
    let layers = specs
        .iter()
        .map(|&spec| {
            let scale = 1.0 / (spec.input_dim as f64).sqrt();
            let w: Vec<f64> = rng
                .standard_normal(spec.input_dim * spec.output_dim)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            Ok(Layer {
                spec,
                weights: Matrix::new(spec.input_dim, spec.output_dim, w)?,
                bias: vec![0.0; spec.output_dim],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { layers })
}

/// RMSprop accumulators and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    /// Running mean of squared gradients, shaped like the parameters.
    pub mean_square: ModelParams,
    pub decay: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPSILON: f64 = 1e-8;

impl RmspropState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Self::with_hyperparameters(params, learning_rate, RMSPROP_DECAY, RMSPROP_EPSILON)
    }

    pub fn with_hyperparameters(
        params: &ModelParams,
        learning_rate: f64,
        decay: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            mean_square: params.zeros_like(),
            decay,
            epsilon,
            learning_rate,
        }
    }
}

/// One RMSprop update, in place:
/// `acc ← decay·acc + (1−decay)·g²`, `θ ← θ − lr·g/(√acc + ε)`.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut RmspropState,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.mean_square) {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and accumulators must share shapes".into(),
        ));
    }
    let (decay, eps, lr) = (state.decay, state.epsilon, state.learning_rate);
    let update = |p: &mut [f64], g: &[f64], acc: &mut [f64]| {
        for ((p, &g), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
            *a = decay * *a + (1.0 - decay) * g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    };
    for ((l, g), a) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.mean_square.layers)
    {
        update(l.weights.data_mut(), g.weights.data(), a.weights.data_mut());
        update(&mut l.bias, &g.bias, &mut a.bias);
    }
    Ok(())
}

const MODEL_MAGIC: &[u8; 8] = b"SSHFTMDL";
const MODEL_VERSION: u32 = 1;

/// Checkpoint encoding:
///
/// ```text
/// magic "SSHFTMDL" | version u32 | layer count u32
/// per layer: input_dim u32 | output_dim u32 | activation u8
/// per layer: weights f64[input_dim*output_dim] row-major | bias f64[output_dim]
/// ```
///
/// All integers and floats little-endian.
pub fn save_model(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 9 * params.layers.len() + 8 * params.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.spec.output_dim as u32).to_le_bytes());
        out.push(l.spec.activation.tag());
    }
    for v in params.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_model(bytes: &[u8]) -> Result<ModelParams> {
    let corrupt = |offset: usize, reason: &str| Error::CorruptCheckpoint {
        offset,
        reason: reason.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8).ok_or_else(|| corrupt(r.pos, "truncated magic"))?;
    if magic != MODEL_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.u32().ok_or_else(|| corrupt(r.pos, "truncated version"))?;
    if version != MODEL_VERSION {
        return Err(corrupt(8, &format!("unsupported version {version}")));
    }
    let n = r
        .u32()
        .ok_or_else(|| corrupt(r.pos, "truncated layer count"))? as usize;
    let mut specs = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        let input_dim = r
            .u32()
            .ok_or_else(|| corrupt(r.pos, "truncated layer header"))?;
        let output_dim = r
            .u32()
            .ok_or_else(|| corrupt(r.pos, "truncated layer header"))?;
        let tag = r
            .u8()
            .ok_or_else(|| corrupt(r.pos, "truncated layer header"))?;
        let activation =
            Activation::from_tag(tag).ok_or_else(|| corrupt(at + 8, "unknown activation tag"))?;
        specs.push(LayerSpec::new(
            input_dim as usize,
            output_dim as usize,
            activation,
        ));
    }
    let header_end = r.pos;
    validate_specs(&specs).map_err(|e| corrupt(header_end, &e.to_string()))?;
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let nw = spec.input_dim * spec.output_dim;
        let w = r
            .f64s(nw)
            .ok_or_else(|| corrupt(r.pos, "truncated weights"))?;
        let b = r
            .f64s(spec.output_dim)
            .ok_or_else(|| corrupt(r.pos, "truncated bias"))?;
        layers.push(Layer {
            spec,
            weights: Matrix::new(spec.input_dim, spec.output_dim, w)?,
            bias: b,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(r.pos, "trailing bytes"));
    }
    Ok(ModelParams { layers })
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
