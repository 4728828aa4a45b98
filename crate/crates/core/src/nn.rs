//! Small networks with explicit forward and backward passes.
//!
//! Two architectures are provided:
//!
//! * `CnnHar`: `Conv(1×9, 32) → BN → ReLU → MaxPool(1×2) → Conv(1×9, 64) →
//!   BN → ReLU → MaxPool(1×2) → Flatten → Dense(256) → ReLU → Dense(128) →
//!   ReLU → Dense(C)`, for windowed inertial signals shaped
//!   `channels × length`.
//! * `Mlp`: `Dense(64) → ReLU → Dense(32) → ReLU → Dense(C)`, for flat
//!   feature vectors.
//!
//! In both, the output of the last hidden layer (post-activation) is exposed
//! as the feature vector `h` used by the contrastive loss, so `backward`
//! accepts gradients on the logits and on `h` at the same time.
//!
//! Convolutions are valid (no padding) with stride 1. Batch norm keeps
//! per-filter statistics over batch and time; running statistics use
//! `running = 0.9·running + 0.1·batch` and `ε = 1e-5`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CONV_KERNEL: usize = 9;
pub const POOL: usize = 2;
pub const CONV1_FILTERS: usize = 32;
pub const CONV2_FILTERS: usize = 64;
pub const CNN_HIDDEN: [usize; 2] = [256, 128];
pub const MLP_HIDDEN: [usize; 2] = [64, 32];
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureTag {
    CnnHar,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    CnnHar {
        in_channels: usize,
        in_length: usize,
        num_classes: usize,
    },
    Mlp {
        in_dims: usize,
        num_classes: usize,
    },
}

impl Architecture {
    pub fn tag(&self) -> ArchitectureTag {
        match self {
            Architecture::CnnHar { .. } => ArchitectureTag::CnnHar,
            Architecture::Mlp { .. } => ArchitectureTag::Mlp,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::CnnHar { num_classes, .. } | Architecture::Mlp { num_classes, .. } => num_classes,
        }
    }

    /// Width of the feature vector `h`.
    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::CnnHar { .. } => CNN_HIDDEN[1],
            Architecture::Mlp { .. } => MLP_HIDDEN[1],
        }
    }

    /// Expected `(channels, length)` of one input sample.
    pub fn input_shape(&self) -> (usize, usize) {
        match *self {
            Architecture::CnnHar {
                in_channels, in_length, ..
            } => (in_channels, in_length),
            Architecture::Mlp { in_dims, .. } => (1, in_dims),
        }
    }

    fn validate(&self) -> Result<CnnDims> {
        let arch_err = |layer: &str, reason: String| Error::Architecture {
            layer: layer.to_string(),
            reason,
        };
        if self.num_classes() < 2 {
            return Err(arch_err(
                "head",
                format!("need at least 2 classes, got {}", self.num_classes()),
            ));
        }
        match *self {
            Architecture::Mlp { in_dims, .. } => {
                if in_dims == 0 {
                    return Err(arch_err("fc1", "input dimension is zero".into()));
                }
                Ok(CnnDims::default())
            }
            Architecture::CnnHar {
                in_channels, in_length, ..
            } => {
                if in_channels == 0 {
                    return Err(arch_err("conv1", "zero input channels".into()));
                }
                let conv1 = (in_length + 1)
                    .checked_sub(CONV_KERNEL)
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| arch_err("conv1", format!("input length {in_length} shorter than kernel")))?;
                let pool1 = conv1 / POOL;
                if pool1 == 0 {
                    return Err(arch_err("pool1", format!("conv1 output length {conv1} < {POOL}")));
                }
                let conv2 = (pool1 + 1)
                    .checked_sub(CONV_KERNEL)
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| arch_err("conv2", format!("pool1 output length {pool1} shorter than kernel")))?;
                let pool2 = conv2 / POOL;
                if pool2 == 0 {
                    return Err(arch_err("pool2", format!("conv2 output length {conv2} < {POOL}")));
                }
                Ok(CnnDims { pool2 })
            }
        }
    }
}

/// Temporal length left after the second pooling stage.
#[derive(Debug, Clone, Copy, Default)]
struct CnnDims {
    pool2: usize,
}

/// A named parameter tensor. `values` is `shape[0] × prod(shape[1..])` for
/// tensors of rank ≥ 2 and `1 × n` for vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Matrix,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let (r, c) = matrix_dims(&shape);
        Self {
            name: name.into(),
            shape,
            values: Matrix::zeros(r, c),
        }
    }

    pub fn from_values(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let (r, c) = matrix_dims(&shape);
        let values = Matrix::new(r, c, values)
            .map_err(|_| Error::shape(format!("tensor `{name}`"), format!("{shape:?}"), "wrong element count"))?;
        Ok(Self { name, shape, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Matrix view used for a tensor of the given shape.
pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

/// Ordered trainable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(arch: Architecture, layers: Vec<Tensor>) -> Result<Self> {
        let template = Self::zeros(arch)?;
        check_same_layout(&template.layers, &layers, "ModelParams::new")?;
        Ok(Self { arch, layers })
    }

    /// All-zero parameters with the architecture's layout.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let dims = arch.validate()?;
        let shapes = layer_shapes(&arch, dims);
        let layers = shapes.into_iter().map(|(n, s)| Tensor::zeros(n, s)).collect();
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.layers {
            out.extend_from_slice(t.values.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` for the layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("unflatten", self.num_params(), flat.len()));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in &mut out.layers {
            let n = t.numel();
            t.values.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        check_same_layout(&self.layers, &other.layers, "axpy")?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.values.axpy(alpha, &b.values);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.layers {
            t.values.scale(alpha);
        }
    }

    /// Fails unless `other` has exactly the same layer names and shapes.
    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        check_same_layout(&self.layers, &other.layers, "layout check")
    }
}

fn check_same_layout(expected: &[Tensor], actual: &[Tensor], ctx: &str) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::shape(ctx, format!("{} layers", expected.len()), actual.len()));
    }
    for (e, a) in expected.iter().zip(actual) {
        if e.name != a.name || e.shape != a.shape || e.values.len() != a.values.len() {
            return Err(Error::shape(
                format!("{ctx}, layer `{}`", e.name),
                format!("`{}` {:?}", e.name, e.shape),
                format!("`{}` {:?}", a.name, a.shape),
            ));
        }
    }
    Ok(())
}

fn layer_shapes(arch: &Architecture, dims: CnnDims) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize| {
        out.push((format!("{name}.weight"), vec![o, i]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    match *arch {
        Architecture::CnnHar {
            in_channels,
            num_classes,
            ..
        } => {
            out.push(("conv1.weight".into(), vec![CONV1_FILTERS, in_channels, 1, CONV_KERNEL]));
            out.push(("conv1.bias".into(), vec![CONV1_FILTERS]));
            out.push(("bn1.weight".into(), vec![CONV1_FILTERS]));
            out.push(("bn1.bias".into(), vec![CONV1_FILTERS]));
            out.push((
                "conv2.weight".into(),
                vec![CONV2_FILTERS, CONV1_FILTERS, 1, CONV_KERNEL],
            ));
            out.push(("conv2.bias".into(), vec![CONV2_FILTERS]));
            out.push(("bn2.weight".into(), vec![CONV2_FILTERS]));
            out.push(("bn2.bias".into(), vec![CONV2_FILTERS]));
            dense(&mut out, "fc1", CNN_HIDDEN[0], CONV2_FILTERS * dims.pool2);
            dense(&mut out, "fc2", CNN_HIDDEN[1], CNN_HIDDEN[0]);
            dense(&mut out, "head", num_classes, CNN_HIDDEN[1]);
        }
        Architecture::Mlp { in_dims, num_classes } => {
            dense(&mut out, "fc1", MLP_HIDDEN[0], in_dims);
            dense(&mut out, "fc2", MLP_HIDDEN[1], MLP_HIDDEN[0]);
            dense(&mut out, "head", num_classes, MLP_HIDDEN[1]);
        }
    }
    out
}

fn buffer_shapes(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    match arch {
        Architecture::CnnHar { .. } => vec![
            ("bn1.running_mean".into(), vec![CONV1_FILTERS]),
            ("bn1.running_var".into(), vec![CONV1_FILTERS]),
            ("bn2.running_mean".into(), vec![CONV2_FILTERS]),
            ("bn2.running_var".into(), vec![CONV2_FILTERS]),
        ],
        Architecture::Mlp { .. } => Vec::new(),
    }
}

/// Non-trainable state: batch-norm running statistics (empty for the MLP).
pub fn initial_buffers(arch: &Architecture) -> Vec<Tensor> {
    buffer_shapes(arch)
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(name, shape);
            if t.name.ends_with("running_var") {
                t.values.data_mut().fill(1.0);
            }
            t
        })
        .collect()
}

/// Parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: ModelParams,
    pub buffers: Vec<Tensor>,
}

impl Network {
    pub fn new(params: ModelParams) -> Self {
        let buffers = initial_buffers(&params.arch);
        Self { params, buffers }
    }

    pub fn architecture(&self) -> Architecture {
        self.params.arch
    }

    /// Train-mode forward; folds the batch statistics into the running ones.
    pub fn forward_train(&mut self, input: &Input) -> Result<ForwardTrace> {
        let out = forward(&self.params, &self.buffers, input, Mode::Train)?;
        update_running_stats(&mut self.buffers, &out.batch_stats)?;
        Ok(out.trace)
    }

    pub fn forward_eval(&self, input: &Input) -> Result<ForwardTrace> {
        Ok(forward(&self.params, &self.buffers, input, Mode::Eval)?.trace)
    }
}

/// `running = momentum·running + (1 − momentum)·batch` for every buffer.
pub fn update_running_stats(buffers: &mut [Tensor], batch_stats: &[Tensor]) -> Result<()> {
    if buffers.len() != batch_stats.len() {
        return Err(Error::shape("running stats", buffers.len(), batch_stats.len()));
    }
    for (r, b) in buffers.iter_mut().zip(batch_stats) {
        if r.name != b.name || r.numel() != b.numel() {
            return Err(Error::shape("running stats", &r.name, &b.name));
        }
        for (rv, &bv) in r.values.data_mut().iter_mut().zip(b.values.data()) {
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * bv;
        }
    }
    Ok(())
}

/// Deterministic fan-in scaled uniform init, `U(−1/√fan_in, 1/√fan_in)` for
/// weights and biases; batch-norm scale 1 and shift 0.
pub fn build_network(arch: Architecture, seed: u64) -> Result<Network> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = 1usize;
    for t in &mut params.layers {
        if t.name.starts_with("bn") {
            if t.name.ends_with("weight") {
                t.values.data_mut().fill(1.0);
            }
            continue;
        }
        if t.name.ends_with("weight") {
            fan_in = t.shape[1..].iter().product();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in t.values.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(Network::new(params))
}

/// The HAR CNN; fails when the input is too short for the two conv blocks.
pub fn build_cnn_har(in_channels: usize, in_length: usize, num_classes: usize, seed: u64) -> Result<Network> {
    build_network(
        Architecture::CnnHar {
            in_channels,
            in_length,
            num_classes,
        },
        seed,
    )
}

pub fn build_mlp(in_dims: usize, num_classes: usize, seed: u64) -> Result<Network> {
    build_network(Architecture::Mlp { in_dims, num_classes }, seed)
}

/// A batch of `batch × channels × length` samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub batch: usize,
    pub channels: usize,
    pub length: usize,
    pub data: Vec<f64>,
}

impl Input {
    pub fn new(batch: usize, channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(Error::shape(
                "Input::new",
                format!("{batch}x{channels}x{length}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            batch,
            channels,
            length,
            data,
        })
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.length;
        &self.data[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Matrix,
    /// Post-ReLU output; `None` for the linear head.
    activated: Option<Matrix>,
}

#[derive(Debug, Clone)]
struct ConvBlockCache {
    /// Block input, `B × C_in × L_in`.
    input: Vec<f64>,
    in_channels: usize,
    in_len: usize,
    out_len: usize,
    /// Normalized conv output, `B × F × out_len`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Post-BN, post-ReLU activations (pre-pool).
    relu_out: Vec<f64>,
    /// Index into `relu_out` chosen by each pooled cell.
    pool_argmax: Vec<usize>,
    pooled_len: usize,
}

#[derive(Debug, Clone)]
enum TrunkCache {
    Cnn(Box<[ConvBlockCache; 2]>),
    Mlp,
}

/// Cached activations of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    arch: Architecture,
    mode: Mode,
    batch: usize,
    trunk: TrunkCache,
    dense: [DenseCache; 3],
    /// `B × C`.
    pub logits: Matrix,
    /// `B × feature_dim`, the contrastive feature tap.
    pub features: Matrix,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub trace: ForwardTrace,
    /// Batch mean and unbiased variance of each batch-norm layer, named like
    /// the running buffers. Empty in eval mode and for the MLP.
    pub batch_stats: Vec<Tensor>,
}

/// Forward pass without touching any state.
pub fn forward(params: &ModelParams, buffers: &[Tensor], input: &Input, mode: Mode) -> Result<ForwardOutput> {
    let arch = params.arch;
    let (ch, len) = arch.input_shape();
    let ok_shape = match arch {
        Architecture::CnnHar { .. } => input.channels == ch && input.length == len,
        Architecture::Mlp { .. } => input.channels * input.length == len,
    };
    if !ok_shape || input.batch == 0 {
        return Err(Error::shape(
            "forward input",
            format!("B>=1 x {ch} x {len}"),
            format!("{} x {} x {}", input.batch, input.channels, input.length),
        ));
    }
    let b = input.batch;
    let p = |name: &str| -> &Matrix { &params.layer(name).expect("layout validated").values };

    let mut batch_stats = Vec::new();
    let (trunk, flat) = match arch {
        Architecture::CnnHar { .. } => {
            let buf = |name: &str| -> Result<&[f64]> {
                buffers
                    .iter()
                    .find(|t| t.name == name)
                    .map(|t| t.values.data())
                    .ok_or_else(|| Error::shape("forward buffers", name, "missing"))
            };
            let (c1, s1) = conv_block_forward(
                &input.data,
                b,
                input.channels,
                input.length,
                [p("conv1.weight"), p("conv1.bias"), p("bn1.weight"), p("bn1.bias")],
                [buf("bn1.running_mean")?, buf("bn1.running_var")?],
                mode,
            );
            let pooled1 = pooled_output(&c1);
            let (c2, s2) = conv_block_forward(
                &pooled1,
                b,
                CONV1_FILTERS,
                c1.pooled_len,
                [p("conv2.weight"), p("conv2.bias"), p("bn2.weight"), p("bn2.bias")],
                [buf("bn2.running_mean")?, buf("bn2.running_var")?],
                mode,
            );
            let flat_len = CONV2_FILTERS * c2.pooled_len;
            let flat = Matrix::new(b, flat_len, pooled_output(&c2))?;
            if let (Some((m1, v1)), Some((m2, v2))) = (s1, s2) {
                batch_stats = vec![
                    Tensor::from_values("bn1.running_mean", vec![CONV1_FILTERS], m1)?,
                    Tensor::from_values("bn1.running_var", vec![CONV1_FILTERS], v1)?,
                    Tensor::from_values("bn2.running_mean", vec![CONV2_FILTERS], m2)?,
                    Tensor::from_values("bn2.running_var", vec![CONV2_FILTERS], v2)?,
                ];
            }
            (TrunkCache::Cnn(Box::new([c1, c2])), flat)
        }
        Architecture::Mlp { .. } => (TrunkCache::Mlp, Matrix::new(b, len, input.data.clone())?),
    };

    let a1 = relu(&dense_forward(&flat, p("fc1.weight"), p("fc1.bias")));
    let h = relu(&dense_forward(&a1, p("fc2.weight"), p("fc2.bias")));
    let logits = dense_forward(&h, p("head.weight"), p("head.bias"));

    let dense = [
        DenseCache {
            input: flat,
            activated: Some(a1.clone()),
        },
        DenseCache {
            input: a1,
            activated: Some(h.clone()),
        },
        DenseCache {
            input: h.clone(),
            activated: None,
        },
    ];
    Ok(ForwardOutput {
        trace: ForwardTrace {
            arch,
            mode,
            batch: b,
            trunk,
            dense,
            logits,
            features: h,
        },
        batch_stats,
    })
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// `y = x·Wᵀ + b`, with `W` stored `out × in`.
fn dense_forward(x: &Matrix, w: &Matrix, bias: &Matrix) -> Matrix {
    let (bsz, din, dout) = (x.rows(), x.cols(), w.rows());
    let mut y = Matrix::zeros(bsz, dout);
    for s in 0..bsz {
        let xr = x.row(s);
        let yr = y.row_mut(s);
        for o in 0..dout {
            let wr = w.row(o);
            let mut acc = bias.data()[o];
            for i in 0..din {
                acc += wr[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    y
}

fn pooled_output(c: &ConvBlockCache) -> Vec<f64> {
    c.pool_argmax.iter().map(|&i| c.relu_out[i]).collect()
}

type BnStats = Option<(Vec<f64>, Vec<f64>)>;

/// Conv → BN → ReLU → MaxPool.
fn conv_block_forward(
    x: &[f64],
    b: usize,
    cin: usize,
    lin: usize,
    [w, bias, gamma, beta]: [&Matrix; 4],
    [run_mean, run_var]: [&[f64]; 2],
    mode: Mode,
) -> (ConvBlockCache, BnStats) {
    let f = w.rows();
    let k = CONV_KERNEL;
    let lout = lin + 1 - k;
    let mut conv = vec![0.0; b * f * lout];
    for s in 0..b {
        for o in 0..f {
            let wr = w.row(o);
            let out = &mut conv[(s * f + o) * lout..(s * f + o + 1) * lout];
            out.fill(bias.data()[o]);
            for c in 0..cin {
                let xr = &x[(s * cin + c) * lin..(s * cin + c + 1) * lin];
                let wk = &wr[c * k..(c + 1) * k];
                for (t, ot) in out.iter_mut().enumerate() {
                    let xs = &xr[t..t + k];
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += wk[j] * xs[j];
                    }
                    *ot += acc;
                }
            }
        }
    }

    let n = (b * lout) as f64;
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    match mode {
        Mode::Train => {
            for o in 0..f {
                let mut sum = 0.0;
                for s in 0..b {
                    sum += conv[(s * f + o) * lout..(s * f + o + 1) * lout].iter().sum::<f64>();
                }
                mean[o] = sum / n;
                let mut sq = 0.0;
                for s in 0..b {
                    for &v in &conv[(s * f + o) * lout..(s * f + o + 1) * lout] {
                        sq += (v - mean[o]).powi(2);
                    }
                }
                var[o] = sq / n;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(run_mean);
            var.copy_from_slice(run_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = vec![0.0; conv.len()];
    let mut relu_out = vec![0.0; conv.len()];
    for s in 0..b {
        for o in 0..f {
            let base = (s * f + o) * lout;
            for t in 0..lout {
                let xh = (conv[base + t] - mean[o]) * inv_std[o];
                xhat[base + t] = xh;
                relu_out[base + t] = (gamma.data()[o] * xh + beta.data()[o]).max(0.0);
            }
        }
    }

    let pooled_len = lout / POOL;
    let mut pool_argmax = Vec::with_capacity(b * f * pooled_len);
    for s in 0..b {
        for o in 0..f {
            let base = (s * f + o) * lout;
            for t in 0..pooled_len {
                let mut best = base + t * POOL;
                for j in 1..POOL {
                    if relu_out[base + t * POOL + j] > relu_out[best] {
                        best = base + t * POOL + j;
                    }
                }
                pool_argmax.push(best);
            }
        }
    }

    let stats = (mode == Mode::Train).then(|| {
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        (mean.clone(), var.iter().map(|v| v * unbiased).collect())
    });

    (
        ConvBlockCache {
            input: x.to_vec(),
            in_channels: cin,
            in_len: lin,
            out_len: lout,
            xhat,
            inv_std,
            relu_out,
            pool_argmax,
            pooled_len,
        },
        stats,
    )
}

/// Parameter gradients given upstream gradients on the logits (`B × C`)
/// and on the features (`B × feature_dim`). Either may be `None` for zero.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: Option<&Matrix>,
    grad_features: Option<&Matrix>,
) -> Result<ModelParams> {
    if trace.arch != params.arch {
        return Err(Error::shape(
            "backward",
            format!("{:?}", params.arch),
            format!("{:?}", trace.arch),
        ));
    }
    let b = trace.batch;
    let c = params.arch.num_classes();
    let fd = params.arch.feature_dim();
    let zero_logits;
    let gl = match grad_logits {
        Some(g) => g,
        None => {
            zero_logits = Matrix::zeros(b, c);
            &zero_logits
        }
    };
    if gl.rows() != b || gl.cols() != c {
        return Err(Error::shape(
            "backward logits grad",
            format!("{b}x{c}"),
            format!("{}x{}", gl.rows(), gl.cols()),
        ));
    }
    if let Some(gf) = grad_features {
        if gf.rows() != b || gf.cols() != fd {
            return Err(Error::shape(
                "backward feature grad",
                format!("{b}x{fd}"),
                format!("{}x{}", gf.rows(), gf.cols()),
            ));
        }
    }

    let p = |name: &str| -> &Matrix { &params.layer(name).expect("layout validated").values };
    let mut grads = params.zeros_like();
    let put = |grads: &mut ModelParams, name: &str, m: Matrix| {
        let t = grads.layers.iter_mut().find(|t| t.name == name).expect("layer exists");
        t.values = m;
    };

    let (dw, db, mut dh) = dense_backward(&trace.dense[2].input, p("head.weight"), gl);
    put(&mut grads, "head.weight", dw);
    put(&mut grads, "head.bias", db);
    if let Some(gf) = grad_features {
        dh.axpy(1.0, gf);
    }

    let mut upstream = dh;
    for (idx, name) in [(1usize, "fc2"), (0, "fc1")] {
        let cache = &trace.dense[idx];
        let act = cache.activated.as_ref().expect("hidden layers are activated");
        for (g, &a) in upstream.data_mut().iter_mut().zip(act.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let (dw, db, dx) = dense_backward(&cache.input, p(&format!("{name}.weight")), &upstream);
        put(&mut grads, &format!("{name}.weight"), dw);
        put(&mut grads, &format!("{name}.bias"), db);
        upstream = dx;
    }

    if let TrunkCache::Cnn(blocks) = &trace.trunk {
        let dpooled2 = upstream.into_data();
        let (g2, dpooled1) = conv_block_backward(
            &blocks[1],
            &dpooled2,
            b,
            [p("conv2.weight"), p("bn2.weight")],
            trace.mode,
        );
        let (g1, _) = conv_block_backward(
            &blocks[0],
            &dpooled1,
            b,
            [p("conv1.weight"), p("bn1.weight")],
            trace.mode,
        );
        for (prefix, bn, g) in [("conv2", "bn2", g2), ("conv1", "bn1", g1)] {
            put(&mut grads, &format!("{prefix}.weight"), g.dw);
            put(&mut grads, &format!("{prefix}.bias"), g.db);
            put(&mut grads, &format!("{bn}.weight"), g.dgamma);
            put(&mut grads, &format!("{bn}.bias"), g.dbeta);
        }
    }
    Ok(grads)
}

/// Returns `(dW, db, dx)`.
fn dense_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (bsz, din, dout) = (x.rows(), x.cols(), w.rows());
    let mut dw = Matrix::zeros(dout, din);
    let mut db = Matrix::zeros(1, dout);
    let mut dx = Matrix::zeros(bsz, din);
    for s in 0..bsz {
        let xr = x.row(s);
        let dyr = dy.row(s);
        for o in 0..dout {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db.data_mut()[o] += g;
            let dwr = dw.row_mut(o);
            for i in 0..din {
                dwr[i] += g * xr[i];
            }
            let wr = w.row(o);
            let dxr = dx.row_mut(s);
            for i in 0..din {
                dxr[i] += g * wr[i];
            }
        }
    }
    (dw, db, dx)
}

struct ConvBlockGrads {
    dw: Matrix,
    db: Matrix,
    dgamma: Matrix,
    dbeta: Matrix,
}

fn conv_block_backward(
    cache: &ConvBlockCache,
    dpooled: &[f64],
    b: usize,
    [w, gamma]: [&Matrix; 2],
    mode: Mode,
) -> (ConvBlockGrads, Vec<f64>) {
    let f = w.rows();
    let (cin, lin, lout) = (cache.in_channels, cache.in_len, cache.out_len);
    let k = CONV_KERNEL;

    // Unpool, then ReLU mask.
    let mut dy = vec![0.0; cache.relu_out.len()];
    for (&idx, &g) in cache.pool_argmax.iter().zip(dpooled) {
        dy[idx] += g;
    }
    for (g, &a) in dy.iter_mut().zip(&cache.relu_out) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }

    let n = (b * lout) as f64;
    let mut dgamma = Matrix::zeros(1, f);
    let mut dbeta = Matrix::zeros(1, f);
    let mut dconv = vec![0.0; dy.len()];
    for o in 0..f {
        let g = gamma.data()[o];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        let mut dg = 0.0;
        let mut dbt = 0.0;
        for s in 0..b {
            let base = (s * f + o) * lout;
            for t in 0..lout {
                let d = dy[base + t];
                let xh = cache.xhat[base + t];
                dg += d * xh;
                dbt += d;
                sum_dxh += d * g;
                sum_dxh_xh += d * g * xh;
            }
        }
        dgamma.data_mut()[o] = dg;
        dbeta.data_mut()[o] = dbt;
        let inv = cache.inv_std[o];
        for s in 0..b {
            let base = (s * f + o) * lout;
            for t in 0..lout {
                let dxh = dy[base + t] * g;
                dconv[base + t] = match mode {
                    Mode::Train => inv * (dxh - sum_dxh / n - cache.xhat[base + t] * sum_dxh_xh / n),
                    Mode::Eval => inv * dxh,
                };
            }
        }
    }

    let mut dw = Matrix::zeros(f, cin * k);
    let mut db = Matrix::zeros(1, f);
    let mut dx = vec![0.0; b * cin * lin];
    for s in 0..b {
        for o in 0..f {
            let dco = &dconv[(s * f + o) * lout..(s * f + o + 1) * lout];
            db.data_mut()[o] += dco.iter().sum::<f64>();
            let wr = w.row(o).to_vec();
            let dwr = dw.row_mut(o);
            for c in 0..cin {
                let xr = &cache.input[(s * cin + c) * lin..(s * cin + c + 1) * lin];
                let dxr = &mut dx[(s * cin + c) * lin..(s * cin + c + 1) * lin];
                for j in 0..k {
                    let mut acc = 0.0;
                    let wj = wr[c * k + j];
                    for (t, &g) in dco.iter().enumerate() {
                        acc += g * xr[t + j];
                        dxr[t + j] += g * wj;
                    }
                    dwr[c * k + j] += acc;
                }
            }
        }
    }
    (ConvBlockGrads { dw, db, dgamma, dbeta }, dx)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FKDX0001";

/// Writes `magic ‖ u8 arch tag ‖ 3×u32 arch dims ‖ u32 record count ‖
/// records`, each record `u16 name len ‖ name ‖ u32 ndims ‖ u32 dims ‖ f64
/// values`, all little-endian. Parameters come first, then buffers.
pub fn write_checkpoint(net: &Network, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let (tag, dims) = match net.params.arch {
        Architecture::CnnHar {
            in_channels,
            in_length,
            num_classes,
        } => (0u8, [in_channels, in_length, num_classes]),
        Architecture::Mlp { in_dims, num_classes } => (1u8, [in_dims, num_classes, 0]),
    };
    w.write_all(&[tag])?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let records: Vec<&Tensor> = net.params.layers.iter().chain(&net.buffers).collect();
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for t in records {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Network> {
    let ck = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ck("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("bad magic"));
    }
    let tag = read_u8(&mut r)?;
    let d = [
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    ];
    let arch = match tag {
        0 => Architecture::CnnHar {
            in_channels: d[0],
            in_length: d[1],
            num_classes: d[2],
        },
        1 => Architecture::Mlp {
            in_dims: d[0],
            num_classes: d[1],
        },
        other => return Err(Error::Checkpoint(format!("unknown architecture tag {other}"))),
    };
    let mut net = Network::new(ModelParams::zeros(arch)?);
    let count = read_u32(&mut r)? as usize;
    let expected = net.params.layers.len() + net.buffers.len();
    if count != expected {
        return Err(Error::Checkpoint(format!("expected {expected} records, found {count}")));
    }
    let n_params = net.params.layers.len();
    for i in 0..count {
        let slot = if i < n_params {
            &mut net.params.layers[i]
        } else {
            &mut net.buffers[i - n_params]
        };
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| ck("truncated record name"))?;
        let name = String::from_utf8(name).map_err(|_| ck("record name is not UTF-8"))?;
        let nd = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(read_u32(&mut r)? as usize);
        }
        if name != slot.name || shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "record {i}: expected `{}` {:?}, found `{name}` {shape:?}",
                slot.name, slot.shape
            )));
        }
        for v in slot.values.data_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated values in `{name}`")))?;
            *v = f64::from_le_bytes(b);
        }
    }
    Ok(net)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}
