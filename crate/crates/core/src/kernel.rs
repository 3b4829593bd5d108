//! The deep kernel
//!
//! ```text
//! k(a, b) = [(1 − ε)·κ(φ(a), φ(b)) + ε] · Φ(a, b)
//! κ(u, v) = exp(−‖u − v‖² / (2σ_net²))
//! Φ(a, b) = exp(−‖a − b‖² / (2σ_raw²))
//! ```
//!
//! with `φ` a small fully connected network, plus exact reverse-mode
//! gradients of weighted kernel sums.
//!
//! Gradients are reported in the unconstrained space the optimizer works in:
//! `[logit ε, log σ_net, log σ_raw, W₁ (row-major), b₁, W₂, b₂, …]`.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::rng::SeedStream;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSGK";

/// Offset of the first feature-net entry in the unconstrained vector.
pub const NET_OFFSET: usize = 3;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("feature length mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid kernel parameters: {0}")]
    Invalid(String),
    #[error("upstream matrix is {found:?}, gram is {expected:?}")]
    UpstreamShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn random(inputs: usize, outputs: usize, rng: &mut crate::rng::StreamRng) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut draw = || (2.0 * rng.uniform() - 1.0) * scale;
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn build_chain(widths: &[usize], rng: &mut crate::rng::StreamRng) -> Vec<Layer> {
    widths.windows(2).map(|w| Layer::random(w[0], w[1], rng)).collect()
}

/// Activations of a layer chain, input first. `linear_last` skips tanh on
/// the final layer.
fn chain_forward(layers: &[Layer], x: &[f64], linear_last: bool) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let mut out = layer.apply(acts.last().expect("nonempty"));
        if !(linear_last && i == layers.len() - 1) {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(out);
    }
    acts
}

/// Backpropagates `dout` through a chain, accumulating parameter gradients
/// into `grad` and returning the gradient at the chain input when asked.
fn chain_backward(
    layers: &[Layer],
    acts: &[Vec<f64>],
    dout: &[f64],
    linear_last: bool,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offsets.push(off);
        off += l.param_count();
    }
    let mut delta = dout.to_vec();
    for (i, layer) in layers.iter().enumerate().rev() {
        if !(linear_last && i == layers.len() - 1) {
            for (d, h) in delta.iter_mut().zip(&acts[i + 1]) {
                *d *= 1.0 - h * h;
            }
        }
        let input = &acts[i];
        let (gw, gb) = grad[offsets[i]..offsets[i] + layer.param_count()].split_at_mut(layer.weights.len());
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, x) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                *g += d * x;
            }
            gb[o] += d;
        }
        if i > 0 || want_input {
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                for (n, w) in next.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *n += d * w;
                }
            }
            delta = next;
        }
    }
    want_input.then_some(delta)
}

fn chain_params(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

/// Frame-shared front end: the same tanh chain runs on every frame and
/// the outputs are averaged.
#[derive(Debug, Clone, PartialEq)]
struct FramePool {
    frames: usize,
    layers: Vec<Layer>,
}

impl FramePool {
    fn frame_len(&self) -> usize {
        self.layers[0].inputs
    }
}

/// The learned map `φ`.
///
/// Dense form: fully connected, tanh hidden layers, linear output.
/// Pooled form: a tanh chain shared across frames, mean-pooled, then a
/// dense head of the same kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    /// Fixed factor applied to inputs before the first layer; not trained.
    input_scale: f64,
    pool: Option<FramePool>,
    layers: Vec<Layer>,
}

/// Intermediate values kept for the backward pass.
struct Trace {
    frames: Vec<Vec<Vec<f64>>>,
    head: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.head.last().expect("output")
    }
}

impl FeatureNet {
    /// Dense net. Every weight and bias starts uniform in `±1/√fan_in`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = SeedStream::new(seed).substream("kernel-init", 0);
        Ok(Self {
            input_scale: 1.0,
            pool: None,
            layers: build_chain(widths, &mut rng),
        })
    }

    /// Pooled net for `frames × frame_widths[0]` inputs; `head_widths[0]`
    /// must equal the last frame width.
    pub fn init_pooled(frames: usize, frame_widths: &[usize], head_widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(frame_widths)?;
        validate_widths(head_widths)?;
        if frames == 0 {
            return Err(KernelError::Invalid("pooled net needs at least one frame".into()));
        }
        if head_widths[0] != *frame_widths.last().expect("nonempty") {
            return Err(KernelError::Invalid(format!(
                "head input {} does not match frame output {}",
                head_widths[0],
                frame_widths.last().expect("nonempty")
            )));
        }
        let mut rng = SeedStream::new(seed).substream("kernel-init", 0);
        let frame_layers = build_chain(frame_widths, &mut rng);
        Ok(Self {
            input_scale: 1.0,
            pool: Some(FramePool {
                frames,
                layers: frame_layers,
            }),
            layers: build_chain(head_widths, &mut rng),
        })
    }

    /// Head widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        chain_widths(&self.layers)
    }

    /// `(frames, frame widths)` of the pooled front end, if any.
    pub fn pool_shape(&self) -> Option<(usize, Vec<usize>)> {
        self.pool.as_ref().map(|p| (p.frames, chain_widths(&p.layers)))
    }

    pub fn input_dim(&self) -> usize {
        match &self.pool {
            Some(p) => p.frames * p.frame_len(),
            None => self.layers[0].inputs,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.pool.as_ref().map(|p| chain_params(&p.layers)).unwrap_or(0) + chain_params(&self.layers)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.forward_trace(x);
        t.head.pop().expect("output")
    }

    fn forward_trace(&self, x: &[f64]) -> Trace {
        let scaled;
        let x = if self.input_scale == 1.0 {
            x
        } else {
            scaled = x.iter().map(|v| v * self.input_scale).collect::<Vec<f64>>();
            &scaled
        };
        match &self.pool {
            None => Trace {
                frames: Vec::new(),
                head: chain_forward(&self.layers, x, true),
            },
            Some(p) => {
                let frames: Vec<Vec<Vec<f64>>> = x
                    .chunks(p.frame_len())
                    .map(|f| chain_forward(&p.layers, f, false))
                    .collect();
                let width = self.layers[0].inputs;
                let mut pooled = vec![0.0; width];
                for f in &frames {
                    for (a, v) in pooled.iter_mut().zip(f.last().expect("output")) {
                        *a += v;
                    }
                }
                let inv = 1.0 / frames.len() as f64;
                pooled.iter_mut().for_each(|v| *v *= inv);
                Trace {
                    head: chain_forward(&self.layers, &pooled, true),
                    frames,
                }
            }
        }
    }

    /// Accumulates `∂⟨dout, φ(x)⟩/∂θ` into `grad`, laid out like
    /// [`FeatureNet::write_params`].
    fn backward(&self, trace: &Trace, dout: &[f64], grad: &mut [f64]) {
        match &self.pool {
            None => {
                chain_backward(&self.layers, &trace.head, dout, true, grad, false);
            }
            Some(p) => {
                let (g_pool, g_head) = grad.split_at_mut(chain_params(&p.layers));
                let dpooled = chain_backward(&self.layers, &trace.head, dout, true, g_head, true)
                    .expect("input gradient requested");
                let inv = 1.0 / trace.frames.len() as f64;
                let dframe: Vec<f64> = dpooled.iter().map(|v| v * inv).collect();
                for acts in &trace.frames {
                    chain_backward(&p.layers, acts, &dframe, false, g_pool, false);
                }
            }
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &Layer> {
        self.pool.iter().flat_map(|p| p.layers.iter()).chain(&self.layers)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in self.all_layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    fn read_params(&mut self, src: &[f64]) {
        let mut off = 0;
        let pool_layers = self.pool.iter_mut().flat_map(|p| p.layers.iter_mut());
        for l in pool_layers.chain(self.layers.iter_mut()) {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&src[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[off..off + nb]);
            off += nb;
        }
    }

    /// Mask over the net parameters that marks weight-matrix entries (not biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.param_count());
        for l in self.all_layers() {
            m.extend(std::iter::repeat_n(true, l.weights.len()));
            m.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        m
    }

    /// Permutes the input coordinates seen by the first layer: new column
    /// `j` takes old column `perm[j]`.
    pub fn permute_inputs(&mut self, perm: &[usize]) {
        let l = match &mut self.pool {
            Some(p) => &mut p.layers[0],
            None => &mut self.layers[0],
        };
        assert_eq!(perm.len(), l.inputs);
        let old = l.weights.clone();
        for o in 0..l.outputs {
            for (j, &p) in perm.iter().enumerate() {
                l.weights[o * l.inputs + j] = old[o * l.inputs + p];
            }
        }
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// Sets the fixed input factor, e.g. the reciprocal RMS of the data.
    pub fn with_input_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(KernelError::Invalid(format!("input scale must be positive, got {scale}")));
        }
        self.input_scale = scale;
        Ok(self)
    }
}

fn chain_widths(layers: &[Layer]) -> Vec<usize> {
    let mut w = vec![layers[0].inputs];
    w.extend(layers.iter().map(|l| l.outputs));
    w
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(KernelError::Invalid("feature net needs an input and an output width".into()));
    }
    if widths.contains(&0) {
        return Err(KernelError::Invalid(format!("zero width in {widths:?}")));
    }
    Ok(())
}

/// Trainable deep-kernel state.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    epsilon: f64,
    net: FeatureNet,
    sigma_net: f64,
    sigma_raw: f64,
}

impl KernelParams {
    pub const DEFAULT_EPSILON: f64 = 0.5;
    pub const DEFAULT_SIGMA_NET: f64 = 0.1;
    pub const DEFAULT_SIGMA_RAW: f64 = 100.0;
    pub const DEFAULT_OUTPUT_DIM: usize = 300;

    pub fn new(epsilon: f64, net: FeatureNet, sigma_net: f64, sigma_raw: f64) -> Result<Self> {
        let p = Self {
            epsilon,
            net,
            sigma_net,
            sigma_raw,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fresh parameters with the default ε and bandwidths.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        Self::new(
            Self::DEFAULT_EPSILON,
            FeatureNet::init(widths, seed)?,
            Self::DEFAULT_SIGMA_NET,
            Self::DEFAULT_SIGMA_RAW,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(KernelError::Invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        for (name, v) in [("sigma_net", self.sigma_net), ("sigma_raw", self.sigma_raw)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KernelError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let mut flat = Vec::new();
        self.net.write_params(&mut flat);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::Invalid("non-finite feature-net weight".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sigma_net(&self) -> f64 {
        self.sigma_net
    }

    pub fn sigma_raw(&self) -> f64 {
        self.sigma_raw
    }

    pub fn net(&self) -> &FeatureNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeatureNet {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn with_bandwidths(mut self, sigma_net: f64, sigma_raw: f64) -> Result<Self> {
        self.sigma_net = sigma_net;
        self.sigma_raw = sigma_raw;
        self.validate()?;
        Ok(self)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    pub fn unconstrained_len(&self) -> usize {
        NET_OFFSET + self.net.param_count()
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.unconstrained_len());
        v.push((self.epsilon / (1.0 - self.epsilon)).ln());
        v.push(self.sigma_net.ln());
        v.push(self.sigma_raw.ln());
        self.net.write_params(&mut v);
        v
    }

    /// Inverse of [`KernelParams::to_unconstrained`], reusing this net's shape.
    pub fn from_unconstrained(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.unconstrained_len() {
            return Err(KernelError::ShapeMismatch {
                expected: self.unconstrained_len(),
                found: v.len(),
            });
        }
        let mut net = self.net.clone();
        net.read_params(&v[NET_OFFSET..]);
        Self::new(1.0 / (1.0 + (-v[0]).exp()), net, v[1].exp(), v[2].exp())
    }

    /// Precomputes `φ(x)` so repeated kernel evaluations skip the net.
    pub fn embed<'a>(&self, x: &'a [f64]) -> Result<Embedded<'a>> {
        self.check_len(x)?;
        Ok(Embedded {
            raw: x,
            phi: self.net.forward(x),
        })
    }

    pub fn embed_all<'a, F: AsRef<[f64]> + Sync>(&self, xs: &'a [F]) -> Result<Vec<Embedded<'a>>> {
        for x in xs {
            self.check_len(x.as_ref())?;
        }
        #[cfg(feature = "parallel")]
        let out = xs.par_iter().map(|x| self.embed_unchecked(x.as_ref())).collect();
        #[cfg(not(feature = "parallel"))]
        let out = xs.iter().map(|x| self.embed_unchecked(x.as_ref())).collect();
        Ok(out)
    }

    fn embed_unchecked<'a>(&self, x: &'a [f64]) -> Embedded<'a> {
        Embedded {
            raw: x,
            phi: self.net.forward(x),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(KernelError::ShapeMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Kernel value on two embedded inputs.
    pub fn eval_embedded(&self, a: &Embedded<'_>, b: &Embedded<'_>) -> f64 {
        self.eval_parts(a.raw, &a.phi, b.raw, &b.phi)
    }

    /// Kernel value from raw inputs and their precomputed net images.
    pub fn eval_parts(&self, a_raw: &[f64], a_phi: &[f64], b_raw: &[f64], b_phi: &[f64]) -> f64 {
        let kappa = (-sq_dist(a_phi, b_phi) / (2.0 * self.sigma_net * self.sigma_net)).exp();
        let big_phi = (-sq_dist(a_raw, b_raw) / (2.0 * self.sigma_raw * self.sigma_raw)).exp();
        ((1.0 - self.epsilon) * kappa + self.epsilon) * big_phi
    }
}

/// A raw input together with its feature-net image.
#[derive(Debug, Clone)]
pub struct Embedded<'a> {
    pub raw: &'a [f64],
    pub phi: Vec<f64>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Anything that scores a pair of flattened features.
pub trait Kernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64>;

    fn gram(&self, a: &[&[f64]], b: &[&[f64]]) -> Result<GramMatrix> {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for x in a {
            for y in b {
                data.push(self.eval(x, y)?);
            }
        }
        Ok(GramMatrix {
            rows: a.len(),
            cols: b.len(),
            data,
            symmetric: false,
        })
    }
}

impl Kernel for KernelParams {
    fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        kernel_eval(a, b, self)
    }

    fn gram(&self, a: &[&[f64]], b: &[&[f64]]) -> Result<GramMatrix> {
        gram(a, b, self)
    }
}

/// Plain Gaussian RBF `exp(−‖a − b‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
}

impl Kernel for GaussianKernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(KernelError::ShapeMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        Ok((-sq_dist(a, b) / (2.0 * self.sigma * self.sigma)).exp())
    }
}

pub fn kernel_eval(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    let ea = params.embed(a)?;
    let eb = params.embed(b)?;
    Ok(params.eval_embedded(&ea, &eb))
}

/// Dense kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    symmetric: bool,
}

impl GramMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let row = |i: usize| (0..cols).map(|j| f(i, j)).collect::<Vec<f64>>();
        #[cfg(feature = "parallel")]
        let data: Vec<f64> = (0..rows).into_par_iter().flat_map_iter(row).collect();
        #[cfg(not(feature = "parallel"))]
        let data: Vec<f64> = (0..rows).flat_map(row).collect();
        Self {
            rows,
            cols,
            data,
            symmetric: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// `K_ij = k(A_i, B_j)`.
pub fn gram<F: AsRef<[f64]> + Sync>(a: &[F], b: &[F], params: &KernelParams) -> Result<GramMatrix> {
    let ea = params.embed_all(a)?;
    let eb = params.embed_all(b)?;
    Ok(gram_embedded(&ea, &eb, params))
}

pub fn gram_embedded(a: &[Embedded<'_>], b: &[Embedded<'_>], params: &KernelParams) -> GramMatrix {
    GramMatrix::from_fn(a.len(), b.len(), |i, j| params.eval_embedded(&a[i], &b[j]))
}

/// Gram matrix of a set with itself; each unordered pair is evaluated once
/// and mirrored, so the result is exactly symmetric with a unit diagonal.
pub fn gram_symmetric<F: AsRef<[f64]> + Sync>(a: &[F], params: &KernelParams) -> Result<GramMatrix> {
    let ea = params.embed_all(a)?;
    Ok(gram_symmetric_embedded(&ea, params))
}

pub fn gram_symmetric_embedded(a: &[Embedded<'_>], params: &KernelParams) -> GramMatrix {
    let n = a.len();
    let upper = GramMatrix::from_fn(n, n, |i, j| {
        if i < j {
            params.eval_embedded(&a[i], &a[j])
        } else {
            0.0
        }
    });
    let mut data = upper.data;
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    GramMatrix {
        rows: n,
        cols: n,
        data,
        symmetric: true,
    }
}

/// Gradient in the unconstrained parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// With respect to `logit ε`.
    pub fn epsilon(&self) -> f64 {
        self.values[0]
    }

    /// With respect to `log σ_net`.
    pub fn sigma_net(&self) -> f64 {
        self.values[1]
    }

    /// With respect to `log σ_raw`.
    pub fn sigma_raw(&self) -> f64 {
        self.values[2]
    }

    pub fn net(&self) -> &[f64] {
        &self.values[NET_OFFSET..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// A dense `rows × cols` matrix of per-entry sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Upstream {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }
}

/// Exact gradient of `Σ_ij upstream_ij · k(A_i, B_j)`.
pub fn kernel_gradients<F: AsRef<[f64]> + Sync>(
    a: &[F],
    b: &[F],
    params: &KernelParams,
    upstream: &Upstream,
) -> Result<ParamGradient> {
    if (upstream.rows, upstream.cols) != (a.len(), b.len()) {
        return Err(KernelError::UpstreamShape {
            expected: (a.len(), b.len()),
            found: (upstream.rows, upstream.cols),
        });
    }
    for x in a.iter().chain(b) {
        params.check_len(x.as_ref())?;
    }
    let inputs: Vec<&[f64]> = a.iter().chain(b).map(|x| x.as_ref()).collect();
    let mut pairs = Vec::new();
    for i in 0..a.len() {
        for j in 0..b.len() {
            pairs.push((i, a.len() + j, upstream.get(i, j)));
        }
    }
    Ok(weighted_kernel_gradient(&inputs, &pairs, params))
}

/// Gradient of `Σ w · k(x_p, x_q)` over `(p, q, w)` triples indexing `inputs`.
///
/// The net is run once per input and backpropagated once per input, so
/// the cost is linear in the number of inputs plus the number of pairs.
pub(crate) fn weighted_kernel_gradient(
    inputs: &[&[f64]],
    pairs: &[(usize, usize, f64)],
    params: &KernelParams,
) -> ParamGradient {
    let net = &params.net;
    let run = |x: &&[f64]| net.forward_trace(x);
    #[cfg(feature = "parallel")]
    let traces: Vec<Trace> = inputs.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let traces: Vec<Trace> = inputs.iter().map(run).collect();

    let out_dim = net.output_dim();
    let mut dphi = vec![vec![0.0; out_dim]; inputs.len()];
    let mut g = ParamGradient::zeros(params.unconstrained_len());
    let eps = params.epsilon;
    let s_net2 = params.sigma_net * params.sigma_net;
    let s_raw2 = params.sigma_raw * params.sigma_raw;

    for &(p, q, w) in pairs {
        if w == 0.0 || p == q {
            continue;
        }
        let pa = traces[p].output();
        let pb = traces[q].output();
        let d_net = sq_dist(pa, pb);
        let d_raw = sq_dist(inputs[p], inputs[q]);
        let kappa = (-d_net / (2.0 * s_net2)).exp();
        let big_phi = (-d_raw / (2.0 * s_raw2)).exp();
        let mix = (1.0 - eps) * kappa + eps;
        // ∂k/∂ε · ∂ε/∂logit ε
        g.values[0] += w * (1.0 - kappa) * big_phi * eps * (1.0 - eps);
        // ∂k/∂log σ_net
        g.values[1] += w * (1.0 - eps) * kappa * big_phi * d_net / s_net2;
        // ∂k/∂log σ_raw
        g.values[2] += w * mix * big_phi * d_raw / s_raw2;
        // ∂k/∂φ(a) = −(1 − ε) κ Φ (φ(a) − φ(b)) / σ_net²
        let c = -w * (1.0 - eps) * kappa * big_phi / s_net2;
        if c != 0.0 {
            for o in 0..out_dim {
                let diff = pa[o] - pb[o];
                dphi[p][o] += c * diff;
                dphi[q][o] -= c * diff;
            }
        }
    }

    let back = |idx: usize| {
        let mut local = vec![0.0; net.param_count()];
        if dphi[idx].iter().any(|&v| v != 0.0) {
            net.backward(&traces[idx], &dphi[idx], &mut local);
        }
        local
    };
    #[cfg(feature = "parallel")]
    let locals: Vec<Vec<f64>> = (0..inputs.len()).into_par_iter().map(back).collect();
    #[cfg(not(feature = "parallel"))]
    let locals: Vec<Vec<f64>> = (0..inputs.len()).map(back).collect();
    // Fixed-order reduction keeps results independent of thread count.
    for local in &locals {
        for (acc, v) in g.values[NET_OFFSET..].iter_mut().zip(local) {
            *acc += v;
        }
    }
    g
}

/// Median pairwise Euclidean distance, a common bandwidth heuristic.
pub fn median_pairwise_distance(xs: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(sq_dist(xs[i], xs[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &KernelParams) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params);
    let io_err = |source| KernelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.flush().map_err(io_err)
}

/// Layout, integers `u32` LE and values `f64` LE:
///
/// ```text
/// version 1: "NSGK", 1, width count, widths,
///            ε, each layer's weights (row-major) and biases, σ_net, σ_raw
/// version 2: "NSGK", 2, input scale (f64), frames (0 = dense),
///            [frame width count, frame widths if frames > 0],
///            width count, widths, then values as in version 1
///            with frame layers before head layers
/// ```
///
/// Plain dense nets with unit input scale are written as version 1.
pub fn encode_checkpoint(params: &KernelParams) -> Vec<u8> {
    let mut out = Vec::new();
    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    let net = &params.net;
    match (net.pool_shape(), net.input_scale == 1.0) {
        (None, true) => push_u32(&mut out, 1),
        (pool, _) => {
            push_u32(&mut out, 2);
            out.extend_from_slice(&net.input_scale.to_le_bytes());
            match pool {
                None => push_u32(&mut out, 0),
                Some((frames, fw)) => {
                    push_u32(&mut out, frames);
                    push_u32(&mut out, fw.len());
                    fw.iter().for_each(|&w| push_u32(&mut out, w));
                }
            }
        }
    }
    let widths = net.widths();
    push_u32(&mut out, widths.len());
    widths.iter().for_each(|&w| push_u32(&mut out, w));
    let mut vals = vec![params.epsilon];
    net.write_params(&mut vals);
    vals.push(params.sigma_net);
    vals.push(params.sigma_raw);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<KernelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| KernelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<KernelParams> {
    let bad = |reason: &str| KernelError::Checkpoint {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut r = HeaderReader { bytes, pos: 4 };
    let truncated = || bad("truncated header");
    let version = r.u32().ok_or_else(truncated)?;
    let (scale, pool) = match version {
        1 => (1.0, None),
        2 => {
            let scale = r.f64().ok_or_else(truncated)?;
            let frames = r.u32().ok_or_else(truncated)?;
            let pool = if frames == 0 {
                None
            } else {
                Some((frames, r.widths().ok_or_else(truncated)?))
            };
            (scale, pool)
        }
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let widths = r.widths().ok_or_else(truncated)?;
    let mut net = match pool {
        None => FeatureNet::init(&widths, 0),
        Some((frames, fw)) => FeatureNet::init_pooled(frames, &fw, &widths, 0),
    }
    .and_then(|n| n.with_input_scale(scale))
    .map_err(|e| bad(&e.to_string()))?;
    let n_vals = 3 + net.param_count();
    let body = &bytes[r.pos..];
    if body.len() != 8 * n_vals {
        return Err(bad(&format!("expected {} value bytes, found {}", 8 * n_vals, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    net.read_params(&vals[1..n_vals - 2]);
    KernelParams::new(vals[0], net, vals[n_vals - 2], vals[n_vals - 1]).map_err(|e| bad(&e.to_string()))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let b = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        b.try_into().ok()
    }

    fn u32(&mut self) -> Option<usize> {
        self.take::<4>().map(|b| u32::from_le_bytes(b) as usize)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn widths(&mut self) -> Option<Vec<usize>> {
        let count = self.u32()?;
        if count > 64 {
            return None;
        }
        (0..count).map(|_| self.u32()).collect()
    }
}
