//! Small deterministic neural toolkit: row-major matrices, dense layers with
//! a recorded forward tape, Adam, diagonal Gaussians and the loss terms used
//! by the generative and selectivity models. Everything runs in `f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds applied to every predicted log-variance.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a forward tape for this network")]
    NoForwardCache,
}

fn shape_err(what: impl Into<String>) -> NeuralError {
    NeuralError::ShapeMismatch(what.into())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Concatenates `self` and `other` column-wise.
    pub fn hconcat(&self, other: &Matrix) -> Result<Matrix, NeuralError> {
        if self.rows != other.rows {
            return Err(shape_err("hconcat row counts differ"));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Matrix, Matrix) {
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = a · b` (optionally with `a` or `b` transposed), accumulated into
/// `out` scaled by `beta`.
fn gemm(a: &Matrix, a_t: bool, b: &Matrix, b_t: bool, beta: f64, out: &mut Matrix) {
    let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if b_t { (b.cols, b.rows) } else { (b.rows, b.cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!((out.rows, out.cols), (m, n));
    let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: dimensions and strides describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer computing `act(x · W + b)` with `W` stored
/// `inputs × outputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs).max(1) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Dense { weights: Matrix { rows: inputs, cols: outputs, data }, bias: vec![0.0; outputs], activation }
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols
    }

    /// Pre-activation `x · W + b`.
    pub fn linear(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        if x.cols != self.inputs() {
            return Err(shape_err(format!("layer expects {} inputs, got {}", self.inputs(), x.cols)));
        }
        let mut out = Matrix::zeros(x.rows, self.outputs());
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(x, false, &self.weights, false, 1.0, &mut out);
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        let mut y = self.linear(x)?;
        if self.activation == Activation::Relu {
            relu_in_place(&mut y);
        }
        Ok(y)
    }

    /// Gradients of a linear map given its input and the gradient of its
    /// pre-activation output. Returns `(dW, db, dx)`.
    pub fn linear_backward(&self, x: &Matrix, d_out: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), NeuralError> {
        if x.rows != d_out.rows || d_out.cols != self.outputs() || x.cols != self.inputs() {
            return Err(shape_err("linear_backward operand shapes"));
        }
        let mut d_w = Matrix::zeros(self.inputs(), self.outputs());
        gemm(x, true, d_out, false, 0.0, &mut d_w);
        let mut d_b = vec![0.0; self.outputs()];
        for r in 0..d_out.rows {
            for (acc, g) in d_b.iter_mut().zip(d_out.row(r)) {
                *acc += g;
            }
        }
        let mut d_x = Matrix::zeros(x.rows, self.inputs());
        gemm(d_out, false, &self.weights, true, 0.0, &mut d_x);
        Ok((d_w, d_b, d_x))
    }
}

pub fn relu_in_place(m: &mut Matrix) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Multiplies `grad` by the relu derivative evaluated where `activated`
/// holds the post-relu values.
pub fn relu_backward_in_place(grad: &mut Matrix, activated: &Matrix) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations recorded by [`DenseNet::forward_cached`]: entry 0 is the
/// input, entry `i + 1` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape holds the input")
    }
}

/// Per-layer parameter gradients, mirroring the layout of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl DenseGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        DenseGrads {
            layers: net.layers.iter().map(|l| (Matrix::zeros(l.inputs(), l.outputs()), vec![0.0; l.outputs()])).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(shape_err("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(shape_err(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    /// `depth` relu hidden layers of width `hidden`, then a linear output layer.
    pub fn mlp<R: Rng + ?Sized>(inputs: usize, hidden: usize, depth: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = inputs;
        for _ in 0..depth {
            layers.push(Dense::new(width, hidden, Activation::Relu, rng));
            width = hidden;
        }
        layers.push(Dense::new(width, outputs, Activation::Identity, rng));
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_vec())
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<Tape, NeuralError> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        Ok(Tape { activations })
    }

    /// Back-propagates `upstream` (gradient w.r.t. the network output) through
    /// the recorded tape. Returns parameter gradients and the input gradient.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(DenseGrads, Matrix), NeuralError> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(NeuralError::NoForwardCache);
        }
        let out = tape.output();
        if (upstream.rows, upstream.cols) != (out.rows, out.cols) {
            return Err(shape_err("upstream gradient does not match network output"));
        }
        let mut grad = upstream.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                relu_backward_in_place(&mut grad, &tape.activations[i + 1]);
            }
            let (d_w, d_b, d_x) = layer.linear_backward(&tape.activations[i], &grad)?;
            grads.push((d_w, d_b));
            grad = d_x;
        }
        grads.reverse();
        Ok((DenseGrads { layers: grads }, grad))
    }

    /// Mutable parameter slices in layout order: `W0, b0, W1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.data.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Appends the documented little-endian layout: `u32` layer count, then per
    /// layer `u32 inputs, u32 outputs, u8 activation`, the weights row-major
    /// and the bias, all as `f64`.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
            out.push(l.activation.code());
            for v in l.weights.data.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub fn read_le(bytes: &mut ByteReader<'_>) -> Option<DenseNet> {
        let count = bytes.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let inputs = bytes.u32()? as usize;
            let outputs = bytes.u32()? as usize;
            let activation = Activation::from_code(bytes.u8()?)?;
            let weights = bytes.f64s(inputs.checked_mul(outputs)?)?;
            let bias = bytes.f64s(outputs)?;
            layers.push(Dense { weights: Matrix { rows: inputs, cols: outputs, data: weights }, bias, activation });
        }
        DenseNet::new(layers).ok()
    }
}

/// Cursor over a little-endian byte buffer.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are shaped after the parameter
/// slices handed to the first [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<(), NeuralError> {
        if params.len() != grads.len() {
            return Err(shape_err("parameter and gradient slice counts differ"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(shape_err("optimizer state built for a different parameter set"));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(shape_err("parameter slice shape changed"));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Diagonal Gaussian with log-variance clipped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, NeuralError> {
        if mean.len() != log_var.len() {
            return Err(shape_err("mean and log-variance lengths differ"));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(DiagonalGaussian { mean, log_var })
    }

    /// Splits a `2L` head output into mean and (clipped) log-variance.
    pub fn from_head(head: &[f64]) -> Self {
        let l = head.len() / 2;
        DiagonalGaussian {
            mean: head[..l].to_vec(),
            log_var: head[l..2 * l].iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self, i: usize) -> f64 {
        (0.5 * self.log_var[i]).exp()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * (ln_2pi + lv + (xi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diagonal_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, NeuralError> {
    if q.dim() != p.dim() {
        return Err(shape_err("KL operands differ in dimension"));
    }
    Ok((0..q.dim()).map(|i| kl_term(q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]).0).sum())
}

/// One coordinate of the KL and its partial derivatives
/// `(kl, d/dmu_q, d/dlogvar_q, d/dmu_p, d/dlogvar_p)`.
pub fn kl_term(mu_q: f64, lv_q: f64, mu_p: f64, lv_p: f64) -> (f64, f64, f64, f64, f64) {
    let var_q = lv_q.exp();
    let inv_var_p = (-lv_p).exp();
    let diff = mu_q - mu_p;
    let kl = 0.5 * (lv_p - lv_q + (var_q + diff * diff) * inv_var_p - 1.0);
    let d_mu_q = diff * inv_var_p;
    let d_lv_q = 0.5 * (var_q * inv_var_p - 1.0);
    let d_lv_p = 0.5 * (1.0 - (var_q + diff * diff) * inv_var_p);
    (kl, d_mu_q, d_lv_q, -d_mu_q, d_lv_p)
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparameterize(g: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>, NeuralError> {
    if noise.len() != g.dim() {
        return Err(shape_err("noise dimension differs from the Gaussian"));
    }
    Ok((0..g.dim()).map(|i| g.mean[i] + g.std(i) * noise[i]).collect())
}

/// Gradients of `z` w.r.t. mean and log-variance given upstream `dz`:
/// `(dz, dz * 0.5 * std * noise)`.
pub fn reparameterize_backward(g: &DiagonalGaussian, noise: &[f64], dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_lv = (0..g.dim()).map(|i| dz[i] * 0.5 * g.std(i) * noise[i]).collect();
    (dz.to_vec(), d_lv)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Cross-entropy of `target` under `softmax(logits)`, with its gradient
/// w.r.t. the logits written into `grad` (scaled by `scale`).
pub fn softmax_cross_entropy(logits: &[f64], target: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let lp = log_softmax(logits);
    for (g, l) in grad.iter_mut().zip(&lp) {
        *g = scale * l.exp();
    }
    grad[target] -= scale;
    -lp[target]
}

/// `0.5 * (pred - target)^2`, the unit-variance Gaussian negative
/// log-density without its constant; returns `(loss, d/dpred)`.
pub fn unit_gaussian_nll(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (0.5 * d * d, d)
}

/// Samples an index from the categorical distribution `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
