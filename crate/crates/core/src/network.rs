//! Dense-network substrate: layers, leaky ReLU, stable softmax, reverse-mode
//! gradients for a fixed dense stack, the ADAM optimizer and the parameter
//! checkpoint blob.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `sum_i a_i b_i` with eight independent accumulators. The fixed
/// accumulation order keeps results reproducible while still vectorizing.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fully connected layer `W x + b`, weights stored row-major `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim("dense weights", in_dim * out_dim, weights.len())?;
        check_dim("dense bias", out_dim, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense layer parameters"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    /// Uniform Glorot initialization in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("dense input", self.in_dim, input.len())?;
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(input, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.bias[o] + dot(self.row(o), input);
        }
    }

    /// Accumulates parameter gradients for upstream `d_out` at `input` and
    /// adds `W^T d_out` into `d_input` when requested.
    pub(crate) fn backward_into(
        &self,
        input: &[f64],
        d_out: &[f64],
        grad: &mut LayerGrad,
        d_input: Option<&mut [f64]>,
    ) {
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            axpy(g, input, &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim]);
        }
        if let Some(d_input) = d_input {
            for (o, &g) in d_out.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.row(o), d_input);
                }
            }
        }
    }
}

/// `C = A B + beta C` for `A: m x k`, `B: k x n`, `C: m x n`, with explicit
/// row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl DenseLayer {
    /// Forward pass for `count` inputs stored row-major (`count x in_dim`),
    /// writing `count x out_dim` outputs.
    pub(crate) fn forward_many(&self, inputs: &[f64], count: usize, outs: &mut [f64]) {
        let (i, o) = (self.in_dim, self.out_dim);
        for row in outs.chunks_exact_mut(o.max(1)).take(count) {
            row.copy_from_slice(&self.bias);
        }
        gemm((count, i, o), inputs, (i, 1), &self.weights, (1, i), 1.0, outs, (o, 1));
    }

    /// Backward pass summed over `count` `(input, d_out)` pairs; adds
    /// `W^T d_out` of each pair into the matching row of `d_inputs`.
    pub(crate) fn backward_many(
        &self,
        inputs: &[f64],
        d_outs: &[f64],
        count: usize,
        grad: &mut LayerGrad,
        d_inputs: &mut [f64],
    ) {
        let (i, o) = (self.in_dim, self.out_dim);
        for d in d_outs.chunks_exact(o.max(1)).take(count) {
            axpy(1.0, d, &mut grad.bias);
        }
        gemm((o, count, i), d_outs, (1, o), inputs, (i, 1), 1.0, &mut grad.weights, (i, 1));
        gemm((count, o, i), d_outs, (o, 1), &self.weights, (i, 1), 1.0, d_inputs, (i, 1));
    }
}

/// Gradient buffers shaped like a [`DenseLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| leaky(v, slope)).collect()
}

#[inline]
pub fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

#[inline]
pub fn leaky_grad(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// `ln sum_i e^{x_i}`, shifted by the maximum.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax after subtracting the max logit. NaN logits are rejected.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::ZeroNormalizer);
    }
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::LeakyRelu(s) => leaky(v, s),
        }
    }

    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(s) => leaky_grad(v, s),
        }
    }
}

/// A fixed stack of dense layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
}

/// Values recorded by [`DenseStack::forward_tape`]: the input of every layer
/// and its pre-activation output.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output_dim(&self) -> usize {
        self.pre.last().map_or(0, Vec::len)
    }
}

impl DenseStack {
    pub fn new(layers: Vec<DenseLayer>, activations: Vec<Activation>) -> Result<Self> {
        check_dim("stack activations", layers.len(), activations.len())?;
        for w in layers.windows(2) {
            check_dim("stack layer chaining", w[0].out_dim, w[1].in_dim)?;
        }
        Ok(Self { layers, activations })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers.iter().map(LayerGrad::zeros_like).collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(input)?.0)
    }

    /// An empty stack is the identity map.
    pub fn forward_tape(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if !self.layers.is_empty() {
            check_dim("stack input", self.in_dim(), input.len())?;
        }
        let mut tape = Tape::default();
        let mut x = input.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut pre = vec![0.0; layer.out_dim];
            layer.forward_into(&x, &mut pre);
            let next: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
            tape.inputs.push(std::mem::replace(&mut x, next));
            tape.pre.push(pre);
        }
        Ok((x, tape))
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the stack input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut [LayerGrad]) -> Result<Vec<f64>> {
        check_dim("tape depth", self.layers.len(), tape.pre.len())?;
        check_dim("gradient buffers", self.layers.len(), grads.len())?;
        check_dim("upstream gradient", self.out_dim(), upstream.len())?;
        let mut d = upstream.to_vec();
        for (idx, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate().rev() {
            check_dim("tape layer width", layer.out_dim, tape.pre[idx].len())?;
            for (g, &p) in d.iter_mut().zip(&tape.pre[idx]) {
                *g *= act.derivative(p);
            }
            let mut d_in = vec![0.0; layer.in_dim];
            layer.backward_into(&tape.inputs[idx], &d, &mut grads[idx], Some(&mut d_in));
            d = d_in;
        }
        Ok(d)
    }
}

/// First/second moment state of the bias-corrected ADAM update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update over parameter blocks laid out back to back in the moment
    /// buffers.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_dim("adam gradient blocks", params.len(), grads.len())?;
        let total: usize = params.iter().map(|p| p.len()).sum();
        check_dim("adam parameter count", self.first_moment.len(), total)?;
        for (p, g) in params.iter().zip(grads) {
            check_dim("adam gradient block", p.len(), g.len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr_t = self.learning_rate / (1.0 - b1.powi(t));
        let v_corr = 1.0 / (1.0 - b2.powi(t));
        let eps = self.epsilon;
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let n = p.len();
            let m = &mut self.first_moment[offset..offset + n];
            let v = &mut self.second_moment[offset..offset + n];
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr_t * *mi / ((*vi * v_corr).sqrt() + eps);
            }
            offset += n;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint blob.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Flat parameter snapshot: header (magic, version, |Z|, V, layer shapes)
/// followed by every layer's weights then bias as little-endian f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub z_card: u32,
    pub views: u32,
    pub layers: Vec<DenseLayer>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.z_card.to_le_bytes())?;
        w.write_all(&self.views.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_string(),
            reason,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let z_card = read_u32(r)?;
        let views = read_u32(r)?;
        let n = read_u32(r)? as usize;
        let shapes = (0..n)
            .map(|_| Ok((read_u32(r)? as usize, read_u32(r)? as usize)))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for (in_dim, out_dim) in shapes {
            let mut vals = Vec::with_capacity(in_dim * out_dim + out_dim);
            for _ in 0..in_dim * out_dim + out_dim {
                r.read_exact(&mut buf)?;
                vals.push(f64::from_le_bytes(buf));
            }
            let bias = vals.split_off(in_dim * out_dim);
            layers.push(DenseLayer::from_parts(in_dim, out_dim, vals, bias)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { z_card, views, layers })
    }
}
