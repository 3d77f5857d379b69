//! Minimal dense-tensor network core: dense, valid 1D convolution,
//! non-overlapping 1D max pooling, ReLU, sigmoid and flatten layers with
//! exact reverse-mode gradients, binary cross-entropy, and Adam/SGD.
//!
//! Activations are rank 1 (`[features]`) or rank 2 (`[channels, length]`).
//! Parameters are enumerated layer by layer, weight before bias.

pub(crate) mod io;
mod optim;
mod tensor;

pub use io::{read_network, write_network, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{init_normal, Tensor, INIT_STD};

use crate::rng;
use crate::{Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv1d { filters: usize, kernel_size: usize },
    MaxPool1d { pool_size: usize },
    Relu,
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b`, `W` shaped `[units, inputs]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    /// Valid cross-correlation, stride 1. `W` shaped `[filters, channels, kernel]`.
    Conv1d {
        weight: Tensor,
        bias: Tensor,
    },
    MaxPool1d {
        pool_size: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weight, .. } => LayerSpec::Dense {
                units: weight.shape()[0],
            },
            Layer::Conv1d { weight, .. } => LayerSpec::Conv1d {
                filters: weight.shape()[0],
                kernel_size: weight.shape()[2],
            },
            Layer::MaxPool1d { pool_size } => LayerSpec::MaxPool1d {
                pool_size: *pool_size,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Sigmoid => LayerSpec::Sigmoid,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv1d { weight, bias } => vec![weight, bias],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv1d { weight, bias } => vec![weight, bias],
            _ => vec![],
        }
    }

    /// Output shape for `input`, or a description of the mismatch.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Dense { weight, .. } => {
                let (units, inputs) = (weight.shape()[0], weight.shape()[1]);
                if input != [inputs] {
                    return Err(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![units])
            }
            Layer::Conv1d { weight, .. } => {
                let (filters, channels, kernel) =
                    (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                match input {
                    [c, l] if *c == channels && *l >= kernel => Ok(vec![filters, l - kernel + 1]),
                    _ => Err(format!(
                        "conv1d expects [{channels}, >= {kernel}], got {input:?}"
                    )),
                }
            }
            Layer::MaxPool1d { pool_size } => match input {
                [c, l] if *l >= *pool_size => Ok(vec![*c, l / pool_size]),
                _ => Err(format!(
                    "maxpool1d({pool_size}) expects [channels, >= {pool_size}], got {input:?}"
                )),
            },
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(prediction: f64, target: f64) -> f64 {
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `d bce / d p`, evaluated at the clamped prediction. Composed with the
/// sigmoid derivative this stays close to `p - t` even when the prediction
/// saturates, so a confidently wrong network still receives a gradient.
pub fn bce_grad(prediction: f64, target: f64) -> f64 {
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    (p - target) / (p * (1.0 - p))
}

/// Values recorded during a forward pass, needed by `backward`.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// Input to each layer, then the final output.
    activations: Vec<Tensor>,
    /// For each max-pool layer, the flat input index chosen per output.
    argmax: Vec<Vec<usize>>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace::default()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    /// Shapes of every layer's input followed by the network output.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.activations
            .iter()
            .map(|t| t.shape().to_vec())
            .collect()
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.activations.last()
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Winning input index per output, one list per max-pool layer.
    pub fn argmax(&self) -> &[Vec<usize>] {
        &self.argmax
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the layer chain for `input_shape`, initializing weights from
    /// `seed` (normal, std 0.05) and biases to zero.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Network> {
        let mut shape = input_shape.to_vec();
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "bad input shape {shape:?}"
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer_seed = rng::sub_seed(seed, &format!("layer.{i}"));
            let layer = match *spec {
                LayerSpec::Dense { units } => {
                    let [inputs] = shape[..] else {
                        return Err(Error::Shape {
                            layer: i,
                            reason: format!("dense needs a rank-1 input, got {shape:?}"),
                        });
                    };
                    positive(i, units, "units")?;
                    Layer::Dense {
                        weight: init_normal(&[units, inputs], layer_seed),
                        bias: Tensor::zeros(&[units]),
                    }
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel_size,
                } => {
                    let [channels, _] = shape[..] else {
                        return Err(Error::Shape {
                            layer: i,
                            reason: format!(
                                "conv1d needs a [channels, length] input, got {shape:?}"
                            ),
                        });
                    };
                    positive(i, filters, "filters")?;
                    positive(i, kernel_size, "kernel_size")?;
                    Layer::Conv1d {
                        weight: init_normal(&[filters, channels, kernel_size], layer_seed),
                        bias: Tensor::zeros(&[filters]),
                    }
                }
                LayerSpec::MaxPool1d { pool_size } => {
                    positive(i, pool_size, "pool_size")?;
                    Layer::MaxPool1d { pool_size }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer
                .output_shape(&shape)
                .map_err(|reason| Error::Shape { layer: i, reason })?;
            layers.push(layer);
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Assembles a network from explicit layers, validating the shape chain.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Network> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Dense { weight, bias } | Layer::Conv1d { weight, bias } = layer {
                let rank = if matches!(layer, Layer::Dense { .. }) {
                    2
                } else {
                    3
                };
                if weight.shape().len() != rank || bias.shape() != [weight.shape()[0]] {
                    return Err(Error::Shape {
                        layer: i,
                        reason: format!("weight {:?} / bias {:?}", weight.shape(), bias.shape()),
                    });
                }
            }
            if let Layer::MaxPool1d { pool_size: 0 } = layer {
                return Err(Error::Shape {
                    layer: i,
                    reason: "pool size 0".into(),
                });
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|reason| Error::Shape { layer: i, reason })?;
        }
        Ok(Network {
            input_shape,
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Shapes from the input through every layer's output.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .expect("validated at build");
            shapes.push(next);
        }
        shapes
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut trace = Trace::new();
        self.forward_traced(input, &mut trace)?;
        Ok(trace.activations.pop().expect("output recorded"))
    }

    /// Forward pass recording what `backward` needs into `trace`.
    pub fn forward_traced(&self, input: &Tensor, trace: &mut Trace) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: 0,
                reason: format!(
                    "network expects input {:?}, got {:?}",
                    self.input_shape,
                    input.shape()
                ),
            });
        }
        trace.activations.clear();
        trace.argmax.clear();
        trace.activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = trace.activations.last().unwrap();
            let out_shape = layer
                .output_shape(x.shape())
                .map_err(|reason| Error::Shape { layer: i, reason })?;
            let y = match layer {
                Layer::Dense { weight, bias } => dense_forward(weight, bias, x),
                Layer::Conv1d { weight, bias } => conv_forward(weight, bias, x, &out_shape),
                Layer::MaxPool1d { pool_size } => {
                    let (y, idx) = pool_forward(*pool_size, x, &out_shape);
                    trace.argmax.push(idx);
                    y
                }
                Layer::Relu => map(x, |v| v.max(0.0)),
                Layer::Sigmoid => map(x, sigmoid),
                Layer::Flatten => x.clone().reshaped(out_shape.clone())?,
            };
            if !y.all_finite() {
                return Err(Error::Shape {
                    layer: i,
                    reason: "non-finite activation".into(),
                });
            }
            trace.activations.push(y);
        }
        Ok(trace.activations.last().unwrap().clone())
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// `d loss / d output`. Returns one tensor per parameter, in `params()`
    /// order.
    pub fn backward(&self, trace: &Trace, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward_with_input(trace, grad_output)?.0)
    }

    /// As `backward`, also returning `d loss / d input`.
    pub fn backward_with_input(
        &self,
        trace: &Trace,
        grad_output: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::NoForwardCache);
        }
        let out = trace.activations.last().unwrap();
        if grad_output.shape() != out.shape() {
            return Err(Error::Shape {
                layer: self.layers.len(),
                reason: format!(
                    "output gradient {:?} vs output {:?}",
                    grad_output.shape(),
                    out.shape()
                ),
            });
        }
        let mut grads: Vec<Tensor> = Vec::new();
        let mut pool_idx = trace.argmax.len();
        let mut g = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[i];
            let y = &trace.activations[i + 1];
            g = match layer {
                Layer::Dense { weight, .. } => {
                    let (gx, gw, gb) = dense_backward(weight, x, &g);
                    grads.push(gb);
                    grads.push(gw);
                    gx
                }
                Layer::Conv1d { weight, .. } => {
                    let (gx, gw, gb) = conv_backward(weight, x, &g);
                    grads.push(gb);
                    grads.push(gw);
                    gx
                }
                Layer::MaxPool1d { .. } => {
                    pool_idx -= 1;
                    let mut gx = Tensor::zeros(x.shape());
                    for (o, &src) in trace.argmax[pool_idx].iter().enumerate() {
                        gx.data_mut()[src] += g.data()[o];
                    }
                    gx
                }
                Layer::Relu => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    gx
                }
                Layer::Sigmoid => {
                    let mut gx = g;
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (1.0 - yv);
                    }
                    gx
                }
                Layer::Flatten => g.reshaped(x.shape().to_vec())?,
            };
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// One example's loss, prediction and parameter gradients for a network
    /// ending in a single sigmoid unit.
    pub fn bce_gradients(&self, input: &Tensor, target: f64) -> Result<(f64, f64, Vec<Tensor>)> {
        let mut trace = Trace::new();
        let out = self.forward_traced(input, &mut trace)?;
        if out.len() != 1 {
            return Err(Error::Shape {
                layer: self.layers.len(),
                reason: format!(
                    "binary cross-entropy needs a scalar output, got {:?}",
                    out.shape()
                ),
            });
        }
        let p = out.data()[0];
        let g = Tensor::new(out.shape().to_vec(), vec![bce_grad(p, target)])?;
        let grads = self.backward(&trace, &g)?;
        Ok((bce_loss(p, target), p, grads))
    }
}

fn positive(layer: usize, v: usize, what: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::Shape {
            layer,
            reason: format!("{what} must be positive"),
        });
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn dense_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let inputs = weight.shape()[1];
    let xs = x.data();
    let out = weight
        .data()
        .chunks_exact(inputs)
        .zip(bias.data())
        .map(|(row, b)| b + dot(row, xs))
        .collect();
    Tensor::vector(out)
}

fn dense_backward(weight: &Tensor, x: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let inputs = weight.shape()[1];
    let xs = x.data();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gx = vec![0.0; inputs];
    for ((row_g, row_w), &g) in gw
        .data_mut()
        .chunks_exact_mut(inputs)
        .zip(weight.data().chunks_exact(inputs))
        .zip(gy.data())
    {
        if g == 0.0 {
            continue;
        }
        axpy(g, xs, row_g);
        axpy(g, row_w, &mut gx);
    }
    (Tensor::vector(gx), gw, Tensor::vector(gy.data().to_vec()))
}

fn conv_forward(weight: &Tensor, bias: &Tensor, x: &Tensor, out_shape: &[usize]) -> Tensor {
    let (channels, kernel) = (weight.shape()[1], weight.shape()[2]);
    let len = x.shape()[1];
    let out_len = out_shape[1];
    let mut out = Tensor::zeros(out_shape);
    for (f, row) in out.data_mut().chunks_exact_mut(out_len).enumerate() {
        row.fill(bias.data()[f]);
        for c in 0..channels {
            let xin = &x.data()[c * len..(c + 1) * len];
            let w = &weight.data()[(f * channels + c) * kernel..(f * channels + c + 1) * kernel];
            correlate(row, xin, w);
        }
    }
    out
}

fn conv_backward(weight: &Tensor, x: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (filters, channels, kernel) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let len = x.shape()[1];
    let out_len = gy.shape()[1];
    let mut gw = Tensor::zeros(weight.shape());
    let mut gx = Tensor::zeros(x.shape());
    let mut gb = vec![0.0; filters];
    // Zero-padded output gradient, so the input gradient is a plain
    // correlation with the reversed kernel.
    let mut padded = vec![0.0; out_len + 2 * (kernel - 1)];
    let mut reversed = vec![0.0; kernel];
    for (f, b) in gb.iter_mut().enumerate() {
        let g = &gy.data()[f * out_len..(f + 1) * out_len];
        *b = g.iter().sum();
        padded[kernel - 1..kernel - 1 + out_len].copy_from_slice(g);
        for c in 0..channels {
            let base = (f * channels + c) * kernel;
            let xin = &x.data()[c * len..(c + 1) * len];
            correlate(&mut gw.data_mut()[base..base + kernel], xin, g);
            for (r, &w) in reversed
                .iter_mut()
                .zip(weight.data()[base..base + kernel].iter().rev())
            {
                *r = w;
            }
            correlate(
                &mut gx.data_mut()[c * len..(c + 1) * len],
                &padded,
                &reversed,
            );
        }
    }
    (gx, gw, Tensor::vector(gb))
}

/// `out[t] += sum_j w[j] * x[t + j]`, blocked over `t` so partial sums stay
/// in registers.
fn correlate(out: &mut [f64], x: &[f64], w: &[f64]) {
    const B: usize = 16;
    let (n, k) = (out.len(), w.len());
    assert!(x.len() + 1 >= n + k);
    let mut t = 0;
    while t + B <= n {
        let mut acc = [0.0f64; B];
        for (j, &wj) in w.iter().enumerate() {
            let xs = &x[t + j..t + j + B];
            for b in 0..B {
                acc[b] += wj * xs[b];
            }
        }
        for (o, a) in out[t..t + B].iter_mut().zip(acc) {
            *o += a;
        }
        t += B;
    }
    for t in t..n {
        out[t] += dot(w, &x[t..t + k]);
    }
}

/// Non-overlapping windows; the first maximum in a window wins.
fn pool_forward(pool: usize, x: &Tensor, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let len = x.shape()[1];
    let out_len = out_shape[1];
    let mut out = Tensor::zeros(out_shape);
    let mut idx = Vec::with_capacity(out.len());
    for c in 0..out_shape[0] {
        for o in 0..out_len {
            let start = c * len + o * pool;
            let window = &x.data()[start..start + pool];
            let mut best = 0;
            for (j, &v) in window.iter().enumerate().skip(1) {
                if v > window[best] {
                    best = j;
                }
            }
            out.data_mut()[c * out_len + o] = window[best];
            idx.push(start + best);
        }
    }
    (out, idx)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
