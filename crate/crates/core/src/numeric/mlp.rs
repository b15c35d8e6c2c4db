//! Fully connected networks with hand-derived gradients.
//!
//! Parameters are exposed through a flat view whose layout is, layer by layer,
//! the row-major `inputs × outputs` weight matrix followed by the bias vector.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::functions::{log_softmax_in_place, softmax_in_place};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }
}

/// Affine layer followed by an activation: `act(x·W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    /// He-normal weights for ReLU layers, LeCun-normal otherwise; zero bias.
    pub fn seeded<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let std = (gain / inputs.max(1) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in layer.weights.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::of(z * std);
        }
        layer
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.inputs() * self.outputs() + self.outputs()
    }

    /// Returns `(pre_activation, activation)`.
    fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut pre = x.matmul(&self.weights)?;
        for r in 0..pre.rows() {
            for (v, &b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let act = match self.activation {
            Activation::Identity => pre.clone(),
            a => pre.map(|v| a.apply(v)),
        };
        Ok((pre, act))
    }
}

/// A stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `inputs[l]` is the input of layer `l`.
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    output: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim("Mlp::new", pair[0].outputs(), pair[1].inputs()));
            }
        }
        Ok(Self { layers })
    }

    /// Seeded network with the given widths (`widths[0]` is the input size).
    /// `activations[l]` applies to layer `l`.
    pub fn seeded<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if widths.len() != activations.len() + 1 {
            return Err(Error::dim("Mlp::seeded", widths.len() - 1, activations.len()));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::seeded(w[0], w[1], a, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Dense<T>> {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim("Mlp::set_params", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            layer
                .weights
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("Mlp input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_prefix(x, self.layers.len())
    }

    /// Output of the first `n_layers` layers.
    pub fn forward_prefix(&self, x: &Matrix<T>, n_layers: usize) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..n_layers.min(self.layers.len())] {
            h = layer.forward(&h)?.1;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (z, a) = layer.forward(&h)?;
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Flat parameter gradient given `∂loss/∂output`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: &Matrix<T>) -> Result<Vec<T>> {
        if d_output.shape() != cache.output.shape() {
            return Err(Error::dim("Mlp::backward", cache.output.cols(), d_output.cols()));
        }
        let mut grads: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                let pre = &cache.pre[l];
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= layer.activation.derivative(z);
                }
            }
            let d_w = cache.inputs[l].t_matmul(&delta)?;
            let mut d_b = vec![T::zero(); layer.outputs()];
            for row in delta.iter_rows() {
                for (acc, &v) in d_b.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let mut g = d_w.into_vec();
            g.extend(d_b);
            grads.push(g);
            if l > 0 {
                delta = delta.matmul_t(&layer.weights)?;
            }
        }
        Ok(grads.into_iter().rev().flatten().collect())
    }
}

/// Objective minimized by [`mlp_forward_backward`]. Every loss is averaged
/// over the rows of the batch.
#[derive(Debug, Clone, Copy)]
pub enum LossKind<'a, T> {
    /// `-Σ t·ln softmax(z)`.
    CrossEntropy,
    /// `Σ t·(ln t − ln softmax(z/τ))`.
    Kl { temperature: T },
    /// Cross-entropy plus `(μ/2)‖θ − anchor‖²`.
    Proximal { mu: T, anchor: &'a [T] },
}

/// Loss value and flat parameter gradient of `net` on `(batch, target)`.
///
/// `target` holds one distribution per batch row (one-hot rows for hard labels).
pub fn mlp_forward_backward<T: Scalar>(
    net: &Mlp<T>,
    batch: &Matrix<T>,
    target: &Matrix<T>,
    loss: LossKind<'_, T>,
) -> Result<(T, Vec<T>)> {
    if target.rows() != batch.rows() {
        return Err(Error::dim("target rows", batch.rows(), target.rows()));
    }
    if target.cols() != net.output_dim() {
        return Err(Error::dim("target classes", net.output_dim(), target.cols()));
    }
    if batch.rows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let cache = net.forward_cached(batch)?;
    let (value, d_logits) = output_loss(cache.output(), target, loss);
    let mut grad = net.backward(&cache, &d_logits)?;
    let mut value = value;
    if let LossKind::Proximal { mu, anchor } = loss {
        if anchor.len() != grad.len() {
            return Err(Error::dim("proximal anchor", grad.len(), anchor.len()));
        }
        let params = net.params();
        let half = T::of(0.5);
        for ((g, &p), &a) in grad.iter_mut().zip(&params).zip(anchor) {
            let diff = p - a;
            *g += mu * diff;
            value += half * mu * diff * diff;
        }
    }
    Ok((value, grad))
}

/// Loss on logits and its derivative with respect to them.
///
/// Targets are assumed row-stochastic. The probabilities are computed exactly as
/// [`softmax_rows`](crate::numeric::softmax_rows) does, so a target produced by
/// that function yields a gradient of exactly zero.
pub(crate) fn output_loss<T: Scalar>(logits: &Matrix<T>, target: &Matrix<T>, loss: LossKind<'_, T>) -> (T, Matrix<T>) {
    let batch = T::of_usize(logits.rows());
    let temperature = match loss {
        LossKind::Kl { temperature } => temperature,
        _ => T::one(),
    };
    let inv_t = T::one() / temperature;
    let is_kl = matches!(loss, LossKind::Kl { .. });
    let mut value = T::zero();
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    let mut log_p = vec![T::zero(); logits.cols()];
    let mut p = vec![T::zero(); logits.cols()];
    for r in 0..logits.rows() {
        let t = target.row(r);
        for ((lp, pi), &z) in log_p.iter_mut().zip(p.iter_mut()).zip(logits.row(r)) {
            *lp = z * inv_t;
            *pi = *lp;
        }
        log_softmax_in_place(&mut log_p);
        softmax_in_place(&mut p);
        for (&ti, &lp) in t.iter().zip(&log_p) {
            if ti > T::zero() {
                value -= ti * lp;
                if is_kl {
                    value += ti * ti.ln();
                }
            }
        }
        for ((g, &pi), &ti) in d.row_mut(r).iter_mut().zip(&p).zip(t) {
            *g = (pi - ti) * inv_t / batch;
        }
    }
    (value / batch, d)
}
