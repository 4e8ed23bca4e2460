//! Small multilayer perceptrons with explicit per-sample gradients.
//!
//! Parameters are flattened layer by layer. Within a layer the weight is
//! extended with its bias as an extra input column, `[W | b]`
//! (`d_out x (d_in + 1)`), and vectorized column-major, so the layer slice of
//! a per-sample gradient is exactly `sum_t z_in[:, t] (x) dz_out[:, t]` with a
//! trailing `1` appended to every `z_in` column.

mod checkpoint;
mod data;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::gradient::GradientVector;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{make_dataset, parse_idx, Dataset, DatasetKind, IdxTensor, Split};
pub use train::{batch_grad, evaluate_loss, train_sgd, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out x d_in`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl LinearLayer {
    pub fn zeros(d_in: usize, d_out: usize, bias: bool, activation: Activation) -> Self {
        LinearLayer {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: bias.then(|| vec![0.0; d_out]),
            activation,
        }
    }

    /// Width of the traced input, counting the bias column.
    pub fn trace_in(&self) -> usize {
        self.d_in + usize::from(self.bias.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.trace_in() * self.d_out
    }

    fn pre_activation(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.d_out {
            let row = &self.weight[o * self.d_in..(o + 1) * self.d_in];
            let mut s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            if let Some(b) = &self.bias {
                s += b[o];
            }
            out.push(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (without the bias one).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Input and pre-activation gradient of one linear layer for one sample,
/// stored token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayerTrace {
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens: usize,
    /// `tokens x d_in`, bias ones included as the last coordinate.
    pub z_in: Vec<f64>,
    /// `tokens x d_out`.
    pub dz_out: Vec<f64>,
}

impl LinearLayerTrace {
    pub fn new(layer: usize, d_in: usize, d_out: usize, z_in: Vec<f64>, dz_out: Vec<f64>) -> Result<Self> {
        if d_in == 0 || d_out == 0 || z_in.len() % d_in != 0 {
            return Err(Error::invalid("trace input shape is inconsistent"));
        }
        let tokens = z_in.len() / d_in;
        check_dim(tokens * d_out, dz_out.len())?;
        Ok(LinearLayerTrace {
            layer,
            d_in,
            d_out,
            tokens,
            z_in,
            dz_out,
        })
    }

    pub fn z_in_token(&self, t: usize) -> &[f64] {
        &self.z_in[t * self.d_in..(t + 1) * self.d_in]
    }

    pub fn dz_out_token(&self, t: usize) -> &[f64] {
        &self.dz_out[t * self.d_out..(t + 1) * self.d_out]
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn scaled_output(&self, alpha: f64) -> Self {
        LinearLayerTrace {
            dz_out: self.dz_out.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

impl Mlp {
    /// Layers `dims[0] -> dims[1] -> ... -> dims[L]`, ReLU between layers and
    /// identity on the output, He-normal initialization.
    pub fn new(dims: &[usize], bias: bool, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("an MLP needs at least two positive layer widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (d_in, d_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("positive std");
                LinearLayer {
                    d_in,
                    d_out,
                    weight: (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect(),
                    bias: bias.then(|| vec![0.0; d_out]),
                    activation: if l == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].d_out != w[1].d_in {
                return Err(Error::invalid(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].d_out, w[1].d_in
                )));
            }
        }
        for l in &layers {
            check_dim(l.d_in * l.d_out, l.weight.len())?;
            if let Some(b) = &l.bias {
                check_dim(l.d_out, b.len())?;
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::param_count).sum()
    }

    /// Offsets of each layer's slice in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &self.layers {
            acc += l.param_count();
            offsets.push(acc);
        }
        offsets
    }

    /// `(trace_in, d_out)` per layer, the factor shapes of its gradient.
    pub fn factor_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.trace_in(), l.d_out)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for a in 0..l.d_in {
                for o in 0..l.d_out {
                    out.push(l.weight[o * l.d_in + a]);
                }
            }
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn unflatten(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for a in 0..l.d_in {
                for o in 0..l.d_out {
                    l.weight[o * l.d_in + a] = it.next().expect("length checked");
                }
            }
            if let Some(b) = &mut l.bias {
                for v in b.iter_mut() {
                    *v = it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        check_dim(self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = Vec::with_capacity(l.d_out);
            l.pre_activation(&h, &mut z);
            let next: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Pre-activation gradients of every layer given `dL/d output`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Vec<Vec<f64>> {
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut upstream = d_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = upstream
                .iter()
                .zip(&cache.pre[l])
                .map(|(&u, &z)| u * layer.activation.derivative(z))
                .collect();
            if l > 0 {
                let mut next = vec![0.0; layer.d_in];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weight[o * layer.d_in..(o + 1) * layer.d_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                upstream = next;
            }
            grads[l] = dz;
        }
        grads
    }

    /// Per-sample gradient of `sum_t loss(f(x_t), y_t)` over the tokens of one
    /// sample, together with the per-layer traces.
    pub fn per_sample_grad(
        &self,
        tokens: &[&[f64]],
        targets: &[Target],
        loss: Loss,
    ) -> Result<(GradientVector<f64>, Vec<LinearLayerTrace>)> {
        if tokens.is_empty() {
            return Err(Error::invalid("a sample needs at least one token"));
        }
        check_dim(tokens.len(), targets.len())?;
        let n_layers = self.layers.len();
        let mut z_in: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut dz_out: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        for (x, y) in tokens.iter().zip(targets) {
            let cache = self.forward(x)?;
            let (value, d_out) = loss_and_grad(&cache.output, y, loss)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value}")));
            }
            let dz = self.backward(&cache, &d_out);
            for (l, layer) in self.layers.iter().enumerate() {
                z_in[l].extend_from_slice(&cache.inputs[l]);
                if layer.bias.is_some() {
                    z_in[l].push(1.0);
                }
                dz_out[l].extend_from_slice(&dz[l]);
            }
        }
        let traces: Vec<LinearLayerTrace> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                LinearLayerTrace::new(
                    l,
                    layer.trace_in(),
                    layer.d_out,
                    std::mem::take(&mut z_in[l]),
                    std::mem::take(&mut dz_out[l]),
                )
            })
            .collect::<Result<_>>()?;
        let mut flat = Vec::with_capacity(self.param_count());
        for tr in &traces {
            flat.extend(kron_sum(tr));
        }
        Ok((GradientVector::Dense(flat), traces))
    }

    /// Single-token convenience wrapper.
    pub fn per_sample_grad_single(
        &self,
        x: &[f64],
        target: &Target,
        loss: Loss,
    ) -> Result<(GradientVector<f64>, Vec<LinearLayerTrace>)> {
        self.per_sample_grad(&[x], std::slice::from_ref(target), loss)
    }

    pub fn loss(&self, x: &[f64], target: &Target, loss: Loss) -> Result<f64> {
        let cache = self.forward(x)?;
        Ok(loss_and_grad(&cache.output, target, loss)?.0)
    }
}

/// `sum_t z_in[:, t] (x) dz_out[:, t]` in column-major order, tokens summed
/// in ascending order.
pub(crate) fn kron_sum(trace: &LinearLayerTrace) -> Vec<f64> {
    let (d_in, d_out) = (trace.d_in, trace.d_out);
    let mut out = vec![0.0; d_in * d_out];
    for t in 0..trace.tokens {
        let zin = trace.z_in_token(t);
        let dz = trace.dz_out_token(t);
        for (a, &za) in zin.iter().enumerate() {
            let block = &mut out[a * d_out..(a + 1) * d_out];
            for (o, &d) in block.iter_mut().zip(dz) {
                *o += za * d;
            }
        }
    }
    out
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_grad(output: &[f64], target: &Target, loss: Loss) -> Result<(f64, Vec<f64>)> {
    match (loss, target) {
        (Loss::CrossEntropy, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(Error::OutOfRange {
                    index: *c,
                    dim: output.len(),
                });
            }
            let max = output.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exp: Vec<f64> = output.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let value = z.ln() + max - output[*c];
            let mut grad: Vec<f64> = exp.iter().map(|e| e / z).collect();
            grad[*c] -= 1.0;
            Ok((value, grad))
        }
        (Loss::MeanSquaredError, Target::Values(y)) => {
            check_dim(output.len(), y.len())?;
            let grad: Vec<f64> = output.iter().zip(y).map(|(o, t)| o - t).collect();
            let value = 0.5 * grad.iter().map(|d| d * d).sum::<f64>();
            Ok((value, grad))
        }
        _ => Err(Error::invalid("loss and target kinds do not match")),
    }
}
