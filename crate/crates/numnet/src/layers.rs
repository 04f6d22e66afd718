//! Layer kernels on flat slices.
//!
//! Feature maps are channel-major: element `(c, p)` of a map with `S` sites
//! sits at `c * S + p`. Concatenating maps along the channel axis is therefore
//! plain buffer concatenation.

use rand::Rng;

use crate::error::{NetError, Result};
use crate::params::{ParamId, ParamStore};

/// Fully connected layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    /// Glorot-initialised weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(
            format!("{name}.weight"),
            &[output, input],
            input,
            output,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[output]);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input {
            return Err(NetError::shape("dense", self.input, x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let w = params.value(self.weight);
        let b = params.value(self.bias);
        Ok(w.chunks_exact(self.input)
            .zip(b)
            .map(|(row, &bias)| bias + dot(row, x))
            .collect())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        x: &[f64],
        grad_out: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(x)?;
        if grad_out.len() != self.output {
            return Err(NetError::shape(
                "dense (output gradient)",
                self.output,
                grad_out.len(),
            ));
        }
        let mut grad_in = vec![0.0; self.input];
        {
            let w = params.value(self.weight);
            for (row, &g) in w.chunks_exact(self.input).zip(grad_out) {
                if g != 0.0 {
                    axpy(g, row, &mut grad_in);
                }
            }
        }
        let gw = params.grad_mut(self.weight);
        for (row, &g) in gw.chunks_exact_mut(self.input).zip(grad_out) {
            if g != 0.0 {
                axpy(g, x, row);
            }
        }
        let gb = params.grad_mut(self.bias);
        gb.iter_mut().zip(grad_out).for_each(|(b, g)| *b += g);
        Ok(grad_in)
    }
}

/// A 1×1 convolution: the same `[out_ch, in_ch]` linear map at every site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(
            format!("{name}.weight"),
            &[out_channels, in_channels],
            in_channels,
            out_channels,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    fn check(&self, x: &[f64], sites: usize) -> Result<()> {
        if x.len() != self.in_channels * sites {
            return Err(NetError::shape(
                "pointwise",
                format!("{}x{sites}", self.in_channels),
                x.len(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64], sites: usize) -> Result<Vec<f64>> {
        self.check(x, sites)?;
        let w = params.value(self.weight);
        let b = params.value(self.bias);
        let mut out = vec![0.0; self.out_channels * sites];
        for (o, out_row) in out.chunks_exact_mut(sites).enumerate() {
            out_row.iter_mut().for_each(|v| *v = b[o]);
            let w_row = &w[o * self.in_channels..(o + 1) * self.in_channels];
            for (&wc, x_row) in w_row.iter().zip(x.chunks_exact(sites)) {
                if wc != 0.0 {
                    axpy(wc, x_row, out_row);
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        x: &[f64],
        sites: usize,
        grad_out: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(x, sites)?;
        if grad_out.len() != self.out_channels * sites {
            return Err(NetError::shape(
                "pointwise (output gradient)",
                format!("{}x{sites}", self.out_channels),
                grad_out.len(),
            ));
        }
        let mut grad_in = vec![0.0; x.len()];
        {
            let w = params.value(self.weight);
            for (o, g_row) in grad_out.chunks_exact(sites).enumerate() {
                let w_row = &w[o * self.in_channels..(o + 1) * self.in_channels];
                for (&wc, gi_row) in w_row.iter().zip(grad_in.chunks_exact_mut(sites)) {
                    axpy(wc, g_row, gi_row);
                }
            }
        }
        let in_ch = self.in_channels;
        let gw = params.grad_mut(self.weight);
        for (o, g_row) in grad_out.chunks_exact(sites).enumerate() {
            for (c, x_row) in x.chunks_exact(sites).enumerate() {
                gw[o * in_ch + c] += dot(g_row, x_row);
            }
        }
        let gb = params.grad_mut(self.bias);
        for (o, g_row) in grad_out.chunks_exact(sites).enumerate() {
            gb[o] += g_row.iter().sum::<f64>();
        }
        Ok(grad_in)
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the layer *output* (or input; the sign is the same).
pub fn relu_backward(activation: &[f64], grad_out: &[f64]) -> Vec<f64> {
    activation
        .iter()
        .zip(grad_out)
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_backward(probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_out);
    probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

/// Concatenates channel-major maps that share a site count.
pub fn concat_channels(maps: &[&[f64]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
    for m in maps {
        out.extend_from_slice(m);
    }
    out
}

/// Inverse of [`concat_channels`] for gradients: splits by element counts.
pub fn split_channels(grad: &[f64], lens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let total: usize = lens.iter().sum();
    if total != grad.len() {
        return Err(NetError::shape("channel-concat", total, grad.len()));
    }
    let mut parts = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &len in lens {
        parts.push(grad[start..start + len].to_vec());
        start += len;
    }
    Ok(parts)
}

/// One constant channel holding `value` at every site.
pub fn tile_scalar(value: f64, sites: usize) -> Vec<f64> {
    vec![value; sites]
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}
