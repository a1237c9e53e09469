//! Value-level operation facade.
//!
//! Each function evaluates through a throwaway [`Graph`], so the value path
//! and the differentiable path cannot drift apart. Use these for oracles,
//! feature extraction and other places that never need gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::Graph;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{GaussianParams, Tensor};

pub use crate::numerics::scalar::gelu_tanh;

/// Exact GELU `x·Φ(x)` (the tanh form is available as [`gelu_tanh`] and
/// deviates by less than 1e-3; everything here uses the exact form).
pub fn gelu(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let y = g.gelu(a);
    g.value(y).clone()
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let y = g.relu(a);
    g.value(y).clone()
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(m.clone());
    let y = g.softmax_rows(a)?;
    Ok(g.value(y).clone())
}

/// Mean over windows of `factor` rows, zero-padded on the right; the output
/// has ceil(T/factor) rows and every window divides by `factor`.
pub fn average_pool_time(x: &Tensor, factor: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let y = g.avg_pool_time(a, factor)?;
    Ok(g.value(y).clone())
}

/// Repeat every row `factor` times, then truncate to `target` rows if given.
pub fn nearest_upsample_time(x: &Tensor, factor: usize, target: Option<usize>) -> Result<Tensor> {
    let full = x.rows() * factor;
    let out_len = match target {
        Some(t) if t > full || t == 0 => {
            return Err(Error::InvalidArgument(format!(
                "upsample target {t} outside (0, {full}]"
            )))
        }
        Some(t) => t,
        None => full,
    };
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let y = g.upsample_time(a, factor, out_len)?;
    Ok(g.value(y).clone())
}

/// "Same"-padded temporal convolution; `w` has shape [k, Cin, Cout].
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    if w.shape().len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "conv1d: weight must be [k, Cin, Cout], got {:?}",
            w.shape()
        )));
    }
    let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let wf = g.input(Tensor::matrix(k * cin, cout, w.data().to_vec())?);
    let b = match bias {
        Some(t) => Some(g.input(Tensor::matrix(1, cout, t.data().to_vec())?)),
        None => None,
    };
    let y = g.conv1d(a, wf, b, k, dilation)?;
    Ok(g.value(y).clone())
}

/// Elementwise KL(q‖p) for diagonal Gaussians; nonnegative everywhere.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let mq = g.input(q.mean.clone());
    let lsq = g.input(q.log_std.clone());
    let mp = g.input(p.mean.clone());
    let lsp = g.input(p.log_std.clone());
    let y = g.gaussian_kl(mq, lsq, mp, lsp)?;
    Ok(g.value(y).clone())
}

/// `mean + exp(log_std)·ε` with ε drawn elementwise from `rng`.
pub fn reparameterize(gp: &GaussianParams, rng: &mut Rng) -> Tensor {
    let mut out = gp.mean.clone();
    for (v, &ls) in out.data_mut().iter_mut().zip(gp.log_std.data()) {
        *v += ls.exp() * rng.normal();
    }
    out
}

/// Per-row normalization followed by a learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let ga = g.input(Tensor::matrix(1, gain.len(), gain.data().to_vec())?);
    let bi = g.input(Tensor::matrix(1, bias.len(), bias.data().to_vec())?);
    let n = g.layer_norm_rows(a)?;
    let m = g.mul_row_vec(n, ga)?;
    let y = g.add_row_vec(m, bi)?;
    Ok(g.value(y).clone())
}

/// Inverted dropout; identity when `training` is false.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let y = g.dropout(a, rate, rng, training)?;
    Ok(g.value(y).clone())
}

/// `x·W + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let wi = g.input(w.clone());
    let bi = g.input(Tensor::matrix(1, b.len(), b.data().to_vec())?);
    let y = g.linear(a, wi, Some(bi))?;
    Ok(g.value(y).clone())
}
