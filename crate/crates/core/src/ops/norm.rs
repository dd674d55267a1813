//! Per-channel batch normalization and global response normalization.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default epsilon for both normalizations.
pub const NORM_EPS: f64 = 1e-6;

fn check_channel_vec<S: Real>(op: &'static str, name: &str, v: &Tensor<S>, c: usize) -> Result<()> {
    if v.len() != c {
        return Err(Error::Dimension { op, axis: format!("{name} (channel)"), expected: c, got: v.len() });
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Inference-style batch normalization with supplied running statistics.
pub fn batch_norm<S: Real>(
    input: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    check_eps(eps)?;
    let (n, c, h, w) = input.dims4("batch_norm")?;
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        check_channel_vec("batch_norm", name, v, c)?;
    }
    let plane = h * w;
    let eps = S::from_f64(eps);
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let k = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
        let m = mean.data()[ch];
        let b = beta.data()[ch];
        for v in chunk {
            *v = (*v - m) * k + b;
        }
    }
    debug_assert_eq!(out.len(), n * c * plane);
    Ok(out)
}

/// Gradients of [`batch_norm`] (fixed statistics) w.r.t. input, gamma, beta.
pub fn batch_norm_backward<S: Real>(
    grad_out: &Tensor<S>,
    saved_input: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    check_eps(eps)?;
    let (_, c, h, w) = saved_input.dims4("batch_norm_backward")?;
    saved_input.check_same_shape("batch_norm_backward", grad_out)?;
    let plane = h * w;
    let eps = S::from_f64(eps);
    let mut gin = grad_out.clone();
    let mut ggamma = vec![S::ZERO; c];
    let mut gbeta = vec![S::ZERO; c];
    for (i, (gchunk, xchunk)) in gin.data_mut().chunks_mut(plane).zip(saved_input.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let inv = S::ONE / (var.data()[ch] + eps).sqrt();
        let k = gamma.data()[ch] * inv;
        let m = mean.data()[ch];
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            ggamma[ch] += *g * (x - m) * inv;
            gbeta[ch] += *g;
            *g *= k;
        }
    }
    Ok((gin, Tensor::from_vec(&[c], ggamma)?, Tensor::from_vec(&[c], gbeta)?))
}

/// Statistics saved by a training-mode batch norm forward.
#[derive(Debug, Clone)]
pub struct BatchStats<S: Real> {
    pub mean: Vec<S>,
    /// Biased batch variance.
    pub var: Vec<S>,
    pub count: usize,
}

/// Training-mode batch normalization using the batch's own statistics.
pub fn batch_norm_train<S: Real>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, BatchStats<S>)> {
    let stats = batch_stats(input)?;
    let c = stats.mean.len();
    let mean = Tensor::from_vec(&[c], stats.mean.clone())?;
    let var = Tensor::from_vec(&[c], stats.var.clone())?;
    Ok((batch_norm(input, &mean, &var, gamma, beta, eps)?, stats))
}

pub fn batch_stats<S: Real>(input: &Tensor<S>) -> Result<BatchStats<S>> {
    let (n, c, h, w) = input.dims4("batch_norm_train")?;
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![S::ZERO; c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        mean[i % c] += chunk.iter().copied().sum::<S>();
    }
    let inv = S::ONE / S::from_usize(count);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![S::ZERO; c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|&x| (x - m) * (x - m)).sum::<S>();
    }
    var.iter_mut().for_each(|v| *v *= inv);
    Ok(BatchStats { mean, var, count })
}

/// Gradients of [`batch_norm_train`], differentiating through the batch statistics.
pub fn batch_norm_train_backward<S: Real>(
    grad_out: &Tensor<S>,
    saved_input: &Tensor<S>,
    stats: &BatchStats<S>,
    gamma: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    check_eps(eps)?;
    let (_, c, h, w) = saved_input.dims4("batch_norm_train_backward")?;
    saved_input.check_same_shape("batch_norm_train_backward", grad_out)?;
    let plane = h * w;
    let eps = S::from_f64(eps);
    let inv_std: Vec<S> = stats.var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
    // per channel: sum(dy), sum(dy * xhat)
    let mut sum_g = vec![S::ZERO; c];
    let mut sum_gx = vec![S::ZERO; c];
    for (i, (g, x)) in grad_out.data().chunks(plane).zip(saved_input.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let m = stats.mean[ch];
        for (&gv, &xv) in g.iter().zip(x) {
            sum_g[ch] += gv;
            sum_gx[ch] += gv * (xv - m) * inv_std[ch];
        }
    }
    let count = S::from_usize(stats.count);
    let mut gin = grad_out.clone();
    for (i, (g, x)) in gin.data_mut().chunks_mut(plane).zip(saved_input.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let k = gamma.data()[ch] * inv_std[ch] / count;
        let m = stats.mean[ch];
        for (gv, &xv) in g.iter_mut().zip(x) {
            let xhat = (xv - m) * inv_std[ch];
            *gv = k * (count * *gv - sum_g[ch] - xhat * sum_gx[ch]);
        }
    }
    Ok((gin, Tensor::from_vec(&[c], sum_gx)?, Tensor::from_vec(&[c], sum_g)?))
}

/// Per-(sample, channel) global response: spatial L2 norm divided by the
/// channel-mean norm.
fn grn_response<S: Real>(input: &Tensor<S>, eps: S) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (n, c, h, w) = input.dims4("grn")?;
    let plane = h * w;
    let norms: Vec<S> = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().map(|&x| x * x).sum::<S>().sqrt())
        .collect();
    let mut denom = vec![S::ZERO; n];
    for (s, row) in norms.chunks(c).enumerate() {
        denom[s] = row.iter().copied().sum::<S>() / S::from_usize(c) + eps;
    }
    let resp = norms.iter().enumerate().map(|(i, &g)| g / denom[i / c]).collect();
    Ok((norms, denom, resp))
}

/// Global response normalization:
/// `out = gamma * (x * Nrm) + beta + x` with `Nrm = G / (mean_c G + eps)`.
pub fn grn<S: Real>(input: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    check_eps(eps)?;
    let (_, c, h, w) = input.dims4("grn")?;
    check_channel_vec("grn", "gamma", gamma, c)?;
    check_channel_vec("grn", "beta", beta, c)?;
    let (_, _, resp) = grn_response(input, S::from_f64(eps))?;
    let plane = h * w;
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let k = S::ONE + gamma.data()[ch] * resp[i];
        let b = beta.data()[ch];
        for v in chunk {
            *v = *v * k + b;
        }
    }
    Ok(out)
}

/// Gradients of [`grn`] w.r.t. input, gamma, beta.
pub fn grn_backward<S: Real>(
    grad_out: &Tensor<S>,
    saved_input: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    check_eps(eps)?;
    let (n, c, h, w) = saved_input.dims4("grn_backward")?;
    saved_input.check_same_shape("grn_backward", grad_out)?;
    check_channel_vec("grn_backward", "gamma", gamma, c)?;
    let plane = h * w;
    let (norms, denom, resp) = grn_response(saved_input, S::from_f64(eps))?;
    let x = saved_input.data();
    let go = grad_out.data();

    let mut ggamma = vec![S::ZERO; c];
    let mut gbeta = vec![S::ZERO; c];
    // dL/dNrm[n,c] = gamma_c * sum_hw(g * x)
    let mut g_resp = vec![S::ZERO; n * c];
    for i in 0..n * c {
        let ch = i % c;
        let gx: S = go[i * plane..(i + 1) * plane].iter().zip(&x[i * plane..(i + 1) * plane]).map(|(&g, &v)| g * v).sum();
        ggamma[ch] += gx * resp[i];
        gbeta[ch] += go[i * plane..(i + 1) * plane].iter().copied().sum::<S>();
        g_resp[i] = gamma.data()[ch] * gx;
    }
    // Nrm_c = G_c / D, D = mean(G) + eps:
    // dL/dG_k = g_resp_k / D - (1/C) * sum_c(g_resp_c * G_c) / D^2
    let inv_c = S::ONE / S::from_usize(c);
    let mut g_norm = vec![S::ZERO; n * c];
    for s in 0..n {
        let d = denom[s];
        let cross: S = (0..c).map(|k| g_resp[s * c + k] * norms[s * c + k]).sum();
        for k in 0..c {
            g_norm[s * c + k] = g_resp[s * c + k] / d - inv_c * cross / (d * d);
        }
    }
    let mut gin = vec![S::ZERO; x.len()];
    for i in 0..n * c {
        let ch = i % c;
        let direct = S::ONE + gamma.data()[ch] * resp[i];
        // dG/dx = x / G; zero-norm channels contribute nothing through G
        let via_norm = if norms[i] > S::ZERO { g_norm[i] / norms[i] } else { S::ZERO };
        for j in i * plane..(i + 1) * plane {
            gin[j] = go[j] * direct + via_norm * x[j];
        }
    }
    Ok((
        Tensor::from_vec(saved_input.shape(), gin)?,
        Tensor::from_vec(&[c], ggamma)?,
        Tensor::from_vec(&[c], gbeta)?,
    ))
}
