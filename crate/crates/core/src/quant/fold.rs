use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Folds a per-channel norm into the preceding convolution:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = (b - mu) * gamma / sqrt(var + eps) + beta`.
///
/// A missing conv bias is treated as zero.
pub fn fold_norm<S: Real>(
    conv_w: &Tensor<S>,
    conv_b: Option<&Tensor<S>>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let cout = *conv_w.shape().first().ok_or_else(|| Error::Fold("weight has rank 0".into()))?;
    let stats = [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)];
    for (name, t) in stats.iter().copied().chain(conv_b.map(|b| ("conv bias", b))) {
        if t.len() != cout {
            return Err(Error::Fold(format!("{name} has {} entries, expected {cout} output channels", t.len())));
        }
    }
    let per = conv_w.len() / cout;
    let eps = S::from_f64(eps);
    let mut w = conv_w.clone();
    let mut b = Vec::with_capacity(cout);
    for o in 0..cout {
        let k = gamma.data()[o] / (var.data()[o] + eps).sqrt();
        w.data_mut()[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= k);
        let b0 = conv_b.map_or(S::ZERO, |t| t.data()[o]);
        b.push((b0 - mean.data()[o]) * k + beta.data()[o]);
    }
    Ok((w, Tensor::from_vec(&[cout], b)?))
}
