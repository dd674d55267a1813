//! Softmax family and the classification/distillation divergences.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Splits `shape` into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension { op: "softmax", axis: axis.to_string(), expected: axis + 1, got: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn for_each_lane<S: Real>(t: &mut Tensor<S>, axis: usize, mut f: impl FnMut(&mut [S])) -> Result<()> {
    let (outer, len, inner) = split_axis(t.shape(), axis)?;
    let data = t.data_mut();
    let mut lane = vec![S::ZERO; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                lane[k] = data[(o * len + k) * inner + i];
            }
            f(&mut lane);
            for k in 0..len {
                data[(o * len + k) * inner + i] = lane[k];
            }
        }
    }
    Ok(())
}

fn log_sum_exp<S: Real>(lane: &[S]) -> S {
    let m = lane.iter().copied().fold(lane[0], |a, b| a.max(b));
    m + lane.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}

pub fn softmax_slice<S: Real>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().copied().fold(logits[0], |a, b| a.max(b));
    let e: Vec<S> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax_slice<S: Real>(logits: &[S]) -> Vec<S> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| v - lse).collect()
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<S: Real>(logits: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let mut out = logits.clone();
    for_each_lane(&mut out, axis, |lane| {
        let p = softmax_slice(lane);
        lane.copy_from_slice(&p);
    })?;
    Ok(out)
}

pub fn log_softmax<S: Real>(logits: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let mut out = logits.clone();
    for_each_lane(&mut out, axis, |lane| {
        let p = log_softmax_slice(lane);
        lane.copy_from_slice(&p);
    })?;
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`: `y * (g - <g, y>)`.
pub fn softmax_backward<S: Real>(grad_out: &Tensor<S>, output: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    output.check_same_shape("softmax_backward", grad_out)?;
    let (outer, len, inner) = split_axis(output.shape(), axis)?;
    let (g, y) = (grad_out.data(), output.data());
    let mut out = vec![S::ZERO; g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: S = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    Tensor::from_vec(output.shape(), out)
}

/// Vector-Jacobian product of log-softmax given its output: `g - softmax * sum(g)`.
pub fn log_softmax_backward<S: Real>(grad_out: &Tensor<S>, output: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    output.check_same_shape("log_softmax_backward", grad_out)?;
    let (outer, len, inner) = split_axis(output.shape(), axis)?;
    let (g, y) = (grad_out.data(), output.data());
    let mut out = vec![S::ZERO; g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let total: S = (0..len).map(|k| g[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = g[idx(k)] - y[idx(k)].exp() * total;
            }
        }
    }
    Tensor::from_vec(output.shape(), out)
}

/// `sum_c p_c (log p_c - log_q_c)` with `0 log 0 = 0`.
pub fn kl_div_slice<S: Real>(p: &[S], log_q: &[S]) -> Result<S> {
    if p.len() != log_q.len() {
        return Err(Error::Dimension { op: "kl_div", axis: "class".into(), expected: p.len(), got: log_q.len() });
    }
    if p.iter().any(|&v| v < S::ZERO) {
        return Err(Error::Input("kl_div: p has negative entries".into()));
    }
    let total: f64 = p.iter().map(|v| v.to_f64()).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("kl_div: p sums to {total}, not 1")));
    }
    Ok(p.iter()
        .zip(log_q)
        .filter(|(&pc, _)| pc > S::ZERO)
        .map(|(&pc, &lq)| pc * (pc.ln() - lq))
        .sum())
}

pub fn kl_div<S: Real>(p: &Tensor<S>, log_q: &Tensor<S>) -> Result<S> {
    p.check_same_shape("kl_div", log_q)?;
    kl_div_slice(p.data(), log_q.data())
}

pub fn cross_entropy_slice<S: Real>(logits: &[S], label: usize) -> Result<S> {
    if label >= logits.len() {
        return Err(Error::Input(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// `-log softmax(logits)[label]` for a single logit vector.
pub fn cross_entropy<S: Real>(logits: &Tensor<S>, label: usize) -> Result<S> {
    cross_entropy_slice(logits.data(), label)
}

/// Batch-mean cross-entropy over `(N, C)` logits and its gradient.
pub fn cross_entropy_batch<S: Real>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    let (n, c) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Dimension { op: "cross_entropy", axis: "batch".into(), expected: n, got: labels.len() });
    }
    let inv_n = S::ONE / S::from_usize(n);
    let mut loss = S::ZERO;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        loss += cross_entropy_slice(row, y)?;
        let p = softmax_slice(row);
        grad.extend(p.iter().enumerate().map(|(k, &pk)| (pk - if k == y { S::ONE } else { S::ZERO }) * inv_n));
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&t(&[0.0, 0.0, 0.0]), 0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&t(&[1000.0, 1000.5]), 0).unwrap();
        assert!(p.all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_values() {
        // e^k / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let oracle = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let p = softmax(&t(&[1.0, 2.0, 3.0]), 0).unwrap();
        for (a, b) in p.data().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        for col in 0..3 {
            assert!((p.data()[col] + p.data()[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_div_cases() {
        let p = t(&[0.2, 0.3, 0.5]);
        let lp = p.map(f64::ln);
        assert_eq!(kl_div(&p, &lp).unwrap(), 0.0);
        let v = kl_div(&t(&[1.0, 0.0]), &t(&[0.5f64.ln(), 0.5f64.ln()])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(kl_div(&t(&[0.5, 0.6]), &t(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = t(&[0.7; 10]);
        assert!((cross_entropy(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut sharp = vec![0.0; 10];
        sharp[3] = 30.0;
        assert!(cross_entropy(&t(&sharp), 3).unwrap() < 1e-12);
        // log(e + e^2 + e^3) - 3
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let ce = cross_entropy(&t(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert!((ce - oracle).abs() < 1e-12);
        assert!((ce - 0.40761).abs() < 1e-4);
        assert!(matches!(cross_entropy(&t(&[1.0, 2.0]), 2), Err(Error::Input(_))));
    }
}
