use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<S: Real>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::ZERO { v } else { S::ZERO })
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward<S: Real>(grad_out: &Tensor<S>, saved_input: &Tensor<S>) -> Result<Tensor<S>> {
    saved_input.check_same_shape("relu_backward", grad_out)?;
    let data = grad_out
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Spatial mean: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<S: Real>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = S::ONE / S::from_usize(plane);
    let data = input.data().chunks(plane).map(|p| p.iter().copied().sum::<S>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<S: Real>(grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::Dimension { op: "global_avg_pool_backward", axis: "rank".into(), expected: 4, got: input_shape.len() });
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Dimension { op: "global_avg_pool_backward", axis: "grad_out".into(), expected: n * c, got: grad_out.len() });
    }
    let plane = h * w;
    let inv = S::ONE / S::from_usize(plane);
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input_shape, data)
}

/// Fully connected layer: `input (N, in) x weight (out, in)^T + bias (out)`.
pub fn linear<S: Real>(input: &Tensor<S>, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let (n, fin) = input.dims2("linear")?;
    let (fout, win) = weight.dims2("linear")?;
    if win != fin {
        return Err(Error::Dimension { op: "linear", axis: "in_features (1)".into(), expected: win, got: fin });
    }
    if let Some(b) = bias {
        if b.len() != fout {
            return Err(Error::Dimension { op: "linear", axis: "bias".into(), expected: fout, got: b.len() });
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * fout);
    for row in x.chunks(fin) {
        for o in 0..fout {
            let mut acc = bias.map_or(S::ZERO, |b| b.data()[o]);
            for (&xi, &wi) in row.iter().zip(&w[o * fin..(o + 1) * fin]) {
                acc += xi * wi;
            }
            out.push(acc);
        }
    }
    Tensor::from_vec(&[n, fout], out)
}

/// Gradients of [`linear`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<S: Real>(
    grad_out: &Tensor<S>,
    saved_input: &Tensor<S>,
    weight: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, fin) = saved_input.dims2("linear_backward")?;
    let (fout, _) = weight.dims2("linear_backward")?;
    if grad_out.shape() != [n, fout] {
        return Err(Error::Dimension { op: "linear_backward", axis: "grad_out (1)".into(), expected: fout, got: grad_out.dim("linear_backward", 1)? });
    }
    let x = saved_input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gin = vec![S::ZERO; n * fin];
    let mut gw = vec![S::ZERO; fout * fin];
    let mut gb = vec![S::ZERO; fout];
    for s in 0..n {
        let xrow = &x[s * fin..(s + 1) * fin];
        let girow = &mut gin[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let gv = g[s * fout + o];
            gb[o] += gv;
            let wrow = &w[o * fin..(o + 1) * fin];
            let gwrow = &mut gw[o * fin..(o + 1) * fin];
            for i in 0..fin {
                girow[i] += gv * wrow[i];
                gwrow[i] += gv * xrow[i];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, fin], gin)?,
        Tensor::from_vec(&[fout, fin], gw)?,
        Tensor::from_vec(&[fout], gb)?,
    ))
}
