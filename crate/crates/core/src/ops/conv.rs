use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square-kernel convolution with one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding, groups: 1 }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    /// Per-channel spatial convolution with "same" padding for odd kernels.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { groups: channels, ..Self::new(channels, channels, kernel, stride, kernel / 2) }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("groups", self.groups),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Spec(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel_h, self.kernel_w]
    }

    /// Output spatial extent, or `None` when the padded input is smaller than the kernel.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    /// Multiply-accumulates for one sample at the given output size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.kernel_h * self.kernel_w * (self.in_channels / self.groups) * self.out_channels * out_h * out_w) as u64
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<S: Real> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check(input_shape: &[usize], weight_shape: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::Dimension { op: "conv2d", axis: "rank".into(), expected: 4, got: input_shape.len() });
    };
    if c != spec.in_channels {
        return Err(Error::Dimension { op: "conv2d", axis: "input channel (1)".into(), expected: spec.in_channels, got: c });
    }
    let expected = spec.weight_shape();
    if weight_shape.len() != 4 {
        return Err(Error::Dimension { op: "conv2d", axis: "weight rank".into(), expected: 4, got: weight_shape.len() });
    }
    for (axis, (&e, &g)) in expected.iter().zip(weight_shape).enumerate() {
        if e != g {
            return Err(Error::Dimension { op: "conv2d", axis: format!("weight axis {axis}"), expected: e, got: g });
        }
    }
    let (oh, ow) = spec.output_hw(h, w).ok_or(Error::Dimension {
        op: "conv2d",
        axis: "spatial (2/3)".into(),
        expected: spec.kernel_h.max(spec.kernel_w),
        got: (h + 2 * spec.padding).min(w + 2 * spec.padding),
    })?;
    Ok(Geometry { n, h, w, oh, ow })
}

/// Output positions `o` in `0..out` for which `o*stride + k - pad` lands in `0..len`.
#[inline]
pub(crate) fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 { 0 } else { ((len + pad - k - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// Unfolds the `cin_g` channels starting at `ic0` of one sample into
/// `col[(icg * kh_n + kh) * kw_n + kw][oh * ow + ow_]`, zero where the window hits padding.
fn im2col<S: Real>(x: &[S], ic0: usize, cin_g: usize, g: &Geometry, spec: &ConvSpec, col: &mut [S]) {
    let (kh_n, kw_n, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    col.fill(S::ZERO);
    for icg in 0..cin_g {
        let src = &x[(ic0 + icg) * in_plane..][..in_plane];
        for kh in 0..kh_n {
            let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, s, p);
            for kw in 0..kw_n {
                let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, s, p);
                let dst = &mut col[((icg * kh_n + kh) * kw_n + kw) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let row = &src[(oh * s + kh - p) * g.w..][..g.w];
                    let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    for ow in ow_lo..ow_hi {
                        drow[ow] = row[ow * s + kw - p];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into the input-gradient channels.
fn col2im<S: Real>(col: &[S], ic0: usize, cin_g: usize, g: &Geometry, spec: &ConvSpec, gx: &mut [S]) {
    let (kh_n, kw_n, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for icg in 0..cin_g {
        let dst = &mut gx[(ic0 + icg) * in_plane..][..in_plane];
        for kh in 0..kh_n {
            let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, s, p);
            for kw in 0..kw_n {
                let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, s, p);
                let src = &col[((icg * kh_n + kh) * kw_n + kw) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let row = &mut dst[(oh * s + kh - p) * g.w..][..g.w];
                    let srow = &src[oh * g.ow..(oh + 1) * g.ow];
                    for ow in ow_lo..ow_hi {
                        row[ow * s + kw - p] += srow[ow];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<S: Real>(x: &[S], wt: &[S], bias: Option<&[S]>, g: &Geometry, spec: &ConvSpec, out: &mut [S]) {
    let (kh_n, kw_n, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let (in_plane, out_plane, c_n) = (g.h * g.w, g.oh * g.ow, spec.out_channels);
    for nc in 0..g.n * c_n {
        let c = nc % c_n;
        let src = &x[nc * in_plane..][..in_plane];
        let dst = &mut out[nc * out_plane..][..out_plane];
        if let Some(b) = bias {
            dst.fill(b[c]);
        }
        for kh in 0..kh_n {
            let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, s, p);
            for kw in 0..kw_n {
                let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, s, p);
                let wv = wt[(c * kh_n + kh) * kw_n + kw];
                for oh in oh_lo..oh_hi {
                    let row = &src[(oh * s + kh - p) * g.w..][..g.w];
                    let drow = &mut dst[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                    if s == 1 {
                        for (d, &v) in drow.iter_mut().zip(&row[ow_lo + kw - p..]) {
                            *d += wv * v;
                        }
                    } else {
                        for (d, &v) in drow.iter_mut().zip(row[ow_lo * s + kw - p..].iter().step_by(s)) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<S: Real>(
    go: &[S],
    x: &[S],
    wt: &[S],
    g: &Geometry,
    spec: &ConvSpec,
    gin: &mut [S],
    gw: &mut [S],
    gb: &mut [S],
) {
    let (kh_n, kw_n, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let (in_plane, out_plane, c_n) = (g.h * g.w, g.oh * g.ow, spec.out_channels);
    for nc in 0..g.n * c_n {
        let c = nc % c_n;
        let src = &x[nc * in_plane..][..in_plane];
        let gsrc = &go[nc * out_plane..][..out_plane];
        let gdst = &mut gin[nc * in_plane..][..in_plane];
        gb[c] += gsrc.iter().copied().sum::<S>();
        for kh in 0..kh_n {
            let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, s, p);
            for kw in 0..kw_n {
                let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, s, p);
                let wi = (c * kh_n + kh) * kw_n + kw;
                let wv = wt[wi];
                let mut acc = S::ZERO;
                for oh in oh_lo..oh_hi {
                    let base = (oh * s + kh - p) * g.w + ow_lo * s + kw - p;
                    let grow = &gsrc[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                    if s == 1 {
                        let len = grow.len();
                        for ((&gv, &xv), d) in grow.iter().zip(&src[base..base + len]).zip(&mut gdst[base..base + len]) {
                            acc += gv * xv;
                            *d += wv * gv;
                        }
                    } else {
                        for (j, &gv) in grow.iter().enumerate() {
                            let xi = base + j * s;
                            acc += gv * src[xi];
                            gdst[xi] += wv * gv;
                        }
                    }
                }
                gw[wi] += acc;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: S = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().copied().sum::<S>() + tail
}

/// A 1x1, stride-1, unpadded kernel reads its input planes directly.
fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0
}

/// 2-D convolution (cross-correlation), NCHW.
pub fn conv2d<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let g = check(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::Dimension { op: "conv2d", axis: "bias".into(), expected: spec.out_channels, got: b.len() });
        }
    }
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k_len = cin_g * spec.kernel_h * spec.kernel_w;
    let in_sample = spec.in_channels * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let plain = is_plain_pointwise(spec);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![S::ZERO; g.n * spec.out_channels * out_plane];
    if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x, wt, bias.map(|b| b.data()), &g, spec, &mut out);
        return Tensor::from_vec(&[g.n, spec.out_channels, g.oh, g.ow], out);
    }
    let mut col = vec![S::ZERO; if plain { 0 } else { k_len * out_plane }];

    for n in 0..g.n {
        let xs = &x[n * in_sample..][..in_sample];
        for group in 0..spec.groups {
            let cols: &[S] = if plain {
                &xs[group * cin_g * out_plane..][..k_len * out_plane]
            } else {
                im2col(xs, group * cin_g, cin_g, &g, spec, &mut col);
                &col
            };
            for ocg in 0..cout_g {
                let oc = group * cout_g + ocg;
                let dst = &mut out[(n * spec.out_channels + oc) * out_plane..][..out_plane];
                if let Some(b) = bias {
                    dst.fill(b.data()[oc]);
                }
                for (k, &wv) in wt[oc * k_len..(oc + 1) * k_len].iter().enumerate() {
                    for (d, &c) in dst.iter_mut().zip(&cols[k * out_plane..(k + 1) * out_plane]) {
                        *d += wv * c;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, spec.out_channels, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] given the upstream gradient and saved forward input.
pub fn conv2d_backward<S: Real>(
    grad_out: &Tensor<S>,
    saved_input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    let g = check(saved_input.shape(), weight.shape(), spec)?;
    let expected = [g.n, spec.out_channels, g.oh, g.ow];
    if grad_out.shape() != expected {
        let axis = grad_out.shape().iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::Dimension {
            op: "conv2d_backward",
            axis: format!("grad_out axis {axis}"),
            expected: expected.get(axis).copied().unwrap_or(0),
            got: grad_out.shape().get(axis).copied().unwrap_or(0),
        });
    }
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k_len = cin_g * spec.kernel_h * spec.kernel_w;
    let in_sample = spec.in_channels * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let plain = is_plain_pointwise(spec);
    let x = saved_input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gin = vec![S::ZERO; x.len()];
    let mut gw = vec![S::ZERO; wt.len()];
    let mut gb = vec![S::ZERO; spec.out_channels];
    let mut col = vec![S::ZERO; k_len * out_plane];
    let mut gcol = vec![S::ZERO; k_len * out_plane];
    if cin_g == 1 && cout_g == 1 {
        depthwise_backward(go, x, wt, &g, spec, &mut gin, &mut gw, &mut gb);
        return Ok(ConvGrads {
            input: Tensor::from_vec(saved_input.shape(), gin)?,
            weight: Tensor::from_vec(weight.shape(), gw)?,
            bias: Tensor::from_vec(&[spec.out_channels], gb)?,
        });
    }

    for n in 0..g.n {
        let xs = &x[n * in_sample..][..in_sample];
        for group in 0..spec.groups {
            let cols: &[S] = if plain {
                &xs[group * cin_g * out_plane..][..k_len * out_plane]
            } else {
                im2col(xs, group * cin_g, cin_g, &g, spec, &mut col);
                &col
            };
            gcol.fill(S::ZERO);
            for ocg in 0..cout_g {
                let oc = group * cout_g + ocg;
                let gsrc = &go[(n * spec.out_channels + oc) * out_plane..][..out_plane];
                gb[oc] += gsrc.iter().copied().sum::<S>();
                for k in 0..k_len {
                    let c = &cols[k * out_plane..(k + 1) * out_plane];
                    gw[oc * k_len + k] += dot(gsrc, c);
                    let wv = wt[oc * k_len + k];
                    for (d, &gv) in gcol[k * out_plane..(k + 1) * out_plane].iter_mut().zip(gsrc) {
                        *d += wv * gv;
                    }
                }
            }
            let gxs = &mut gin[n * in_sample..][..in_sample];
            if plain {
                for (d, &v) in gxs[group * cin_g * out_plane..][..k_len * out_plane].iter_mut().zip(&gcol) {
                    *d += v;
                }
            } else {
                col2im(&gcol, group * cin_g, cin_g, &g, spec, gxs);
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(saved_input.shape(), gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[spec.out_channels], gb)?,
    })
}
