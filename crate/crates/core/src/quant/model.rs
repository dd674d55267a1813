use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::calibrate::Calibration;
use super::fold::fold_norm;
use super::params::{quantize_tensor, QuantParams, QMAX, QMIN, SCALE_FLOOR};
use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::net::{ConvUnit, Network, StudentConfig};
use crate::ops::{valid_range, ConvSpec, NORM_EPS};
use crate::tensor::{Real, Tensor};

pub const QUANT_CHECKPOINT_KIND: &str = "quantized-network";
pub const QUANT_FORMAT_VERSION: u32 = 1;

/// Positive real multiplier stored as `mantissa * 2^-shift` with a 31-bit mantissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub mantissa: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m >= 0.0) || !m.is_finite() {
            return Err(Error::Parameter(format!("requantization multiplier must be finite and non-negative, got {m}")));
        }
        if m == 0.0 {
            return Ok(Self { mantissa: 0, shift: 0 });
        }
        let mut e = m.log2().floor() as i32 + 1;
        let mut mant = (m * 2f64.powi(31 - e)).round() as i64;
        if mant >= 1 << 31 {
            mant >>= 1;
            e += 1;
        }
        if mant < 1 << 29 {
            // log2 landed just below a power of two
            mant <<= 1;
            e -= 1;
        }
        Ok(Self { mantissa: mant as i32, shift: 31 - e })
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 * 2f64.powi(-self.shift)
    }

    /// `round(x * multiplier)` with ties away from zero, in integer arithmetic.
    pub fn apply(self, x: i64) -> i64 {
        let prod = x as i128 * self.mantissa as i128;
        if self.shift <= 0 {
            return (prod << (-self.shift)) as i64;
        }
        let half = 1i128 << (self.shift - 1);
        let mag = (prod.abs() + half) >> self.shift;
        (if prod < 0 { -mag } else { mag }) as i64
    }
}

fn saturate(v: i64) -> i8 {
    v.clamp(QMIN as i64, QMAX as i64) as i8
}

fn empty_i8() -> Tensor<i8> {
    Tensor::zeros(&[0])
}

fn weight_scales<S: Real>(name: &str, w: &Tensor<S>, rows: usize) -> (Vec<QuantParams>, Vec<String>) {
    let per = w.len() / rows.max(1);
    let mut warnings = Vec::new();
    let qps = (0..rows)
        .map(|o| {
            let max_abs = w.data()[o * per..(o + 1) * per].iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
            if max_abs / 127.0 < SCALE_FLOOR {
                let msg = format!("{name}: output channel {o} has all-zero weights; scale floored");
                warn!("{msg}");
                warnings.push(msg);
            }
            QuantParams::symmetric(max_abs)
        })
        .collect();
    (qps, warnings)
}

fn quantize_rows<S: Real>(w: &Tensor<S>, qps: &[QuantParams]) -> Tensor<i8> {
    let per = w.len() / qps.len().max(1);
    let data = w.data().iter().enumerate().map(|(i, v)| qps[i / per].quantize_value(v.to_f64())).collect();
    Tensor::from_vec(w.shape(), data).expect("same shape")
}

/// Integer convolution with folded bias, per-channel requantization and optional fused ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QConv {
    pub name: String,
    pub spec: ConvSpec,
    #[serde(skip, default = "empty_i8")]
    pub weight: Tensor<i8>,
    pub weight_scales: Vec<f64>,
    pub bias: Vec<i32>,
    pub multipliers: Vec<FixedMultiplier>,
    pub input: QuantParams,
    pub output: QuantParams,
    pub relu: bool,
}

impl QConv {
    /// Quantizes a float conv (`weight`, `bias`) running between the given activation parameters.
    pub fn from_float<S: Real>(
        name: &str,
        spec: ConvSpec,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        input: QuantParams,
        output: QuantParams,
        relu: bool,
    ) -> Result<(Self, Vec<String>)> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() || bias.len() != spec.out_channels {
            return Err(Error::Fold(format!("{name}: weight/bias do not match the conv spec")));
        }
        let (qps, warnings) = weight_scales(name, weight, spec.out_channels);
        let q = quantize_rows(weight, &qps);
        let mut biases = Vec::with_capacity(qps.len());
        let mut multipliers = Vec::with_capacity(qps.len());
        for (o, qp) in qps.iter().enumerate() {
            let acc_scale = input.scale * qp.scale;
            let b = (bias.data()[o].to_f64() / acc_scale).round();
            biases.push(b.clamp(i32::MIN as f64, i32::MAX as f64) as i32);
            multipliers.push(FixedMultiplier::from_real(acc_scale / output.scale)?);
        }
        Ok((
            Self {
                name: name.to_string(),
                spec,
                weight: q,
                weight_scales: qps.iter().map(|p| p.scale).collect(),
                bias: biases,
                multipliers,
                input,
                output,
                relu,
            },
            warnings,
        ))
    }

    /// Raw int32 accumulators `bias + sum w * (x - zp_in)` and their shape `(N, Cout, Ho, Wo)`.
    pub fn accumulate(&self, x: &Tensor<i8>) -> Result<(Vec<i32>, [usize; 4])> {
        let s = &self.spec;
        let (n, c, h, w) = x.dims4("int_conv")?;
        if c != s.in_channels {
            return Err(Error::Dimension { op: "int_conv", axis: format!("{}: input channel (1)", self.name), expected: s.in_channels, got: c });
        }
        let (oh, ow) = s.output_hw(h, w).ok_or(Error::Dimension {
            op: "int_conv",
            axis: format!("{}: spatial (2/3)", self.name),
            expected: s.kernel_h,
            got: h + 2 * s.padding,
        })?;
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let (khn, kwn, st, p) = (s.kernel_h, s.kernel_w, s.stride, s.padding);
        let zp = self.input.zero_point;
        let centered: Vec<i32> = x.data().iter().map(|&q| q as i32 - zp).collect();
        let wt = self.weight.data();
        let (in_plane, out_plane) = (h * w, oh * ow);
        let mut out = vec![0i32; n * s.out_channels * out_plane];
        for b in 0..n {
            for oc in 0..s.out_channels {
                let group = oc / cout_g;
                let dst = &mut out[(b * s.out_channels + oc) * out_plane..][..out_plane];
                dst.fill(self.bias[oc]);
                for icg in 0..cin_g {
                    let ic = group * cin_g + icg;
                    let src = &centered[(b * s.in_channels + ic) * in_plane..][..in_plane];
                    let w_base = (oc * cin_g + icg) * khn * kwn;
                    for kh in 0..khn {
                        let (oh_lo, oh_hi) = valid_range(oh, h, kh, st, p);
                        for kw in 0..kwn {
                            let wv = wt[w_base + kh * kwn + kw] as i32;
                            let (ow_lo, ow_hi) = valid_range(ow, w, kw, st, p);
                            for y in oh_lo..oh_hi {
                                let row = &src[(y * st + kh - p) * w..];
                                let drow = &mut dst[y * ow..(y + 1) * ow];
                                for xo in ow_lo..ow_hi {
                                    drow[xo] += wv * row[xo * st + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((out, [n, s.out_channels, oh, ow]))
    }

    pub fn forward(&self, x: &Tensor<i8>) -> Result<Tensor<i8>> {
        let (acc, shape) = self.accumulate(x)?;
        let plane = shape[2] * shape[3];
        let zp = self.output.zero_point as i64;
        let floor = if self.relu { zp } else { QMIN as i64 };
        let cout = self.spec.out_channels;
        let data = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let m = self.multipliers[(i / plane) % cout];
                saturate((zp + m.apply(a as i64)).max(floor))
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

/// Residual addition of two int8 tensors with independent parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAdd {
    pub lhs: QuantParams,
    pub rhs: QuantParams,
    pub output: QuantParams,
    pub lhs_multiplier: FixedMultiplier,
    pub rhs_multiplier: FixedMultiplier,
}

impl QAdd {
    pub fn new(lhs: QuantParams, rhs: QuantParams, output: QuantParams) -> Result<Self> {
        Ok(Self {
            lhs,
            rhs,
            output,
            lhs_multiplier: FixedMultiplier::from_real(lhs.scale / output.scale)?,
            rhs_multiplier: FixedMultiplier::from_real(rhs.scale / output.scale)?,
        })
    }

    pub fn forward(&self, a: &Tensor<i8>, b: &Tensor<i8>) -> Result<Tensor<i8>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension { op: "int_add", axis: "shape".into(), expected: a.len(), got: b.len() });
        }
        let zp = self.output.zero_point as i64;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let l = self.lhs_multiplier.apply((x as i32 - self.lhs.zero_point) as i64);
                let r = self.rhs_multiplier.apply((y as i32 - self.rhs.zero_point) as i64);
                saturate(zp + l + r)
            })
            .collect();
        Tensor::from_vec(a.shape(), data)
    }
}

/// GRN on int8 input. Squared norms accumulate in integers; the normalization itself runs in f64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QGrn {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub input: QuantParams,
    pub output: QuantParams,
}

impl QGrn {
    pub fn forward(&self, x: &Tensor<i8>) -> Result<Tensor<i8>> {
        let (n, c, h, w) = x.dims4("int_grn")?;
        if c != self.gamma.len() {
            return Err(Error::Dimension { op: "int_grn", axis: "channel (1)".into(), expected: self.gamma.len(), got: c });
        }
        let plane = h * w;
        let (s, zp) = (self.input.scale, self.input.zero_point);
        let mut out = Vec::with_capacity(x.len());
        for b in 0..n {
            let sample = &x.data()[b * c * plane..(b + 1) * c * plane];
            let norms: Vec<f64> = sample
                .chunks(plane)
                .map(|ch| {
                    let ss: i64 = ch.iter().map(|&q| ((q as i32 - zp) as i64).pow(2)).sum();
                    s * (ss as f64).sqrt()
                })
                .collect();
            let mean = norms.iter().sum::<f64>() / c as f64;
            for (ci, ch) in sample.chunks(plane).enumerate() {
                let nrm = norms[ci] / (mean + NORM_EPS);
                for &q in ch {
                    let v = (q as i32 - zp) as f64 * s;
                    out.push(self.output.quantize_value(self.gamma[ci] * (v * nrm) + self.beta[ci] + v));
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}

/// Global average pooling plus linear head; int8 weights, dequantized logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QHead {
    #[serde(skip, default = "empty_i8")]
    pub weight: Tensor<i8>,
    pub weight_scales: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: QuantParams,
}

impl QHead {
    pub fn forward(&self, x: &Tensor<i8>) -> Result<Tensor<f64>> {
        let (n, c, h, w) = x.dims4("int_head")?;
        let outs = self.bias.len();
        if self.weight.shape() != [outs, c] {
            return Err(Error::Dimension { op: "int_head", axis: "feature (1)".into(), expected: self.weight.shape()[1], got: c });
        }
        let plane = h * w;
        let zp = self.input.zero_point;
        let mut logits = Vec::with_capacity(n * outs);
        for b in 0..n {
            let sums: Vec<i64> = x.data()[b * c * plane..(b + 1) * c * plane]
                .chunks(plane)
                .map(|ch| ch.iter().map(|&q| (q as i32 - zp) as i64).sum())
                .collect();
            for o in 0..outs {
                let row = &self.weight.data()[o * c..(o + 1) * c];
                let acc: i64 = row.iter().zip(&sums).map(|(&wq, &sv)| wq as i64 * sv).sum();
                logits.push(acc as f64 * self.input.scale * self.weight_scales[o] / plane as f64 + self.bias[o]);
            }
        }
        Tensor::from_vec(&[n, outs], logits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QBlock {
    pub expand: QConv,
    pub depthwise: QConv,
    pub project: QConv,
    pub add: Option<QAdd>,
    pub grn: QGrn,
}

/// One int8 activation captured by [`QuantModel::forward_trace`].
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub name: String,
    pub value: Tensor<i8>,
    pub params: QuantParams,
}

/// Integer-only deployment form of a trained network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantModel {
    pub config: StudentConfig,
    pub input: QuantParams,
    pub stem: QConv,
    pub blocks: Vec<QBlock>,
    pub head: QHead,
    /// Degenerate-range notices collected while quantizing.
    pub warnings: Vec<String>,
}

fn folded_unit<S: Real>(
    u: &ConvUnit<S>,
    input: QuantParams,
    output: QuantParams,
    warnings: &mut Vec<String>,
) -> Result<QConv> {
    let n = &u.norm;
    let (w, b) = fold_norm(&u.weight.value, None, &n.running_mean, &n.running_var, &n.gamma.value, &n.beta.value, NORM_EPS)?;
    let (q, warn) = QConv::from_float(&u.name, u.spec, &w, &b, input, output, u.relu)?;
    warnings.extend(warn);
    Ok(q)
}

impl QuantModel {
    /// Folds every norm and quantizes weights against calibrated activation ranges.
    pub fn from_network<S: Real>(net: &Network<S>, calibration: &Calibration) -> Result<Self> {
        let expected = crate::net::activation_points(net.config());
        if calibration.names != expected {
            return Err(Error::State("calibration does not match this network's activation points".into()));
        }
        let mut points = calibration.params.iter().copied();
        let mut next = || points.next().expect("length checked");
        let mut warnings: Vec<String> = calibration.degenerate.iter().map(|n| format!("{n}: empty activation range")).collect();

        let input = next();
        let stem_out = next();
        let stem = folded_unit(&net.stem, input, stem_out, &mut warnings)?;
        let mut prev = stem_out;
        let mut blocks = Vec::with_capacity(net.blocks.len());
        for b in &net.blocks {
            let e_out = next();
            let expand = folded_unit(&b.expand, prev, e_out, &mut warnings)?;
            let d_out = next();
            let depthwise = folded_unit(&b.depthwise, e_out, d_out, &mut warnings)?;
            let p_out = next();
            let project = folded_unit(&b.project, d_out, p_out, &mut warnings)?;
            let (add, grn_in) = if b.config.has_residual() {
                let a_out = next();
                (Some(QAdd::new(p_out, prev, a_out)?), a_out)
            } else {
                (None, p_out)
            };
            let g_out = next();
            let grn = QGrn {
                gamma: b.grn.gamma.value.to_f64_vec(),
                beta: b.grn.beta.value.to_f64_vec(),
                input: grn_in,
                output: g_out,
            };
            blocks.push(QBlock { expand, depthwise, project, add, grn });
            prev = g_out;
        }
        let hw = &net.head.weight.value;
        let (qps, warn) = weight_scales("head", hw, net.num_outputs());
        warnings.extend(warn);
        let head = QHead {
            weight: quantize_rows(hw, &qps),
            weight_scales: qps.iter().map(|p| p.scale).collect(),
            bias: net.head.bias.value.to_f64_vec(),
            input: prev,
        };
        Ok(Self { config: net.config().clone(), input, stem, blocks, head, warnings })
    }

    pub fn convs(&self) -> impl Iterator<Item = &QConv> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [&b.expand, &b.depthwise, &b.project]))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut QConv> {
        std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| [&mut b.expand, &mut b.depthwise, &mut b.project]))
    }

    /// Integer inference returning dequantized logits `(N, C)`.
    pub fn forward<S: Real>(&self, input: &Tensor<S>) -> Result<Tensor<f64>> {
        self.run(input, None)
    }

    /// Like [`QuantModel::forward`] but also returns every int8 activation in forward order.
    pub fn forward_trace<S: Real>(&self, input: &Tensor<S>) -> Result<(Tensor<f64>, Vec<TracePoint>)> {
        let mut trace = Vec::new();
        let logits = self.run(input, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn run<S: Real>(&self, input: &Tensor<S>, mut trace: Option<&mut Vec<TracePoint>>) -> Result<Tensor<f64>> {
        let mut record = |name: &str, t: &Tensor<i8>, params: QuantParams| {
            if let Some(tr) = trace.as_mut() {
                tr.push(TracePoint { name: name.to_string(), value: t.clone(), params });
            }
        };
        let x = quantize_tensor(input, &self.input);
        record("input", &x, self.input);
        let mut x = self.stem.forward(&x)?;
        record("stem", &x, self.stem.output);
        for b in &self.blocks {
            let h = b.expand.forward(&x)?;
            record(&b.expand.name, &h, b.expand.output);
            let h = b.depthwise.forward(&h)?;
            record(&b.depthwise.name, &h, b.depthwise.output);
            let mut h = b.project.forward(&h)?;
            record(&b.project.name, &h, b.project.output);
            let block = b.project.name.trim_end_matches(".project");
            if let Some(add) = &b.add {
                h = add.forward(&h, &x)?;
                record(&format!("{block}.add"), &h, add.output);
            }
            x = b.grn.forward(&h)?;
            record(&format!("{block}.grn"), &x, b.grn.output);
        }
        self.head.forward(&x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ArchiveWriter::new();
        for c in self.convs() {
            w.add(format!("{}.weight", c.name), &c.weight)?;
        }
        w.add("head.weight", &self.head.weight)?;
        let model = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        w.write(path, json!({"kind": QUANT_CHECKPOINT_KIND, "format_version": QUANT_FORMAT_VERSION, "model": model}))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ar = Archive::read(path)?;
        if ar.meta["kind"] != QUANT_CHECKPOINT_KIND {
            return Err(Error::Format("archive is not a quantized checkpoint".into()));
        }
        if ar.meta["format_version"] != QUANT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported quantized format version {}", ar.meta["format_version"])));
        }
        let mut model: QuantModel =
            serde_json::from_value(ar.meta["model"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        for c in model.convs_mut() {
            let t = ar.get(&format!("{}.weight", c.name))?.clone().into_i8()?;
            if t.shape() != c.spec.weight_shape() {
                return Err(Error::Format(format!("{}: weight shape {:?}", c.name, t.shape())));
            }
            c.weight = t;
        }
        model.head.weight = ar.get("head.weight")?.clone().into_i8()?;
        if model.head.weight.shape() != [model.head.bias.len(), model.config.final_width()] {
            return Err(Error::Format("head weight shape mismatch".into()));
        }
        Ok(model)
    }
}

/// Integer inference entry point; see [`QuantModel::forward`].
pub fn int_forward<S: Real>(model: &QuantModel, input: &Tensor<S>) -> Result<Tensor<f64>> {
    model.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_round_trip() {
        for m in [1e-6, 0.0123, 0.5, 0.75, 1.0, 3.7, 1000.0] {
            let f = FixedMultiplier::from_real(m).unwrap();
            assert!((f.to_f64() - m).abs() <= m * 1e-9, "{m}");
            assert!(f.mantissa >= 1 << 29);
        }
    }

    #[test]
    fn multiplier_rounds_half_away() {
        let f = FixedMultiplier::from_real(0.5).unwrap();
        assert_eq!(f.apply(3), 2);
        assert_eq!(f.apply(-3), -2);
        assert_eq!(f.apply(4), 2);
        assert_eq!(FixedMultiplier::from_real(0.0).unwrap().apply(12345), 0);
    }

    #[test]
    fn identity_conv_reproduces_quantized_input() {
        let spec = ConvSpec::new(1, 1, 3, 1, 1);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &w).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let (qp, _) = QuantParams::from_range(-2.0, 3.0);
        let (conv, warn) = QConv::from_float("id", spec, &w, &b, qp, qp, false).unwrap();
        assert!(warn.is_empty());
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[-2.0, -0.5, 0.0, 0.3, 1.7, 3.0]).unwrap();
        let q = quantize_tensor(&x, &qp);
        assert_eq!(conv.forward(&q).unwrap(), q);
    }

    #[test]
    fn fused_relu_clamps_at_zero_point() {
        let spec = ConvSpec::pointwise(1, 1);
        let w = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[-1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let (qin, _) = QuantParams::from_range(0.0, 1.0);
        let (qout, _) = QuantParams::from_range(-1.0, 1.0);
        let (conv, _) = QConv::from_float("neg", spec, &w, &b, qin, qout, true).unwrap();
        let x = quantize_tensor(&Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[0.5, 1.0]).unwrap(), &qin);
        assert!(conv.forward(&x).unwrap().data().iter().all(|&v| v as i32 == qout.zero_point));
    }

    #[test]
    fn zero_weight_channel_warns() {
        let spec = ConvSpec::pointwise(1, 2);
        let w = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[2]);
        let (qp, _) = QuantParams::from_range(-1.0, 1.0);
        let (conv, warn) = QConv::from_float("z", spec, &w, &b, qp, qp, false).unwrap();
        assert_eq!(warn.len(), 1);
        assert_eq!(conv.weight_scales[0], SCALE_FLOOR);
    }
}
