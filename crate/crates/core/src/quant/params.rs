use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Smallest scale handed out for degenerate (constant-zero) ranges.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Affine int8 mapping `x ~ (q - zero_point) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Parameter(format!("quantization scale must be positive, got {scale}")));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::Parameter(format!("zero point {zero_point} outside int8 range")));
        }
        Ok(Self { scale, zero_point })
    }

    /// Asymmetric parameters covering `[min, max]` (extended to include 0).
    ///
    /// Returns `(params, degenerate)`; `degenerate` is set when the range was
    /// empty and the scale fell back to [`SCALE_FLOOR`].
    pub fn from_range(min: f64, max: f64) -> (Self, bool) {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let raw = (hi - lo) / 255.0;
        let degenerate = !(raw >= SCALE_FLOOR);
        let scale = if degenerate { SCALE_FLOOR } else { raw };
        let zero_point = ((-lo / scale).round() as i64 - 128).clamp(QMIN as i64, QMAX as i64) as i32;
        (Self { scale, zero_point }, degenerate)
    }

    /// Symmetric parameters for a weight channel: `scale = max|w| / 127`, zero point 0.
    pub fn symmetric(max_abs: f64) -> Self {
        let scale = if max_abs / 127.0 >= SCALE_FLOOR { max_abs / 127.0 } else { SCALE_FLOOR };
        Self { scale, zero_point: 0 }
    }

    /// Round-half-away-from-zero then saturate.
    pub fn quantize_value(&self, x: f64) -> i8 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(QMIN as f64, QMAX as f64) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }

    /// Real interval that maps inside the int8 range without saturating.
    pub fn representable_range(&self) -> (f64, f64) {
        ((QMIN - self.zero_point) as f64 * self.scale, (QMAX - self.zero_point) as f64 * self.scale)
    }
}

pub fn quantize_tensor<S: Real>(x: &Tensor<S>, qp: &QuantParams) -> Tensor<i8> {
    x.map(|v| qp.quantize_value(v.to_f64()))
}

pub fn dequantize<S: Real>(q: &Tensor<i8>, qp: &QuantParams) -> Tensor<S> {
    q.map(|v| S::from_f64(qp.dequantize_value(v)))
}

/// Quantize-dequantize round trip plus the straight-through gradient mask
/// (`true` inside the representable range, `false` where the value saturates).
pub fn fake_quant<S: Real>(x: &Tensor<S>, qp: &QuantParams) -> (Tensor<S>, Vec<bool>) {
    let (lo, hi) = qp.representable_range();
    let y = x.map(|v| S::from_f64(qp.dequantize_value(qp.quantize_value(v.to_f64()))));
    let mask = x.data().iter().map(|v| (lo..=hi).contains(&v.to_f64())).collect();
    (y, mask)
}

/// Straight-through backward: passes `grad_out` where `mask` is set.
pub fn fake_quant_backward<S: Real>(grad_out: &Tensor<S>, mask: &[bool]) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = S::ZERO;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_unit_range() {
        // (1 - (-1)) / 255 = 2/255; round(1 / (2/255)) - 128 = round(127.5) - 128 = 0
        let (qp, degenerate) = QuantParams::from_range(-1.0, 1.0);
        assert!(!degenerate);
        assert!((qp.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn nonnegative_range() {
        let (qp, _) = QuantParams::from_range(0.0, 2.55);
        assert!((qp.scale - 0.01).abs() < 1e-12);
        assert_eq!(qp.zero_point, -128);
    }

    #[test]
    fn zero_range_is_floored() {
        let (qp, degenerate) = QuantParams::from_range(0.0, 0.0);
        assert!(degenerate);
        assert_eq!(qp.scale, SCALE_FLOOR);
        assert_eq!(qp.quantize_value(0.0) as i32, qp.zero_point);
    }

    #[test]
    fn zero_is_exact_and_max_saturates() {
        let (qp, _) = QuantParams::from_range(-0.7, 1.9);
        let q = qp.quantize_value(0.0);
        assert_eq!(q as i32, qp.zero_point);
        assert_eq!(qp.dequantize_value(q), 0.0);
        let (_, hi) = qp.representable_range();
        assert_eq!(qp.quantize_value(hi), 127);
        assert_eq!(qp.quantize_value(hi * 10.0), 127);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let qp = QuantParams::new(1.0, 0).unwrap();
        assert_eq!(qp.quantize_value(2.5), 3);
        assert_eq!(qp.quantize_value(-2.5), -3);
    }

    #[test]
    fn straight_through_mask() {
        let qp = QuantParams::new(0.1, 0).unwrap();
        let x = Tensor::<f64>::from_f64(&[3], &[0.33, 50.0, -50.0]).unwrap();
        let (y, mask) = fake_quant(&x, &qp);
        assert!((y.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(mask, vec![true, false, false]);
        let g = fake_quant_backward(&Tensor::full(&[3], 2.0), &mask);
        assert_eq!(g.data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(1.0, 200).is_err());
    }
}
