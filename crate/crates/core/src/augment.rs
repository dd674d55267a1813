//! Impulse-response augmentation whose wet/dry mix follows the input's RMS energy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tnsr;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() || taps.iter().all(|&t| t == 0.0) {
            return Err(Error::Input("impulse response needs at least one nonzero tap".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) || sample_rate == 0 {
            return Err(Error::Input("impulse response has non-finite taps or a zero sample rate".into()));
        }
        Ok(Self { taps, sample_rate })
    }
}

/// Clamped affine map from input RMS to wet-mix fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPolicy {
    pub r_lo: f64,
    pub r_hi: f64,
    pub m_min: f64,
    pub m_max: f64,
}

impl EnergyPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_min && self.m_min <= self.m_max && self.m_max <= 1.0) {
            return Err(Error::Parameter(format!("need 0 <= m_min <= m_max <= 1, got {} / {}", self.m_min, self.m_max)));
        }
        if !(0.0 <= self.r_lo && self.r_lo < self.r_hi) {
            return Err(Error::Parameter(format!("need 0 <= r_lo < r_hi, got {} / {}", self.r_lo, self.r_hi)));
        }
        Ok(())
    }

    /// Wet fraction for a signal with the given RMS.
    pub fn wet_mix(&self, rms: f64) -> f64 {
        let u = ((rms - self.r_lo) / (self.r_hi - self.r_lo)).clamp(0.0, 1.0);
        self.m_min + (self.m_max - self.m_min) * u
    }
}

pub fn rms(w: &Waveform) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Input("rms of an empty waveform".into()));
    }
    Ok((w.samples.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt())
}

/// Full linear convolution truncated to the input length.
pub fn convolve_ir(w: &Waveform, ir: &ImpulseResponse) -> Result<Waveform> {
    if w.sample_rate != ir.sample_rate {
        return Err(Error::Input(format!("waveform is {} Hz but impulse response is {} Hz", w.sample_rate, ir.sample_rate)));
    }
    let x = &w.samples;
    let mut out = vec![0.0; x.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let kmax = ir.taps.len().min(n + 1);
        *o = (0..kmax).map(|k| ir.taps[k] * x[n - k]).sum();
    }
    Ok(Waveform { samples: out, sample_rate: w.sample_rate })
}

/// `(1 - m) w + m wet`, where `wet` is the IR-convolved signal rescaled to the RMS of `w`
/// and `m` comes from `policy` evaluated at the RMS of `w`.
pub fn adaptive_augment(w: &Waveform, ir: &ImpulseResponse, policy: &EnergyPolicy) -> Result<Waveform> {
    policy.validate()?;
    let dry_rms = rms(w)?;
    let m = policy.wet_mix(dry_rms);
    if m == 0.0 {
        return Ok(w.clone());
    }
    let wet = convolve_ir(w, ir)?;
    let wet_rms = rms(&wet)?;
    let gain = if wet_rms > 0.0 { dry_rms / wet_rms } else { 0.0 };
    let samples = w.samples.iter().zip(&wet.samples).map(|(&d, &v)| (1.0 - m) * d + m * gain * v).collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Per-sample seed derived from the global seed and the sample's index.
pub fn sample_seed(global_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = global_seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augments sample `index` with an IR drawn from `irs` by its per-sample seed.
pub fn augment_from_pool(
    w: &Waveform,
    irs: &[ImpulseResponse],
    policy: &EnergyPolicy,
    global_seed: u64,
    index: u64,
) -> Result<Waveform> {
    if irs.is_empty() {
        return Err(Error::Input("no impulse responses to draw from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, index));
    adaptive_augment(w, &irs[rng.gen_range(0..irs.len())], policy)
}

/// Nearest-rank percentile of already sorted values (`pct` in `[0, 100]`).
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Energy policy whose RMS bounds are the `lo_pct` / `hi_pct` percentiles of `values`.
pub fn calibrate_policy(values: &[f64], lo_pct: f64, hi_pct: f64, m_min: f64, m_max: f64) -> Result<EnergyPolicy> {
    if values.len() < 2 {
        return Err(Error::Input(format!("need at least 2 RMS values to calibrate, got {}", values.len())));
    }
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::Parameter(format!("need 0 <= lo_pct < hi_pct <= 100, got {lo_pct} / {hi_pct}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("RMS values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (r_lo, r_hi) = (nearest_rank(&sorted, lo_pct), nearest_rank(&sorted, hi_pct));
    if r_lo >= r_hi {
        return Err(Error::config(
            "augment.policy",
            format!("percentile bounds collapse to {r_lo}; set r_lo and r_hi manually"),
        ));
    }
    let policy = EnergyPolicy { r_lo, r_hi, m_min, m_max };
    policy.validate()?;
    Ok(policy)
}

/// The shipped impulse responses: identity, a 2-tap lowpass and a 64-tap decaying tail.
pub fn ir_fixtures(sample_rate: u32) -> Vec<(&'static str, ImpulseResponse)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1_2345);
    let mut tail = vec![1.0];
    tail.extend((1..64).map(|k| 0.5 * (-(k as f64) / 8.0).exp() * rng.gen_range(-1.0..1.0)));
    vec![
        ("identity", ImpulseResponse { taps: vec![1.0], sample_rate }),
        ("lowpass2", ImpulseResponse { taps: vec![0.5, 0.5], sample_rate }),
        ("decay64", ImpulseResponse { taps: tail, sample_rate }),
    ]
}

/// Reads a rank-1 float TNSR file as a waveform.
pub fn read_waveform_tnsr(path: impl AsRef<Path>, sample_rate: u32) -> Result<Waveform> {
    let t = tnsr::read_file(path.as_ref())?.into_real::<f64>()?;
    if t.rank() != 1 {
        return Err(Error::Input(format!("{}: waveform tensors must be rank 1, got rank {}", path.as_ref().display(), t.rank())));
    }
    Waveform::new(t.into_data(), sample_rate)
}

pub fn write_waveform_tnsr(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let t: Tensor<f32> = Tensor::from_f64(&[w.len()], &w.samples)?;
    tnsr::write_file(path, &t)
}

/// Reads a mono 16-bit PCM WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Input(format!("{}: only 16-bit PCM is supported", path.display())));
    }
    if spec.channels != 1 {
        return Err(Error::Input(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn rms_of_constant_and_silence() {
        assert!((rms(&wave(vec![0.3; 50])).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(rms(&wave(vec![0.0; 8])).unwrap(), 0.0);
        assert!(rms(&wave(vec![])).is_err());
    }

    #[test]
    fn delayed_impulse_shifts() {
        let w = wave(vec![1.0, 2.0, 3.0, 4.0]);
        let ir = ImpulseResponse::new(vec![0.0, 0.0, 1.0], 16_000).unwrap();
        assert_eq!(convolve_ir(&w, &ir).unwrap().samples, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn rate_mismatch_rejected() {
        let ir = ImpulseResponse::new(vec![1.0], 8_000).unwrap();
        assert!(convolve_ir(&wave(vec![1.0]), &ir).is_err());
    }

    #[test]
    fn quiet_signal_untouched_when_m_min_zero() {
        let w = wave(vec![0.01, -0.02, 0.015]);
        let policy = EnergyPolicy { r_lo: 0.1, r_hi: 0.5, m_min: 0.0, m_max: 0.9 };
        let (_, ir) = &ir_fixtures(16_000)[2];
        assert_eq!(adaptive_augment(&w, ir, &policy).unwrap(), w);
    }

    #[test]
    fn nearest_rank_grid() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = calibrate_policy(&v, 10.0, 90.0, 0.1, 0.9).unwrap();
        assert_eq!((p.r_lo, p.r_hi), (10.0, 90.0));
        let p = calibrate_policy(&[0.9, 0.1], 0.0, 100.0, 0.1, 0.9).unwrap();
        assert_eq!((p.r_lo, p.r_hi), (0.1, 0.9));
        assert!(matches!(calibrate_policy(&[0.5; 10], 10.0, 90.0, 0.1, 0.9), Err(Error::Config { .. })));
    }

    #[test]
    fn policy_invariants() {
        assert!(EnergyPolicy { r_lo: 0.2, r_hi: 0.1, m_min: 0.0, m_max: 1.0 }.validate().is_err());
        assert!(EnergyPolicy { r_lo: 0.0, r_hi: 0.1, m_min: 0.6, m_max: 0.5 }.validate().is_err());
    }

    #[test]
    fn fixtures_are_valid() {
        let f = ir_fixtures(16_000);
        assert_eq!(f.len(), 3);
        assert_eq!(f[2].1.taps.len(), 64);
        for (_, ir) in f {
            ImpulseResponse::new(ir.taps, ir.sample_rate).unwrap();
        }
    }

    #[test]
    fn per_sample_seeds_differ() {
        assert_ne!(sample_seed(1, 0), sample_seed(1, 1));
        assert_ne!(sample_seed(1, 0), sample_seed(2, 0));
    }
}
