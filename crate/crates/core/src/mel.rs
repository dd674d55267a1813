//! Fixed log-mel front end: Hann-windowed magnitude STFT, HTK mel filterbank, log.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::augment::Waveform;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_eps: f64,
    /// Frames kept after cropping or padding.
    pub frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_fft: 512, hop: 256, n_mels: 64, f_min: 50.0, f_max: 8_000.0, log_eps: 1e-5, frames: 44 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::config("mel.n_mels", "must be >= 1"));
        }
        if self.hop == 0 {
            return Err(Error::config("mel.hop", "must be >= 1"));
        }
        if self.n_fft < 2 {
            return Err(Error::config("mel.n_fft", "must be >= 2"));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max) || self.f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::config("mel.f_max", "need 0 <= f_min < f_max <= sample_rate / 2"));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::config("mel.log_eps", "must be > 0"));
        }
        Ok(())
    }

    /// `1 + floor((len - n_fft) / hop)`, or `None` when the signal is shorter than one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| 1 + (len - self.n_fft) / self.hop)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (1..=cfg.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// `(n_mels, n_fft / 2 + 1)` triangular filterbank with unit peaks.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    let bins = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Log-mel spectrogram `(1, n_mels, frames)` with the closed-form frame count (no cropping).
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!("waveform is {} Hz, front end expects {} Hz", w.sample_rate, cfg.sample_rate)));
    }
    let frames = cfg.frame_count(w.len()).ok_or_else(|| {
        Error::Input(format!("waveform has {} samples, fewer than n_fft = {}", w.len(), cfg.n_fft))
    })?;
    let window = hann(cfg.n_fft);
    let bank = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut out = vec![0.0; cfg.n_mels * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0; bins];
    for t in 0..frames {
        let seg = &w.samples[t * cfg.hop..t * cfg.hop + cfg.n_fft];
        for ((b, &x), &h) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(x * h, 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for (mi, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(f, m)| f * m).sum();
            out[mi * frames + t] = (e + cfg.log_eps).ln();
        }
    }
    Tensor::from_vec(&[1, cfg.n_mels, frames], out)
}

/// Crops or pads (with the silence value `ln(log_eps)`) the time axis to `cfg.frames`.
pub fn fit_frames<S: Real>(spec: &Tensor<S>, cfg: &MelConfig) -> Result<Tensor<S>> {
    let [c, m, t] = spec.shape()[..] else {
        return Err(Error::Dimension { op: "fit_frames", axis: "rank".into(), expected: 3, got: spec.rank() });
    };
    let fill = S::from_f64(cfg.log_eps.ln());
    let keep = t.min(cfg.frames);
    let mut out = vec![fill; c * m * cfg.frames];
    for row in 0..c * m {
        out[row * cfg.frames..row * cfg.frames + keep].copy_from_slice(&spec.data()[row * t..row * t + keep]);
    }
    Tensor::from_vec(&[c, m, cfg.frames], out)
}

/// Front end as used by the pipeline: log-mel followed by [`fit_frames`].
pub fn features(w: &Waveform, cfg: &MelConfig) -> Result<Tensor<f64>> {
    fit_frames(&mel_spectrogram(w, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 50.0, 700.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn silence_is_log_eps() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let s = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(s.shape(), &[1, 64, 61]);
        assert!(s.data().iter().all(|&v| v == cfg.log_eps.ln()));
        assert_eq!(features(&w, &cfg).unwrap().shape(), &[1, 64, 44]);
    }

    #[test]
    fn too_short_rejected() {
        let w = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(mel_spectrogram(&w, &MelConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn padding_uses_silence() {
        let cfg = MelConfig { frames: 4, ..MelConfig::default() };
        let s = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap();
        let f = fit_frames(&s, &cfg).unwrap();
        assert_eq!(&f.data()[..2], &[1.0, 2.0]);
        assert_eq!(f.data()[3], cfg.log_eps.ln());
    }

    #[test]
    fn filterbank_peaks_at_centers() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg);
        assert_eq!(bank.len(), 64);
        assert!(bank.iter().all(|f| f.iter().any(|&v| v > 0.0)));
    }
}
