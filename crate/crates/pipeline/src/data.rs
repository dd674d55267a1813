//! Synthetic scene audio: class-specific harmonic band patterns recorded
//! through per-device tilt filters, turned into log-mel features on disk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scenekd_core::augment::{self, ImpulseResponse, Waveform};
use scenekd_core::mel::{self, hz_to_mel, mel_to_hz, MelConfig};
use scenekd_core::tensor::{Real, Tensor};
use scenekd_core::train::Dataset;
use scenekd_core::{archive, tnsr};

use crate::config::{AugmentConfig, DataConfig};
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub label: usize,
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub devices: Vec<String>,
    pub feature_shape: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| PipelineError::io(path, format!("bad manifest: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        archive::write_atomic(path, &text)?;
        Ok(())
    }

    /// Loads every feature map, checking labels and shapes.
    pub fn load<S: Real>(&self, dir: &Path) -> Result<Dataset<S>> {
        let mut parts = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.label >= self.class_count {
                return Err(PipelineError::io(dir.join(&e.feature_path), format!("label {} out of range", e.label)));
            }
            let path = dir.join(&e.feature_path);
            let t = tnsr::read_file(&path)?.into_real::<S>()?;
            if t.shape() != self.feature_shape.as_slice() {
                return Err(PipelineError::io(&path, format!("shape {:?}, expected {:?}", t.shape(), self.feature_shape)));
            }
            parts.push(t);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&self.feature_shape);
        let data: Vec<S> = parts.into_iter().flat_map(Tensor::into_data).collect();
        let features = Tensor::from_vec(&shape, data)?;
        Ok(Dataset::new(
            features,
            self.entries.iter().map(|e| e.label).collect(),
            self.entries.iter().map(|e| e.device_id.clone()).collect(),
        )?)
    }
}

pub fn device_name(i: usize) -> String {
    format!("dev{i}")
}

/// Fixed first-order tilt filter of device `d` out of `total`; `[1, a]` with `a` spread over `[-0.7, 0.7]`.
pub fn device_filter(d: usize, total: usize, sample_rate: u32) -> ImpulseResponse {
    let a = if total <= 1 { 0.0 } else { -0.7 + 1.4 * d as f64 / (total - 1) as f64 };
    let norm = 1.0 / (1.0 + a.abs());
    ImpulseResponse { taps: vec![norm, a * norm], sample_rate }
}

/// Deterministic recipe for one class's harmonic pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub f0: f64,
    pub formant_hz: f64,
    pub formant_width_mel: f64,
    pub am_rate: f64,
}

pub fn class_prototypes(classes: usize, mel: &MelConfig) -> Vec<ClassPrototype> {
    const RATES: [f64; 5] = [2.0, 4.0, 7.0, 11.0, 16.0];
    let (lo, hi) = (hz_to_mel(300.0), hz_to_mel(0.8 * mel.f_max.min(5_000.0)));
    (0..classes)
        .map(|c| {
            let u = c as f64 / (classes.max(2) - 1) as f64;
            // formant centers visit the range in a stride-3 order so pitch and envelope are decorrelated
            let v = ((c * 3) % classes) as f64 / classes as f64;
            ClassPrototype {
                f0: 110.0 * 5f64.powf(u),
                formant_hz: mel_to_hz(lo + (hi - lo) * v),
                formant_width_mel: 180.0,
                am_rate: RATES[c % RATES.len()],
            }
        })
        .collect()
}

/// Renders one sample. With `noise = 0` the result depends only on class and device.
pub fn render(proto: &ClassPrototype, device: &ImpulseResponse, noise: f64, len: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let sr = device.sample_rate as f64;
    let f0 = proto.f0 * (1.0 + 0.03 * noise * rng.gen_range(-1.0..1.0));
    let am_phase = noise.min(1.0) * rng.gen_range(0.0..2.0 * PI);
    let gain = 0.1 * (0.6 * noise * rng.gen_range(-1.0..1.0)).exp();
    let fm = hz_to_mel(proto.formant_hz);
    let mut x = vec![0.0; len];
    let nyq = 0.45 * sr;
    let mut k = 1;
    while k as f64 * f0 < nyq.min(6_000.0) {
        let f = k as f64 * f0;
        let d = (hz_to_mel(f) - fm) / proto.formant_width_mel;
        let amp = (-0.5 * d * d).exp() + 0.03;
        let phase = (k * 7919 % 628) as f64 / 100.0;
        let w = 2.0 * PI * f / sr;
        let (step_s, step_c) = w.sin_cos();
        let (mut s, mut c) = phase.sin_cos();
        for v in x.iter_mut() {
            *v += amp * s;
            (s, c) = (s * step_c + c * step_s, c * step_c - s * step_s);
        }
        k += 1;
    }
    let base_rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    let noise_std = 0.6 * noise;
    for (n, v) in x.iter_mut().enumerate() {
        let env = 1.0 + 0.7 * (2.0 * PI * proto.am_rate * n as f64 / sr + am_phase).sin();
        let white: f64 = if noise > 0.0 { rng.gen_range(-1.0..1.0) * 3f64.sqrt() } else { 0.0 };
        *v = gain * (env * *v / base_rms + noise_std * white);
    }
    let w = Waveform::new(x, device.sample_rate)?;
    Ok(augment::convolve_ir(&w, device)?)
}

/// Writes features for one split and returns its manifest.
#[derive(Debug, Clone)]
struct SplitSpec<'a> {
    name: &'a str,
    per_class: usize,
    devices: usize,
}

/// Summary of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedData {
    pub splits: BTreeMap<String, usize>,
    pub seen_devices: Vec<String>,
    pub unseen_devices: Vec<String>,
    pub augmented: usize,
}

/// Generates `train`, `val` and `test` splits under `dir` (manifests `<split>.json`).
pub fn generate_synthetic_dataset(
    dir: &Path,
    seed: u64,
    classes: usize,
    data: &DataConfig,
    mel_cfg: &MelConfig,
    aug: &AugmentConfig,
) -> Result<GeneratedData> {
    let protos = class_prototypes(classes, mel_cfg);
    let total_devices = data.devices + data.unseen_devices;
    let filters: Vec<ImpulseResponse> = (0..total_devices).map(|d| device_filter(d, total_devices, mel_cfg.sample_rate)).collect();
    let len = (data.duration_s * mel_cfg.sample_rate as f64).round() as usize;
    let splits = [
        SplitSpec { name: "train", per_class: data.train_per_class, devices: data.devices },
        SplitSpec { name: "val", per_class: data.val_per_class, devices: data.devices },
        SplitSpec { name: "test", per_class: data.test_per_class, devices: total_devices },
    ];
    let feature_shape = vec![1, mel_cfg.n_mels, mel_cfg.frames];
    let mut summary = GeneratedData {
        splits: BTreeMap::new(),
        seen_devices: (0..data.devices).map(device_name).collect(),
        unseen_devices: (data.devices..total_devices).map(device_name).collect(),
        augmented: 0,
    };
    for (si, split) in splits.iter().enumerate() {
        let sub = dir.join(split.name);
        std::fs::create_dir_all(&sub).map_err(|e| PipelineError::io(&sub, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((si as u64 + 1) << 32));
        let mut flips = ChaCha8Rng::seed_from_u64(augment::sample_seed(seed, si as u64 + 1));
        let mut entries = Vec::new();
        let mut waves = Vec::new();
        for i in 0..split.per_class * classes {
            let class = i % classes;
            let device = (i / classes) % split.devices;
            let w = render(&protos[class], &filters[device], data.noise, len, &mut rng)?;
            let label = if split.name == "train" && classes > 1 && flips.gen_bool(data.label_noise) {
                (class + flips.gen_range(1..classes)) % classes
            } else {
                class
            };
            let name = format!("{}/{i:05}.tnsr", split.name);
            write_features(&dir.join(&name), &w, mel_cfg)?;
            entries.push(ManifestEntry { feature_path: name, label, device_id: device_name(device) });
            if aug.enabled && split.name == "train" {
                waves.push((w, label, device));
            }
        }
        if !waves.is_empty() {
            summary.augmented = augment_split(dir, split.name, &waves, seed, aug, mel_cfg, &mut entries)?;
        }
        summary.splits.insert(split.name.to_string(), entries.len());
        let devices = (0..split.devices).map(device_name).collect();
        DatasetManifest { class_count: classes, devices, feature_shape: feature_shape.clone(), entries }
            .write(&dir.join(format!("{}.json", split.name)))?;
    }
    Ok(summary)
}

fn write_features(path: &Path, w: &Waveform, cfg: &MelConfig) -> Result<()> {
    let f: Tensor<f32> = mel::features(w, cfg)?.cast();
    let bytes = tnsr::encode(&f)?;
    archive::write_atomic(path, &bytes)?;
    Ok(())
}

/// Energy-adaptive IR copies of the training waveforms, drawn from the shipped non-identity fixtures.
fn augment_split(
    dir: &Path,
    split: &str,
    waves: &[(Waveform, usize, usize)],
    seed: u64,
    aug: &AugmentConfig,
    mel_cfg: &MelConfig,
    entries: &mut Vec<ManifestEntry>,
) -> Result<usize> {
    let rms: Vec<f64> = waves.iter().map(|(w, _, _)| augment::rms(w)).collect::<Result<_, _>>()?;
    let policy = augment::calibrate_policy(&rms, aug.lo_pct, aug.hi_pct, aug.m_min, aug.m_max)?;
    let irs: Vec<ImpulseResponse> =
        augment::ir_fixtures(mel_cfg.sample_rate).into_iter().filter(|(n, _)| *n != "identity").map(|(_, ir)| ir).collect();
    let mut count = 0;
    for copy in 0..aug.copies {
        for (i, (w, label, device)) in waves.iter().enumerate() {
            let index = (copy * waves.len() + i) as u64;
            let a = augment::augment_from_pool(w, &irs, &policy, seed, index)?;
            let name = format!("{split}/aug{copy}_{i:05}.tnsr");
            write_features(&dir.join(&name), &a, mel_cfg)?;
            entries.push(ManifestEntry { feature_path: name, label: *label, device_id: device_name(*device) });
            count += 1;
        }
    }
    Ok(count)
}

pub fn manifest_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.json"))
}
