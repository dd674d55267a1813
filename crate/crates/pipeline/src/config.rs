//! Experiment configuration: one JSON document, with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use scenekd_core::distill::KDConfig;
use scenekd_core::ensemble::{CombinerConfig, FusionMode};
use scenekd_core::mel::MelConfig;
use scenekd_core::net::{default_teacher_recipe, StudentConfig};
use scenekd_core::optim::OptimConfig;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Devices present in every split.
    pub devices: usize,
    /// Extra devices that only appear in the test split.
    pub unseen_devices: usize,
    /// Per-sample variability: additive noise level and jitter of pitch, gain and modulation phase.
    pub noise: f64,
    /// Fraction of training labels replaced by a different, uniformly drawn class.
    pub label_noise: f64,
    pub duration_s: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_per_class: 200, val_per_class: 40, test_per_class: 60, devices: 3, unseen_devices: 1, noise: 1.0, label_noise: 0.0, duration_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub width_multiplier: f64,
    pub depth_additions: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub count: usize,
    /// Cycled to produce `count` variants of the student backbone.
    pub recipe: Vec<TeacherSpec>,
    pub optimizer: OptimConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            count: 8,
            recipe: default_teacher_recipe()
                .into_iter()
                .map(|(width_multiplier, depth_additions)| TeacherSpec { width_multiplier, depth_additions })
                .collect(),
            optimizer: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub m_min: f64,
    pub m_max: f64,
    /// Augmented copies added per training sample.
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: false, lo_pct: 10.0, hi_pct: 90.0, m_min: 0.1, m_max: 0.9, copies: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeConfig {
    pub enabled: bool,
    pub calibration_samples: usize,
    /// Quantization-aware fine-tuning epochs after calibration (0 disables).
    pub qat_epochs: usize,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self { enabled: true, calibration_samples: 256, qat_epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RouterConfig {
    /// Epochs of per-device fine-tuning of the distilled student (0 leaves the device map empty).
    pub finetune_epochs: usize,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub param_cap: u64,
    pub mac_cap: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { param_cap: 128_000, mac_cap: 30_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub class_count: usize,
    pub precision: Precision,
    pub data: DataConfig,
    pub mel: MelConfig,
    pub student: StudentConfig,
    pub teachers: TeacherConfig,
    pub combiner: CombinerConfig,
    pub kd: KDConfig,
    /// Student optimizer.
    pub optimizer: OptimConfig,
    /// Independently seeded students trained by `distill` (each with a cross-entropy-only twin).
    pub student_replicates: usize,
    pub fusion_mode: FusionMode,
    pub augment: AugmentConfig,
    pub quantize: QuantizeConfig,
    pub router: RouterConfig,
    pub budget: BudgetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            class_count: 10,
            precision: Precision::F32,
            data: DataConfig::default(),
            mel: MelConfig::default(),
            student: StudentConfig::default_student(10),
            teachers: TeacherConfig::default(),
            combiner: CombinerConfig::default(),
            kd: KDConfig::default(),
            optimizer: OptimConfig::default(),
            student_replicates: 1,
            fusion_mode: FusionMode::A1Z1,
            augment: AugmentConfig::default(),
            quantize: QuantizeConfig::default(),
            router: RouterConfig::default(),
            budget: BudgetConfig::default(),
        }
    }
}

fn core_field(e: scenekd_core::Error, prefix: &str) -> PipelineError {
    match e {
        scenekd_core::Error::Config { field, reason } => PipelineError::Config(format!("{prefix}{field}: {reason}")),
        other => PipelineError::Config(format!("{prefix}{other}")),
    }
}

impl ExperimentConfig {
    /// Small backbone and dataset sized for a single laptop core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.student = desk_student(cfg.class_count);
        cfg.data = DataConfig { train_per_class: 128, val_per_class: 16, test_per_class: 100, label_noise: 0.2, ..DataConfig::default() };
        cfg.teachers.count = 4;
        cfg.teachers.recipe = [(1.5, [0, 0, 0]), (2.0, [0, 0, 0]), (1.0, [0, 1, 0]), (1.5, [1, 0, 0])]
            .into_iter()
            .map(|(width_multiplier, depth_additions)| TeacherSpec { width_multiplier, depth_additions })
            .collect();
        cfg.teachers.optimizer = OptimConfig { lr: 2e-3, epochs: 8, ..OptimConfig::default() };
        cfg.combiner.optimizer = OptimConfig { lr: 1e-3, epochs: 2, ..OptimConfig::default() };
        cfg.optimizer = OptimConfig { epochs: 100, ..OptimConfig::default() };
        cfg.student_replicates = 3;
        cfg.router.finetune_epochs = 2;
        cfg
    }

    /// Tiny settings that exercise every phase in seconds.
    pub fn smoke() -> Self {
        let mut cfg = Self::desk();
        cfg.class_count = 4;
        cfg.student = desk_student(4);
        cfg.data = DataConfig { train_per_class: 8, val_per_class: 2, test_per_class: 4, devices: 2, unseen_devices: 1, ..DataConfig::default() };
        cfg.teachers.count = 3;
        cfg.teachers.optimizer.epochs = 1;
        cfg.combiner.optimizer.epochs = 1;
        cfg.optimizer.epochs = 2;
        cfg.optimizer.batch_size = 16;
        cfg.student_replicates = 1;
        cfg.quantize.calibration_samples = 16;
        cfg.router.finetune_epochs = 1;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(PipelineError::Config(format!("unknown preset `{other}`; expected default, desk or smoke"))),
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let mut cfg: Self = serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.student = cfg.student.clone().with_outputs(cfg.class_count);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(PipelineError::Config("class_count: need at least 2 classes".into()));
        }
        let d = &self.data;
        if d.train_per_class == 0 || d.test_per_class == 0 || d.devices == 0 {
            return Err(PipelineError::Config("data: train_per_class, test_per_class and devices must be >= 1".into()));
        }
        if !(d.noise >= 0.0) || !(d.duration_s > 0.0) {
            return Err(PipelineError::Config("data: noise must be >= 0 and duration_s > 0".into()));
        }
        if !(0.0..1.0).contains(&d.label_noise) {
            return Err(PipelineError::Config(format!("data.label_noise: must lie in [0, 1), got {}", d.label_noise)));
        }
        self.mel.validate().map_err(|e| core_field(e, ""))?;
        let min_len = self.mel.n_fft as f64 / self.mel.sample_rate as f64;
        if d.duration_s < min_len {
            return Err(PipelineError::Config(format!("data.duration_s: shorter than one analysis window ({min_len} s)")));
        }
        self.student.validate().map_err(|e| core_field(e, "student."))?;
        if self.student.input_channels != 1 {
            return Err(PipelineError::Config("student.input_channels: the mel front end produces 1 channel".into()));
        }
        if self.teachers.count == 0 || self.teachers.recipe.is_empty() {
            return Err(PipelineError::Config("teachers: need count >= 1 and a non-empty recipe".into()));
        }
        if let Some(t) = self.teachers.recipe.iter().find(|t| !(t.width_multiplier >= 1.0)) {
            return Err(PipelineError::Config(format!("teachers.recipe: width multiplier {} < 1", t.width_multiplier)));
        }
        self.teachers.optimizer.validate().map_err(|e| core_field(e, "teachers."))?;
        self.combiner.validate().map_err(|e| core_field(e, ""))?;
        self.kd.validate().map_err(|e| core_field(e, ""))?;
        self.optimizer.validate().map_err(|e| core_field(e, ""))?;
        let a = &self.augment;
        if a.enabled {
            if !(0.0 <= a.lo_pct && a.lo_pct < a.hi_pct && a.hi_pct <= 100.0) {
                return Err(PipelineError::Config("augment: need 0 <= lo_pct < hi_pct <= 100".into()));
            }
            if !(0.0 <= a.m_min && a.m_min <= a.m_max && a.m_max <= 1.0) {
                return Err(PipelineError::Config("augment: need 0 <= m_min <= m_max <= 1".into()));
            }
        }
        if self.student_replicates == 0 {
            return Err(PipelineError::Config("student_replicates: must be >= 1".into()));
        }
        if self.quantize.enabled && self.quantize.calibration_samples == 0 {
            return Err(PipelineError::Config("quantize.calibration_samples: must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical SHA-256 of selected top-level sections (plus upstream hashes).
    pub fn section_hash(&self, sections: &[&str], upstream: &[&str]) -> String {
        let v = self.to_value();
        let mut h = Sha256::new();
        for s in sections {
            h.update(s.as_bytes());
            h.update(b"=");
            h.update(serde_json::to_vec(&v[*s]).expect("json"));
            h.update(b";");
        }
        for u in upstream {
            h.update(u.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Compact backbone for desk-scale runs: patchify stem, one block per stage.
pub fn desk_student(classes: usize) -> StudentConfig {
    let mut cfg = StudentConfig::from_widths(1, 16, &[(16, 1, 1), (24, 1, 2), (32, 1, 2)], 2.0, 3, classes);
    cfg.stem = scenekd_core::ops::ConvSpec::new(1, 16, 4, 4, 0);
    cfg
}

/// Applies `key=value` where `key` is a dotted path to an existing field.
/// The value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        let Some(slot) = slot else {
            return Err(PipelineError::Config(format!("unknown config key `{}`", parts[..=i].join("."))));
        };
        cur = slot;
    }
    *cur = value;
    Ok(())
}

/// Recursively overlays `overlay` onto `base`; objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then config file, then `--set` overrides, then the dedicated flags.
pub fn resolve(preset: &str, file: Option<&Path>, sets: &[String], seed: Option<u64>, float64: bool) -> Result<ExperimentConfig> {
    let mut doc = ExperimentConfig::preset(preset)?.to_value();
    if let Some(path) = file {
        merge(&mut doc, ExperimentConfig::load(path)?);
    }
    for s in sets {
        apply_override(&mut doc, s)?;
    }
    if let Some(seed) = seed {
        doc["seed"] = seed.into();
    }
    if float64 {
        doc["precision"] = "f64".into();
    }
    ExperimentConfig::from_value(doc)
}
