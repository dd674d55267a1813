//! Phase runner: prerequisite checks, content-addressed stamps and the work of each phase.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use scenekd_core::augment::sample_seed;
use scenekd_core::distill::{train_student, DistillEpoch, KDConfig};
use scenekd_core::ensemble::{build_z1_head, ensemble_outputs, fusion_table, load_pool, save_pool, train_combiners, TeacherPool, Z2Head};
use scenekd_core::net::{count_complexity, load_network, make_teacher_variant, save_network, Mode, Network, StudentConfig};
use scenekd_core::optim::OptimConfig;
use scenekd_core::quant::QuantModel;
use scenekd_core::tensor::Real;
use scenekd_core::train::{accuracy, calibrate_network, predict, predict_quantized, qat_finetune, train_classifier, Dataset};

use crate::config::{ExperimentConfig, Precision, TeacherSpec};
use crate::data::{generate_synthetic_dataset, manifest_path, DatasetManifest};
use crate::error::{PipelineError, Result};
use crate::metrics::record_phase;
use crate::router::{load_router, route_and_classify, RouterManifest};

pub const STAMP_FILE: &str = "stamp.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    GenData,
    TrainTeachers,
    TrainCombiners,
    Distill,
    Quantize,
    Evaluate,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::GenData, Phase::TrainTeachers, Phase::TrainCombiners, Phase::Distill, Phase::Quantize, Phase::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GenData => "gen-data",
            Phase::TrainTeachers => "train-teachers",
            Phase::TrainCombiners => "train-combiners",
            Phase::Distill => "distill",
            Phase::Quantize => "quantize",
            Phase::Evaluate => "evaluate",
        }
    }

    /// Output directory under the run root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Phase::GenData => "data",
            Phase::TrainTeachers => "teachers",
            Phase::TrainCombiners => "combiners",
            Phase::Distill => "student",
            Phase::Quantize => "quant",
            Phase::Evaluate => "eval",
        }
    }

    /// Config sections this phase reads directly; everything upstream enters through the prerequisites' hashes.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Phase::GenData => &["seed", "class_count", "data", "mel", "augment"],
            Phase::TrainTeachers => &["precision", "student", "teachers"],
            Phase::TrainCombiners => &["combiner"],
            Phase::Distill => &["kd", "optimizer", "student_replicates", "fusion_mode", "router"],
            Phase::Quantize => &["quantize"],
            Phase::Evaluate => &["fusion_mode"],
        }
    }

    pub fn prerequisites(self, cfg: &ExperimentConfig) -> Vec<Phase> {
        match self {
            Phase::GenData => vec![],
            Phase::TrainTeachers => vec![Phase::GenData],
            Phase::TrainCombiners => vec![Phase::TrainTeachers],
            Phase::Distill => vec![Phase::TrainCombiners],
            Phase::Quantize => vec![Phase::Distill],
            Phase::Evaluate if cfg.quantize.enabled => vec![Phase::TrainCombiners, Phase::Distill, Phase::Quantize],
            Phase::Evaluate => vec![Phase::TrainCombiners, Phase::Distill],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub phase: String,
    pub hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseStatus {
    Ran,
    UpToDate,
}

/// A run directory together with the resolved configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    config: ExperimentConfig,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: ExperimentConfig) -> Self {
        Self { root: root.into(), config }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self, phase: Phase) -> PathBuf {
        self.root.join(phase.dir_name())
    }

    /// Hash a phase's artifacts must carry to be current for this config.
    pub fn expected_hash(&self, phase: Phase) -> String {
        let upstream: Vec<String> = phase.prerequisites(&self.config).into_iter().map(|p| self.expected_hash(p)).collect();
        let upstream: Vec<&str> = upstream.iter().map(String::as_str).collect();
        self.config.section_hash(phase.sections(), &upstream)
    }

    pub fn stamp(&self, phase: Phase) -> Option<Stamp> {
        let bytes = std::fs::read(self.dir(phase).join(STAMP_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn is_current(&self, phase: Phase) -> bool {
        self.stamp(phase).is_some_and(|s| s.hash == self.expected_hash(phase))
    }

    pub fn check_prerequisites(&self, phase: Phase) -> Result<()> {
        for up in phase.prerequisites(&self.config) {
            let artifact = format!("{}/{STAMP_FILE}", up.dir_name());
            match self.stamp(up) {
                None => return Err(PipelineError::PhaseOrder { phase: phase.name(), missing: artifact, producer: up.name() }),
                Some(s) if s.hash != self.expected_hash(up) => {
                    return Err(PipelineError::PhaseOrder {
                        phase: phase.name(),
                        missing: format!("{artifact} for the current config (found a stale one)"),
                        producer: up.name(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn load_split<S: Real>(&self, split: &str) -> Result<Dataset<S>> {
        let dir = self.dir(Phase::GenData);
        DatasetManifest::read(&manifest_path(&dir, split))?.load(&dir)
    }

    fn input_shape(&self) -> [usize; 3] {
        [1, self.config.mel.n_mels, self.config.mel.frames]
    }

    fn seed(&self, stream: Stream, index: u64) -> u64 {
        sample_seed(sample_seed(self.config.seed, stream as u64), index)
    }
}

/// Independent random streams derived from the experiment seed.
#[derive(Clone, Copy)]
enum Stream {
    Teacher = 1,
    Combiner = 2,
    Student = 3,
    Router = 4,
    Quantize = 5,
}

/// Runs `phase` unless its stamp already matches the config.
pub fn run_phase(ws: &Workspace, phase: Phase) -> Result<PhaseStatus> {
    ws.check_prerequisites(phase)?;
    if ws.is_current(phase) {
        log::info!("{phase}: up to date");
        return Ok(PhaseStatus::UpToDate);
    }
    let dir = ws.dir(phase);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    log::info!("{phase}: running");
    let record = match ws.config.precision {
        Precision::F32 => run_typed::<f32>(ws, phase)?,
        Precision::F64 => run_typed::<f64>(ws, phase)?,
    };
    let hash = ws.expected_hash(phase);
    record_phase(&ws.root, phase.name(), json!({"hash": hash, "record": record}))?;
    let stamp = Stamp { phase: phase.name().to_string(), hash };
    scenekd_core::archive::write_atomic(dir.join(STAMP_FILE), &serde_json::to_vec_pretty(&stamp).expect("stamp serializes"))?;
    Ok(PhaseStatus::Ran)
}

/// Every phase in order (quantization only when enabled).
pub fn run_all(ws: &Workspace) -> Result<Vec<(Phase, PhaseStatus)>> {
    Phase::ALL
        .into_iter()
        .filter(|&p| p != Phase::Quantize || ws.config.quantize.enabled)
        .map(|p| Ok((p, run_phase(ws, p)?)))
        .collect()
}

fn run_typed<S: Real>(ws: &Workspace, phase: Phase) -> Result<Value> {
    match phase {
        Phase::GenData => gen_data(ws),
        Phase::TrainTeachers => teachers::<S>(ws),
        Phase::TrainCombiners => combiners::<S>(ws),
        Phase::Distill => distill::<S>(ws),
        Phase::Quantize => quantize::<S>(ws),
        Phase::Evaluate => evaluate::<S>(ws),
    }
}

fn gen_data(ws: &Workspace) -> Result<Value> {
    let c = &ws.config;
    let summary = generate_synthetic_dataset(&ws.dir(Phase::GenData), c.seed, c.class_count, &c.data, &c.mel, &c.augment)?;
    Ok(json!({"feature_shape": ws.input_shape(), "summary": summary}))
}

/// Teacher `i` is `recipe[i % recipe.len()]` applied to the student backbone.
pub fn teacher_configs(cfg: &ExperimentConfig) -> Result<Vec<(TeacherSpec, StudentConfig)>> {
    (0..cfg.teachers.count)
        .map(|i| {
            let spec = cfg.teachers.recipe[i % cfg.teachers.recipe.len()].clone();
            let net = make_teacher_variant(&cfg.student, spec.width_multiplier, &spec.depth_additions)?;
            Ok((spec, net))
        })
        .collect()
}

fn val_accuracy<S: Real>(net: &Network<S>, val: &Dataset<S>, batch: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(accuracy(&predict(net, val, batch)?, &val.labels)))
}

fn teachers<S: Real>(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.config;
    let (train, val) = (ws.load_split::<S>("train")?, ws.load_split::<S>("val")?);
    let opt = &cfg.teachers.optimizer;
    let mut nets = Vec::new();
    let mut records = Vec::new();
    for (i, (spec, tcfg)) in teacher_configs(cfg)?.into_iter().enumerate() {
        let seed = ws.seed(Stream::Teacher, i as u64);
        let mut net = Network::<S>::build(&tcfg, seed)?;
        let logs = train_classifier(&mut net, &train, opt, Mode::Train, seed)?;
        let last = logs.last().cloned();
        let complexity = count_complexity(&tcfg, &ws.input_shape())?;
        let val_acc = val_accuracy(&net, &val, opt.batch_size)?;
        log::info!("teacher {i}: params {} val acc {val_acc:?}", complexity.params);
        records.push(json!({
            "index": i,
            "width_multiplier": spec.width_multiplier,
            "depth_additions": spec.depth_additions,
            "params": complexity.params,
            "macs": complexity.macs,
            "final_loss": last.as_ref().map(|l| l.loss),
            "train_accuracy": last.as_ref().map(|l| l.train_acc),
            "val_accuracy": val_acc,
        }));
        nets.push(net);
    }
    let n = nets.len();
    let pool = TeacherPool::new(nets, vec![false; n])?;
    save_pool(ws.dir(Phase::TrainTeachers), &pool, None, cfg.fusion_mode, cfg.combiner.lambda)?;
    Ok(json!({"teachers": records}))
}

fn combiners<S: Real>(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.config;
    let (train, val) = (ws.load_split::<S>("train")?, ws.load_split::<S>("val")?);
    let mut pool = load_pool::<S>(ws.dir(Phase::TrainTeachers))?.pool;
    pool.set_frozen(cfg.combiner.freeze_teachers);
    let (t, c) = (pool.len(), pool.num_classes());
    let mut z1 = build_z1_head::<S>(&cfg.student, t, ws.seed(Stream::Combiner, 0))?;
    let mut z2 = Z2Head::build(cfg.combiner.z2_kind, t, c, cfg.combiner.z2_hidden, ws.seed(Stream::Combiner, 1));
    let epochs = train_combiners(&mut pool, &mut z1, &mut z2, &train, &cfg.combiner, ws.seed(Stream::Combiner, 2))?;
    save_pool(ws.dir(Phase::TrainCombiners), &pool, Some((&z1, &z2)), cfg.fusion_mode, cfg.combiner.lambda)?;
    let val_table = if val.is_empty() {
        None
    } else {
        let outs = ensemble_outputs(&pool, Some(&z1), Some(&z2), &val, cfg.combiner.optimizer.batch_size)?;
        Some(fusion_table(&outs, &val.labels)?)
    };
    Ok(json!({"epochs": epochs, "val_fusion_table": val_table}))
}

fn student_file(kind: &str, replicate: usize) -> String {
    format!("{kind}_r{replicate}.skar")
}

fn summarize(epochs: &[DistillEpoch]) -> Value {
    json!({
        "epochs": epochs.len(),
        "final": epochs.last(),
        "mean_kl_first": epochs.first().map(|e| e.mean_kl),
        "mean_kl_last": epochs.last().map(|e| e.mean_kl),
    })
}

fn distill<S: Real>(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.config;
    let dir = ws.dir(Phase::Distill);
    let (train, val) = (ws.load_split::<S>("train")?, ws.load_split::<S>("val")?);
    let lp = load_pool::<S>(ws.dir(Phase::TrainCombiners))?;
    let bs = cfg.optimizer.batch_size;
    let targets = ensemble_outputs(&lp.pool, lp.z1.as_ref(), lp.z2.as_ref(), &train, bs)?.mode(cfg.fusion_mode)?;
    let ensemble_train_acc = accuracy(&targets, &train.labels);

    let mut replicates = Vec::new();
    for r in 0..cfg.student_replicates {
        let seed = ws.seed(Stream::Student, r as u64);
        let mut rec = serde_json::Map::new();
        rec.insert("index".into(), json!(r));
        for (kind, alpha) in [("student", cfg.kd.alpha), ("baseline", 0.0)] {
            let kd = KDConfig { alpha, ..cfg.kd };
            let mut net = Network::<S>::build(&cfg.student, seed)?;
            let log_path = dir.join(format!("{kind}_r{r}.jsonl"));
            let file = File::create(&log_path).map_err(|e| PipelineError::io(&log_path, e))?;
            let mut w = BufWriter::new(file);
            let epochs = train_student(&mut net, &targets, &train, Some(&val), &kd, &cfg.optimizer, sample_seed(seed, 1), Some(&mut w))?;
            w.flush().map_err(|e| PipelineError::io(&log_path, e))?;
            save_network(&net, dir.join(student_file(kind, r)))?;
            log::info!("{kind} {r}: final {:?}", epochs.last());
            rec.insert(kind.into(), summarize(&epochs));
        }
        replicates.push(Value::Object(rec));
    }

    let global = student_file("student", 0);
    let mut devices = BTreeMap::new();
    if cfg.router.finetune_epochs > 0 {
        let ids: BTreeSet<&String> = train.devices.iter().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let idx: Vec<usize> = (0..train.len()).filter(|&i| &train.devices[i] == id).collect();
            let mut net = load_network::<S>(dir.join(&global))?;
            let opt = OptimConfig { epochs: cfg.router.finetune_epochs, ..cfg.optimizer.clone() };
            train_classifier(&mut net, &train.subset(&idx), &opt, Mode::Train, ws.seed(Stream::Router, k as u64))?;
            let file = format!("device_{id}.skar");
            save_network(&net, dir.join(&file))?;
            devices.insert(id.clone(), file);
        }
    }
    let manifest = RouterManifest { global, devices };
    manifest.write(&dir.join("router.json"))?;
    Ok(json!({
        "ensemble_train_accuracy": ensemble_train_acc,
        "replicates": replicates,
        "router_devices": manifest.devices.keys().collect::<Vec<_>>(),
    }))
}

fn quantize<S: Real>(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.config;
    let dir = ws.dir(Phase::Quantize);
    let mut net = load_network::<S>(ws.dir(Phase::Distill).join(student_file("student", 0)))?;
    let (train, val) = (ws.load_split::<S>("train")?, ws.load_split::<S>("val")?);
    let n = cfg.quantize.calibration_samples.min(train.len());
    let idx: Vec<usize> = (0..n).map(|i| i * train.len() / n).collect();
    let bs = cfg.optimizer.batch_size;
    let calibration = calibrate_network(&net, &train.subset(&idx), bs)?.finish()?;
    if cfg.quantize.qat_epochs > 0 {
        let opt = OptimConfig { epochs: cfg.quantize.qat_epochs, ..cfg.optimizer.clone() };
        qat_finetune(&mut net, &train, &calibration, &opt, ws.seed(Stream::Quantize, 0))?;
        save_network(&net, dir.join("student_qat.skar"))?;
    }
    let model = QuantModel::from_network(&net, &calibration)?;
    model.save(dir.join("student.qnet"))?;
    let (mut float_acc, mut int_acc, mut agreement) = (None, None, None);
    if !val.is_empty() {
        let f = predict(&net, &val, bs)?.argmax_rows();
        let q = predict_quantized(&model, &val, bs)?.argmax_rows();
        float_acc = Some(hit_rate(&f, &val.labels));
        int_acc = Some(hit_rate(&q, &val.labels));
        agreement = Some(hit_rate(&f, &q));
    }
    Ok(json!({
        "calibration_samples": n,
        "degenerate_ranges": calibration.degenerate,
        "warnings": model.warnings,
        "qat_epochs": cfg.quantize.qat_epochs,
        "val_float_accuracy": float_acc,
        "val_int8_accuracy": int_acc,
        "val_agreement": agreement,
    }))
}

/// Fraction of positions where `a` and `b` agree.
pub fn hit_rate(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Accuracy per device id.
pub fn per_device(pred: &[usize], labels: &[usize], devices: &[String]) -> BTreeMap<String, f64> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((p, l), d) in pred.iter().zip(labels).zip(devices) {
        let t = tally.entry(d.clone()).or_default();
        t.0 += usize::from(p == l);
        t.1 += 1;
    }
    tally.into_iter().map(|(d, (h, n))| (d, h as f64 / n as f64)).collect()
}

/// Saved test-set predictions, one argmax class per sample and model, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub split: String,
    pub models: BTreeMap<String, Vec<usize>>,
}

fn evaluate<S: Real>(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.config;
    let test = ws.load_split::<S>("test")?;
    let bs = cfg.optimizer.batch_size;
    let student_dir = ws.dir(Phase::Distill);
    let lp = load_pool::<S>(ws.dir(Phase::TrainCombiners))?;
    let outs = ensemble_outputs(&lp.pool, lp.z1.as_ref(), lp.z2.as_ref(), &test, bs)?;
    let table = fusion_table(&outs, &test.labels)?;

    let mut models: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    models.insert("ensemble".into(), outs.mode(cfg.fusion_mode)?.argmax_rows());
    let mut replicates = Vec::new();
    let (mut kd_sum, mut ce_sum) = (0.0, 0.0);
    for r in 0..cfg.student_replicates {
        let mut accs = [0.0; 2];
        for (slot, kind) in ["student", "baseline"].into_iter().enumerate() {
            let net = load_network::<S>(student_dir.join(student_file(kind, r)))?;
            let pred = predict(&net, &test, bs)?.argmax_rows();
            accs[slot] = hit_rate(&pred, &test.labels);
            if r == 0 {
                models.insert(kind.into(), pred);
            }
        }
        kd_sum += accs[0];
        ce_sum += accs[1];
        replicates.push(json!({"index": r, "student": accs[0], "baseline": accs[1]}));
    }
    if cfg.quantize.enabled {
        let model = QuantModel::load(ws.dir(Phase::Quantize).join("student.qnet"))?;
        models.insert("int8".into(), predict_quantized(&model, &test, bs)?.argmax_rows());
    }
    let router = load_router::<S>(&student_dir)?;
    let routed = (0..test.len())
        .map(|i| route_and_classify(&router, &test.gather(&[i]).0, &test.devices[i]))
        .collect::<Result<Vec<_>>>()?;
    models.insert("router".into(), routed);
    let stats = router.stats();

    let preds = Predictions { split: "test".into(), models };
    scenekd_core::archive::write_atomic(
        ws.dir(Phase::Evaluate).join(PREDICTIONS_FILE),
        &serde_json::to_vec(&preds).expect("predictions serialize"),
    )?;
    let accuracy: BTreeMap<&String, f64> = preds.models.iter().map(|(k, p)| (k, hit_rate(p, &test.labels))).collect();
    let by_device: BTreeMap<&String, BTreeMap<String, f64>> =
        preds.models.iter().map(|(k, p)| (k, per_device(p, &test.labels, &test.devices))).collect();
    let reps = cfg.student_replicates as f64;
    Ok(json!({
        "test_samples": test.len(),
        "fusion_mode": cfg.fusion_mode.name(),
        "fusion_table": table,
        "accuracy": accuracy,
        "per_device": by_device,
        "replicates": replicates,
        "student_mean": kd_sum / reps,
        "baseline_mean": ce_sum / reps,
        "router": {
            "devices": router.devices.keys().collect::<Vec<_>>(),
            "global_calls": stats.global_calls,
            "device_calls": stats.device_calls,
        },
    }))
}
