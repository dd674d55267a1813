//! Data generation, phase orchestration, routing and the CLI contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use scenekd_core::net::load_network;
use scenekd_core::train::Dataset;
use scenekd_core::Tensor;
use scenekd_pipeline::budget::{report_complexity, ComplexityVerdict};
use scenekd_pipeline::config::{resolve, DataConfig, ExperimentConfig, Precision, TeacherSpec};
use scenekd_pipeline::data::{generate_synthetic_dataset, manifest_path, DatasetManifest};
use scenekd_pipeline::metrics::read_metrics;
use scenekd_pipeline::phases::{run_all, run_phase, Phase, PhaseStatus, Predictions, Workspace, PREDICTIONS_FILE};
use scenekd_pipeline::router::{load_router, route_and_classify, Classifier, ModelRouter, RouterManifest};
use scenekd_pipeline::PipelineError;

fn smoke() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::smoke();
    cfg.precision = Precision::F64;
    cfg
}

/// One full smoke run shared by the tests that only read its artifacts.
fn smoke_run() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run_all(&Workspace::new(dir.path(), smoke())).unwrap();
        dir
    })
    .path()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn load(dir: &Path, split: &str) -> (DatasetManifest, Dataset<f64>) {
    let m = DatasetManifest::read(&manifest_path(dir, split)).unwrap();
    let d = m.load(dir).unwrap();
    (m, d)
}

/// Class the generator rendered for a non-augmented entry `<split>/<index>.tnsr`.
fn rendered_class(path: &str, classes: usize) -> Option<usize> {
    let stem = path.rsplit('/').next()?.strip_suffix(".tnsr")?;
    stem.parse::<usize>().ok().map(|i| i % classes)
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let cfg = smoke();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        generate_synthetic_dataset(d.path(), 5, cfg.class_count, &cfg.data, &cfg.mel, &cfg.augment).unwrap();
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(c.path(), 6, cfg.class_count, &cfg.data, &cfg.mel, &cfg.augment).unwrap();
    assert_ne!(fa, files_under(c.path()));
}

#[test]
fn zero_noise_makes_each_class_device_pair_identical() {
    let mut cfg = smoke();
    cfg.data.noise = 0.0;
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), 2, cfg.class_count, &cfg.data, &cfg.mel, &cfg.augment).unwrap();
    let (m, d) = load(dir.path(), "train");
    let mut first: BTreeMap<(usize, String), Tensor<f64>> = BTreeMap::new();
    let mut compared = 0;
    for (i, e) in m.entries.iter().enumerate() {
        if rendered_class(&e.feature_path, cfg.class_count).is_none() {
            continue;
        }
        let x = d.gather(&[i]).0;
        match first.get(&(e.label, e.device_id.clone())) {
            Some(f) => {
                assert_eq!(f.data(), x.data(), "{}", e.feature_path);
                compared += 1;
            }
            None => {
                first.insert((e.label, e.device_id.clone()), x);
            }
        }
    }
    assert!(compared > 0);
    let distinct: Vec<&Tensor<f64>> = first.values().collect();
    assert!(distinct.windows(2).all(|w| w[0].data() != w[1].data()));
}

#[test]
fn label_noise_flips_only_training_labels() {
    let mut cfg = smoke();
    cfg.data = DataConfig { train_per_class: 50, label_noise: 0.3, ..cfg.data };
    cfg.augment.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), 3, cfg.class_count, &cfg.data, &cfg.mel, &cfg.augment).unwrap();
    for split in ["val", "test"] {
        let (m, _) = load(dir.path(), split);
        assert!(m.entries.iter().all(|e| rendered_class(&e.feature_path, cfg.class_count) == Some(e.label)));
    }
    let (m, _) = load(dir.path(), "train");
    let flipped = m.entries.iter().filter(|e| rendered_class(&e.feature_path, cfg.class_count) != Some(e.label)).count();
    let rate = flipped as f64 / m.entries.len() as f64;
    assert!((0.2..0.4).contains(&rate), "flip rate {rate}");

    for bad in ["data.label_noise=1.0", "data.label_noise=-0.1"] {
        let e = resolve("smoke", None, &[bad.to_string()], None, false).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}");
    }
}

/// Per-feature mean and standard deviation.
type Standardizer = (Vec<f64>, Vec<f64>);

/// Per-band mean and standard deviation over time, standardized with training statistics.
fn pooled(d: &Dataset<f64>, stats: Option<&Standardizer>) -> (Vec<Vec<f64>>, Standardizer) {
    let (bands, frames) = (d.sample_shape()[1], d.sample_shape()[2]);
    let rows: Vec<Vec<f64>> = (0..d.len())
        .map(|i| {
            let x = d.gather(&[i]).0;
            let mut f = Vec::with_capacity(2 * bands);
            for b in 0..bands {
                let band = &x.data()[b * frames..(b + 1) * frames];
                let mean = band.iter().sum::<f64>() / frames as f64;
                f.push(mean);
                f.push((band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64).sqrt());
            }
            f
        })
        .collect();
    let stats = stats.cloned().unwrap_or_else(|| {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mu: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd = (0..dim).map(|j| (rows.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8)).collect();
        (mu, sd)
    });
    let rows = rows.into_iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - stats.0[j]) / stats.1[j]).collect()).collect();
    (rows, stats)
}

/// Two dense layers with a ReLU between, trained by per-sample SGD.
struct Mlp {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl Mlp {
    fn new(input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = |fan_in: usize, fan_out: usize| -> Vec<Vec<f64>> {
            let s = (2.0 / fan_in as f64).sqrt();
            (0..fan_out).map(|_| (0..fan_in).map(|_| rng.gen_range(-s..s)).collect()).collect()
        };
        let (w1, w2) = (layer(input, hidden), layer(hidden, classes));
        Self { w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; classes] }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = self.w1.iter().zip(&self.b1).map(|(w, b)| (w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).max(0.0)).collect();
        let z = self.w2.iter().zip(&self.b2).map(|(w, b)| w.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b).collect();
        (h, z)
    }

    fn step(&mut self, x: &[f64], label: usize, lr: f64) {
        let (h, z) = self.forward(x);
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let dz: Vec<f64> = e.iter().enumerate().map(|(k, v)| v / s - f64::from(u8::from(k == label))).collect();
        let mut dh = vec![0.0; h.len()];
        for (k, g) in dz.iter().enumerate() {
            for (j, hv) in h.iter().enumerate() {
                dh[j] += g * self.w2[k][j];
                self.w2[k][j] -= lr * g * hv;
            }
            self.b2[k] -= lr * g;
        }
        for (j, g) in dh.iter().enumerate() {
            if h[j] > 0.0 {
                for (w, xv) in self.w1[j].iter_mut().zip(x) {
                    *w -= lr * g * xv;
                }
                self.b1[j] -= lr * g;
            }
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.forward(x).1;
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }
}

#[test]
fn two_layer_baseline_learns_the_default_task() {
    let mut cfg = ExperimentConfig::desk();
    cfg.data = DataConfig { train_per_class: 60, val_per_class: 0, test_per_class: 30, ..DataConfig::default() };
    cfg.augment.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), 0, cfg.class_count, &cfg.data, &cfg.mel, &cfg.augment).unwrap();
    let (_, train) = load(dir.path(), "train");
    let (_, test) = load(dir.path(), "test");
    let (xs, stats) = pooled(&train, None);
    let (xt, _) = pooled(&test, Some(&stats));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::new(xs[0].len(), 32, cfg.class_count, &mut rng);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..60 {
        order.shuffle(&mut rng);
        for &i in &order {
            net.step(&xs[i], train.labels[i], 0.01);
        }
    }
    let acc = xt.iter().zip(&test.labels).filter(|(x, &y)| net.predict(x) == y).count() as f64 / xt.len() as f64;
    println!("two-layer baseline test accuracy {acc:.4}");
    assert!(acc >= 0.90, "{acc}");
}

#[test]
fn phases_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), smoke());
    let e = run_phase(&ws, Phase::Distill).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    let msg = e.to_string();
    assert!(msg.contains("stamp.json") && msg.contains("first"), "{msg}");
    run_phase(&ws, Phase::GenData).unwrap();
    run_phase(&ws, Phase::TrainTeachers).unwrap();
    match run_phase(&ws, Phase::Distill).unwrap_err() {
        PipelineError::PhaseOrder { producer, missing, .. } => {
            assert_eq!(producer, "train-combiners");
            assert!(missing.contains("train-combiners") || missing.contains("combiners"), "{missing}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn completed_phases_are_skipped_until_their_config_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let first = run_all(&Workspace::new(dir.path(), cfg.clone())).unwrap();
    assert!(first.iter().all(|(_, s)| *s == PhaseStatus::Ran));
    let metrics = std::fs::read(dir.path().join("metrics.json")).unwrap();
    let again = run_all(&Workspace::new(dir.path(), cfg.clone())).unwrap();
    assert!(again.iter().all(|(_, s)| *s == PhaseStatus::UpToDate));
    assert_eq!(std::fs::read(dir.path().join("metrics.json")).unwrap(), metrics);

    let mut changed = cfg;
    changed.kd.alpha = 0.7;
    let third: BTreeMap<Phase, PhaseStatus> = run_all(&Workspace::new(dir.path(), changed)).unwrap().into_iter().collect();
    for p in [Phase::GenData, Phase::TrainTeachers, Phase::TrainCombiners] {
        assert_eq!(third[&p], PhaseStatus::UpToDate, "{p}");
    }
    for p in [Phase::Distill, Phase::Evaluate] {
        assert_eq!(third[&p], PhaseStatus::Ran, "{p}");
    }
}

#[test]
fn reported_accuracy_matches_rescored_predictions() {
    let root = smoke_run();
    let metrics = read_metrics(root).unwrap();
    assert_eq!(metrics["schema"], 1);
    let eval = &metrics["phases"]["evaluate"]["record"];
    let preds: Predictions = serde_json::from_slice(&std::fs::read(root.join(Phase::Evaluate.dir_name()).join(PREDICTIONS_FILE)).unwrap()).unwrap();
    let m = DatasetManifest::read(&manifest_path(&root.join(Phase::GenData.dir_name()), "test")).unwrap();
    assert!(!preds.models.is_empty());
    for (name, p) in &preds.models {
        assert_eq!(p.len(), m.entries.len());
        let hits = p.iter().zip(&m.entries).filter(|(c, e)| **c == e.label).count();
        let acc = hits as f64 / m.entries.len() as f64;
        assert_eq!(eval["accuracy"][name].as_f64().unwrap(), acc, "{name}");
    }
    let modes: Vec<&String> = eval["fusion_table"].as_object().unwrap().keys().collect();
    let mut expected = ["a1", "z1", "z2", "a1z1", "a1z2", "z1z2", "a1z1z2"];
    expected.sort();
    assert_eq!(modes, expected);
}

#[test]
fn unseen_devices_go_to_the_global_model() {
    let root = smoke_run();
    let student_dir = root.join(Phase::Distill.dir_name());
    let router = load_router::<f64>(&student_dir).unwrap();
    let manifest = RouterManifest::read(&student_dir.join("router.json")).unwrap();
    let global = load_network::<f64>(student_dir.join(&manifest.global)).unwrap();
    let (m, test) = load(&root.join(Phase::GenData.dir_name()), "test");
    let unseen: Vec<usize> = (0..test.len()).filter(|&i| !router.devices.contains_key(&m.entries[i].device_id)).collect();
    assert!(!unseen.is_empty());
    router.reset_stats();
    for &i in &unseen {
        let x = test.gather(&[i]).0;
        let routed = route_and_classify(&router, &x, &m.entries[i].device_id).unwrap();
        assert_eq!(routed, global.logits(&x).unwrap().argmax_rows()[0]);
    }
    let stats = router.stats();
    assert_eq!((stats.global_calls, stats.device_calls), (unseen.len() as u64, 0));

    let seen = (0..test.len()).find(|i| !unseen.contains(i)).unwrap();
    route_and_classify(&router, &test.gather(&[seen]).0, &m.entries[seen].device_id).unwrap();
    assert_eq!(router.stats().device_calls, 1);
}

#[test]
fn empty_router_is_the_global_model() {
    let root = smoke_run();
    let student_dir = root.join(Phase::Distill.dir_name());
    let manifest = RouterManifest::read(&student_dir.join("router.json")).unwrap();
    let global = load_network::<f64>(student_dir.join(&manifest.global)).unwrap();
    let router = ModelRouter::new(load_network::<f64>(student_dir.join(&manifest.global)).unwrap());
    let (m, test) = load(&root.join(Phase::GenData.dir_name()), "test");
    let direct = global.logits(&test.features).unwrap().argmax_rows();
    for (i, (e, want)) in m.entries.iter().zip(&direct).enumerate() {
        assert_eq!(route_and_classify(&router, &test.gather(&[i]).0, &e.device_id).unwrap(), *want);
    }
    assert_eq!(router.stats().global_calls, test.len() as u64);
}

#[test]
fn complexity_verdicts() {
    let cfg = ExperimentConfig::default();
    let v = report_complexity(&cfg, None).unwrap();
    assert!(v.pass && (54_000..=66_000).contains(&v.params) && v.macs <= 30_000_000, "{}", v.summary());
    let text = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<ComplexityVerdict>(&text).unwrap(), v);

    let mut wide = cfg;
    wide.teachers.count = 1;
    wide.teachers.recipe = vec![TeacherSpec { width_multiplier: 4.0, depth_additions: [0, 0, 0] }];
    let t = report_complexity(&wide, Some(0)).unwrap();
    assert!(!t.pass && t.params > v.params && t.macs > v.macs, "{}", t.summary());
    assert!(t.summary().contains(&t.params.to_string()) && t.summary().contains(&t.macs.to_string()));
    assert!(report_complexity(&wide, Some(3)).is_err());
}

fn scenekd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scenekd")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes_and_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(scenekd(&["--preset", "smoke", "--out", out, "distill"]).status.code(), Some(3));
    assert_eq!(scenekd(&["--preset", "smoke", "--set", "kd.alpha=2", "report-complexity"]).status.code(), Some(2));
    assert_eq!(scenekd(&["--preset", "nope", "report-complexity"]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(scenekd(&["--config", missing.to_str().unwrap(), "report-complexity"]).status.code(), Some(4));

    let r = scenekd(&["report-complexity", "--json"]);
    assert_eq!(r.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    let parsed: ComplexityVerdict = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), v);
    assert!(parsed.pass);
}
