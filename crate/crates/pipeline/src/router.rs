//! Device-conditional model selection with a global fallback.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scenekd_core::net::{load_network, Network};
use scenekd_core::tensor::{Real, Tensor};

use crate::error::{PipelineError, Result};

/// Anything that maps a batch `(N, C, H, W)` to logits `(N, classes)`.
pub trait Classifier<S: Real> {
    fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>>;
}

impl<S: Real> Classifier<S> for Network<S> {
    fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(batch)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteStats {
    pub global_calls: u64,
    pub device_calls: u64,
}

/// Per-device models plus the global model used for every other device.
pub struct ModelRouter<C> {
    pub global: C,
    pub devices: BTreeMap<String, C>,
    stats: Cell<RouteStats>,
}

impl<C> ModelRouter<C> {
    pub fn new(global: C) -> Self {
        Self { global, devices: BTreeMap::new(), stats: Cell::new(RouteStats::default()) }
    }

    pub fn with_device(mut self, device_id: impl Into<String>, model: C) -> Self {
        self.devices.insert(device_id.into(), model);
        self
    }

    /// The model responsible for `device_id`; counts the decision.
    pub fn select(&self, device_id: &str) -> &C {
        let mut s = self.stats.get();
        let model = match self.devices.get(device_id) {
            Some(m) => {
                s.device_calls += 1;
                m
            }
            None => {
                s.global_calls += 1;
                &self.global
            }
        };
        self.stats.set(s);
        model
    }

    pub fn stats(&self) -> RouteStats {
        self.stats.get()
    }

    pub fn reset_stats(&self) {
        self.stats.set(RouteStats::default());
    }
}

/// Classifies one sample `(C, H, W)` (or `(1, C, H, W)`) with the model for its device.
pub fn route_and_classify<S: Real, C: Classifier<S>>(router: &ModelRouter<C>, sample: &Tensor<S>, device_id: &str) -> Result<usize> {
    let batch = match sample.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(sample.shape());
            sample.clone().reshape(&shape)?
        }
        _ => sample.clone(),
    };
    let logits = router.select(device_id).logits(&batch)?;
    Ok(logits.argmax_rows()[0])
}

/// `router.json`: checkpoint file names relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterManifest {
    pub global: String,
    pub devices: BTreeMap<String, String>,
}

impl RouterManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self).expect("router manifest serializes");
        scenekd_core::archive::write_atomic(path, &text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| PipelineError::io(path, format!("bad router manifest: {e}")))
    }
}

/// Loads the router described by `<dir>/router.json`.
pub fn load_router<S: Real>(dir: &Path) -> Result<ModelRouter<Network<S>>> {
    let m = RouterManifest::read(&dir.join("router.json"))?;
    let mut router = ModelRouter::new(load_network(dir.join(&m.global))?);
    for (device, file) in &m.devices {
        router = router.with_device(device.clone(), load_network(dir.join(file))?);
    }
    Ok(router)
}
