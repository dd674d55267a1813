//! `metrics.json`: one record per phase under a versioned top level.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{PipelineError, Result};

pub const METRICS_SCHEMA: u64 = 1;
pub const METRICS_FILE: &str = "metrics.json";

pub fn read_metrics(root: &Path) -> Result<Value> {
    let path = root.join(METRICS_FILE);
    if !path.exists() {
        return Ok(json!({"schema": METRICS_SCHEMA, "phases": {}}));
    }
    let text = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
    let v: Value = serde_json::from_slice(&text).map_err(|e| PipelineError::io(&path, format!("bad metrics file: {e}")))?;
    if v.get("schema") != Some(&json!(METRICS_SCHEMA)) {
        return Err(PipelineError::io(&path, format!("unsupported metrics schema {:?}", v.get("schema"))));
    }
    Ok(v)
}

/// Replaces the record of `phase` and rewrites the file atomically.
pub fn record_phase(root: &Path, phase: &str, record: Value) -> Result<()> {
    let mut doc = read_metrics(root)?;
    let phases = doc
        .as_object_mut()
        .and_then(|o| o.entry("phases").or_insert_with(|| Value::Object(Map::new())).as_object_mut())
        .ok_or_else(|| PipelineError::io(root.join(METRICS_FILE), "`phases` is not an object"))?;
    phases.insert(phase.to_string(), record);
    let text = serde_json::to_vec_pretty(&doc).expect("metrics serialize");
    scenekd_core::archive::write_atomic(root.join(METRICS_FILE), &text)?;
    Ok(())
}
