//! Network checkpoints stored as an [`archive`](crate::archive).

use std::path::Path;

use serde_json::json;

use super::config::StudentConfig;
use super::network::Network;
use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_KIND: &str = "network";

pub fn network_to_writer<S: Real>(net: &Network<S>, prefix: &str, w: &mut ArchiveWriter) -> Result<()> {
    for p in net.params() {
        w.add(format!("{prefix}{}", p.name), &p.value)?;
    }
    for (name, t) in net.buffers() {
        w.add(format!("{prefix}{name}"), t)?;
    }
    Ok(())
}

/// Restores a network whose tensors were written under `prefix`.
pub fn network_from_archive<S: Real>(ar: &Archive, config: &StudentConfig, prefix: &str) -> Result<Network<S>> {
    let mut net = Network::<S>::build(config, 0)?;
    for p in net.params_mut() {
        let t = ar.get(&format!("{prefix}{}", p.name))?.clone().into_real::<S>()?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!("{}: shape {:?} != {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t;
    }
    for (name, buf) in net.buffers_mut() {
        let t = ar.get(&format!("{prefix}{name}"))?.clone().into_real::<S>()?;
        if t.shape() != buf.shape() {
            return Err(Error::Format(format!("{name}: shape mismatch")));
        }
        *buf = t;
    }
    Ok(net)
}

pub fn save_network<S: Real>(net: &Network<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArchiveWriter::new();
    network_to_writer(net, "", &mut w)?;
    w.write(path, json!({"kind": CHECKPOINT_KIND, "config": net.config()}))
}

pub fn load_network<S: Real>(path: impl AsRef<Path>) -> Result<Network<S>> {
    let ar = Archive::read(path)?;
    if ar.meta["kind"] != CHECKPOINT_KIND {
        return Err(Error::Format("archive is not a network checkpoint".into()));
    }
    let config: StudentConfig =
        serde_json::from_value(ar.meta["config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    network_from_archive(&ar, &config, "")
}
