//! Parameter and MAC budget verdicts.

use serde::{Deserialize, Serialize};

use scenekd_core::net::{count_complexity, ComplexityReport, StudentConfig};

use crate::config::ExperimentConfig;
use crate::error::{PipelineError, Result};
use crate::phases::teacher_configs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityVerdict {
    pub model: String,
    pub params: u64,
    pub macs: u64,
    pub param_cap: u64,
    pub mac_cap: u64,
    pub params_ok: bool,
    pub macs_ok: bool,
    pub pass: bool,
    pub report: ComplexityReport,
}

impl ComplexityVerdict {
    pub fn summary(&self) -> String {
        format!(
            "{}: params {} (cap {}) macs {} (cap {}) -> {}",
            self.model,
            self.params,
            self.param_cap,
            self.macs,
            self.mac_cap,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

fn verdict(model: String, net: &StudentConfig, cfg: &ExperimentConfig) -> Result<ComplexityVerdict> {
    let report = count_complexity(net, &[1, cfg.mel.n_mels, cfg.mel.frames])?;
    let (param_cap, mac_cap) = (cfg.budget.param_cap, cfg.budget.mac_cap);
    let params_ok = report.params <= param_cap;
    let macs_ok = report.macs <= mac_cap;
    Ok(ComplexityVerdict {
        model,
        params: report.params,
        macs: report.macs,
        param_cap,
        mac_cap,
        params_ok,
        macs_ok,
        pass: params_ok && macs_ok,
        report,
    })
}

/// Budget verdict for the student, or for teacher `teacher` of the configured pool.
pub fn report_complexity(cfg: &ExperimentConfig, teacher: Option<usize>) -> Result<ComplexityVerdict> {
    match teacher {
        None => verdict("student".into(), &cfg.student, cfg),
        Some(i) => {
            let teachers = teacher_configs(cfg)?;
            let (_, net) = teachers
                .get(i)
                .ok_or_else(|| PipelineError::Config(format!("teacher {i} out of range (pool has {})", teachers.len())))?;
            verdict(format!("teacher{i}"), net, cfg)
        }
    }
}
