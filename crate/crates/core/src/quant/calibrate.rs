use log::warn;

use super::params::QuantParams;
use crate::error::{Error, Result};
use crate::net::{activation_points, Event, Network};
use crate::tensor::{Real, Tensor};

/// Running min/max of every activation point, observed on float inference.
#[derive(Debug, Clone)]
pub struct Calibrator {
    names: Vec<String>,
    min: Vec<f64>,
    max: Vec<f64>,
    batches: usize,
}

/// Activation parameters produced by [`Calibrator::finish`].
#[derive(Debug, Clone)]
pub struct Calibration {
    pub names: Vec<String>,
    pub params: Vec<QuantParams>,
    /// Points whose observed range was empty and got the floored scale.
    pub degenerate: Vec<String>,
}

impl Calibrator {
    pub fn new<S: Real>(net: &Network<S>) -> Self {
        let names = activation_points(net.config());
        let n = names.len();
        Self { names, min: vec![f64::INFINITY; n], max: vec![f64::NEG_INFINITY; n], batches: 0 }
    }

    pub fn observe<S: Real>(&mut self, net: &Network<S>, batch: &Tensor<S>) -> Result<()> {
        let (min, max) = (&mut self.min, &mut self.max);
        net.forward_observed(batch, &mut |ev| {
            if let Event::Activation { index, value, .. } = ev {
                for v in value.data() {
                    let v = v.to_f64();
                    min[index] = min[index].min(v);
                    max[index] = max[index].max(v);
                }
            }
        })?;
        self.batches += 1;
        Ok(())
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn range(&self, index: usize) -> (f64, f64) {
        (self.min[index], self.max[index])
    }

    pub fn finish(&self) -> Result<Calibration> {
        if self.batches == 0 {
            return Err(Error::State("calibration needs at least one batch".into()));
        }
        let mut params = Vec::with_capacity(self.names.len());
        let mut degenerate = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let (qp, floored) = QuantParams::from_range(self.min[i], self.max[i]);
            if floored {
                warn!("activation `{name}` has an empty range; scale floored");
                degenerate.push(name.clone());
            }
            params.push(qp);
        }
        Ok(Calibration { names: self.names.clone(), params, degenerate })
    }
}
