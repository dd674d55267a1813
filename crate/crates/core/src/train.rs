//! In-memory labeled datasets and the supervised training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Mode, Network};
use crate::ops;
use crate::optim::{Adam, OptimConfig};
use crate::quant::{Calibrator, QuantModel};
use crate::tensor::{Real, Tensor};

/// Feature maps stacked as `(N, C, H, W)` with one label and device tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S: Real> {
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    pub devices: Vec<String>,
}

impl<S: Real> Dataset<S> {
    pub fn new(features: Tensor<S>, labels: Vec<usize>, devices: Vec<String>) -> Result<Self> {
        let (n, _, _, _) = features.dims4("dataset")?;
        if labels.len() != n || devices.len() != n {
            return Err(Error::Input(format!("{n} feature maps but {} labels and {} device tags", labels.len(), devices.len())));
        }
        Ok(Self { features, labels, devices })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Stacks the samples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let t = Tensor::from_vec(&shape, data).expect("gathered shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.gather(indices);
        Self { features, labels, devices: indices.iter().map(|&i| self.devices[i].clone()).collect() }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset { features: self.features.cast(), labels: self.labels.clone(), devices: self.devices.clone() }
    }
}

/// Contiguous batches of `0..n`, in order.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Batches over a permutation of `0..n` drawn from `rng`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Inference-mode logits for every sample, `(N, outputs)`.
pub fn predict<S: Real>(net: &Network<S>, data: &Dataset<S>, batch_size: usize) -> Result<Tensor<S>> {
    let mut parts = Vec::new();
    for b in sequential_batches(data.len(), batch_size) {
        parts.push(net.forward(&data.gather(&b).0)?);
    }
    concat_rows(&parts)
}

/// Integer-inference logits for every sample.
pub fn predict_quantized<S: Real>(model: &QuantModel, data: &Dataset<S>, batch_size: usize) -> Result<Tensor<f64>> {
    let mut parts = Vec::new();
    for b in sequential_batches(data.len(), batch_size) {
        parts.push(model.forward(&data.gather(&b).0)?);
    }
    concat_rows(&parts)
}

/// Concatenates `(n_i, C)` tensors along the first axis.
pub fn concat_rows<S: Real>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    let cols = parts.first().map_or(0, |p| p.shape()[1]);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let (n, c) = p.dims2("concat_rows")?;
        if c != cols {
            return Err(Error::Dimension { op: "concat_rows", axis: "column (1)".into(), expected: cols, got: c });
        }
        rows += n;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[rows, cols], data)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<S: Real>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Cross-entropy training with Adam.
///
/// `mode` selects how norm layers behave while training: [`Mode::Train`] uses
/// batch statistics and updates the running averages, [`Mode::Eval`] keeps them
/// frozen (used for quantization-aware fine-tuning).
pub fn train_classifier<S: Real>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    opt: &OptimConfig,
    mode: Mode,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(opt.clone());
    let mut logs = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for idx in shuffled_batches(data.len(), opt.batch_size, &mut rng) {
            let (x, y) = data.gather(&idx);
            net.zero_grad();
            let (logits, tape) = net.forward_tape(&x, mode)?;
            let (loss, grad) = ops::cross_entropy_batch(&logits, &y)?;
            net.backward(&tape, &grad)?;
            adam.step(&mut net.params_mut());
            if mode == Mode::Train && opt.lr > 0.0 {
                net.update_running_stats(&tape);
            }
            loss_sum += loss.to_f64() * idx.len() as f64;
            hits += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        logs.push(EpochLog { epoch, loss: loss_sum / data.len() as f64, train_acc: hits as f64 / data.len() as f64 });
    }
    Ok(logs)
}

/// Observes activation ranges of `net` over `data` in batches.
pub fn calibrate_network<S: Real>(net: &Network<S>, data: &Dataset<S>, batch_size: usize) -> Result<Calibrator> {
    let mut cal = Calibrator::new(net);
    for b in sequential_batches(data.len(), batch_size) {
        cal.observe(net, &data.gather(&b).0)?;
    }
    Ok(cal)
}

/// Quantization-aware fine-tuning: fake quantization at every activation point
/// using `calibration`-derived parameters, norm statistics frozen.
pub fn qat_finetune<S: Real>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    calibration: &crate::quant::Calibration,
    opt: &OptimConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    net.set_fake_quant(Some(calibration.params.clone()))?;
    let logs = train_classifier(net, data, opt, Mode::Eval, seed);
    net.set_fake_quant(None)?;
    logs
}
