//! Temperature-softened knowledge distillation against a fixed ensemble target.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Mode, Network};
use crate::ops;
use crate::optim::{Adam, OptimConfig};
use crate::tensor::{Real, Tensor};
use crate::train::{accuracy, predict, shuffled_batches, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self { temperature: 2.0, alpha: 0.5 }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("kd.temperature", format!("must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("kd.alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {t}")))
    }
}

/// `softmax(logits / T)` along the last axis.
pub fn soften<S: Real>(logits: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    check_temperature(temperature)?;
    let axis = logits.rank().checked_sub(1).ok_or_else(|| Error::Input("soften: scalar logits".into()))?;
    ops::softmax(&logits.scale(S::from_f64(1.0 / temperature)), axis)
}

/// `T^2 KL(soften(ensemble) || soften(student))` for one logit vector, with its
/// gradient w.r.t. the student logits: `T (p_student - q_ensemble)`.
pub fn kd_term_slice<S: Real>(student: &[S], ensemble: &[S], temperature: f64) -> Result<(S, Vec<S>)> {
    check_temperature(temperature)?;
    if student.len() != ensemble.len() {
        return Err(Error::Input(format!("kd_term: student has {} logits, ensemble {}", student.len(), ensemble.len())));
    }
    let inv_t = S::from_f64(1.0 / temperature);
    let s: Vec<S> = student.iter().map(|&v| v * inv_t).collect();
    let e: Vec<S> = ensemble.iter().map(|&v| v * inv_t).collect();
    let log_q = ops::log_softmax_slice(&e);
    let log_p = ops::log_softmax_slice(&s);
    let t = S::from_f64(temperature);
    // Both sides in log space, so identical logits give exactly zero.
    let kl: S = log_q
        .iter()
        .zip(&log_p)
        .map(|(&lq, &lp)| (lq.exp(), lq - lp))
        .filter(|&(qc, _)| qc > S::ZERO)
        .map(|(qc, d)| qc * d)
        .sum();
    let grad = log_p.iter().zip(&log_q).map(|(&lp, &lq)| t * (lp.exp() - lq.exp())).collect();
    Ok((t * t * kl, grad))
}

/// Batch-mean KD term over `(N, C)` logits (or a single rank-1 vector).
pub fn kd_term<S: Real>(student: &Tensor<S>, ensemble: &Tensor<S>, temperature: f64) -> Result<S> {
    if student.shape() != ensemble.shape() {
        return Err(Error::Input(format!("kd_term: shapes {:?} and {:?} differ", student.shape(), ensemble.shape())));
    }
    let c = *student.shape().last().ok_or_else(|| Error::Input("kd_term: scalar logits".into()))?;
    let rows = student.len() / c.max(1);
    let mut total = S::ZERO;
    for (s, e) in student.data().chunks(c).zip(ensemble.data().chunks(c)) {
        total += kd_term_slice(s, e, temperature)?.0;
    }
    Ok(total / S::from_usize(rows.max(1)))
}

/// Losses of one batch and the gradient w.r.t. the student logits only.
#[derive(Debug, Clone)]
pub struct DistillBatchResult<S: Real> {
    pub loss_total: S,
    pub loss_ce: S,
    pub loss_kd: S,
    pub student_logit_grads: Tensor<S>,
}

/// `(1 - alpha) CE(student, y) + alpha T^2 KL(q_T || p_T)`, averaged over the batch.
///
/// `student` and `ensemble` are `(N, C)`; the ensemble logits are a constant target.
pub fn distill_loss<S: Real>(student: &Tensor<S>, ensemble: &Tensor<S>, labels: &[usize], cfg: &KDConfig) -> Result<DistillBatchResult<S>> {
    cfg.validate()?;
    let (n, c) = student.dims2("distill_loss")?;
    if ensemble.shape() != [n, c] {
        return Err(Error::Input(format!("distill_loss: ensemble logits {:?}, student {:?}", ensemble.shape(), student.shape())));
    }
    let (ce, g_ce) = ops::cross_entropy_batch(student, labels)?;
    let inv_n = S::ONE / S::from_usize(n);
    let mut kd = S::ZERO;
    let mut g_kd = Vec::with_capacity(n * c);
    for (s, e) in student.data().chunks(c).zip(ensemble.data().chunks(c)) {
        let (l, g) = kd_term_slice(s, e, cfg.temperature)?;
        kd += l;
        g_kd.extend(g.into_iter().map(|v| v * inv_n));
    }
    kd *= inv_n;
    let a = S::from_f64(cfg.alpha);
    let b = S::ONE - a;
    let grads = g_ce.data().iter().zip(&g_kd).map(|(&gc, &gk)| b * gc + a * gk).collect();
    Ok(DistillBatchResult {
        loss_total: b * ce + a * kd,
        loss_ce: ce,
        loss_kd: kd,
        student_logit_grads: Tensor::from_vec(&[n, c], grads)?,
    })
}

/// Mean over rows of `KL(soften(ensemble) || soften(student))` (no `T^2` factor).
pub fn mean_tempered_kl<S: Real>(student: &Tensor<S>, ensemble: &Tensor<S>, temperature: f64) -> Result<f64> {
    Ok(kd_term(student, ensemble, temperature)?.to_f64() / (temperature * temperature))
}

/// One line of the distillation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean tempered KL between ensemble and student on the training set,
    /// measured in inference mode after the epoch's updates.
    pub mean_kl: f64,
}

/// Trains `student` on `train` against precomputed ensemble logits `targets` (`(N, C)`, aligned with `train`).
///
/// The ensemble never receives gradients: it only enters through `targets`.
pub fn train_student<S: Real>(
    student: &mut Network<S>,
    targets: &Tensor<S>,
    train: &Dataset<S>,
    val: Option<&Dataset<S>>,
    kd: &KDConfig,
    opt: &OptimConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<DistillEpoch>> {
    kd.validate()?;
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::Input("distillation training set is empty".into()));
    }
    let c = student.num_outputs();
    if targets.shape() != [train.len(), c] {
        return Err(Error::Input(format!("ensemble targets have shape {:?}, expected [{}, {c}]", targets.shape(), train.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(opt.clone());
    let mut records = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let (mut tot, mut ce, mut kdl, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for idx in shuffled_batches(train.len(), opt.batch_size, &mut rng) {
            let (x, y) = train.gather(&idx);
            let target_rows: Vec<S> = idx.iter().flat_map(|&i| targets.data()[i * c..(i + 1) * c].iter().copied()).collect();
            let target = Tensor::from_vec(&[idx.len(), c], target_rows)?;
            student.zero_grad();
            let (logits, tape) = student.forward_tape(&x, Mode::Train)?;
            let r = distill_loss(&logits, &target, &y, kd)?;
            student.backward(&tape, &r.student_logit_grads)?;
            adam.step(&mut student.params_mut());
            if opt.lr > 0.0 {
                student.update_running_stats(&tape);
            }
            let n = idx.len() as f64;
            tot += r.loss_total.to_f64() * n;
            ce += r.loss_ce.to_f64() * n;
            kdl += r.loss_kd.to_f64() * n;
            hits += logits.argmax_rows().iter().zip(&y).filter(|(p, l)| p == l).count();
        }
        let n = train.len() as f64;
        let train_logits = predict(student, train, opt.batch_size)?;
        let mean_kl = mean_tempered_kl(&train_logits, targets, kd.temperature)?;
        let val_acc = match val {
            Some(v) if !v.is_empty() => accuracy(&predict(student, v, opt.batch_size)?, &v.labels),
            _ => 0.0,
        };
        let rec = DistillEpoch {
            epoch,
            loss_total: tot / n,
            loss_ce: ce / n,
            loss_kd: kdl / n,
            train_acc: hits as f64 / n,
            val_acc,
            mean_kl,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("distillation log", e))?;
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soften_halves_logits() {
        let p = soften(&Tensor::<f64>::from_f64(&[2], &[2.0, 0.0]).unwrap(), 2.0).unwrap();
        let e = 1f64.exp();
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!(soften(&p, 0.0).is_err());
    }

    #[test]
    fn swapped_binary_kl() {
        let (l, _) = kd_term_slice(&[0.0f64, 1.0], &[1.0, 0.0], 1.0).unwrap();
        // (a - b) * ln(a / b) with a = sigmoid(1), b = 1 - a
        let a = 1.0 / (1.0 + (-1f64).exp());
        let b = 1.0 - a;
        assert!((l - (a - b) * (a / b).ln()).abs() < 1e-12);
        assert!((l - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn endpoints_of_alpha() {
        let s = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let e = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 0.0, 0.2, -0.3, 0.9, 0.1]).unwrap();
        let y = [2, 1];
        let ce = ops::cross_entropy_batch(&s, &y).unwrap().0;
        let r0 = distill_loss(&s, &e, &y, &KDConfig { temperature: 2.0, alpha: 0.0 }).unwrap();
        assert_eq!(r0.loss_total, ce);
        let r1 = distill_loss(&s, &e, &y, &KDConfig { temperature: 2.0, alpha: 1.0 }).unwrap();
        assert_eq!(r1.loss_total, kd_term(&s, &e, 2.0).unwrap());
    }

    #[test]
    fn config_is_validated() {
        assert!(KDConfig { temperature: -1.0, alpha: 0.5 }.validate().is_err());
        assert!(KDConfig { temperature: 1.0, alpha: 1.5 }.validate().is_err());
    }
}
