//! Teacher pool, the z1 (sample-adaptive mixture) and z2 (per-class fusion)
//! combiners, the seven fusion modes and their joint training.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::net::{load_network, save_network, Mode, Network, StudentConfig, Tape};
use crate::ops;
use crate::optim::{Adam, OptimConfig};
use crate::param::Param;
use crate::tensor::{Real, Tensor};
use crate::train::{accuracy, concat_rows, sequential_batches, shuffled_batches, Dataset};

/// Ordered teachers sharing one class count.
#[derive(Debug, Clone)]
pub struct TeacherPool<S: Real> {
    pub teachers: Vec<Network<S>>,
    pub frozen: Vec<bool>,
}

impl<S: Real> TeacherPool<S> {
    pub fn new(teachers: Vec<Network<S>>, frozen: Vec<bool>) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Pool("a pool needs at least one teacher".into()));
        }
        if frozen.len() != teachers.len() {
            return Err(Error::Pool(format!("{} teachers but {} freeze flags", teachers.len(), frozen.len())));
        }
        let c = teachers[0].num_outputs();
        if let Some((i, t)) = teachers.iter().enumerate().find(|(_, t)| t.num_outputs() != c) {
            return Err(Error::Pool(format!("teacher {i} has {} outputs, teacher 0 has {c}", t.num_outputs())));
        }
        Ok(Self { teachers, frozen })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.teachers[0].num_outputs()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen.iter_mut().for_each(|f| *f = frozen);
    }
}

/// Stacks per-teacher `(N, C)` logits into `(N, T, C)`.
pub fn stack_teachers<S: Real>(per_teacher: &[Tensor<S>]) -> Result<Tensor<S>> {
    let (n, c) = per_teacher.first().ok_or_else(|| Error::Pool("no teacher logits".into()))?.dims2("stack_teachers")?;
    let t = per_teacher.len();
    for (i, l) in per_teacher.iter().enumerate() {
        if l.shape() != [n, c] {
            return Err(Error::Pool(format!("teacher {i} logits have shape {:?}, expected [{n}, {c}]", l.shape())));
        }
    }
    let mut data = vec![S::ZERO; n * t * c];
    for (ti, l) in per_teacher.iter().enumerate() {
        for s in 0..n {
            data[(s * t + ti) * c..(s * t + ti + 1) * c].copy_from_slice(&l.data()[s * c..(s + 1) * c]);
        }
    }
    Tensor::from_vec(&[n, t, c], data)
}

/// Teacher `t`'s `(N, C)` slice of a `(N, T, C)` stack.
pub fn teacher_slice<S: Real>(tl: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
    let [n, tn, c] = tl.shape()[..] else {
        return Err(Error::Fusion(format!("expected (N, T, C) teacher logits, got {:?}", tl.shape())));
    };
    if t >= tn {
        return Err(Error::Fusion(format!("teacher index {t} out of range for {tn} teachers")));
    }
    let data = (0..n).flat_map(|s| tl.data()[(s * tn + t) * c..(s * tn + t + 1) * c].iter().copied()).collect();
    Tensor::from_vec(&[n, c], data)
}

/// Inference logits of every teacher, `(N, T, C)`.
pub fn teacher_logits<S: Real>(pool: &TeacherPool<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
    let per: Vec<Tensor<S>> = pool.teachers.iter().map(|t| t.forward(input)).collect::<Result<_>>()?;
    stack_teachers(&per)
}

fn dims3<S: Real>(tl: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match tl.shape()[..] {
        [n, t, c] if t >= 1 => Ok((n, t, c)),
        _ => Err(Error::Fusion(format!("expected (N, T, C) teacher logits with T >= 1, got {:?}", tl.shape()))),
    }
}

/// Plain average of the teacher logits.
pub fn fuse_a1<S: Real>(tl: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, t, c) = dims3(tl)?;
    let inv = S::ONE / S::from_usize(t);
    let mut out = vec![S::ZERO; n * c];
    for s in 0..n {
        for ti in 0..t {
            let row = &tl.data()[(s * t + ti) * c..][..c];
            for (o, &v) in out[s * c..(s + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(&[n, c], out)
}

/// Mixes teacher logits with softmax(`scores`) weights; returns `(fused, weights)`.
pub fn mix_with_scores<S: Real>(scores: &Tensor<S>, tl: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, t, c) = dims3(tl)?;
    if scores.shape() != [n, t] {
        return Err(Error::Fusion(format!("z1 scores have shape {:?}, expected [{n}, {t}]", scores.shape())));
    }
    let weights = ops::softmax(scores, 1)?;
    let mut fused = vec![S::ZERO; n * c];
    for s in 0..n {
        for ti in 0..t {
            let w = weights.data()[s * t + ti];
            let row = &tl.data()[(s * t + ti) * c..][..c];
            for (o, &v) in fused[s * c..(s + 1) * c].iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c], fused)?, weights))
}

/// z1 fusion: the head scores each teacher per sample, softmax turns scores into mixture weights.
pub fn fuse_z1<S: Real>(z1: &Network<S>, input: &Tensor<S>, tl: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (_, t, _) = dims3(tl)?;
    if z1.num_outputs() != t {
        return Err(Error::Fusion(format!("z1 head emits {} scores for {t} teachers", z1.num_outputs())));
    }
    mix_with_scores(&z1.forward(input)?, tl)
}

/// z2 combiner over stacked teacher logits.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Z2Head<S: Real> {
    /// `out[n,c] = sum_t W[c,t] tl[n,t,c] + b[c]`.
    PerClassLinear { weight: Param<S>, bias: Param<S> },
    /// One ReLU hidden layer over the flattened `T*C` logits.
    Mlp { w1: Param<S>, b1: Param<S>, w2: Param<S>, b2: Param<S> },
}

/// Which [`Z2Head`] variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Z2Kind {
    PerClassLinear,
    Mlp,
}

/// Cached forward state of a [`Z2Head`].
#[derive(Debug, Clone)]
pub struct Z2Tape<S: Real> {
    tl: Tensor<S>,
    hidden_pre: Option<Tensor<S>>,
    hidden: Option<Tensor<S>>,
}

impl<S: Real> Z2Head<S> {
    /// Per-class linear head initialized to the uniform average (`W = 1/T`, `b = 0`).
    pub fn per_class_uniform(teachers: usize, classes: usize) -> Self {
        let w = Tensor::full(&[classes, teachers], S::ONE / S::from_usize(teachers));
        Self::PerClassLinear { weight: Param::new("z2.weight", w), bias: Param::zeros("z2.bias", &[classes]) }
    }

    /// MLP head with He-uniform weights drawn from `seed`.
    pub fn mlp(teachers: usize, classes: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fin = teachers * classes;
        let mut init = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
            Tensor::from_vec(&[rows, cols], data).expect("shape")
        };
        Self::Mlp {
            w1: Param::new("z2.w1", init(hidden, fin)),
            b1: Param::zeros("z2.b1", &[hidden]),
            w2: Param::new("z2.w2", init(classes, hidden)),
            b2: Param::zeros("z2.b2", &[classes]),
        }
    }

    pub fn build(kind: Z2Kind, teachers: usize, classes: usize, hidden: usize, seed: u64) -> Self {
        match kind {
            Z2Kind::PerClassLinear => Self::per_class_uniform(teachers, classes),
            Z2Kind::Mlp => Self::mlp(teachers, classes, hidden, seed),
        }
    }

    pub fn kind(&self) -> Z2Kind {
        match self {
            Self::PerClassLinear { .. } => Z2Kind::PerClassLinear,
            Self::Mlp { .. } => Z2Kind::Mlp,
        }
    }

    /// `(T, C)` this head expects.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::PerClassLinear { weight, .. } => (weight.value.shape()[1], weight.value.shape()[0]),
            Self::Mlp { w1, w2, .. } => {
                let c = w2.value.shape()[0];
                (w1.value.shape()[1] / c.max(1), c)
            }
        }
    }

    pub fn forward(&self, tl: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_tape(tl)?.0)
    }

    pub fn forward_tape(&self, tl: &Tensor<S>) -> Result<(Tensor<S>, Z2Tape<S>)> {
        let (n, t, c) = dims3(tl)?;
        if self.dims() != (t, c) {
            return Err(Error::Fusion(format!("z2 head expects (T, C) = {:?}, teacher logits give ({t}, {c})", self.dims())));
        }
        match self {
            Self::PerClassLinear { weight, bias } => {
                let (w, b) = (weight.value.data(), bias.value.data());
                let mut out = Vec::with_capacity(n * c);
                for s in 0..n {
                    for k in 0..c {
                        let mut acc = b[k];
                        for ti in 0..t {
                            acc += w[k * t + ti] * tl.data()[(s * t + ti) * c + k];
                        }
                        out.push(acc);
                    }
                }
                Ok((Tensor::from_vec(&[n, c], out)?, Z2Tape { tl: tl.clone(), hidden_pre: None, hidden: None }))
            }
            Self::Mlp { w1, b1, w2, b2 } => {
                let flat = tl.clone().reshape(&[n, t * c])?;
                let pre = ops::linear(&flat, &w1.value, Some(&b1.value))?;
                let h = ops::relu(&pre);
                let out = ops::linear(&h, &w2.value, Some(&b2.value))?;
                Ok((out, Z2Tape { tl: tl.clone(), hidden_pre: Some(pre), hidden: Some(h) }))
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the teacher logits.
    pub fn backward(&mut self, tape: &Z2Tape<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let tl = &tape.tl;
        let (n, t, c) = dims3(tl)?;
        match self {
            Self::PerClassLinear { weight, bias } => {
                let w = weight.value.data().to_vec();
                let mut gw = vec![S::ZERO; c * t];
                let mut gb = vec![S::ZERO; c];
                let mut gtl = vec![S::ZERO; n * t * c];
                for s in 0..n {
                    for k in 0..c {
                        let g = grad_out.data()[s * c + k];
                        gb[k] += g;
                        for ti in 0..t {
                            let at = (s * t + ti) * c + k;
                            gw[k * t + ti] += g * tl.data()[at];
                            gtl[at] = g * w[k * t + ti];
                        }
                    }
                }
                weight.accumulate(&Tensor::from_vec(&[c, t], gw)?);
                bias.accumulate(&Tensor::from_vec(&[c], gb)?);
                Tensor::from_vec(&[n, t, c], gtl)
            }
            Self::Mlp { w1, b1, w2, b2 } => {
                let (pre, h) = match (&tape.hidden_pre, &tape.hidden) {
                    (Some(p), Some(h)) => (p, h),
                    _ => return Err(Error::State("z2 tape was recorded by a different head kind".into())),
                };
                let (gh, gw2, gb2) = ops::linear_backward(grad_out, h, &w2.value)?;
                w2.accumulate(&gw2);
                b2.accumulate(&gb2);
                let gpre = ops::relu_backward(&gh, pre)?;
                let flat = tl.clone().reshape(&[n, t * c])?;
                let (gflat, gw1, gb1) = ops::linear_backward(&gpre, &flat, &w1.value)?;
                w1.accumulate(&gw1);
                b1.accumulate(&gb1);
                gflat.reshape(&[n, t, c])
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        match self {
            Self::PerClassLinear { weight, bias } => vec![weight, bias],
            Self::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Self::PerClassLinear { weight, bias } => vec![weight, bias],
            Self::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

/// z2 fusion; see [`Z2Head`].
pub fn fuse_z2<S: Real>(z2: &Z2Head<S>, tl: &Tensor<S>) -> Result<Tensor<S>> {
    z2.forward(tl)
}

/// The seven fusion modes. Multi-letter modes average their constituents' logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    A1,
    Z1,
    Z2,
    A1Z1,
    A1Z2,
    Z1Z2,
    A1Z1Z2,
}

/// Single-letter fusion outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Constituent {
    A1,
    Z1,
    Z2,
}

impl FusionMode {
    pub const ALL: [FusionMode; 7] = [Self::A1, Self::Z1, Self::Z2, Self::A1Z1, Self::A1Z2, Self::Z1Z2, Self::A1Z1Z2];

    pub fn name(self) -> &'static str {
        match self {
            Self::A1 => "a1",
            Self::Z1 => "z1",
            Self::Z2 => "z2",
            Self::A1Z1 => "a1z1",
            Self::A1Z2 => "a1z2",
            Self::Z1Z2 => "z1z2",
            Self::A1Z1Z2 => "a1z1z2",
        }
    }

    pub fn constituents(self) -> &'static [Constituent] {
        use Constituent::*;
        match self {
            Self::A1 => &[A1],
            Self::Z1 => &[Z1],
            Self::Z2 => &[Z2],
            Self::A1Z1 => &[A1, Z1],
            Self::A1Z2 => &[A1, Z2],
            Self::Z1Z2 => &[Z1, Z2],
            Self::A1Z1Z2 => &[A1, Z1, Z2],
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("fusion_mode", format!("unknown mode `{s}`; expected one of a1, z1, z2, a1z1, a1z2, z1z2, a1z1z2")))
    }
}

/// Constituent outputs computed once and combined per mode.
#[derive(Debug, Clone)]
pub struct FusionOutputs<S: Real> {
    pub a1: Tensor<S>,
    pub z1: Option<Tensor<S>>,
    pub z2: Option<Tensor<S>>,
}

impl<S: Real> FusionOutputs<S> {
    pub fn compute(tl: &Tensor<S>, input: &Tensor<S>, z1: Option<&Network<S>>, z2: Option<&Z2Head<S>>) -> Result<Self> {
        Ok(Self {
            a1: fuse_a1(tl)?,
            z1: z1.map(|h| fuse_z1(h, input, tl).map(|r| r.0)).transpose()?,
            z2: z2.map(|h| fuse_z2(h, tl)).transpose()?,
        })
    }

    fn part(&self, c: Constituent) -> Result<&Tensor<S>> {
        let missing = |name: &str| Error::config("fusion_mode", format!("mode needs the {name} head, which is not available"));
        match c {
            Constituent::A1 => Ok(&self.a1),
            Constituent::Z1 => self.z1.as_ref().ok_or_else(|| missing("z1")),
            Constituent::Z2 => self.z2.as_ref().ok_or_else(|| missing("z2")),
        }
    }

    /// Mean of the constituents of `mode`.
    pub fn mode(&self, mode: FusionMode) -> Result<Tensor<S>> {
        let parts = mode.constituents();
        let mut out = self.part(parts[0])?.clone();
        for &p in &parts[1..] {
            out.add_assign(self.part(p)?)?;
        }
        Ok(out.scale(S::ONE / S::from_usize(parts.len())))
    }
}

/// Fused logits for `mode`.
pub fn fuse<S: Real>(
    mode: FusionMode,
    tl: &Tensor<S>,
    input: &Tensor<S>,
    z1: Option<&Network<S>>,
    z2: Option<&Z2Head<S>>,
) -> Result<Tensor<S>> {
    let need = |c| mode.constituents().contains(&c);
    let outs = FusionOutputs::compute(
        tl,
        input,
        z1.filter(|_| need(Constituent::Z1)),
        z2.filter(|_| need(Constituent::Z2)),
    )?;
    outs.mode(mode)
}

/// Joint loss value and the gradients w.r.t. both combiner outputs.
#[derive(Debug, Clone)]
pub struct CombinerLoss<S: Real> {
    pub total: S,
    pub z1_term: S,
    pub z2_term: S,
    pub grad_z1: Tensor<S>,
    pub grad_z2: Tensor<S>,
}

/// `mean CE(z1_fused, y) + lambda * mean CE(z2_out, y)`.
pub fn combiner_loss<S: Real>(z1_fused: &Tensor<S>, z2_out: &Tensor<S>, labels: &[usize], lambda: f64) -> Result<CombinerLoss<S>> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let (l1, g1) = ops::cross_entropy_batch(z1_fused, labels)?;
    let (l2, g2) = ops::cross_entropy_batch(z2_out, labels)?;
    let lam = S::from_f64(lambda);
    Ok(CombinerLoss { total: l1 + lam * l2, z1_term: l1, z2_term: l2, grad_z1: g1, grad_z2: g2.scale(lam) })
}

/// Joint-phase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub lambda: f64,
    pub freeze_teachers: bool,
    pub z2_kind: Z2Kind,
    pub z2_hidden: usize,
    pub optimizer: OptimConfig,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self { lambda: 1.0, freeze_teachers: false, z2_kind: Z2Kind::PerClassLinear, z2_hidden: 32, optimizer: OptimConfig::default() }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("combiner.lambda", "must be >= 0"));
        }
        if self.z2_kind == Z2Kind::Mlp && self.z2_hidden == 0 {
            return Err(Error::config("combiner.z2_hidden", "must be positive for the mlp head"));
        }
        self.optimizer.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config { field: format!("combiner.{field}"), reason },
            other => other,
        })
    }
}

/// Per-epoch record of the joint phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub loss_z1: f64,
    pub loss_z2: f64,
    /// Training-set accuracy of each fusion mode, computed during the epoch.
    pub accuracy: BTreeMap<String, f64>,
}

/// Builds the z1 head: the given backbone with one zero-initialized output per teacher.
pub fn build_z1_head<S: Real>(backbone: &StudentConfig, teachers: usize, seed: u64) -> Result<Network<S>> {
    let mut net = Network::build(&backbone.clone().with_outputs(teachers), seed)?;
    net.zero_head();
    Ok(net)
}

fn collect_params<'a, S: Real>(
    pool: &'a mut TeacherPool<S>,
    z1: &'a mut Network<S>,
    z2: &'a mut Z2Head<S>,
) -> Vec<&'a mut Param<S>> {
    let mut ps = z1.params_mut();
    ps.extend(z2.params_mut());
    for (t, &frozen) in pool.teachers.iter_mut().zip(&pool.frozen) {
        if !frozen {
            ps.extend(t.params_mut());
        }
    }
    ps
}

/// Trains z1 and z2 (and every non-frozen teacher) on [`combiner_loss`].
pub fn train_combiners<S: Real>(
    pool: &mut TeacherPool<S>,
    z1: &mut Network<S>,
    z2: &mut Z2Head<S>,
    data: &Dataset<S>,
    cfg: &CombinerConfig,
    seed: u64,
) -> Result<Vec<CombinerEpoch>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("combiner training set is empty".into()));
    }
    let (t, c) = (pool.len(), pool.num_classes());
    if z1.num_outputs() != t {
        return Err(Error::Fusion(format!("z1 head emits {} scores for {t} teachers", z1.num_outputs())));
    }
    if z2.dims() != (t, c) {
        return Err(Error::Fusion(format!("z2 head expects {:?}, pool is ({t}, {c})", z2.dims())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut log = Vec::new();
    for epoch in 1..=cfg.optimizer.epochs {
        let (mut sum, mut sum1, mut sum2) = (0.0, 0.0, 0.0);
        let mut hits: BTreeMap<FusionMode, usize> = BTreeMap::new();
        for idx in shuffled_batches(data.len(), cfg.optimizer.batch_size, &mut rng) {
            let (x, y) = data.gather(&idx);
            let n = idx.len();
            pool.teachers.iter_mut().for_each(Network::zero_grad);
            z1.zero_grad();
            z2.zero_grad();

            let mut tapes: Vec<Option<Tape<S>>> = Vec::with_capacity(t);
            let mut per = Vec::with_capacity(t);
            for (teacher, &frozen) in pool.teachers.iter().zip(&pool.frozen) {
                if frozen {
                    per.push(teacher.forward(&x)?);
                    tapes.push(None);
                } else {
                    let (l, tape) = teacher.forward_tape(&x, Mode::Train)?;
                    per.push(l);
                    tapes.push(Some(tape));
                }
            }
            let tl = stack_teachers(&per)?;
            let (scores, z1_tape) = z1.forward_tape(&x, Mode::Train)?;
            let (fused1, weights) = mix_with_scores(&scores, &tl)?;
            let (out2, z2_tape) = z2.forward_tape(&tl)?;
            let loss = combiner_loss(&fused1, &out2, &y, cfg.lambda)?;

            // d fused1 / d (weights, tl)
            let mut g_w = vec![S::ZERO; n * t];
            let mut g_tl = vec![S::ZERO; n * t * c];
            for s in 0..n {
                let g = &loss.grad_z1.data()[s * c..(s + 1) * c];
                for ti in 0..t {
                    let row = &tl.data()[(s * t + ti) * c..][..c];
                    let w = weights.data()[s * t + ti];
                    g_w[s * t + ti] = g.iter().zip(row).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        g_tl[(s * t + ti) * c + k] = w * g[k];
                    }
                }
            }
            let g_scores = ops::softmax_backward(&Tensor::from_vec(&[n, t], g_w)?, &weights, 1)?;
            z1.backward(&z1_tape, &g_scores)?;
            let mut g_tl = Tensor::from_vec(&[n, t, c], g_tl)?;
            g_tl.add_assign(&z2.backward(&z2_tape, &loss.grad_z2)?)?;
            for (ti, (teacher, tape)) in pool.teachers.iter_mut().zip(&tapes).enumerate() {
                if let Some(tape) = tape {
                    teacher.backward(tape, &teacher_slice(&g_tl, ti)?)?;
                }
            }
            adam.step(&mut collect_params(pool, z1, z2));
            if cfg.optimizer.lr > 0.0 {
                z1.update_running_stats(&z1_tape);
                for (teacher, tape) in pool.teachers.iter_mut().zip(&tapes) {
                    if let Some(tape) = tape {
                        teacher.update_running_stats(tape);
                    }
                }
            }

            sum += loss.total.to_f64() * n as f64;
            sum1 += loss.z1_term.to_f64() * n as f64;
            sum2 += loss.z2_term.to_f64() * n as f64;
            let outs = FusionOutputs { a1: fuse_a1(&tl)?, z1: Some(fused1), z2: Some(out2) };
            for mode in FusionMode::ALL {
                let pred = outs.mode(mode)?.argmax_rows();
                *hits.entry(mode).or_default() += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
            }
        }
        let total = data.len() as f64;
        log.push(CombinerEpoch {
            epoch,
            loss: sum / total,
            loss_z1: sum1 / total,
            loss_z2: sum2 / total,
            accuracy: hits.into_iter().map(|(m, h)| (m.name().to_string(), h as f64 / total)).collect(),
        });
    }
    Ok(log)
}

/// Inference-mode constituents for a whole dataset.
pub fn ensemble_outputs<S: Real>(
    pool: &TeacherPool<S>,
    z1: Option<&Network<S>>,
    z2: Option<&Z2Head<S>>,
    data: &Dataset<S>,
    batch_size: usize,
) -> Result<FusionOutputs<S>> {
    let (mut a1, mut o1, mut o2) = (Vec::new(), Vec::new(), Vec::new());
    for idx in sequential_batches(data.len(), batch_size) {
        let (x, _) = data.gather(&idx);
        let tl = teacher_logits(pool, &x)?;
        let outs = FusionOutputs::compute(&tl, &x, z1, z2)?;
        a1.push(outs.a1);
        o1.extend(outs.z1);
        o2.extend(outs.z2);
    }
    Ok(FusionOutputs {
        a1: concat_rows(&a1)?,
        z1: z1.map(|_| concat_rows(&o1)).transpose()?,
        z2: z2.map(|_| concat_rows(&o2)).transpose()?,
    })
}

/// Accuracy of every fusion mode, keyed by mode name.
pub fn fusion_table<S: Real>(outs: &FusionOutputs<S>, labels: &[usize]) -> Result<BTreeMap<String, f64>> {
    FusionMode::ALL.iter().map(|&m| Ok((m.name().to_string(), accuracy(&outs.mode(m)?, labels)))).collect()
}

/// Manifest written next to a saved pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub teachers: usize,
    pub classes: usize,
    pub fusion_mode: FusionMode,
    pub lambda: f64,
    pub frozen: Vec<bool>,
    pub teacher_files: Vec<String>,
    pub combiner_file: Option<String>,
    pub z2_kind: Option<Z2Kind>,
}

/// Writes `pool.json`, one checkpoint per teacher and (optionally) the combiners into `dir`.
pub fn save_pool<S: Real>(
    dir: impl AsRef<Path>,
    pool: &TeacherPool<S>,
    combiners: Option<(&Network<S>, &Z2Head<S>)>,
    fusion_mode: FusionMode,
    lambda: f64,
) -> Result<PoolManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, t) in pool.teachers.iter().enumerate() {
        let name = format!("teacher{i}.skar");
        save_network(t, dir.join(&name))?;
        files.push(name);
    }
    let combiner_file = match combiners {
        Some((z1, z2)) => {
            let mut w = ArchiveWriter::new();
            crate::net::network_to_writer(z1, "z1.", &mut w)?;
            for p in z2.params() {
                w.add(p.name.clone(), &p.value)?;
            }
            let meta = json!({"kind": "combiners", "z1_config": z1.config(), "z2_kind": z2.kind(), "z2_dims": z2.dims()});
            w.write(dir.join("combiners.skar"), meta)?;
            Some("combiners.skar".to_string())
        }
        None => None,
    };
    let manifest = PoolManifest {
        teachers: pool.len(),
        classes: pool.num_classes(),
        fusion_mode,
        lambda,
        frozen: pool.frozen.clone(),
        teacher_files: files,
        combiner_file,
        z2_kind: combiners.map(|(_, z2)| z2.kind()),
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    crate::archive::write_atomic(dir.join("pool.json"), &text)?;
    Ok(manifest)
}

/// A pool restored by [`load_pool`], with combiners if they were saved.
pub struct LoadedPool<S: Real> {
    pub manifest: PoolManifest,
    pub pool: TeacherPool<S>,
    pub z1: Option<Network<S>>,
    pub z2: Option<Z2Head<S>>,
}

pub fn load_pool<S: Real>(dir: impl AsRef<Path>) -> Result<LoadedPool<S>> {
    let dir = dir.as_ref();
    let path = dir.join("pool.json");
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PoolManifest = serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let teachers = manifest.teacher_files.iter().map(|f| load_network(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let pool = TeacherPool::new(teachers, manifest.frozen.clone())?;
    let (mut z1, mut z2) = (None, None);
    if let Some(f) = &manifest.combiner_file {
        let ar = Archive::read(dir.join(f))?;
        let cfg: StudentConfig = serde_json::from_value(ar.meta["z1_config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let kind: Z2Kind = serde_json::from_value(ar.meta["z2_kind"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        z1 = Some(crate::net::network_from_archive(&ar, &cfg, "z1.")?);
        let mut head = match kind {
            Z2Kind::PerClassLinear => Z2Head::per_class_uniform(pool.len(), pool.num_classes()),
            Z2Kind::Mlp => {
                let hidden = ar.get("z2.b1")?.shape()[0];
                Z2Head::mlp(pool.len(), pool.num_classes(), hidden, 0)
            }
        };
        for p in head.params_mut() {
            let t = ar.get(&p.name)?.clone().into_real::<S>()?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("{}: shape {:?} != {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        z2 = Some(head);
    }
    Ok(LoadedPool { manifest, pool, z1, z2 })
}
