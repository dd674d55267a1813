//! Instantiated backbone with explicit forward/backward passes.
//!
//! Layer order: stem conv-norm-relu, then per block
//! `expand(1x1)-norm-relu -> depthwise-norm-relu -> project(1x1)-norm
//! (+ residual) -> GRN`, then global average pooling and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BlockConfig, StudentConfig};
use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, ConvSpec, NORM_EPS};
use crate::param::Param;
use crate::quant::{fake_quant, fake_quant_backward, QuantParams};
use crate::tensor::{Real, Tensor};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every norm layer.
    Train,
    /// Running statistics.
    Eval,
}

/// Callbacks emitted while a forward pass runs.
pub enum Event<'a, S: Real> {
    Conv { name: &'a str, spec: &'a ConvSpec, input: &'a Tensor<S>, weight: &'a Tensor<S>, output: &'a Tensor<S> },
    Linear { name: &'a str, input: &'a Tensor<S>, weight: &'a Tensor<S>, output: &'a Tensor<S> },
    /// A tensor that the integer path stores as int8 (index into [`activation_points`]).
    Activation { index: usize, name: &'a str, value: &'a Tensor<S> },
}

type Observer<'o, S> = Option<&'o mut dyn FnMut(Event<'_, S>)>;

fn emit<S: Real>(obs: &mut Observer<'_, S>, ev: Event<'_, S>) {
    if let Some(f) = obs.as_mut() {
        f(ev);
    }
}

/// Names of the quantization points in forward order.
pub fn activation_points(config: &StudentConfig) -> Vec<String> {
    let mut names = vec!["input".to_string(), "stem".to_string()];
    for (i, b) in config.blocks().enumerate() {
        names.push(format!("block{i}.expand"));
        names.push(format!("block{i}.depthwise"));
        names.push(format!("block{i}.project"));
        if b.has_residual() {
            names.push(format!("block{i}.add"));
        }
        names.push(format!("block{i}.grn"));
    }
    names
}

fn in_layer(layer: &str, e: Error) -> Error {
    match e {
        Error::Dimension { op, axis, expected, got } => {
            Error::Dimension { op, axis: format!("{layer}: {axis}"), expected, got }
        }
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<S: Real> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Real> BatchNorm<S> {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[c], S::ONE)),
            beta: Param::zeros(format!("{prefix}.beta"), &[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], S::ONE),
        }
    }

    fn update_running(&mut self, stats: &BatchStats<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        let keep = S::ONE - m;
        let unbias = if stats.count > 1 {
            S::from_usize(stats.count) / S::from_usize(stats.count - 1)
        } else {
            S::ONE
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Bias-free convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit<S: Real> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Param<S>,
    pub norm: BatchNorm<S>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
struct UnitCache<S: Real> {
    input: Tensor<S>,
    stats: Option<BatchStats<S>>,
    conv_out: Tensor<S>,
    norm_out: Tensor<S>,
    fq_mask: Option<Vec<bool>>,
}

impl<S: Real> ConvUnit<S> {
    fn new(name: String, spec: ConvSpec, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels / spec.groups;
        let weight = he_uniform(&spec.weight_shape(), fan_in, rng);
        Self {
            weight: Param::new(format!("{name}.conv.weight"), weight),
            norm: BatchNorm::new(&format!("{name}.norm"), spec.out_channels),
            name,
            spec,
            relu,
        }
    }

    fn forward(&self, x: Tensor<S>, mode: Mode, obs: &mut Observer<'_, S>) -> Result<(Tensor<S>, UnitCache<S>)> {
        let conv_out = ops::conv2d(&x, &self.weight.value, None, &self.spec).map_err(|e| in_layer(&self.name, e))?;
        emit(obs, Event::Conv { name: &self.name, spec: &self.spec, input: &x, weight: &self.weight.value, output: &conv_out });
        let n = &self.norm;
        let (norm_out, stats) = match mode {
            Mode::Train => {
                let (y, s) = ops::batch_norm_train(&conv_out, &n.gamma.value, &n.beta.value, NORM_EPS)?;
                (y, Some(s))
            }
            Mode::Eval => (
                ops::batch_norm(&conv_out, &n.running_mean, &n.running_var, &n.gamma.value, &n.beta.value, NORM_EPS)?,
                None,
            ),
        };
        let out = if self.relu { ops::relu(&norm_out) } else { norm_out.clone() };
        Ok((out, UnitCache { input: x, stats, conv_out, norm_out, fq_mask: None }))
    }

    fn backward(&mut self, cache: &UnitCache<S>, grad: Tensor<S>) -> Result<Tensor<S>> {
        let mut g = match &cache.fq_mask {
            Some(mask) => fake_quant_backward(&grad, mask),
            None => grad,
        };
        if self.relu {
            g = ops::relu_backward(&g, &cache.norm_out)?;
        }
        let n = &mut self.norm;
        let (g_conv, g_gamma, g_beta) = match &cache.stats {
            Some(stats) => ops::batch_norm_train_backward(&g, &cache.conv_out, stats, &n.gamma.value, NORM_EPS)?,
            None => ops::batch_norm_backward(&g, &cache.conv_out, &n.running_mean, &n.running_var, &n.gamma.value, NORM_EPS)?,
        };
        n.gamma.accumulate(&g_gamma);
        n.beta.accumulate(&g_beta);
        let grads = ops::conv2d_backward(&g_conv, &cache.input, &self.weight.value, &self.spec)?;
        self.weight.accumulate(&grads.weight);
        Ok(grads.input)
    }

    fn params(&self) -> [&Param<S>; 3] {
        [&self.weight, &self.norm.gamma, &self.norm.beta]
    }

    fn params_mut(&mut self) -> [&mut Param<S>; 3] {
        [&mut self.weight, &mut self.norm.gamma, &mut self.norm.beta]
    }
}

#[derive(Debug, Clone)]
pub struct Grn<S: Real> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

#[derive(Debug, Clone)]
pub struct Block<S: Real> {
    pub config: BlockConfig,
    pub expand: ConvUnit<S>,
    pub depthwise: ConvUnit<S>,
    pub project: ConvUnit<S>,
    pub grn: Grn<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S: Real> {
    expand: UnitCache<S>,
    depthwise: UnitCache<S>,
    project: UnitCache<S>,
    add_mask: Option<Vec<bool>>,
    grn_input: Tensor<S>,
    grn_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Linear<S: Real> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

/// Saved activations from a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape<S: Real> {
    mode: Mode,
    input_mask: Option<Vec<bool>>,
    stem: UnitCache<S>,
    blocks: Vec<BlockCache<S>>,
    pool_input_shape: Vec<usize>,
    head_input: Tensor<S>,
}

impl<S: Real> Tape<S> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// A student (or teacher, or z1 head) backbone.
#[derive(Debug, Clone)]
pub struct Network<S: Real> {
    config: StudentConfig,
    pub stem: ConvUnit<S>,
    pub blocks: Vec<Block<S>>,
    pub head: Linear<S>,
    qat: Option<Vec<QuantParams>>,
}

fn he_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

impl<S: Real> Network<S> {
    /// Builds the network with deterministic He-uniform initialization from `seed`.
    pub fn build(config: &StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvUnit::new("stem".into(), config.stem, true, &mut rng);
        let blocks = config
            .blocks()
            .enumerate()
            .map(|(i, b)| Block {
                config: b.clone(),
                expand: ConvUnit::new(format!("block{i}.expand"), b.expand_spec(), true, &mut rng),
                depthwise: ConvUnit::new(format!("block{i}.depthwise"), b.depthwise_spec(), true, &mut rng),
                project: ConvUnit::new(format!("block{i}.project"), b.project_spec(), false, &mut rng),
                grn: Grn {
                    gamma: Param::zeros(format!("block{i}.grn.gamma"), &[b.out_channels]),
                    beta: Param::zeros(format!("block{i}.grn.beta"), &[b.out_channels]),
                },
            })
            .collect();
        let fin = config.final_width();
        let head = Linear {
            weight: Param::new("head.weight", he_uniform(&[config.num_outputs, fin], fin, &mut rng)),
            bias: Param::zeros("head.bias", &[config.num_outputs]),
        };
        Ok(Self { config: config.clone(), stem, blocks, head, qat: None })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn num_outputs(&self) -> usize {
        self.config.num_outputs
    }

    /// Zeroes the classification head so every output starts equal.
    pub fn zero_head(&mut self) {
        self.head.weight.value.data_mut().fill(S::ZERO);
        self.head.bias.value.data_mut().fill(S::ZERO);
    }

    /// Enables fake quantization at every activation point (see [`activation_points`]).
    pub fn set_fake_quant(&mut self, params: Option<Vec<QuantParams>>) -> Result<()> {
        if let Some(p) = &params {
            let expected = activation_points(&self.config).len();
            if p.len() != expected {
                return Err(Error::Dimension { op: "set_fake_quant", axis: "activation points".into(), expected, got: p.len() });
            }
        }
        self.qat = params;
        Ok(())
    }

    pub fn fake_quant_params(&self) -> Option<&[QuantParams]> {
        self.qat.as_deref()
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.run(input, Mode::Eval, None)?.0)
    }

    /// Forward pass that keeps everything needed for [`Network::backward`].
    pub fn forward_tape(&self, input: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Tape<S>)> {
        self.run(input, mode, None)
    }

    /// Inference-mode forward pass reporting every conv, linear and activation point.
    pub fn forward_observed(&self, input: &Tensor<S>, observer: &mut dyn FnMut(Event<'_, S>)) -> Result<Tensor<S>> {
        Ok(self.run(input, Mode::Eval, Some(observer))?.0)
    }

    fn point(&self, index: &mut usize, name: &str, value: Tensor<S>, obs: &mut Observer<'_, S>) -> (Tensor<S>, Option<Vec<bool>>) {
        emit(obs, Event::Activation { index: *index, name, value: &value });
        let out = match &self.qat {
            Some(qps) => {
                let (y, mask) = fake_quant(&value, &qps[*index]);
                (y, Some(mask))
            }
            None => (value, None),
        };
        *index += 1;
        out
    }

    fn run(&self, input: &Tensor<S>, mode: Mode, mut obs: Observer<'_, S>) -> Result<(Tensor<S>, Tape<S>)> {
        let (_, c, _, _) = input.dims4("network")?;
        if c != self.config.input_channels {
            return Err(Error::Dimension { op: "network", axis: "input channel (1)".into(), expected: self.config.input_channels, got: c });
        }
        let mut idx = 0;
        let (x, input_mask) = self.point(&mut idx, "input", input.clone(), &mut obs);
        let (x, mut stem) = self.stem.forward(x, mode, &mut obs)?;
        let (mut x, mask) = self.point(&mut idx, "stem", x, &mut obs);
        stem.fq_mask = mask;

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let residual = b.config.has_residual().then(|| x.clone());
            let (h, mut expand) = b.expand.forward(x, mode, &mut obs)?;
            let (h, m) = self.point(&mut idx, &b.expand.name, h, &mut obs);
            expand.fq_mask = m;
            let (h, mut depthwise) = b.depthwise.forward(h, mode, &mut obs)?;
            let (h, m) = self.point(&mut idx, &b.depthwise.name, h, &mut obs);
            depthwise.fq_mask = m;
            let (h, mut project) = b.project.forward(h, mode, &mut obs)?;
            let (mut h, m) = self.point(&mut idx, &b.project.name, h, &mut obs);
            project.fq_mask = m;
            let mut add_mask = None;
            if let Some(r) = residual {
                h.add_assign(&r)?;
                let (sum, m) = self.point(&mut idx, &format!("block{i}.add"), h, &mut obs);
                h = sum;
                add_mask = m;
            }
            let y = ops::grn(&h, &b.grn.gamma.value, &b.grn.beta.value, NORM_EPS)?;
            let (y, grn_mask) = self.point(&mut idx, &format!("block{i}.grn"), y, &mut obs);
            blocks.push(BlockCache { expand, depthwise, project, add_mask, grn_input: h, grn_mask });
            x = y;
        }

        let pool_input_shape = x.shape().to_vec();
        let pooled = ops::global_avg_pool(&x)?;
        let logits = ops::linear(&pooled, &self.head.weight.value, Some(&self.head.bias.value))?;
        emit(&mut obs, Event::Linear { name: "head", input: &pooled, weight: &self.head.weight.value, output: &logits });
        Ok((logits, Tape { mode, input_mask, stem, blocks, pool_input_shape, head_input: pooled }))
    }

    /// Accumulates parameter gradients for `grad_logits` and returns the input gradient.
    pub fn backward(&mut self, tape: &Tape<S>, grad_logits: &Tensor<S>) -> Result<Tensor<S>> {
        let (gp, gw, gb) = ops::linear_backward(grad_logits, &tape.head_input, &self.head.weight.value)?;
        self.head.weight.accumulate(&gw);
        self.head.bias.accumulate(&gb);
        let mut g = ops::global_avg_pool_backward(&gp, &tape.pool_input_shape)?;

        for (b, cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            if let Some(mask) = &cache.grn_mask {
                g = fake_quant_backward(&g, mask);
            }
            let (gi, gg, gbeta) = ops::grn_backward(&g, &cache.grn_input, &b.grn.gamma.value, NORM_EPS)?;
            b.grn.gamma.accumulate(&gg);
            b.grn.beta.accumulate(&gbeta);
            let mut g_sum = gi;
            if let Some(mask) = &cache.add_mask {
                g_sum = fake_quant_backward(&g_sum, mask);
            }
            let g_h = b.project.backward(&cache.project, g_sum.clone())?;
            let g_h = b.depthwise.backward(&cache.depthwise, g_h)?;
            let mut g_x = b.expand.backward(&cache.expand, g_h)?;
            if b.config.has_residual() {
                g_x.add_assign(&g_sum)?;
            }
            g = g_x;
        }
        let g = self.stem.backward(&tape.stem, g)?;
        Ok(match &tape.input_mask {
            Some(mask) => fake_quant_backward(&g, mask),
            None => g,
        })
    }

    /// Folds the batch statistics recorded in a training-mode tape into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape<S>) {
        if tape.mode != Mode::Train {
            return;
        }
        if let Some(s) = &tape.stem.stats {
            self.stem.norm.update_running(s);
        }
        for (b, c) in self.blocks.iter_mut().zip(&tape.blocks) {
            for (unit, cache) in [(&mut b.expand, &c.expand), (&mut b.depthwise, &c.depthwise), (&mut b.project, &c.project)] {
                if let Some(s) = &cache.stats {
                    unit.norm.update_running(s);
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out: Vec<&Param<S>> = self.stem.params().into();
        for b in &self.blocks {
            out.extend(b.expand.params());
            out.extend(b.depthwise.params());
            out.extend(b.project.params());
            out.push(&b.grn.gamma);
            out.push(&b.grn.beta);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out: Vec<&mut Param<S>> = self.stem.params_mut().into();
        for b in &mut self.blocks {
            out.extend(b.expand.params_mut());
            out.extend(b.depthwise.params_mut());
            out.extend(b.project.params_mut());
            out.push(&mut b.grn.gamma);
            out.push(&mut b.grn.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Running statistics, named like parameters.
    pub fn buffers(&self) -> Vec<(String, &Tensor<S>)> {
        self.units()
            .flat_map(|u| {
                [
                    (format!("{}.norm.running_mean", u.name), &u.norm.running_mean),
                    (format!("{}.norm.running_var", u.name), &u.norm.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for u in self.units_mut() {
            let ConvUnit { name, norm, .. } = u;
            out.push((format!("{name}.norm.running_mean"), &mut norm.running_mean));
            out.push((format!("{name}.norm.running_var"), &mut norm.running_var));
        }
        out
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<S>> {
        std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| [&mut b.expand, &mut b.depthwise, &mut b.project]))
    }

    /// Every conv unit in forward order.
    pub fn units(&self) -> impl Iterator<Item = &ConvUnit<S>> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [&b.expand, &b.depthwise, &b.project]))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Precision conversion of weights and buffers.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::build(&self.config, 0).expect("validated config");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
        }
        for ((_, dst), (_, src)) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.cast();
        }
        out.qat = self.qat.clone();
        out
    }
}
