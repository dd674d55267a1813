//! Randomized finite-difference checks of every hand-written backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_difference, max_relative_error, DEFAULT_STEP};
use crate::distill::{distill_loss, kd_term_slice, KDConfig};
use crate::ops::{self, ConvSpec, NORM_EPS};
use crate::quant::{fake_quant, fake_quant_backward, QuantParams};
use crate::{Result, Tensor};

type T = Tensor<f64>;

/// One analytic-versus-numeric comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Default)]
struct Tally(Vec<Check>);

impl Tally {
    fn check(&mut self, name: String, analytic: &[f64], f: impl FnMut(&[f64]) -> f64, x: &[f64]) {
        let numeric = central_difference(f, x, DEFAULT_STEP);
        self.0.push(Check { name, max_relative_error: max_relative_error(analytic, &numeric) });
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn t(shape: &[usize], v: &[f64]) -> T {
    T::from_f64(shape, v).expect("shape matches data")
}

fn dot(a: &T, b: &T) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs every op family on randomized instances drawn from `seed` and reports each check.
///
/// Covers conv2d (grouped, depthwise, pointwise), linear, batch norm with fixed and batch
/// statistics, GRN, ReLU, average pooling, softmax, log-softmax, cross-entropy, the
/// distillation term and loss, and the straight-through contract of fake quantization.
pub fn op_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    convolutions(&mut tally, &mut rng)?;
    linear(&mut tally, &mut rng)?;
    norms(&mut tally, &mut rng)?;
    activations(&mut tally, &mut rng)?;
    losses(&mut tally, &mut rng)?;
    fake_quant_ste(&mut tally, &mut rng)?;
    Ok(tally.0)
}

fn conv_case(tally: &mut Tally, rng: &mut ChaCha8Rng, spec: ConvSpec, n: usize, h: usize, w: usize, label: &str) -> Result<()> {
    let xs = [n, spec.in_channels, h, w];
    let x = rand_vec(rng, xs.iter().product(), 1.0);
    let ws = spec.weight_shape();
    let wt = rand_vec(rng, ws.iter().product(), 0.5);
    let b = rand_vec(rng, spec.out_channels, 0.5);
    let xt = t(&xs, &x);
    let (wtt, bt) = (t(&ws, &wt), t(&[spec.out_channels], &b));
    let out = ops::conv2d(&xt, &wtt, Some(&bt), &spec)?;
    let g = t(out.shape(), &rand_vec(rng, out.len(), 1.0));
    let grads = ops::conv2d_backward(&g, &xt, &wtt, &spec)?;
    let conv = |x: &T, w: &T, b: &T| ops::conv2d(x, w, Some(b), &spec).map_or(f64::NAN, |y| dot(&g, &y));
    tally.check(format!("{label} input"), grads.input.data(), |p| conv(&t(&xs, p), &wtt, &bt), &x);
    tally.check(format!("{label} weight"), grads.weight.data(), |p| conv(&xt, &t(&ws, p), &bt), &wt);
    tally.check(format!("{label} bias"), grads.bias.data(), |p| conv(&xt, &wtt, &t(&[spec.out_channels], p)), &b);
    Ok(())
}

fn convolutions(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..8 {
        let groups = [1, 2][i % 2];
        let cin = groups * rng.gen_range(1..=2);
        let cout = groups * rng.gen_range(1..=2);
        let k = rng.gen_range(1..=3);
        let spec = ConvSpec { groups, ..ConvSpec::new(cin, cout, k, rng.gen_range(1..=2), rng.gen_range(0..=k / 2 + 1)) };
        let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
        conv_case(tally, rng, spec, 2, h, w, &format!("conv2d #{i}"))?;
    }
    for i in 0..4 {
        let spec = ConvSpec::depthwise(rng.gen_range(1..=3), 3, 1 + i % 2);
        conv_case(tally, rng, spec, 2, 4, 5, &format!("depthwise #{i}"))?;
    }
    for i in 0..4 {
        let spec = ConvSpec::pointwise(rng.gen_range(1..=3), rng.gen_range(1..=3));
        conv_case(tally, rng, spec, 2, 3, 3, &format!("pointwise #{i}"))?;
    }
    Ok(())
}

fn linear(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..6 {
        let (n, fin, fout) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let x = rand_vec(rng, n * fin, 1.0);
        let w = rand_vec(rng, fout * fin, 1.0);
        let b = rand_vec(rng, fout, 1.0);
        let (xt, wt, bt) = (t(&[n, fin], &x), t(&[fout, fin], &w), t(&[fout], &b));
        let g = t(&[n, fout], &rand_vec(rng, n * fout, 1.0));
        let (gx, gw, gb) = ops::linear_backward(&g, &xt, &wt)?;
        let lin = |x: &T, w: &T, b: &T| ops::linear(x, w, Some(b)).map_or(f64::NAN, |y| dot(&g, &y));
        tally.check(format!("linear #{i} input"), gx.data(), |p| lin(&t(&[n, fin], p), &wt, &bt), &x);
        tally.check(format!("linear #{i} weight"), gw.data(), |p| lin(&xt, &t(&[fout, fin], p), &bt), &w);
        tally.check(format!("linear #{i} bias"), gb.data(), |p| lin(&xt, &wt, &t(&[fout], p)), &b);
    }
    Ok(())
}

fn norms(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..6 {
        let shape = [rng.gen_range(2..=3), rng.gen_range(1..=3), 2, rng.gen_range(2..=3)];
        let c = shape[1];
        let x = rand_vec(rng, shape.iter().product(), 2.0);
        let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta = rand_vec(rng, c, 0.5);
        let mean = rand_vec(rng, c, 0.5);
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let (xt, gt, bt, mt, vt) = (t(&shape, &x), t(&[c], &gamma), t(&[c], &beta), t(&[c], &mean), t(&[c], &var));
        let g = t(&shape, &rand_vec(rng, x.len(), 1.0));

        let (gx, gg, gb) = ops::batch_norm_backward(&g, &xt, &mt, &vt, &gt, NORM_EPS)?;
        let f = |x: &T, gm: &T, bb: &T| ops::batch_norm(x, &mt, &vt, gm, bb, NORM_EPS).map_or(f64::NAN, |y| dot(&g, &y));
        tally.check(format!("batch_norm #{i} input"), gx.data(), |p| f(&t(&shape, p), &gt, &bt), &x);
        tally.check(format!("batch_norm #{i} gamma"), gg.data(), |p| f(&xt, &t(&[c], p), &bt), &gamma);
        tally.check(format!("batch_norm #{i} beta"), gb.data(), |p| f(&xt, &gt, &t(&[c], p)), &beta);

        let (_, stats) = ops::batch_norm_train(&xt, &gt, &bt, NORM_EPS)?;
        let (gx, gg, gb) = ops::batch_norm_train_backward(&g, &xt, &stats, &gt, NORM_EPS)?;
        let f = |x: &T, gm: &T, bb: &T| ops::batch_norm_train(x, gm, bb, NORM_EPS).map_or(f64::NAN, |y| dot(&g, &y.0));
        tally.check(format!("batch_norm_train #{i} input"), gx.data(), |p| f(&t(&shape, p), &gt, &bt), &x);
        tally.check(format!("batch_norm_train #{i} gamma"), gg.data(), |p| f(&xt, &t(&[c], p), &bt), &gamma);
        tally.check(format!("batch_norm_train #{i} beta"), gb.data(), |p| f(&xt, &gt, &t(&[c], p)), &beta);

        let (gx, gg, gb) = ops::grn_backward(&g, &xt, &gt, NORM_EPS)?;
        let f = |x: &T, gm: &T, bb: &T| ops::grn(x, gm, bb, NORM_EPS).map_or(f64::NAN, |y| dot(&g, &y));
        tally.check(format!("grn #{i} input"), gx.data(), |p| f(&t(&shape, p), &gt, &bt), &x);
        tally.check(format!("grn #{i} gamma"), gg.data(), |p| f(&xt, &t(&[c], p), &bt), &gamma);
        tally.check(format!("grn #{i} beta"), gb.data(), |p| f(&xt, &gt, &t(&[c], p)), &beta);
    }
    Ok(())
}

fn activations(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..6 {
        let shape = [2, 3, 2, 2];
        // keep probes away from the kink
        let x: Vec<f64> = (0..24).map(|_| rng.gen_range(0.01..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let g = t(&shape, &rand_vec(rng, 24, 1.0));
        let gx = ops::relu_backward(&g, &t(&shape, &x))?;
        tally.check(format!("relu #{i}"), gx.data(), |p| dot(&g, &ops::relu(&t(&shape, p))), &x);
    }
    // subgradient at exactly zero is 0
    let gx = ops::relu_backward(&t(&[3], &[1.0, 1.0, 1.0]), &t(&[3], &[0.0, 1e-300, -1e-300]))?;
    let expected = [0.0, 1.0, 0.0];
    tally.0.push(Check {
        name: "relu at zero".into(),
        max_relative_error: gx.data().iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    });

    for i in 0..4 {
        let x = rand_vec(rng, 8, 2.0);
        let s = [2, 4];
        let g = t(&s, &rand_vec(rng, 8, 1.0));
        let gp = t(&[1, 2], &g.data()[..2]);
        let gx = ops::global_avg_pool_backward(&gp, &[1, 2, 2, 2])?;
        let pool = |p: &[f64]| ops::global_avg_pool(&t(&[1, 2, 2, 2], p)).map_or(f64::NAN, |y| dot(&gp, &y));
        tally.check(format!("global_avg_pool #{i}"), gx.data(), pool, &x);

        let sm = ops::softmax(&t(&s, &x), 1)?;
        let gx = ops::softmax_backward(&g, &sm, 1)?;
        tally.check(format!("softmax #{i}"), gx.data(), |p| ops::softmax(&t(&s, p), 1).map_or(f64::NAN, |y| dot(&g, &y)), &x);
        let ls = ops::log_softmax(&t(&s, &x), 1)?;
        let gx = ops::log_softmax_backward(&g, &ls, 1)?;
        tally.check(format!("log_softmax #{i}"), gx.data(), |p| ops::log_softmax(&t(&s, p), 1).map_or(f64::NAN, |y| dot(&g, &y)), &x);
    }
    Ok(())
}

fn losses(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..6 {
        let (n, c) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
        let x = rand_vec(rng, n * c, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let (_, g) = ops::cross_entropy_batch(&t(&[n, c], &x), &labels)?;
        let ce = |p: &[f64]| ops::cross_entropy_batch(&t(&[n, c], p), &labels).map_or(f64::NAN, |r| r.0);
        tally.check(format!("cross_entropy #{i}"), g.data(), ce, &x);
    }
    for (i, temp) in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
        let c = rng.gen_range(2..=6);
        let s = rand_vec(rng, c, 3.0);
        let e = rand_vec(rng, c, 3.0);
        let (_, g) = kd_term_slice(&s, &e, temp)?;
        tally.check(format!("kd_term T={temp} #{i}"), &g, |p| kd_term_slice(p, &e, temp).map_or(f64::NAN, |r| r.0), &s);
    }
    for (i, alpha) in [0.0, 0.3, 0.5, 1.0].into_iter().enumerate() {
        let (n, c) = (3, 4);
        let s = rand_vec(rng, n * c, 2.0);
        let e = t(&[n, c], &rand_vec(rng, n * c, 2.0));
        let labels = [0, 3, 1];
        let cfg = KDConfig { temperature: 2.0, alpha };
        let r = distill_loss(&t(&[n, c], &s), &e, &labels, &cfg)?;
        let loss = |p: &[f64]| distill_loss(&t(&[n, c], p), &e, &labels, &cfg).map_or(f64::NAN, |r| r.loss_total);
        tally.check(format!("distill_loss alpha={alpha} #{i}"), r.student_logit_grads.data(), loss, &s);
    }
    Ok(())
}

/// The backward of fake quantization is the gradient of `clamp(x, lo, hi)`.
fn fake_quant_ste(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    for i in 0..6 {
        let qp = QuantParams::from_range(rng.gen_range(-2.0..-0.5), rng.gen_range(0.5..2.0)).0;
        let (lo, hi) = qp.representable_range();
        let x: Vec<f64> = (0..12)
            .map(|_| loop {
                let v = rng.gen_range(-3.0..3.0);
                if (v - lo).abs() > 1e-3 && (v - hi).abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let g = t(&[12], &rand_vec(rng, 12, 1.0));
        let (_, mask) = fake_quant(&t(&[12], &x), &qp);
        let gx = fake_quant_backward(&g, &mask);
        let surrogate = |p: &[f64]| p.iter().zip(g.data()).map(|(&v, &gv)| gv * v.clamp(lo, hi)).sum::<f64>();
        tally.check(format!("fake_quant STE #{i}"), gx.data(), surrogate, &x);
    }
    Ok(())
}
