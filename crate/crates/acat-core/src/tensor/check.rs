//! Finite difference gradient checking, plus a registry of per-op checks
//! used by the test suites.
//!
//! The checker differentiates a scalar-valued function of one tensor. The
//! analytic gradient comes from the tape; the numeric one is a central
//! difference evaluated at the actually-representable f32 points, with the
//! quotient taken in f64 so the oracle is sharper than the engine under
//! test.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Result, Tensor, TensorError};
use crate::rng;

/// Max elementwise relative error between analytic and central-difference
/// gradients, with denominator `max(|a|, |n|) + 0.1`.
///
/// The additive guard turns the measure into an absolute one for
/// coordinates whose gradient happens to sit near zero (softmax readouts
/// cancel there, for example); f32 forward rounding makes a pure relative
/// criterion unmeetable on those. An O(1)-wrong gradient still scores
/// orders of magnitude above any sane tolerance.
///
/// Errors if `f` is non-deterministic (two evaluations at `point` must agree
/// bitwise) or does not produce a scalar.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe_a = f(point)?;
    let probe_b = f(point)?;
    if probe_a.numel() != 1 {
        return Err(TensorError::NotScalar {
            op: "finite_difference_check",
            shape: probe_a.shape(),
        });
    }
    if probe_a.to_vec()[0].to_bits() != probe_b.to_vec()[0].to_bits() {
        return Err(TensorError::NonDeterministic {
            op: "finite_difference_check",
        });
    }

    let leaf = point.detach();
    leaf.set_requires_grad(true);
    let out = f(&leaf)?;
    let analytic: Vec<f32> = match out.backward() {
        Ok(()) => leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]),
        // The function may not touch its input at all; a constant has a zero
        // gradient.
        Err(TensorError::MissingGrad { .. }) => vec![0.0; leaf.numel()],
        Err(e) => return Err(e),
    };

    let base = point.to_vec();
    let shape = point.shape();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let plus = ((base[i] as f64) + step) as f32;
        let minus = ((base[i] as f64) - step) as f32;
        let delta = (plus as f64) - (minus as f64);
        let mut data = base.clone();
        data[i] = plus;
        let y_plus = f(&Tensor::new(&shape, data.clone())?)?.to_vec()[0] as f64;
        data[i] = minus;
        let y_minus = f(&Tensor::new(&shape, data)?)?.to_vec()[0] as f64;
        let numeric = (y_plus - y_minus) / delta;
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()) + 0.1;
        let err = (a - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// One gradient check: builds a random input from the seed, runs the checker
/// and returns the max relative error.
pub struct OpCheck {
    pub name: &'static str,
    run: Box<dyn Fn(u64) -> Result<f64>>,
}

impl OpCheck {
    fn new(name: &'static str, run: impl Fn(u64) -> Result<f64> + 'static) -> OpCheck {
        OpCheck {
            name,
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

fn rand_in(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng::substream(seed, "fd-point", 0);
    let data = rng::uniform_vec(super::numel_of(shape), lo, hi, &mut r);
    Tensor::new(shape, data).expect("finite random data")
}

/// Random data bounded away from zero, for ops with a kink at the origin.
fn rand_off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::substream(seed, "fd-point", 1);
    let data: Vec<f32> = (0..super::numel_of(shape))
        .map(|_| {
            let mag: f32 = rand::Rng::random_range(&mut r, 0.1f32..1.0);
            let sign = if rand::Rng::random::<bool>(&mut r) {
                1.0
            } else {
                -1.0
            };
            mag * sign
        })
        .collect();
    Tensor::new(shape, data).expect("finite random data")
}

fn readout(shape: &[usize], seed: u64) -> Tensor {
    // Magnitudes in [0.3, 1] keep every analytic gradient well away from
    // zero, where f32 forward rounding would swamp the relative error.
    let mut r = rng::substream(seed ^ 0x5ead, "fd-readout", 0);
    let data: Vec<f32> = (0..super::numel_of(shape))
        .map(|_| {
            let mag: f32 = rand::Rng::random_range(&mut r, 0.3f32..1.0);
            if rand::Rng::random::<bool>(&mut r) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape, data).expect("finite random data")
}

/// Weighted-sum readout so index mix-ups in backward rules change the
/// result.
fn weighted_sum(t: &Tensor, r: &Tensor) -> Result<Tensor> {
    t.mul(r)?.sum()
}

/// The per-op gradient check suite. Each entry draws its own random input
/// per seed; inputs sit away from any non-differentiable points so the
/// central difference is meaningful.
pub fn op_check_suite() -> Vec<OpCheck> {
    let mut suite: Vec<OpCheck> = Vec::new();

    suite.push(OpCheck::new("add", |seed| {
        let x = rand_in(&[3, 4], -1.0, 1.0, seed);
        let r = readout(&[3, 4], seed);
        finite_difference_check(|x| weighted_sum(&x.add(x)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("sub(lhs)", |seed| {
        let x = rand_in(&[6], -1.0, 1.0, seed);
        let c = rand_in(&[6], -1.0, 1.0, seed ^ 1);
        let r = readout(&[6], seed);
        finite_difference_check(|x| weighted_sum(&x.sub(&c)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("sub(rhs)", |seed| {
        let x = rand_in(&[6], -1.0, 1.0, seed);
        let c = rand_in(&[6], -1.0, 1.0, seed ^ 1);
        let r = readout(&[6], seed);
        finite_difference_check(|x| weighted_sum(&c.sub(x)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("mul", |seed| {
        // Gradient scales with x itself, so keep x off zero too.
        let x = rand_off_zero(&[2, 5], seed);
        let r = readout(&[2, 5], seed);
        finite_difference_check(|x| weighted_sum(&x.mul(x)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("scale", |seed| {
        let x = rand_in(&[7], -1.0, 1.0, seed);
        let r = readout(&[7], seed);
        finite_difference_check(|x| weighted_sum(&x.scale(1.75)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("add_scalar", |seed| {
        let x = rand_in(&[7], -1.0, 1.0, seed);
        let r = readout(&[7], seed);
        finite_difference_check(|x| weighted_sum(&x.add_scalar(-0.4)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("sigmoid", |seed| {
        let x = rand_in(&[9], -2.0, 2.0, seed);
        let r = readout(&[9], seed);
        finite_difference_check(|x| weighted_sum(&x.sigmoid()?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("relu", |seed| {
        let x = rand_off_zero(&[8], seed);
        let r = readout(&[8], seed);
        finite_difference_check(|x| weighted_sum(&x.relu()?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("leaky_relu", |seed| {
        let x = rand_off_zero(&[8], seed);
        let r = readout(&[8], seed);
        // The 0.01 negative-side slope makes tiny gradients; the op is
        // piecewise linear so a big step (still inside the kink margin)
        // costs nothing in truncation and keeps rounding noise down.
        finite_difference_check(|x| weighted_sum(&x.leaky_relu(0.01)?, &r), &x, 5e-2)
    }));
    suite.push(OpCheck::new("abs", |seed| {
        let x = rand_off_zero(&[8], seed);
        let r = readout(&[8], seed);
        finite_difference_check(|x| weighted_sum(&x.abs()?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("sum", |seed| {
        let x = rand_in(&[3, 3], -1.0, 1.0, seed);
        finite_difference_check(|x| x.sum(), &x, 1e-2)
    }));
    suite.push(OpCheck::new("mean", |seed| {
        let x = rand_in(&[12], -1.0, 1.0, seed);
        finite_difference_check(|x| x.mean(), &x, 1e-2)
    }));
    suite.push(OpCheck::new("l1_distance(lhs)", |seed| {
        let x = rand_off_zero(&[10], seed);
        // Zero reference keeps |x - c| away from its kink.
        let c = Tensor::zeros(&[10]);
        finite_difference_check(|x| x.l1_distance(&c), &x, 1e-2)
    }));
    suite.push(OpCheck::new("l1_distance(rhs)", |seed| {
        let x = rand_off_zero(&[10], seed);
        let c = Tensor::zeros(&[10]);
        finite_difference_check(|x| c.l1_distance(x), &x, 1e-2)
    }));
    suite.push(OpCheck::new("cross_entropy(probs)", |seed| {
        let x = rand_in(&[5], 0.1, 0.9, seed);
        // Target weights off zero keep every -t/p gradient well scaled.
        let t = rand_in(&[5], 0.2, 1.0, seed ^ 2);
        finite_difference_check(|x| x.cross_entropy(&t), &x, 1e-3)
    }));
    suite.push(OpCheck::new("cross_entropy(target)", |seed| {
        let x = rand_in(&[5], 0.0, 1.0, seed);
        let p = rand_in(&[5], 0.1, 0.9, seed ^ 2);
        finite_difference_check(|x| p.cross_entropy(x), &x, 1e-2)
    }));
    suite.push(OpCheck::new("softmax(axis0)", |seed| {
        let x = rand_in(&[4, 3], -1.5, 1.5, seed);
        let r = readout(&[4, 3], seed);
        finite_difference_check(|x| weighted_sum(&x.softmax(0)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("softmax(axis1)", |seed| {
        let x = rand_in(&[4, 3], -1.5, 1.5, seed);
        let r = readout(&[4, 3], seed);
        finite_difference_check(|x| weighted_sum(&x.softmax(1)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("conv2d(input)", |seed| {
        let stride = 1 + (seed % 2) as usize;
        let x = rand_in(&[2, 6, 5], -1.0, 1.0, seed);
        let k = rand_in(&[3, 2, 3, 3], -0.5, 0.5, seed ^ 3);
        let b = rand_in(&[3], -0.5, 0.5, seed ^ 4);
        let oh = (6 + 2 - 3) / stride + 1;
        let ow = (5 + 2 - 3) / stride + 1;
        let r = readout(&[3, oh, ow], seed);
        finite_difference_check(|x| weighted_sum(&x.conv2d(&k, &b, 1, stride)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("conv2d(kernel)", |seed| {
        let x = rand_in(&[2, 6, 5], -1.0, 1.0, seed);
        let k = rand_in(&[3, 2, 3, 3], -0.5, 0.5, seed ^ 3);
        let b = rand_in(&[3], -0.5, 0.5, seed ^ 4);
        let r = readout(&[3, 6, 5], seed);
        finite_difference_check(|k| weighted_sum(&x.conv2d(k, &b, 1, 1)?, &r), &k, 1e-2)
    }));
    suite.push(OpCheck::new("conv2d(bias)", |seed| {
        let x = rand_in(&[2, 6, 5], -1.0, 1.0, seed);
        let k = rand_in(&[3, 2, 3, 3], -0.5, 0.5, seed ^ 3);
        let b = rand_in(&[3], -0.5, 0.5, seed ^ 4);
        let r = readout(&[3, 6, 5], seed);
        finite_difference_check(|b| weighted_sum(&x.conv2d(&k, b, 1, 1)?, &r), &b, 1e-2)
    }));
    suite.push(OpCheck::new("channel_max_pool", |seed| {
        // Per-pixel channel values separated by at least 0.1 so the argmax
        // is stable under the probe step.
        let mut r = rng::substream(seed, "fd-point", 2);
        let (c, h, w) = (3usize, 4usize, 4usize);
        let mut data = vec![0.0f32; c * h * w];
        for p in 0..h * w {
            let base: f32 = rand::Rng::random_range(&mut r, -1.0f32..1.0);
            let mut levels = [0usize, 1, 2];
            for i in (1..3).rev() {
                let j = rand::Rng::random_range(&mut r, 0..=i);
                levels.swap(i, j);
            }
            for ch in 0..c {
                data[ch * h * w + p] = base + 0.1 * levels[ch] as f32;
            }
        }
        let x = Tensor::new(&[c, h, w], data).unwrap();
        let rd = readout(&[1, h, w], seed);
        finite_difference_check(|x| weighted_sum(&x.channel_max_pool()?, &rd), &x, 1e-2)
    }));
    suite.push(OpCheck::new("broadcast_hadamard(features)", |seed| {
        let x = rand_in(&[3, 4, 4], -1.0, 1.0, seed);
        let m = rand_in(&[1, 4, 4], -1.0, 1.0, seed ^ 5);
        let r = readout(&[3, 4, 4], seed);
        finite_difference_check(|x| weighted_sum(&x.broadcast_hadamard(&m)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("broadcast_hadamard(mask)", |seed| {
        let x = rand_in(&[3, 4, 4], -1.0, 1.0, seed);
        let m = rand_in(&[1, 4, 4], -1.0, 1.0, seed ^ 5);
        let r = readout(&[3, 4, 4], seed);
        finite_difference_check(|m| weighted_sum(&x.broadcast_hadamard(m)?, &r), &m, 1e-2)
    }));
    suite.push(OpCheck::new("avg_pool2d", |seed| {
        let x = rand_in(&[2, 5, 6], -1.0, 1.0, seed);
        let r = readout(&[2, 2, 3], seed);
        finite_difference_check(|x| weighted_sum(&x.avg_pool2d(2)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("upsample_nearest2x", |seed| {
        let x = rand_in(&[2, 3, 3], -1.0, 1.0, seed);
        let r = readout(&[2, 6, 6], seed);
        finite_difference_check(|x| weighted_sum(&x.upsample_nearest2x()?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("concat", |seed| {
        let x = rand_in(&[2, 2, 3], -1.0, 1.0, seed);
        let a = rand_in(&[2, 1, 3], -1.0, 1.0, seed ^ 6);
        let b = rand_in(&[2, 2, 3], -1.0, 1.0, seed ^ 7);
        let r = readout(&[2, 5, 3], seed);
        finite_difference_check(
            |x| weighted_sum(&Tensor::concat(&[a.clone(), x.clone(), b.clone()], 1)?, &r),
            &x,
            1e-3,
        )
    }));
    suite.push(OpCheck::new("linear(input)", |seed| {
        let x = rand_in(&[6], -1.0, 1.0, seed);
        let w = rand_in(&[4, 6], -0.5, 0.5, seed ^ 8);
        let b = rand_in(&[4], -0.5, 0.5, seed ^ 9);
        let r = readout(&[4], seed);
        finite_difference_check(|x| weighted_sum(&x.linear(&w, &b)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("linear(batch input)", |seed| {
        let x = rand_in(&[3, 6], -1.0, 1.0, seed);
        let w = rand_in(&[4, 6], -0.5, 0.5, seed ^ 8);
        let b = rand_in(&[4], -0.5, 0.5, seed ^ 9);
        let r = readout(&[3, 4], seed);
        finite_difference_check(|x| weighted_sum(&x.linear(&w, &b)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("linear(weight)", |seed| {
        let x = rand_in(&[6], -1.0, 1.0, seed);
        let w = rand_in(&[4, 6], -0.5, 0.5, seed ^ 8);
        let b = rand_in(&[4], -0.5, 0.5, seed ^ 9);
        let r = readout(&[4], seed);
        finite_difference_check(|w| weighted_sum(&x.linear(w, &b)?, &r), &w, 1e-3)
    }));
    suite.push(OpCheck::new("linear(bias)", |seed| {
        let x = rand_in(&[6], -1.0, 1.0, seed);
        let w = rand_in(&[4, 6], -0.5, 0.5, seed ^ 8);
        let b = rand_in(&[4], -0.5, 0.5, seed ^ 9);
        let r = readout(&[4], seed);
        finite_difference_check(|b| weighted_sum(&x.linear(&w, b)?, &r), &b, 1e-2)
    }));
    suite.push(OpCheck::new("dropout(eval)", |seed| {
        let x = rand_in(&[10], -1.0, 1.0, seed);
        let r = readout(&[10], seed);
        finite_difference_check(
            |x| {
                let mut rng = rng::seeded(0);
                weighted_sum(&x.dropout(0.4, false, &mut rng)?, &r)
            },
            &x,
            1e-3,
        )
    }));
    suite.push(OpCheck::new("mul_scalar_t(tensor)", |seed| {
        let x = rand_in(&[5], -1.0, 1.0, seed);
        let s = Tensor::scalar(0.8).unwrap();
        let r = readout(&[5], seed);
        finite_difference_check(|x| weighted_sum(&x.mul_scalar_t(&s)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("mul_scalar_t(scalar)", |seed| {
        let c = rand_in(&[5], -1.0, 1.0, seed ^ 10);
        let s = rand_in(&[], 0.5, 1.5, seed);
        let r = readout(&[5], seed);
        finite_difference_check(|s| weighted_sum(&c.mul_scalar_t(s)?, &r), &s, 1e-2)
    }));
    suite.push(OpCheck::new("div_scalar_t(tensor)", |seed| {
        let x = rand_in(&[5], -1.0, 1.0, seed);
        let s = Tensor::scalar(1.25).unwrap();
        let r = readout(&[5], seed);
        finite_difference_check(|x| weighted_sum(&x.div_scalar_t(&s)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("div_scalar_t(scalar)", |seed| {
        let c = rand_in(&[5], -1.0, 1.0, seed ^ 10);
        let s = rand_in(&[], 0.5, 1.5, seed);
        let r = readout(&[5], seed);
        finite_difference_check(|s| weighted_sum(&c.div_scalar_t(s)?, &r), &s, 1e-2)
    }));
    suite.push(OpCheck::new("select0", |seed| {
        let x = rand_in(&[3, 2, 2], -1.0, 1.0, seed);
        let r = readout(&[2, 2], seed);
        finite_difference_check(|x| weighted_sum(&x.select0(1)?, &r), &x, 1e-2)
    }));
    suite.push(OpCheck::new("reshape", |seed| {
        let x = rand_in(&[2, 3, 2], -1.0, 1.0, seed);
        let r = readout(&[12], seed);
        finite_difference_check(|x| weighted_sum(&x.reshape(&[12])?, &r), &x, 1e-2)
    }));
    // Sigmoid rather than relu in the chain: a conv output can land within
    // the probe step of relu's kink and wreck the central difference.
    suite.push(OpCheck::new("composite(conv-sigmoid-linear)", |seed| {
        let x = rand_in(&[1, 6, 6], -1.0, 1.0, seed);
        let k = rand_in(&[2, 1, 3, 3], -0.5, 0.5, seed ^ 11);
        let kb = rand_in(&[2], -0.2, 0.2, seed ^ 12);
        let w = rand_in(&[3, 8], -0.3, 0.3, seed ^ 13);
        let wb = rand_in(&[3], -0.2, 0.2, seed ^ 14);
        let r = readout(&[3], seed);
        finite_difference_check(
            |x| {
                let feat = x.conv2d(&k, &kb, 0, 1)?.sigmoid()?.avg_pool2d(2)?;
                let v = feat.reshape(&[8])?;
                weighted_sum(&v.linear(&w, &wb)?, &r)
            },
            &x,
            1e-2,
        )
    }));

    suite
}
