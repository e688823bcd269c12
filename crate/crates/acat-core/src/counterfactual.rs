//! Counterfactual search in autoencoder latent space.
//!
//! The optimizer minimizes g(z) = CE(f(D(z)), target) + alpha * mean|z - z0|
//! with proximal (shrinkage) handling of the L1 term: each step takes a
//! plain gradient step on the cross-entropy and then soft-thresholds the
//! displacement from z0. The threshold formulation keeps the search stable
//! for any alpha and makes the large-alpha limit land exactly on z0. The
//! mean (rather than summed) absolute deviation keeps alpha comparable
//! across latent sizes.
//!
//! Also here: the one-step latent-shift baseline and the class-agnostic
//! saliency construction from a positive/negative counterfactual pair.

use alloc::format;
use alloc::vec::Vec;

use crate::nets::{argmax, Autoencoder, ModelGraph, Record};
use crate::saliency::{channel_max_abs, minmax_normalize_slices, SaliencyMap, SaliencyMethod};
use crate::tensor::{Result, Tensor, TensorError};

/// Search hyperparameters. `target` is the class the counterfactual is
/// pushed toward.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CounterfactualConfig {
    pub target: usize,
    pub alpha: f32,
    pub steps: usize,
    pub step_size: f32,
}

impl CounterfactualConfig {
    pub fn toward(target: usize) -> CounterfactualConfig {
        CounterfactualConfig { target, alpha: 100.0, steps: 20, step_size: 1.0 }
    }

    pub fn with_target(&self, target: usize) -> CounterfactualConfig {
        CounterfactualConfig { target, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TensorError::Invalid {
                op: "CounterfactualConfig",
                message: format!("alpha {} must be finite and nonnegative", self.alpha),
            });
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(TensorError::Invalid {
                op: "CounterfactualConfig",
                message: format!("step size {} must be finite and positive", self.step_size),
            });
        }
        Ok(())
    }
}

/// State recorded at one point of the search.
pub struct CounterfactualStep {
    pub z: Tensor,
    pub decoded: Tensor,
    pub probs: Tensor,
    pub objective: f32,
    pub ce: f32,
    pub l1: f32,
}

/// The full trajectory, including the initialization, so `steps.len()` is
/// the configured step count plus one.
pub struct CounterfactualTrace {
    pub steps: Vec<CounterfactualStep>,
    /// False when either model was never trained or restored.
    pub fitted_models: bool,
}

impl CounterfactualTrace {
    pub fn final_latent(&self) -> &Tensor {
        &self.steps.last().expect("nonempty trace").z
    }

    pub fn final_image(&self) -> &Tensor {
        &self.steps.last().expect("nonempty trace").decoded
    }

    /// Probability of `class` at every recorded step.
    pub fn class_probs(&self, class: usize) -> Vec<f32> {
        self.steps.iter().map(|s| s.probs.to_vec()[class]).collect()
    }
}

fn check_volume(f: &ModelGraph, ae: &Autoencoder, x: &Tensor, op: &'static str) -> Result<usize> {
    let shape = x.shape();
    let (c, h, w) = ae.input_shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != [c, h, w] {
        return Err(TensorError::Invalid {
            op,
            message: format!("volume {shape:?} does not match autoencoder input ({c},{h},{w})"),
        });
    }
    if f.config().input != (c, h, w) {
        return Err(TensorError::Invalid {
            op,
            message: "classifier and autoencoder disagree on input shape".into(),
        });
    }
    if x.to_vec().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(TensorError::Invalid { op, message: "input values outside [0,1]".into() });
    }
    Ok(shape[0])
}

fn detached(t: &Tensor) -> Tensor {
    Tensor::new(&t.shape(), t.to_vec()).expect("finite data")
}

fn mean_abs_dev(z: &[f32], z0: &[f32]) -> f32 {
    let sum: f64 = z.iter().zip(z0).map(|(a, b)| (a - b).abs() as f64).sum();
    (sum / z.len() as f64) as f32
}

/// Gradient search for a counterfactual of `x` toward `cfg.target`.
///
/// Aborts with the step index if the objective leaves the finite range.
pub fn optimize_counterfactual(
    f: &ModelGraph,
    ae: &Autoencoder,
    x: &Tensor,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualTrace> {
    const OP: &str = "optimize_counterfactual";
    cfg.validate()?;
    check_volume(f, ae, x, OP)?;
    let k = f.num_classes();
    if cfg.target >= k {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("target class {} outside 0..{k}", cfg.target),
        });
    }
    let mut onehot = alloc::vec![0.0f32; k];
    onehot[cfg.target] = 1.0;
    let target = Tensor::new(&[k], onehot)?;

    let z0_t = ae.encode(x)?;
    let z0 = z0_t.to_vec();
    let z_shape = z0_t.shape();
    let n = z0.len();
    let threshold = cfg.step_size * cfg.alpha / n as f32;

    let mut z = z0.clone();
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    for t in 0..=cfg.steps {
        let step_err = |e: TensorError| TensorError::Invalid {
            op: OP,
            message: format!("step {t}: {e}"),
        };
        let z_leaf = Tensor::new(&z_shape, z.clone())?;
        z_leaf.set_requires_grad(true);
        let decoded = ae.decode(&z_leaf).map_err(step_err)?;
        let out = f.forward_volume(&decoded, None, Record::default()).map_err(step_err)?;
        let ce_t = out.probs.cross_entropy(&target).map_err(step_err)?;
        let ce = ce_t.item()?;
        let l1 = cfg.alpha * mean_abs_dev(&z, &z0);
        let objective = ce + l1;
        if !objective.is_finite() {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("step {t}: non-finite objective"),
            });
        }
        steps.push(CounterfactualStep {
            z: Tensor::new(&z_shape, z.clone())?,
            decoded: detached(&decoded),
            probs: detached(&out.probs),
            objective,
            ce,
            l1,
        });
        if t == cfg.steps {
            break;
        }
        ce_t.backward().map_err(step_err)?;
        let grad = z_leaf.grad().ok_or(TensorError::Invalid {
            op: OP,
            message: "latent received no gradient".into(),
        })?;
        for i in 0..n {
            let half = z[i] - cfg.step_size * grad[i];
            let d = half - z0[i];
            let shrunk = if d > threshold {
                d - threshold
            } else if d < -threshold {
                d + threshold
            } else {
                0.0
            };
            z[i] = z0[i] + shrunk;
        }
    }
    Ok(CounterfactualTrace { steps, fitted_models: f.is_fitted() && ae.is_fitted() })
}

/// One entry of the latent-shift probability curve.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LambdaPoint {
    pub lambda: f32,
    pub source_prob: f32,
}

/// Result of the one-step latent-shift baseline.
pub struct LatentShift {
    pub curve: Vec<LambdaPoint>,
    /// Class whose probability the curve tracks: argmax of f on the input.
    pub source_class: usize,
    /// Curve index minimizing the source-class probability.
    pub best_index: usize,
    pub best_probs: Tensor,
    pub best_image: Tensor,
}

impl LatentShift {
    pub fn best_lambda(&self) -> f32 {
        self.curve[self.best_index].lambda
    }
}

/// Doubling grid from 1e-5, `doublings` values per sign, ascending.
pub fn lambda_grid(doublings: usize, both_signs: bool) -> Vec<f32> {
    let mut pos: Vec<f32> = (0..doublings).map(|i| 1e-5 * (1u64 << i) as f32).collect();
    if !both_signs {
        return pos;
    }
    let mut grid: Vec<f32> = pos.iter().rev().map(|v| -v).collect();
    grid.append(&mut pos);
    grid
}

/// Shifts the latent code along the gradient of the source-class score and
/// sweeps the classifier over the resulting decodings.
pub fn latent_shift(
    f: &ModelGraph,
    ae: &Autoencoder,
    x: &Tensor,
    grid: &[f32],
) -> Result<LatentShift> {
    const OP: &str = "latent_shift";
    check_volume(f, ae, x, OP)?;
    if grid.is_empty() {
        return Err(TensorError::Invalid { op: OP, message: "empty lambda grid".into() });
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TensorError::Invalid {
            op: OP,
            message: "lambda grid must be finite and strictly ascending".into(),
        });
    }
    let source_class = argmax(&f.forward_volume(x, None, Record::default())?.probs.to_vec());

    let z0_t = ae.encode(x)?;
    let z0 = z0_t.to_vec();
    let z_shape = z0_t.shape();
    let z_leaf = Tensor::new(&z_shape, z0.clone())?;
    z_leaf.set_requires_grad(true);
    let decoded = ae.decode(&z_leaf)?;
    let out = f.forward_volume(&decoded, None, Record::default())?;
    out.logits.select0(source_class)?.backward()?;
    let direction = z_leaf.grad().ok_or(TensorError::Invalid {
        op: OP,
        message: "latent received no gradient".into(),
    })?;

    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f32, Tensor, Tensor)> = None;
    for (i, &lambda) in grid.iter().enumerate() {
        let z: Vec<f32> = z0.iter().zip(&direction).map(|(z, d)| z + lambda * d).collect();
        let image = ae.decode(&Tensor::new(&z_shape, z)?)?;
        let probs = f.forward_volume(&image, None, Record::default())?.probs;
        let p = probs.to_vec()[source_class];
        if !p.is_finite() {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("non-finite probability at lambda {lambda}"),
            });
        }
        curve.push(LambdaPoint { lambda, source_prob: p });
        if best.as_ref().map(|(_, bp, _, _)| p < *bp).unwrap_or(true) {
            best = Some((i, p, detached(&probs), detached(&image)));
        }
    }
    let (best_index, _, best_probs, best_image) = best.expect("nonempty grid");
    Ok(LatentShift { curve, source_class, best_index, best_probs, best_image })
}

/// Minimum of a probability series and the first index achieving it.
pub fn min_probability_curve(probs: &[f32]) -> Result<(f32, usize)> {
    if probs.is_empty() {
        return Err(TensorError::Invalid {
            op: "min_probability_curve",
            message: "empty curve".into(),
        });
    }
    let mut idx = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p < probs[idx] {
            idx = i;
        }
    }
    Ok((probs[idx], idx))
}

/// |x - decoded| reduced to one channel per slice and min-max normalized
/// per slice; a constant difference collapses to zeros.
pub fn difference_map(x: &Tensor, decoded: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || decoded.shape() != shape {
        return Err(TensorError::Invalid {
            op: "difference_map",
            message: format!("shapes {shape:?} vs {:?}", decoded.shape()),
        });
    }
    let (channels, plane) = (shape[1], shape[2] * shape[3]);
    let diff: Vec<f32> = x
        .to_vec()
        .iter()
        .zip(decoded.to_vec().iter())
        .map(|(a, b)| a - b)
        .collect();
    let mut map = channel_max_abs(&diff, channels, plane);
    minmax_normalize_slices(&mut map, plane);
    Tensor::new(&[shape[0], 1, shape[2], shape[3]], map)
}

/// Saliency map plus the two searches it came from.
pub struct CounterfactualPair {
    pub map: SaliencyMap,
    pub targets: (usize, usize),
    pub traces: (CounterfactualTrace, CounterfactualTrace),
}

/// Runs the search toward two explicit target classes and averages the
/// normalized difference maps.
pub fn counterfactual_pair(
    f: &ModelGraph,
    ae: &Autoencoder,
    x: &Tensor,
    cfg: &CounterfactualConfig,
    class_a: usize,
    class_b: usize,
) -> Result<CounterfactualPair> {
    let trace_a = optimize_counterfactual(f, ae, x, &cfg.with_target(class_a))?;
    let trace_b = optimize_counterfactual(f, ae, x, &cfg.with_target(class_b))?;
    let map_a = difference_map(x, trace_a.final_image())?;
    let map_b = difference_map(x, trace_b.final_image())?;
    let mean: Vec<f32> = map_a
        .to_vec()
        .iter()
        .zip(map_b.to_vec().iter())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let map = SaliencyMap::new(
        SaliencyMethod::Counterfactual,
        Tensor::new(&map_a.shape(), mean)?,
    )?;
    Ok(CounterfactualPair { map, targets: (class_a, class_b), traces: (trace_a, trace_b) })
}

/// Class-agnostic saliency: counterfactuals toward class 0 and toward the
/// most probable nonzero class under f. The true label of `x` never enters.
pub fn saliency_from_counterfactuals(
    f: &ModelGraph,
    ae: &Autoencoder,
    x: &Tensor,
    cfg: &CounterfactualConfig,
) -> Result<SaliencyMap> {
    let probs = f.forward_volume(x, None, Record::default())?.probs.to_vec();
    let positive = 1 + argmax(&probs[1..]);
    Ok(counterfactual_pair(f, ae, x, cfg, 0, positive)?.map)
}
