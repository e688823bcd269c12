//! Attribution baselines: input gradient, integrated gradients and Grad-CAM,
//! plus the saliency map container every method (including the
//! counterfactual one) emits.
//!
//! All maps go through the same post-processing for comparability: absolute
//! value, max over channels, then min-max normalization per slice. A slice
//! with constant raw values normalizes to all zeros rather than dividing by
//! zero.

use alloc::format;
use alloc::vec::Vec;

use crate::nets::{LayerKind, ModelGraph, Record};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SaliencyMethod {
    Gradient,
    IntegratedGradients,
    GradCam,
    Counterfactual,
}

impl SaliencyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SaliencyMethod::Gradient => "gradient",
            SaliencyMethod::IntegratedGradients => "integrated-gradients",
            SaliencyMethod::GradCam => "grad-cam",
            SaliencyMethod::Counterfactual => "counterfactual",
        }
    }
}

/// Per-slice saliency volume in [0,1], shape [S,1,H,W]. The tensor is a
/// plain data leaf; it never carries gradients. Clones share the tensor.
#[derive(Clone)]
pub struct SaliencyMap {
    pub method: SaliencyMethod,
    pub maps: Tensor,
}

impl SaliencyMap {
    pub fn new(method: SaliencyMethod, maps: Tensor) -> Result<SaliencyMap> {
        let shape = maps.shape();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 1 {
            return Err(TensorError::Invalid {
                op: "SaliencyMap::new",
                message: format!("expected [S,1,H,W] maps, got {shape:?}"),
            });
        }
        let data = maps.to_vec();
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::Invalid {
                op: "SaliencyMap::new",
                message: "map values must lie in [0,1]".into(),
            });
        }
        Ok(SaliencyMap { method, maps: Tensor::new(&shape, data)? })
    }

    pub fn slices(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn plane(&self) -> (usize, usize) {
        let s = self.maps.shape();
        (s[2], s[3])
    }
}

/// Method selection plus the knobs only integrated gradients uses.
pub struct AttributionConfig {
    pub method: SaliencyMethod,
    /// Target class; None picks the model's argmax on the input.
    pub class: Option<usize>,
    pub steps: usize,
    /// Integration start point; None means all zeros.
    pub baseline: Option<Tensor>,
}

impl AttributionConfig {
    pub fn new(method: SaliencyMethod) -> AttributionConfig {
        AttributionConfig { method, class: None, steps: 32, baseline: None }
    }
}

/// Max over channels of |v|, collapsing [S,C,H,W] to [S,1,H,W].
pub(crate) fn channel_max_abs(data: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    let spatial_total = data.len() / channels;
    let mut out = Vec::with_capacity(spatial_total);
    let per_slice = channels * plane;
    for slice in data.chunks(per_slice) {
        for p in 0..plane {
            let mut m = 0.0f32;
            for c in 0..channels {
                let v = slice[c * plane + p].abs();
                if v > m {
                    m = v;
                }
            }
            out.push(m);
        }
    }
    out
}

/// Min-max normalize each plane of `plane` values independently; a constant
/// plane becomes all zeros.
pub(crate) fn minmax_normalize_slices(data: &mut [f32], plane: usize) {
    for chunk in data.chunks_mut(plane) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in chunk.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == lo {
            chunk.fill(0.0);
        } else {
            let span = hi - lo;
            for v in chunk.iter_mut() {
                *v = (*v - lo) / span;
            }
        }
    }
}

fn finalize_map(
    method: SaliencyMethod,
    raw: &[f32],
    slices: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<SaliencyMap> {
    let plane = h * w;
    let mut flat = channel_max_abs(raw, channels, plane);
    minmax_normalize_slices(&mut flat, plane);
    SaliencyMap::new(method, Tensor::new(&[slices, 1, h, w], flat)?)
}

fn volume_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(TensorError::Invalid {
            op: "saliency",
            message: format!("expected [S,c,H,W] volume, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Signed gradient of the class logit with respect to the input volume.
pub fn input_gradient(f: &ModelGraph, x: &Tensor, class: usize) -> Result<Tensor> {
    let shape = x.shape();
    let leaf = Tensor::new(&shape, x.to_vec())?;
    leaf.set_requires_grad(true);
    let out = f.forward_volume(&leaf, None, Record::default())?;
    let score = out.logits.select0(class)?;
    score.backward()?;
    let g = leaf.grad().ok_or(TensorError::MissingGrad {
        message: "input received no gradient".into(),
    })?;
    Tensor::new(&shape, g)
}

/// |∂ logit_class / ∂ x|, channel-maxed and normalized per slice.
pub fn gradient_map(f: &ModelGraph, x: &Tensor, class: usize) -> Result<SaliencyMap> {
    let (s, c, h, w) = volume_dims(x)?;
    let g = input_gradient(f, x, class)?;
    finalize_map(SaliencyMethod::Gradient, &g.to_vec(), s, c, h, w)
}

/// Signed integrated-gradients attribution (x - baseline) ⊙ mean path
/// gradient, midpoint Riemann rule over `steps` points.
pub fn integrated_gradients_attribution(
    f: &ModelGraph,
    x: &Tensor,
    class: usize,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<Tensor> {
    const OP: &str = "integrated_gradients";
    if steps == 0 {
        return Err(TensorError::Invalid { op: OP, message: "steps must be >= 1".into() });
    }
    let shape = x.shape();
    let xv = x.to_vec();
    let bv = match baseline {
        Some(b) => {
            if b.shape() != shape {
                return Err(TensorError::Invalid {
                    op: OP,
                    message: format!("baseline shape {:?} vs input {:?}", b.shape(), shape),
                });
            }
            b.to_vec()
        }
        None => alloc::vec![0.0f32; xv.len()],
    };
    let mut mean_grad = alloc::vec![0.0f64; xv.len()];
    for t in 0..steps {
        let alpha = (t as f32 + 0.5) / steps as f32;
        let point: Vec<f32> = xv
            .iter()
            .zip(bv.iter())
            .map(|(&a, &b)| b + alpha * (a - b))
            .collect();
        let g = input_gradient(f, &Tensor::new(&shape, point)?, class)?;
        for (acc, v) in mean_grad.iter_mut().zip(g.to_vec()) {
            *acc += v as f64;
        }
    }
    let attr: Vec<f32> = mean_grad
        .iter()
        .zip(xv.iter().zip(bv.iter()))
        .map(|(&g, (&a, &b))| ((g / steps as f64) as f32) * (a - b))
        .collect();
    Tensor::new(&shape, attr)
}

pub fn integrated_gradients_map(
    f: &ModelGraph,
    x: &Tensor,
    class: usize,
    cfg: &AttributionConfig,
) -> Result<SaliencyMap> {
    let (s, c, h, w) = volume_dims(x)?;
    let attr = integrated_gradients_attribution(f, x, class, cfg.steps, cfg.baseline.as_ref())?;
    finalize_map(SaliencyMethod::IntegratedGradients, &attr.to_vec(), s, c, h, w)
}

fn nearest_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = y * sh / dh;
        for x in 0..dw {
            let sx = x * sw / dw;
            out.push(src[sy * sw + sx]);
        }
    }
    out
}

/// Grad-CAM at a conv layer: channel weights are the spatial means of
/// ∂ logit_class / ∂ A_k over the layer's output A (pre-activation), the map
/// is ReLU(Σ_k w_k A_k) upsampled to input extents by nearest neighbor.
pub fn grad_cam_map(
    f: &ModelGraph,
    x: &Tensor,
    class: usize,
    layer: usize,
) -> Result<SaliencyMap> {
    const OP: &str = "grad_cam";
    let (s, _, h, w) = volume_dims(x)?;
    let layers = &f.config().layers;
    if layer >= layers.len() {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("layer {layer} out of range ({} layers)", layers.len()),
        });
    }
    let conv_ordinal = match layers[layer].kind {
        LayerKind::Conv { .. } => layers[..layer]
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count(),
        _ => {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("layer {layer} is not a conv layer"),
            });
        }
    };
    let out = f.forward_volume(x, None, Record { taps: false, preacts: true })?;
    let score = out.logits.select0(class)?;
    score.backward()?;
    let mut planes = Vec::with_capacity(s * h * w);
    for slice_out in &out.slices {
        let a = &slice_out.preacts[conv_ordinal];
        let ashape = a.shape();
        let (c, ah, aw) = (ashape[0], ashape[1], ashape[2]);
        let plane = ah * aw;
        let act = a.to_vec();
        let grad = a.grad().ok_or(TensorError::MissingGrad {
            message: "conv activation received no gradient".into(),
        })?;
        let mut cam = alloc::vec![0.0f32; plane];
        for k in 0..c {
            let ch = &grad[k * plane..(k + 1) * plane];
            let weight = ch.iter().sum::<f32>() / plane as f32;
            for p in 0..plane {
                cam[p] += weight * act[k * plane + p];
            }
        }
        for v in cam.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        planes.extend(nearest_resize(&cam, ah, aw, h, w));
    }
    finalize_map(SaliencyMethod::GradCam, &planes, s, 1, h, w)
}

/// Index of the last conv layer in the model's layer list.
pub fn last_conv_layer(f: &ModelGraph) -> Result<usize> {
    f.config()
        .layers
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Conv { .. }))
        .ok_or(TensorError::Invalid {
            op: "last_conv_layer",
            message: "model has no conv layers".into(),
        })
}

/// Dispatch on the configured method. Grad-CAM uses the last conv layer;
/// the counterfactual method lives in its own module and is rejected here.
pub fn attribution_map(
    f: &ModelGraph,
    x: &Tensor,
    cfg: &AttributionConfig,
) -> Result<SaliencyMap> {
    let class = match cfg.class {
        Some(c) => c,
        None => {
            let out = f.forward_volume(x, None, Record::default())?;
            crate::nets::argmax(&out.probs.to_vec())
        }
    };
    match cfg.method {
        SaliencyMethod::Gradient => gradient_map(f, x, class),
        SaliencyMethod::IntegratedGradients => integrated_gradients_map(f, x, class, cfg),
        SaliencyMethod::GradCam => grad_cam_map(f, x, class, last_conv_layer(f)?),
        SaliencyMethod::Counterfactual => Err(TensorError::Invalid {
            op: "attribution_map",
            message: "counterfactual maps require the search pipeline".into(),
        }),
    }
}
