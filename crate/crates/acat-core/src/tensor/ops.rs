//! Op implementations. Each op validates shapes, computes eagerly, and
//! registers a backward rule closure when gradients are needed.
//!
//! Convolution is plain cross-correlation (no kernel flip) over `[C, H, W]`
//! inputs with square kernels; padding is materialised into a scratch buffer
//! so the inner loops stay branch-free. Output extents follow
//! `H' = (H + 2p - k) / s + 1` with flooring division.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{BackCtx, Result, Tensor, TensorError, numel_of};
use crate::math;
use crate::rng::Prng;
use rand::Rng;

const CE_CLAMP: f32 = 1e-7;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::Shape {
            op,
            message: format!("operands differ: {sa:?} vs {sb:?}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f32> = self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            vec![self.clone(), other.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                vec![Some(ctx.gy.to_vec()), Some(ctx.gy.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f32> = self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            vec![self.clone(), other.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let neg: Vec<f32> = ctx.gy.iter().map(|g| -g).collect();
                vec![Some(ctx.gy.to_vec()), Some(neg)]
            }),
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f32> = self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            vec![self.clone(), other.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let a = ctx.parents[0].to_vec();
                let b = ctx.parents[1].to_vec();
                let ga: Vec<f32> = ctx.gy.iter().zip(&b).map(|(g, b)| g * b).collect();
                let gb: Vec<f32> = ctx.gy.iter().zip(&a).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(TensorError::Invalid {
                op: "scale",
                message: format!("factor is {c}"),
            });
        }
        let data: Vec<f32> = self.to_vec().iter().map(|a| a * c).collect();
        Tensor::from_op(
            "scale",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                vec![Some(ctx.gy.iter().map(|g| g * c).collect())]
            }),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(TensorError::Invalid {
                op: "add_scalar",
                message: format!("addend is {c}"),
            });
        }
        let data: Vec<f32> = self.to_vec().iter().map(|a| a + c).collect();
        Tensor::from_op(
            "add_scalar",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| vec![Some(ctx.gy.to_vec())]),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.to_vec().iter().map(|x| math::sigmoid(*x)).collect();
        Tensor::from_op(
            "sigmoid",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let g: Vec<f32> = ctx
                    .gy
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.to_vec().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let g: Vec<f32> = ctx
                    .gy
                    .iter()
                    .zip(&x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f32) -> Result<Tensor> {
        if !slope.is_finite() {
            return Err(TensorError::Invalid {
                op: "leaky_relu",
                message: format!("slope is {slope}"),
            });
        }
        let data: Vec<f32> = self
            .to_vec()
            .iter()
            .map(|x| if *x > 0.0 { *x } else { slope * x })
            .collect();
        Tensor::from_op(
            "leaky_relu",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let g: Vec<f32> = ctx
                    .gy
                    .iter()
                    .zip(&x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.to_vec().iter().map(|x| math::abs(*x)).collect();
        Tensor::from_op(
            "abs",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let g: Vec<f32> = ctx
                    .gy
                    .iter()
                    .zip(&x)
                    .map(|(g, x)| match x.partial_cmp(&0.0) {
                        Some(core::cmp::Ordering::Greater) => *g,
                        Some(core::cmp::Ordering::Less) => -g,
                        _ => 0.0,
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f32 = self.to_vec().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![self.clone()],
            vec![],
            vec![total],
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| vec![Some(vec![ctx.gy[0]; n])]),
        )
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                message: format!("mean of an empty tensor (shape {:?})", self.shape()),
            });
        }
        let total: f32 = self.to_vec().iter().sum();
        let inv = 1.0 / n as f32;
        Tensor::from_op(
            "mean",
            vec![self.clone()],
            vec![],
            vec![total * inv],
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| vec![Some(vec![ctx.gy[0] * inv; n])]),
        )
    }

    /// Sum of absolute differences, as a rank-0 scalar. Subgradient at ties
    /// is zero.
    pub fn l1_distance(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("l1_distance", self, other)?;
        let total: f32 = self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| math::abs(a - b))
            .sum();
        Tensor::from_op(
            "l1_distance",
            vec![self.clone(), other.clone()],
            vec![],
            vec![total],
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let a = ctx.parents[0].to_vec();
                let b = ctx.parents[1].to_vec();
                let g = ctx.gy[0];
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; a.len()];
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] = g * s;
                    gb[i] = -g * s;
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Cross entropy `-sum(t * ln p)` with probabilities clamped to
    /// `[1e-7, 1]` before the log. Gradients are masked where the clamp is
    /// active.
    pub fn cross_entropy(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("cross_entropy", self, target)?;
        let p = self.to_vec();
        let t = target.to_vec();
        let mut loss = 0.0f32;
        for (pi, ti) in p.iter().zip(&t) {
            let clamped = pi.clamp(CE_CLAMP, 1.0);
            loss -= ti * math::ln(clamped);
        }
        Tensor::from_op(
            "cross_entropy",
            vec![self.clone(), target.clone()],
            vec![],
            vec![loss],
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let p = ctx.parents[0].to_vec();
                let t = ctx.parents[1].to_vec();
                let g = ctx.gy[0];
                let mut gp = vec![0.0; p.len()];
                let mut gt = vec![0.0; p.len()];
                for i in 0..p.len() {
                    let clamped = p[i].clamp(CE_CLAMP, 1.0);
                    if p[i] >= CE_CLAMP && p[i] <= 1.0 {
                        gp[i] = -g * t[i] / clamped;
                    }
                    gt[i] = -g * math::ln(clamped);
                }
                vec![Some(gp), Some(gt)]
            }),
        )
    }

    /// Softmax along `axis`; every lane sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Shape {
                op: "softmax",
                message: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.to_vec();
        let mut out = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..k {
                    max = max.max(x[base + j * inner]);
                }
                let mut denom = 0.0f32;
                for j in 0..k {
                    let e = math::exp(x[base + j * inner] - max);
                    out[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..k {
                    out[base + j * inner] /= denom;
                }
            }
        }
        Tensor::from_op(
            "softmax",
            vec![self.clone()],
            shape,
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let y = ctx.out_data;
                let mut gx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * k * inner + i;
                        let mut dot = 0.0f32;
                        for j in 0..k {
                            let idx = base + j * inner;
                            dot += ctx.gy[idx] * y[idx];
                        }
                        for j in 0..k {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (ctx.gy[idx] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2-D cross-correlation. `self` is `[C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        padding: usize,
        stride: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernel.shape();
        let bs = bias.shape();
        if xs.len() != 3 {
            return Err(TensorError::Shape {
                op: "conv2d",
                message: format!("input must be [C, H, W], got {xs:?}"),
            });
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                message: format!("kernel must be [C_out, C_in, k, k], got {ks:?}"),
            });
        }
        if ks[1] != xs[0] {
            return Err(TensorError::Shape {
                op: "conv2d",
                message: format!("kernel expects {} input channels, input has {}", ks[1], xs[0]),
            });
        }
        if bs != [ks[0]] {
            return Err(TensorError::Shape {
                op: "conv2d",
                message: format!("bias must be [{}], got {bs:?}", ks[0]),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                message: format!("stride must be positive"),
            });
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ks[0], ks[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::Shape {
                op: "conv2d",
                message: format!(
                    "kernel {k} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let xp = pad_3d(&self.to_vec(), ci, h, w, padding);
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        let kern = kernel.to_vec();
        let b = bias.to_vec();
        let mut out = vec![0.0f32; co * oh * ow];
        for c_o in 0..co {
            let plane = &mut out[c_o * oh * ow..(c_o + 1) * oh * ow];
            plane.fill(b[c_o]);
            for c_i in 0..ci {
                let xplane = &xp[c_i * hp * wp..(c_i + 1) * hp * wp];
                let kbase = (c_o * ci + c_i) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wgt = kern[kbase + kh * k + kw];
                        if wgt == 0.0 {
                            continue;
                        }
                        if stride == 1 {
                            for r in 0..oh {
                                let src = &xplane[(r + kh) * wp + kw..(r + kh) * wp + kw + ow];
                                let dst = &mut plane[r * ow..(r + 1) * ow];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        } else {
                            for r in 0..oh {
                                let row = (r * stride + kh) * wp + kw;
                                let dst = &mut plane[r * ow..(r + 1) * ow];
                                for (c, d) in dst.iter_mut().enumerate() {
                                    *d += wgt * xplane[row + c * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_op(
            "conv2d",
            vec![self.clone(), kernel.clone(), bias.clone()],
            vec![co, oh, ow],
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                conv2d_backward(ctx, ci, h, w, co, k, padding, stride, oh, ow)
            }),
        )
    }

    /// Max across channels: `[C, H, W] -> [1, H, W]`. Gradient routes to the
    /// lowest-index channel on ties.
    pub fn channel_max_pool(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 || xs[0] == 0 {
            return Err(TensorError::Shape {
                op: "channel_max_pool",
                message: format!("input must be [C, H, W] with C >= 1, got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let x = self.to_vec();
        let hw = h * w;
        let mut out = vec![0.0f32; hw];
        let mut arg = vec![0u32; hw];
        for p in 0..hw {
            let mut best = x[p];
            let mut best_c = 0u32;
            for ch in 1..c {
                let v = x[ch * hw + p];
                if v > best {
                    best = v;
                    best_c = ch as u32;
                }
            }
            out[p] = best;
            arg[p] = best_c;
        }
        Tensor::from_op(
            "channel_max_pool",
            vec![self.clone()],
            vec![1, h, w],
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let mut gx = vec![0.0f32; c * hw];
                for p in 0..hw {
                    gx[arg[p] as usize * hw + p] = ctx.gy[p];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Multiply `[C, H, W]` features by a `[1, H, W]` mask, broadcast over
    /// channels.
    pub fn broadcast_hadamard(&self, mask: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ms = mask.shape();
        if xs.len() != 3 || ms.len() != 3 || ms[0] != 1 || ms[1] != xs[1] || ms[2] != xs[2] {
            return Err(TensorError::Shape {
                op: "broadcast_hadamard",
                message: format!("features {xs:?} need mask [1, {}, {}], got {ms:?}", xs[1], xs[2]),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let x = self.to_vec();
        let m = mask.to_vec();
        let mut out = vec![0.0f32; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = x[ch * hw + p] * m[p];
            }
        }
        Tensor::from_op(
            "broadcast_hadamard",
            vec![self.clone(), mask.clone()],
            vec![c, h, w],
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let m = ctx.parents[1].to_vec();
                let mut gx = vec![0.0f32; c * hw];
                let mut gm = vec![0.0f32; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let g = ctx.gy[ch * hw + p];
                        gx[ch * hw + p] = g * m[p];
                        gm[p] += g * x[ch * hw + p];
                    }
                }
                vec![Some(gx), Some(gm)]
            }),
        )
    }

    /// Non-overlapping average pooling with a square window; trailing rows
    /// and columns that do not fill a window are dropped.
    pub fn avg_pool2d(&self, window: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(TensorError::Shape {
                op: "avg_pool2d",
                message: format!("input must be [C, H, W], got {xs:?}"),
            });
        }
        if window == 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                message: format!("window must be positive"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / window, w / window);
        if oh == 0 || ow == 0 {
            return Err(TensorError::Shape {
                op: "avg_pool2d",
                message: format!("window {window} exceeds input {h}x{w}"),
            });
        }
        let x = self.to_vec();
        let inv = 1.0 / (window * window) as f32;
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = 0.0f32;
                    for dr in 0..window {
                        let row = (r * window + dr) * w + col * window;
                        for dc in 0..window {
                            acc += x[ch * h * w + row + dc];
                        }
                    }
                    out[(ch * oh + r) * ow + col] = acc * inv;
                }
            }
        }
        Tensor::from_op(
            "avg_pool2d",
            vec![self.clone()],
            vec![c, oh, ow],
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let g = ctx.gy[(ch * oh + r) * ow + col] * inv;
                            for dr in 0..window {
                                let row = (r * window + dr) * w + col * window;
                                for dc in 0..window {
                                    gx[ch * h * w + row + dc] += g;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling by 2 in both spatial dims.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(TensorError::Shape {
                op: "upsample_nearest2x",
                message: format!("input must be [C, H, W], got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let x = self.to_vec();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    out[(ch * oh + r) * ow + col] = x[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        Tensor::from_op(
            "upsample_nearest2x",
            vec![self.clone()],
            vec![c, oh, ow],
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            gx[(ch * h + r / 2) * w + col / 2] += ctx.gy[(ch * oh + r) * ow + col];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                message: format!("no tensors to concatenate"),
            });
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::Shape {
                op: "concat",
                message: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() {
                return Err(TensorError::Shape {
                    op: "concat",
                    message: format!("rank mismatch: {first:?} vs {s:?}"),
                });
            }
            for (d, (a, b)) in first.iter().zip(&s).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::Shape {
                        op: "concat",
                        message: format!("extent mismatch on dim {d}: {first:?} vs {s:?}"),
                    });
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let out_block = axis_total * inner;
        let mut out = vec![0.0f32; numel_of(&shape)];
        for o in 0..outer {
            let mut offset = 0usize;
            for (p, blk) in parts.iter().zip(&blocks) {
                let data = p.to_vec();
                out[o * out_block + offset..o * out_block + offset + blk]
                    .copy_from_slice(&data[o * blk..(o + 1) * blk]);
                offset += blk;
            }
        }
        Tensor::from_op(
            "concat",
            parts.to_vec(),
            shape,
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(blocks.len());
                let mut offset = 0usize;
                for blk in &blocks {
                    let mut g = vec![0.0f32; outer * blk];
                    for o in 0..outer {
                        g[o * blk..(o + 1) * blk].copy_from_slice(
                            &ctx.gy[o * out_block + offset..o * out_block + offset + blk],
                        );
                    }
                    grads.push(Some(g));
                    offset += blk;
                }
                grads
            }),
        )
    }

    /// Affine map. `weight` is `[out, in]`, `bias` is `[out]`; `self` is a
    /// `[in]` vector or a `[batch, in]` matrix.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if ws.len() != 2 {
            return Err(TensorError::Shape {
                op: "linear",
                message: format!("weight must be [out, in], got {ws:?}"),
            });
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if bs != [n_out] {
            return Err(TensorError::Shape {
                op: "linear",
                message: format!("bias must be [{n_out}], got {bs:?}"),
            });
        }
        let batch = match xs.len() {
            1 if xs[0] == n_in => None,
            2 if xs[1] == n_in => Some(xs[0]),
            _ => {
                return Err(TensorError::Shape {
                    op: "linear",
                    message: format!("input {xs:?} incompatible with weight {ws:?}"),
                });
            }
        };
        let x = self.to_vec();
        let w = weight.to_vec();
        let b = bias.to_vec();
        let rows = batch.unwrap_or(1);
        let mut out = vec![0.0f32; rows * n_out];
        for r in 0..rows {
            let xrow = &x[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wrow = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, xi) in wrow.iter().zip(xrow) {
                    acc += wi * xi;
                }
                out[r * n_out + o] = acc;
            }
        }
        let out_shape = match batch {
            None => vec![n_out],
            Some(bsz) => vec![bsz, n_out],
        };
        Tensor::from_op(
            "linear",
            vec![self.clone(), weight.clone(), bias.clone()],
            out_shape,
            out,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let w = ctx.parents[1].to_vec();
                let mut gx = vec![0.0f32; rows * n_in];
                let mut gw = vec![0.0f32; n_out * n_in];
                let mut gb = vec![0.0f32; n_out];
                for r in 0..rows {
                    let xrow = &x[r * n_in..(r + 1) * n_in];
                    let grow = &ctx.gy[r * n_out..(r + 1) * n_out];
                    let gxrow = &mut gx[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let g = grow[o];
                        gb[o] += g;
                        let wrow = &w[o * n_in..(o + 1) * n_in];
                        let gwrow = &mut gw[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            gxrow[i] += g * wrow[i];
                            gwrow[i] += g * xrow[i];
                        }
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        )
    }

    /// Inverted dropout. In training mode each element is kept with
    /// probability `1 - p` and scaled by `1/(1 - p)`. Outside training, or at
    /// `p = 0`, this is the identity and consumes no randomness.
    pub fn dropout(&self, p: f32, train: bool, rng: &mut Prng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                message: format!("probability must be in [0, 1), got {p}"),
            });
        }
        if !train || p == 0.0 {
            let data = self.to_vec();
            return Tensor::from_op(
                "dropout",
                vec![self.clone()],
                self.shape(),
                data,
                alloc::boxed::Box::new(|ctx: &BackCtx<'_>| vec![Some(ctx.gy.to_vec())]),
            );
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| {
                if rng.random::<f32>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f32> = self
            .to_vec()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Tensor::from_op(
            "dropout",
            vec![self.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let g: Vec<f32> = ctx.gy.iter().zip(&mask).map(|(g, m)| g * m).collect();
                vec![Some(g)]
            }),
        )
    }

    /// Multiply every element by a one-element tensor (gradients flow to
    /// both operands).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "mul_scalar_t",
                shape: s.shape(),
            });
        }
        let sv = s.to_vec()[0];
        let data: Vec<f32> = self.to_vec().iter().map(|x| x * sv).collect();
        Tensor::from_op(
            "mul_scalar_t",
            vec![self.clone(), s.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let sv = ctx.parents[1].to_vec()[0];
                let gx: Vec<f32> = ctx.gy.iter().map(|g| g * sv).collect();
                let gs: f32 = ctx.gy.iter().zip(&x).map(|(g, x)| g * x).sum();
                vec![Some(gx), Some(vec![gs])]
            }),
        )
    }

    /// Divide every element by a one-element tensor.
    pub fn div_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "div_scalar_t",
                shape: s.shape(),
            });
        }
        let sv = s.to_vec()[0];
        let data: Vec<f32> = self.to_vec().iter().map(|x| x / sv).collect();
        Tensor::from_op(
            "div_scalar_t",
            vec![self.clone(), s.clone()],
            self.shape(),
            data,
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].to_vec();
                let sv = ctx.parents[1].to_vec()[0];
                let gx: Vec<f32> = ctx.gy.iter().map(|g| g / sv).collect();
                let gs: f32 = ctx
                    .gy
                    .iter()
                    .zip(&x)
                    .map(|(g, x)| -g * x / (sv * sv))
                    .sum();
                vec![Some(gx), Some(vec![gs])]
            }),
        )
    }

    /// Same data, new shape; element counts must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                message: format!(
                    "cannot view {:?} ({} elements) as {shape:?} ({} elements)",
                    self.shape(),
                    self.numel(),
                    numel_of(shape)
                ),
            });
        }
        Tensor::from_op(
            "reshape",
            vec![self.clone()],
            shape.to_vec(),
            self.to_vec(),
            alloc::boxed::Box::new(|ctx: &BackCtx<'_>| vec![Some(ctx.gy.to_vec())]),
        )
    }

    /// Select index `i` along the leading axis, dropping that axis.
    pub fn select0(&self, index: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.is_empty() || index >= xs[0] {
            return Err(TensorError::Shape {
                op: "select0",
                message: format!("index {index} out of range for shape {xs:?}"),
            });
        }
        let rest: Vec<usize> = xs[1..].to_vec();
        let block = numel_of(&rest);
        let data = self.to_vec()[index * block..(index + 1) * block].to_vec();
        let d0 = xs[0];
        Tensor::from_op(
            "select0",
            vec![self.clone()],
            rest,
            data,
            alloc::boxed::Box::new(move |ctx: &BackCtx<'_>| {
                let mut gx = vec![0.0f32; d0 * block];
                gx[index * block..(index + 1) * block].copy_from_slice(ctx.gy);
                vec![Some(gx)]
            }),
        )
    }
}

fn pad_3d(x: &[f32], c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        for r in 0..h {
            let src = &x[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst_base = ch * hp * wp + (r + p) * wp + p;
            out[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    ctx: &BackCtx<'_>,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    padding: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<Option<Vec<f32>>> {
    let xp = pad_3d(&ctx.parents[0].to_vec(), ci, h, w, padding);
    let kern = ctx.parents[1].to_vec();
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let gy = ctx.gy;

    let mut gb = vec![0.0f32; co];
    for c_o in 0..co {
        gb[c_o] = gy[c_o * oh * ow..(c_o + 1) * oh * ow].iter().sum();
    }

    let mut gk = vec![0.0f32; co * ci * k * k];
    let mut gxp = vec![0.0f32; ci * hp * wp];
    for c_o in 0..co {
        let gplane = &gy[c_o * oh * ow..(c_o + 1) * oh * ow];
        for c_i in 0..ci {
            let xplane = &xp[c_i * hp * wp..(c_i + 1) * hp * wp];
            let gxplane = &mut gxp[c_i * hp * wp..(c_i + 1) * hp * wp];
            let kbase = (c_o * ci + c_i) * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wgt = kern[kbase + kh * k + kw];
                    let mut acc = 0.0f32;
                    if stride == 1 {
                        for r in 0..oh {
                            let grow = &gplane[r * ow..(r + 1) * ow];
                            let xoff = (r + kh) * wp + kw;
                            let xrow = &xplane[xoff..xoff + ow];
                            let gxrow = &mut gxplane[xoff..xoff + ow];
                            for i in 0..ow {
                                acc += grow[i] * xrow[i];
                                gxrow[i] += wgt * grow[i];
                            }
                        }
                    } else {
                        for r in 0..oh {
                            let grow = &gplane[r * ow..(r + 1) * ow];
                            let base = (r * stride + kh) * wp + kw;
                            for (i, g) in grow.iter().enumerate() {
                                let xi = base + i * stride;
                                acc += g * xplane[xi];
                                gxplane[xi] += wgt * g;
                            }
                        }
                    }
                    gk[kbase + kh * k + kw] += acc;
                }
            }
        }
    }

    let gx = if padding == 0 {
        gxp
    } else {
        let mut out = vec![0.0f32; ci * h * w];
        for c_i in 0..ci {
            for r in 0..h {
                let src_base = c_i * hp * wp + (r + padding) * wp + padding;
                out[(c_i * h + r) * w..(c_i * h + r + 1) * w]
                    .copy_from_slice(&gxp[src_base..src_base + w]);
            }
        }
        out
    };
    vec![Some(gx), Some(gk), Some(gb)]
}
