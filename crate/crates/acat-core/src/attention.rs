//! The attention mechanism: per-scale spatial masks derived from a saliency
//! branch, feature modulation with a skip connection, fusion of the masks
//! ahead of the classifier head, and attention over slices.
//!
//! The saliency branch mirrors the image branch's conv stack but consumes
//! saliency maps as its input; its features never touch the image branch
//! except through the sigmoid masks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::nets::{
    argmax, ConvStack, EpochStats, ModelGraph, Record, StackOut, TapLabel, TrainConfig, TrainLog,
    VolumeBatch,
};
use crate::rng::{self, Prng};
use crate::saliency::SaliencyMap;
use crate::tensor::{Optimizer, Result, Tensor, TensorError};

/// Which attention sites are active. The early mask is always on; the
/// flags mirror the progressive ablations (fusion, then late, then middle).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationFlags {
    pub use_middle: bool,
    pub use_late: bool,
    pub use_fusion: bool,
}

impl AblationFlags {
    pub fn full() -> AblationFlags {
        AblationFlags { use_middle: true, use_late: true, use_fusion: true }
    }

    pub fn active_labels(&self) -> Vec<TapLabel> {
        let mut labels = alloc::vec![TapLabel::Early];
        if self.use_middle {
            labels.push(TapLabel::Middle);
        }
        if self.use_late {
            labels.push(TapLabel::Late);
        }
        labels
    }

    pub fn name(&self) -> String {
        match (self.use_fusion, self.use_late, self.use_middle) {
            (true, true, true) => "full".into(),
            (false, true, true) => "no-fusion".into(),
            (false, false, true) => "no-fusion-late".into(),
            (false, false, false) => "no-fusion-late-middle".into(),
            _ => format!(
                "fusion={},late={},middle={}",
                self.use_fusion, self.use_late, self.use_middle
            ),
        }
    }
}

/// One attention site: a 3x3 mask conv over the channel-maxed saliency
/// features at a tapped layer.
pub struct AttentionTap {
    label: TapLabel,
    expected: (usize, usize, usize),
    conv_w: Tensor,
    conv_b: Tensor,
}

impl AttentionTap {
    pub fn new(label: TapLabel, expected: (usize, usize, usize), seed: u64) -> AttentionTap {
        let mut r = rng::substream(seed, "mask-conv", label.index() as u64);
        let limit = 1.0 / 3.0;
        let conv_w = Tensor::new(&[1, 1, 3, 3], rng::uniform_vec(9, -limit, limit, &mut r))
            .expect("finite init");
        conv_w.set_requires_grad(true);
        let conv_b = Tensor::new(&[1], rng::uniform_vec(1, -limit, limit, &mut r))
            .expect("finite init");
        conv_b.set_requires_grad(true);
        AttentionTap { label, expected, conv_w, conv_b }
    }

    pub fn label(&self) -> TapLabel {
        self.label
    }

    pub fn expected_shape(&self) -> (usize, usize, usize) {
        self.expected
    }

    pub fn params(&self) -> Vec<Tensor> {
        alloc::vec![self.conv_w.clone(), self.conv_b.clone()]
    }
}

/// sigmoid(conv3x3(channel_max_pool(S))), padding 1: a soft [1,H,W] mask
/// whose extents equal the feature extents at the tap.
pub fn spatial_attention_mask(tap: &AttentionTap, features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    let want = [tap.expected.0, tap.expected.1, tap.expected.2];
    if shape != want {
        return Err(TensorError::Invalid {
            op: "spatial_attention_mask",
            message: format!(
                "{} tap expects features {want:?}, got {shape:?}",
                tap.label.name()
            ),
        });
    }
    features
        .channel_max_pool()?
        .conv2d(&tap.conv_w, &tap.conv_b, 1, 1)?
        .sigmoid()
}

/// G = F + F ⊙ mask. The skip term keeps dG/dF = 1 + mask.
pub fn modulate(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let fs = features.shape();
    let ms = mask.shape();
    if ms.len() != 3 || ms[0] != 1 || fs.len() != 3 || fs[1..] != ms[1..] {
        return Err(TensorError::Invalid {
            op: "modulate",
            message: format!("features {fs:?} vs mask {ms:?}"),
        });
    }
    features.add(&features.broadcast_hadamard(mask)?)
}

/// Pools each per-scale mask down to the final feature extents, concatenates
/// them and mixes with a 1x1 conv into a single fused sigmoid mask.
pub struct FusionLayer {
    out_extents: (usize, usize),
    weight: Tensor,
    bias: Tensor,
}

impl FusionLayer {
    pub fn new(channels: usize, out_extents: (usize, usize), seed: u64) -> FusionLayer {
        let mut r = rng::substream(seed, "fusion", 0);
        let limit = 1.0 / crate::math::sqrt(channels as f32);
        let weight = Tensor::new(
            &[1, channels, 1, 1],
            rng::uniform_vec(channels, -limit, limit, &mut r),
        )
        .expect("finite init");
        weight.set_requires_grad(true);
        let bias =
            Tensor::new(&[1], rng::uniform_vec(1, -limit, limit, &mut r)).expect("finite init");
        bias.set_requires_grad(true);
        FusionLayer { out_extents, weight, bias }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<Tensor> {
        alloc::vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn fuse_masks(&self, masks: &[Tensor]) -> Result<Tensor> {
        const OP: &str = "fuse_masks";
        if masks.len() != self.channels() {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("{} masks for {} fusion channels", masks.len(), self.channels()),
            });
        }
        let (oh, ow) = self.out_extents;
        let mut pooled = Vec::with_capacity(masks.len());
        for m in masks {
            let ms = m.shape();
            if ms.len() != 3 || ms[0] != 1 {
                return Err(TensorError::Invalid {
                    op: OP,
                    message: format!("mask shape {ms:?} is not [1,H,W]"),
                });
            }
            if ms[1] % oh != 0 || ms[2] % ow != 0 || ms[1] / oh != ms[2] / ow {
                return Err(TensorError::Invalid {
                    op: OP,
                    message: format!("mask {}x{} does not pool evenly to {oh}x{ow}", ms[1], ms[2]),
                });
            }
            let window = ms[1] / oh;
            pooled.push(if window == 1 { m.clone() } else { m.avg_pool2d(window)? });
        }
        Tensor::concat(&pooled, 0)?
            .conv2d(&self.weight, &self.bias, 0, 1)?
            .sigmoid()
    }
}

/// Per-slice scalar gates from a one-hidden-layer MLP; the combined feature
/// is the gate-weighted mean of the slice features.
pub struct SliceAttention {
    hidden_w: Tensor,
    hidden_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
    dropout_p: f32,
}

impl SliceAttention {
    pub fn new(feature_dim: usize, hidden: usize, dropout_p: f32, seed: u64) -> Result<SliceAttention> {
        if hidden == 0 {
            return Err(TensorError::Invalid {
                op: "SliceAttention::new",
                message: "hidden size must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(TensorError::Invalid {
                op: "SliceAttention::new",
                message: format!("dropout p {dropout_p} outside [0,1)"),
            });
        }
        let mut r = rng::substream(seed, "slice-attn", 0);
        let init = |shape: &[usize], fan_in: usize, r: &mut Prng| {
            let limit = 1.0 / crate::math::sqrt(fan_in as f32);
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, rng::uniform_vec(n, -limit, limit, r)).expect("finite init");
            t.set_requires_grad(true);
            t
        };
        Ok(SliceAttention {
            hidden_w: init(&[hidden, feature_dim], feature_dim, &mut r),
            hidden_b: init(&[hidden], feature_dim, &mut r),
            out_w: init(&[1, hidden], hidden, &mut r),
            out_b: init(&[1], hidden, &mut r),
            dropout_p,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        alloc::vec![
            self.hidden_w.clone(),
            self.hidden_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
        ]
    }

    /// Returns the per-slice gates and the normalized weighted mean
    /// Σ w_s f_s / Σ w_s.
    pub fn combine(
        &self,
        features: &[Tensor],
        train: bool,
        rng: &mut Prng,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if features.is_empty() {
            return Err(TensorError::Invalid {
                op: "SliceAttention::combine",
                message: "no slice features".into(),
            });
        }
        let mut gates = Vec::with_capacity(features.len());
        for f in features {
            let h = f.linear(&self.hidden_w, &self.hidden_b)?.leaky_relu(0.01)?;
            let h = h.dropout(self.dropout_p, train, rng)?;
            gates.push(h.linear(&self.out_w, &self.out_b)?.sigmoid()?);
        }
        let mut weighted = features[0].mul_scalar_t(&gates[0])?;
        let mut gate_sum = gates[0].clone();
        for (f, g) in features[1..].iter().zip(gates[1..].iter()) {
            weighted = weighted.add(&f.mul_scalar_t(g)?)?;
            gate_sum = gate_sum.add(g)?;
        }
        let combined = weighted.div_scalar_t(&gate_sum)?;
        Ok((gates, combined))
    }
}

/// Configuration for assembling an attention model around a trained
/// classifier.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AcatConfig {
    pub ablation: AblationFlags,
    pub slice_hidden: usize,
    pub slice_dropout: f32,
}

impl AcatConfig {
    pub fn standard() -> AcatConfig {
        AcatConfig { ablation: AblationFlags::full(), slice_hidden: 32, slice_dropout: 0.1 }
    }

    pub fn with_ablation(ablation: AblationFlags) -> AcatConfig {
        AcatConfig { ablation, ..AcatConfig::standard() }
    }
}

/// Output of one attention forward.
pub struct AcatOut {
    pub probs: Tensor,
    pub logits: Tensor,
    /// Slice gates, empty in identity mode.
    pub slice_gates: Vec<f32>,
    /// Image-branch per-slice stack outputs (taps/preacts per `Record`).
    pub image_slices: Vec<StackOut>,
}

/// The attention classifier: a trained image branch, a fresh saliency
/// branch of the same conv architecture, mask convs at the active taps,
/// optional fusion, and slice attention.
pub struct AcatModel {
    image: ModelGraph,
    saliency: ConvStack,
    taps: Vec<AttentionTap>,
    fusion: Option<FusionLayer>,
    slice_attn: SliceAttention,
    ablation: AblationFlags,
    identity_mode: Cell<bool>,
    mask_override: Cell<Option<(TapLabel, f32)>>,
}

impl AcatModel {
    /// Wraps an image classifier (typically with trained weights) with
    /// freshly initialized attention parameters.
    pub fn build(image: ModelGraph, config: &AcatConfig, seed: u64) -> Result<AcatModel> {
        const OP: &str = "AcatModel::build";
        let image_taps = image.stack().tap_shapes();
        let find = |label: TapLabel| -> Result<(usize, usize, usize)> {
            image_taps
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, s)| *s)
                .ok_or_else(|| TensorError::Invalid {
                    op: OP,
                    message: format!("image branch has no {} tap", label.name()),
                })
        };
        let saliency = ConvStack::build(
            &image.config().layers,
            image.config().input,
            seed,
            "saliency",
        )?;
        let mut taps = Vec::new();
        for label in config.ablation.active_labels() {
            let expected = find(label)?;
            let sal_shape = saliency
                .tap_shapes()
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, s)| *s);
            if sal_shape != Some(expected) {
                return Err(TensorError::Invalid {
                    op: OP,
                    message: format!("saliency branch disagrees on {} tap shape", label.name()),
                });
            }
            taps.push(AttentionTap::new(label, expected, seed));
        }
        let fusion = if config.ablation.use_fusion {
            let (_, fh, fw) = image.feature_shape();
            Some(FusionLayer::new(taps.len(), (fh, fw), seed))
        } else {
            None
        };
        let slice_attn = SliceAttention::new(
            image.feature_dim(),
            config.slice_hidden,
            config.slice_dropout,
            seed,
        )?;
        Ok(AcatModel {
            image,
            saliency,
            taps,
            fusion,
            slice_attn,
            ablation: config.ablation,
            identity_mode: Cell::new(false),
            mask_override: Cell::new(None),
        })
    }

    pub fn image(&self) -> &ModelGraph {
        &self.image
    }

    pub fn ablation(&self) -> AblationFlags {
        self.ablation
    }

    /// With identity mode on, the forward is exactly the baseline image
    /// branch: no modulation, no fusion, plain slice mean.
    pub fn set_identity_mode(&self, yes: bool) {
        self.identity_mode.set(yes);
    }

    #[cfg(test)]
    pub(crate) fn set_mask_override(&self, over: Option<(TapLabel, f32)>) {
        self.mask_override.set(over);
    }

    pub fn set_train(&self, yes: bool) {
        self.image.set_train(yes);
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.image.params();
        out.extend(self.saliency.params());
        for tap in &self.taps {
            out.extend(tap.params());
        }
        if let Some(f) = &self.fusion {
            out.extend(f.params());
        }
        out.extend(self.slice_attn.params());
        out
    }

    /// Parameters the current ablation actually routes gradient into:
    /// the saliency convs past the last active tap are excluded.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = self.image.params();
        let last = *self
            .ablation
            .active_labels()
            .last()
            .expect("at least the early tap is active");
        out.extend(self.saliency.params_through_tap(last));
        for tap in &self.taps {
            out.extend(tap.params());
        }
        if let Some(f) = &self.fusion {
            out.extend(f.params());
        }
        out.extend(self.slice_attn.params());
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.image.named_params();
        out.extend(self.saliency.named_params("saliency."));
        for tap in &self.taps {
            let p = tap.params();
            out.push((format!("mask.{}.weight", tap.label.name()), p[0].clone()));
            out.push((format!("mask.{}.bias", tap.label.name()), p[1].clone()));
        }
        if let Some(f) = &self.fusion {
            let p = f.params();
            out.push(("fusion.weight".into(), p[0].clone()));
            out.push(("fusion.bias".into(), p[1].clone()));
        }
        let p = self.slice_attn.params();
        out.push(("slice.hidden.weight".into(), p[0].clone()));
        out.push(("slice.hidden.bias".into(), p[1].clone()));
        out.push(("slice.out.weight".into(), p[2].clone()));
        out.push(("slice.out.bias".into(), p[3].clone()));
        out
    }

    fn masks_for_slice(&self, map_slice: &Tensor, rng: &mut Prng) -> Result<Vec<(TapLabel, Tensor)>> {
        let sal = self.saliency.forward_with(
            map_slice,
            self.image.is_train(),
            Some(rng),
            Record { taps: true, preacts: false },
            |_, t| Ok(t),
        )?;
        let mut masks = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let feat = sal
                .taps
                .iter()
                .find(|(l, _)| *l == tap.label)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TensorError::Invalid {
                    op: "acat_forward",
                    message: format!("saliency branch produced no {} tap", tap.label.name()),
                })?;
            let mut mask = spatial_attention_mask(tap, &feat)?;
            if let Some((label, value)) = self.mask_override.get() {
                if label == tap.label {
                    mask = Tensor::full(&mask.shape(), value)?;
                }
            }
            masks.push((tap.label, mask));
        }
        Ok(masks)
    }

    /// Forward one volume with its saliency maps.
    pub fn forward_volume(
        &self,
        volume: &Tensor,
        maps: &SaliencyMap,
        rng: Option<&mut Prng>,
        record: Record,
    ) -> Result<AcatOut> {
        if self.identity_mode.get() {
            let out = self.image.forward_volume(volume, rng, record)?;
            return Ok(AcatOut {
                probs: out.probs,
                logits: out.logits,
                slice_gates: Vec::new(),
                image_slices: out.slices,
            });
        }
        let vshape = volume.shape();
        if vshape.len() != 4 {
            return Err(TensorError::Invalid {
                op: "acat_forward",
                message: format!("expected [S,c,H,W] volume, got {vshape:?}"),
            });
        }
        let slices = vshape[0];
        if maps.maps.shape() != alloc::vec![slices, 1, vshape[2], vshape[3]] {
            return Err(TensorError::Invalid {
                op: "acat_forward",
                message: format!(
                    "saliency maps {:?} do not match volume {vshape:?}",
                    maps.maps.shape()
                ),
            });
        }
        let mut dummy = rng::seeded(0);
        let rng = rng.unwrap_or(&mut dummy);
        let mut feats = Vec::with_capacity(slices);
        let mut outs = Vec::with_capacity(slices);
        for s in 0..slices {
            let map_slice = maps.maps.select0(s)?;
            let masks = self.masks_for_slice(&map_slice, &mut *rng)?;
            let x = volume.select0(s)?;
            let img = self.image.forward_slice_with(&x, Some(&mut *rng), record, |label, f| {
                match masks.iter().find(|(l, _)| *l == label) {
                    Some((_, mask)) => modulate(&f, mask),
                    None => Ok(f),
                }
            })?;
            let final_feat = match &self.fusion {
                Some(fusion) => {
                    let ordered: Vec<Tensor> = masks.iter().map(|(_, m)| m.clone()).collect();
                    let fused = fusion.fuse_masks(&ordered)?;
                    img.out.broadcast_hadamard(&fused)?
                }
                None => img.out.clone(),
            };
            feats.push(final_feat.reshape(&[self.image.feature_dim()])?);
            outs.push(img);
        }
        let (gates, combined) =
            self.slice_attn.combine(&feats, self.image.is_train(), rng)?;
        let logits = self.image.apply_head(&combined)?;
        let probs = logits.softmax(0)?;
        let slice_gates = gates
            .iter()
            .map(|g| g.item())
            .collect::<Result<Vec<f32>>>()?;
        Ok(AcatOut { probs, logits, slice_gates, image_slices: outs })
    }

    /// Rows of per-volume probabilities for a whole batch.
    pub fn forward_batch(
        &self,
        batch: &VolumeBatch,
        maps: &[SaliencyMap],
        rng: Option<&mut Prng>,
    ) -> Result<Tensor> {
        if maps.len() != batch.len() {
            return Err(TensorError::Invalid {
                op: "acat_forward",
                message: format!("{} maps for {} volumes", maps.len(), batch.len()),
            });
        }
        let mut dummy = rng::seeded(0);
        let rng = rng.unwrap_or(&mut dummy);
        let k = self.image.num_classes();
        let mut rows = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let out = self.forward_volume(
                &batch.volume(b)?,
                &maps[b],
                Some(&mut *rng),
                Record::default(),
            )?;
            rows.push(out.probs.reshape(&[1, k])?);
        }
        Tensor::concat(&rows, 0)
    }
}

/// Pre-activation collection through the attention forward, mirroring the
/// baseline version: one tensor per image-branch conv layer plus the head.
pub fn collect_preactivations(
    model: &AcatModel,
    batch: &VolumeBatch,
    maps: &[SaliencyMap],
) -> Result<Vec<Tensor>> {
    if batch.len() == 0 || maps.len() != batch.len() {
        return Err(TensorError::Invalid {
            op: "collect_preactivations",
            message: "empty batch or map count mismatch".into(),
        });
    }
    let conv_count = model.image.stack().params().len() / 2;
    let mut per_layer: Vec<Vec<f32>> = alloc::vec![Vec::new(); conv_count];
    let mut layer_shapes: Vec<Vec<usize>> = alloc::vec![Vec::new(); conv_count];
    let mut head_rows: Vec<f32> = Vec::new();
    let mut n_planes = 0usize;
    for b in 0..batch.len() {
        let out = model.forward_volume(
            &batch.volume(b)?,
            &maps[b],
            None,
            Record { taps: false, preacts: true },
        )?;
        for slice_out in &out.image_slices {
            n_planes += 1;
            for (m, z) in slice_out.preacts.iter().enumerate() {
                layer_shapes[m] = z.shape();
                per_layer[m].extend_from_slice(&z.to_vec());
            }
        }
        head_rows.extend_from_slice(&out.logits.to_vec());
    }
    let mut result = Vec::with_capacity(conv_count + 1);
    for (m, data) in per_layer.into_iter().enumerate() {
        let mut shape = alloc::vec![n_planes];
        shape.extend_from_slice(&layer_shapes[m]);
        result.push(Tensor::new(&shape, data)?);
    }
    result.push(Tensor::new(&[batch.len(), model.image.num_classes()], head_rows)?);
    Ok(result)
}

/// Cross-entropy fine-tuning of the full attention model. Saliency maps are
/// inputs: they are never updated and receive no gradients.
pub fn train_acat(
    model: &AcatModel,
    data: &VolumeBatch,
    maps: &[SaliencyMap],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    const OP: &str = "train_acat";
    if data.is_empty() {
        return Err(TensorError::Invalid { op: OP, message: "empty training set".into() });
    }
    if maps.len() != data.len() {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("{} maps for {} volumes", maps.len(), data.len()),
        });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(TensorError::Invalid { op: OP, message: "bad train config".into() });
    }
    let k = model.image.num_classes();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid { op: OP, message: format!("label {bad} outside 0..{k}") });
    }
    let params = model.trainable_params();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut log = TrainLog::default();
    let stage = |epoch: usize, batch: usize, e: TensorError| TensorError::Invalid {
        op: OP,
        message: format!("epoch {epoch} batch {batch}: {e}"),
    };
    for epoch in 0..cfg.epochs {
        model.set_train(true);
        let mut shuffle_rng = rng::substream(cfg.seed, "shuffle", epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut drop_rng = rng::substream(cfg.seed, "dropout", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let out = model
                    .forward_volume(
                        &data.volume(i)?,
                        &maps[i],
                        Some(&mut drop_rng),
                        Record::default(),
                    )
                    .map_err(|e| stage(epoch, batch_idx, e))?;
                if argmax(&out.probs.to_vec()) == data.labels[i] {
                    correct += 1;
                }
                let mut onehot = alloc::vec![0.0f32; k];
                onehot[data.labels[i]] = 1.0;
                let target = Tensor::new(&[k], onehot)?;
                terms.push(
                    out.probs
                        .cross_entropy(&target)
                        .map_err(|e| stage(epoch, batch_idx, e))?,
                );
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = total.add(t)?;
            }
            let batch_loss = total.scale(1.0 / chunk.len() as f32)?;
            loss_sum += batch_loss.item()? as f64 * chunk.len() as f64;
            batch_loss.backward().map_err(|e| stage(epoch, batch_idx, e))?;
            opt.step(&params).map_err(|e| stage(epoch, batch_idx, e))?;
        }
        log.epochs.push(EpochStats {
            loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        });
    }
    model.set_train(false);
    Ok(log)
}
