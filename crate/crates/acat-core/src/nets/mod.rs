//! Model builders and forward passes: the volume classifier and the
//! convolutional autoencoder.
//!
//! Both models are assembled from the same [`ConvStack`] walker, so the
//! attention code can re-run a stack with interventions at tapped layers
//! without duplicating any shape logic.

mod train;

pub use train::{
    reconstruction_mse, train_autoencoder, train_model, EpochStats, ReconLog, TrainConfig,
    TrainLog,
};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::rng::{self, Prng};
use crate::synth::{RegionLabel, SynthSample};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Act {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

/// Marker for the three layers whose features feed attention masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TapLabel {
    Early,
    Middle,
    Late,
}

impl TapLabel {
    pub const ALL: [TapLabel; 3] = [TapLabel::Early, TapLabel::Middle, TapLabel::Late];

    pub fn index(&self) -> usize {
        match self {
            TapLabel::Early => 0,
            TapLabel::Middle => 1,
            TapLabel::Late => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TapLabel::Early => "early",
            TapLabel::Middle => "middle",
            TapLabel::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    AvgPool { window: usize },
    Upsample2x,
    Act(Act),
    Dropout { p: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub tap: Option<TapLabel>,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, padding: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv { out_channels, kernel, stride: 1, padding },
            tap: None,
        }
    }

    pub fn pool(window: usize) -> LayerSpec {
        LayerSpec { kind: LayerKind::AvgPool { window }, tap: None }
    }

    pub fn upsample() -> LayerSpec {
        LayerSpec { kind: LayerKind::Upsample2x, tap: None }
    }

    pub fn act(a: Act) -> LayerSpec {
        LayerSpec { kind: LayerKind::Act(a), tap: None }
    }

    pub fn act_tapped(a: Act, tap: TapLabel) -> LayerSpec {
        LayerSpec { kind: LayerKind::Act(a), tap: Some(tap) }
    }

    pub fn dropout(p: f32) -> LayerSpec {
        LayerSpec { kind: LayerKind::Dropout { p }, tap: None }
    }
}

/// What a stack forward should hand back besides its output.
#[derive(Debug, Clone, Copy, Default)]
pub struct Record {
    pub taps: bool,
    pub preacts: bool,
}

/// Output of one stack walk.
pub struct StackOut {
    pub out: Tensor,
    /// Tapped values in encounter order, post-intervention.
    pub taps: Vec<(TapLabel, Tensor)>,
    /// Conv outputs before their activation, in conv order.
    pub preacts: Vec<Tensor>,
}

/// An ordered stack of conv/pool/activation layers with its parameters and
/// resolved shapes.
pub struct ConvStack {
    specs: Vec<LayerSpec>,
    convs: Vec<(Tensor, Tensor)>,
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
}

fn uniform_init(shape: &[usize], fan_in: usize, r: &mut Prng) -> Tensor {
    let limit = 1.0 / crate::math::sqrt(fan_in as f32);
    let n: usize = shape.iter().product();
    let t = Tensor::new(shape, rng::uniform_vec(n, -limit, limit, r)).expect("finite init");
    t.set_requires_grad(true);
    t
}

impl ConvStack {
    /// Validates the spec list, resolves shapes and initializes conv
    /// parameters from `substream(seed, stream, conv_index)`.
    pub fn build(
        specs: &[LayerSpec],
        in_shape: (usize, usize, usize),
        seed: u64,
        stream: &str,
    ) -> Result<ConvStack> {
        let fail = |message: String| -> Result<ConvStack> {
            Err(TensorError::Invalid { op: "ConvStack::build", message })
        };
        let (mut c, mut h, mut w) = in_shape;
        if c == 0 || h == 0 || w == 0 {
            return fail(format!("input shape {in_shape:?} has a zero extent"));
        }
        let mut convs = Vec::new();
        let mut seen_taps: Vec<TapLabel> = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            match spec.kind {
                LayerKind::Conv { out_channels, kernel, stride, padding } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return fail(format!("layer {i}: conv extents must be positive"));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return fail(format!("layer {i}: kernel {kernel} exceeds padded input"));
                    }
                    let mut r = rng::substream(seed, stream, convs.len() as u64);
                    let fan_in = c * kernel * kernel;
                    let weight = uniform_init(&[out_channels, c, kernel, kernel], fan_in, &mut r);
                    let bias = uniform_init(&[out_channels], fan_in, &mut r);
                    convs.push((weight, bias));
                    c = out_channels;
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                }
                LayerKind::AvgPool { window } => {
                    if window == 0 || window > h || window > w {
                        return fail(format!("layer {i}: pool window {window} does not fit {h}x{w}"));
                    }
                    h /= window;
                    w /= window;
                }
                LayerKind::Upsample2x => {
                    h *= 2;
                    w *= 2;
                }
                LayerKind::Act(_) => {}
                LayerKind::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return fail(format!("layer {i}: dropout p {p} outside [0,1)"));
                    }
                }
            }
            if let Some(tap) = spec.tap {
                if seen_taps.contains(&tap) {
                    return fail(format!("duplicate {} tap", tap.name()));
                }
                seen_taps.push(tap);
            }
        }
        Ok(ConvStack { specs: specs.to_vec(), convs, in_shape, out_shape: (c, h, w) })
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    /// Labels carried by this stack, in encounter order.
    pub fn tap_labels(&self) -> Vec<TapLabel> {
        self.specs.iter().filter_map(|s| s.tap).collect()
    }

    /// Shape of the flowing value at each tap, in encounter order.
    pub fn tap_shapes(&self) -> Vec<(TapLabel, (usize, usize, usize))> {
        let (mut c, mut h, mut w) = self.in_shape;
        let mut out = Vec::new();
        for spec in &self.specs {
            match spec.kind {
                LayerKind::Conv { out_channels, kernel, stride, padding } => {
                    c = out_channels;
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                }
                LayerKind::AvgPool { window } => {
                    h /= window;
                    w /= window;
                }
                LayerKind::Upsample2x => {
                    h *= 2;
                    w *= 2;
                }
                LayerKind::Act(_) | LayerKind::Dropout { .. } => {}
            }
            if let Some(tap) = spec.tap {
                out.push((tap, (c, h, w)));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    /// Parameters of the convs up to and including the one feeding the
    /// given tap; the tail past it cannot influence that tap's output.
    pub fn params_through_tap(&self, label: TapLabel) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut conv = 0usize;
        for spec in &self.specs {
            if let LayerKind::Conv { .. } = spec.kind {
                let (w, b) = &self.convs[conv];
                out.push(w.clone());
                out.push(b.clone());
                conv += 1;
            }
            if spec.tap == Some(label) {
                return out;
            }
        }
        out
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}conv{i}.weight"), w.clone()));
            out.push((format!("{prefix}conv{i}.bias"), b.clone()));
        }
        out
    }

    /// Runs the stack. `hook` sees the flowing value at every tapped layer
    /// and its return value flows onward, which is how attention modulation
    /// and the dropout control intervene without owning the walk.
    pub fn forward_with<F>(
        &self,
        x: &Tensor,
        train: bool,
        rng: Option<&mut Prng>,
        record: Record,
        mut hook: F,
    ) -> Result<StackOut>
    where
        F: FnMut(TapLabel, Tensor) -> Result<Tensor>,
    {
        let got: Vec<usize> = x.shape();
        let want = [self.in_shape.0, self.in_shape.1, self.in_shape.2];
        if got != want {
            return Err(TensorError::Invalid {
                op: "ConvStack::forward",
                message: format!("input shape {got:?}, stack expects {want:?}"),
            });
        }
        let mut dummy = rng::seeded(0);
        let rng = rng.unwrap_or(&mut dummy);
        let mut cur = x.clone();
        let mut conv_idx = 0;
        let mut taps = Vec::new();
        let mut preacts = Vec::new();
        for spec in &self.specs {
            cur = match spec.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let (w, b) = &self.convs[conv_idx];
                    conv_idx += 1;
                    let z = cur.conv2d(w, b, padding, stride)?;
                    if record.preacts {
                        preacts.push(z.clone());
                    }
                    z
                }
                LayerKind::AvgPool { window } => cur.avg_pool2d(window)?,
                LayerKind::Upsample2x => cur.upsample_nearest2x()?,
                LayerKind::Act(a) => match a {
                    Act::Relu => cur.relu()?,
                    Act::LeakyRelu(slope) => cur.leaky_relu(slope)?,
                    Act::Sigmoid => cur.sigmoid()?,
                },
                LayerKind::Dropout { p } => cur.dropout(p, train, rng)?,
            };
            if let Some(tap) = spec.tap {
                cur = hook(tap, cur)?;
                if record.taps {
                    taps.push((tap, cur.clone()));
                }
            }
        }
        Ok(StackOut { out: cur, taps, preacts })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: Option<&mut Prng>,
        record: Record,
    ) -> Result<StackOut> {
        self.forward_with(x, train, rng, record, |_, t| Ok(t))
    }
}

/// Layer list plus head geometry for the volume classifier.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierConfig {
    pub layers: Vec<LayerSpec>,
    /// Per-slice input shape (channels, height, width).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    /// Fixed affine input normalization (x - shift) * scale applied before
    /// the first layer. Zero-centering the intensities keeps early conv
    /// gradients from all pointing the same way.
    pub input_shift: f32,
    pub input_scale: f32,
}

impl ClassifierConfig {
    /// The configuration the experiments run on: five conv blocks on
    /// 64x64 slices with taps after the first, third and fifth conv's
    /// activation.
    pub fn standard(num_classes: usize) -> ClassifierConfig {
        let mut layers = Vec::new();
        let channels = [8usize, 16, 16, 32, 32];
        let taps = [
            Some(TapLabel::Early),
            None,
            Some(TapLabel::Middle),
            None,
            Some(TapLabel::Late),
        ];
        for (&ch, &tap) in channels.iter().zip(taps.iter()) {
            layers.push(LayerSpec::conv(ch, 3, 1));
            layers.push(match tap {
                Some(t) => LayerSpec::act_tapped(Act::Relu, t),
                None => LayerSpec::act(Act::Relu),
            });
            layers.push(LayerSpec::pool(2));
        }
        ClassifierConfig {
            layers,
            input: (1, 64, 64),
            num_classes,
            input_shift: 0.4,
            input_scale: 4.0,
        }
    }
}

/// Classifier over slice volumes: a shared per-slice conv stack, a mean
/// combine over slices and a linear softmax head.
pub struct ModelGraph {
    config: ClassifierConfig,
    stack: ConvStack,
    head_w: Tensor,
    head_b: Tensor,
    train_mode: Cell<bool>,
    fitted: Cell<bool>,
}

/// One volume's forward results.
pub struct VolumeOut {
    pub probs: Tensor,
    pub logits: Tensor,
    pub slices: Vec<StackOut>,
}

impl ModelGraph {
    pub fn build(config: &ClassifierConfig, seed: u64) -> Result<ModelGraph> {
        if config.num_classes < 2 {
            return Err(TensorError::Invalid {
                op: "ModelGraph::build",
                message: format!("need at least 2 classes, got {}", config.num_classes),
            });
        }
        let stack = ConvStack::build(&config.layers, config.input, seed, "classifier")?;
        let (c, h, w) = stack.out_shape();
        let feat = c * h * w;
        let mut r = rng::substream(seed, "head", 0);
        let head_w = uniform_init(&[config.num_classes, feat], feat, &mut r);
        let head_b = uniform_init(&[config.num_classes], feat, &mut r);
        Ok(ModelGraph {
            config: config.clone(),
            stack,
            head_w,
            head_b,
            train_mode: Cell::new(false),
            fitted: Cell::new(false),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.stack.out_shape()
    }

    pub fn feature_dim(&self) -> usize {
        let (c, h, w) = self.stack.out_shape();
        c * h * w
    }

    pub fn set_train(&self, yes: bool) {
        self.train_mode.set(yes);
    }

    pub fn is_train(&self) -> bool {
        self.train_mode.get()
    }

    /// Marked by training and by checkpoint restore; consumers that need
    /// trained weights can check it without guessing.
    pub fn mark_fitted(&self) {
        self.fitted.set(true);
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.get()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.stack.params();
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.stack.named_params("");
        out.push(("head.weight".into(), self.head_w.clone()));
        out.push(("head.bias".into(), self.head_b.clone()));
        out
    }

    /// Forward one slice with an intervention hook at tapped layers.
    pub fn forward_slice_with<F>(
        &self,
        x: &Tensor,
        rng: Option<&mut Prng>,
        record: Record,
        hook: F,
    ) -> Result<StackOut>
    where
        F: FnMut(TapLabel, Tensor) -> Result<Tensor>,
    {
        let (shift, scale) = (self.config.input_shift, self.config.input_scale);
        let x = if shift != 0.0 || scale != 1.0 {
            x.add_scalar(-shift)?.scale(scale)?
        } else {
            x.clone()
        };
        self.stack.forward_with(&x, self.train_mode.get(), rng, record, hook)
    }

    pub fn forward_slice(&self, x: &Tensor, record: Record) -> Result<StackOut> {
        self.forward_slice_with(x, None, record, |_, t| Ok(t))
    }

    /// Logits from a combined feature vector of length `feature_dim`.
    pub fn apply_head(&self, combined: &Tensor) -> Result<Tensor> {
        combined.linear(&self.head_w, &self.head_b)
    }

    /// Mean of per-slice feature vectors, kept on the tape.
    pub fn mean_combine(features: &[Tensor]) -> Result<Tensor> {
        let mut sum = features[0].clone();
        for f in &features[1..] {
            sum = sum.add(f)?;
        }
        sum.scale(1.0 / features.len() as f32)
    }

    /// Baseline volume forward: shared stack per slice, mean combine,
    /// linear head, softmax.
    pub fn forward_volume(
        &self,
        volume: &Tensor,
        rng: Option<&mut Prng>,
        record: Record,
    ) -> Result<VolumeOut> {
        let shape = volume.shape();
        if shape.len() != 4 || shape[1..] != [self.config.input.0, self.config.input.1, self.config.input.2]
        {
            return Err(TensorError::Invalid {
                op: "forward_volume",
                message: format!("volume shape {shape:?} does not match model input"),
            });
        }
        let slices = shape[0];
        if slices == 0 {
            return Err(TensorError::Invalid {
                op: "forward_volume",
                message: "volume has no slices".into(),
            });
        }
        let mut dummy = rng::seeded(0);
        let rng = rng.unwrap_or(&mut dummy);
        let mut outs = Vec::with_capacity(slices);
        let mut feats = Vec::with_capacity(slices);
        for s in 0..slices {
            let slice = volume.select0(s)?;
            let out = self.forward_slice_with(&slice, Some(rng), record, |_, t| Ok(t))?;
            feats.push(out.out.reshape(&[self.feature_dim()])?);
            outs.push(out);
        }
        let combined = Self::mean_combine(&feats)?;
        let logits = self.apply_head(&combined)?;
        let probs = logits.softmax(0)?;
        Ok(VolumeOut { probs, logits, slices: outs })
    }

    /// Forward every volume of a batch; rows are per-volume probabilities.
    pub fn forward_batch(&self, batch: &VolumeBatch, rng: Option<&mut Prng>) -> Result<Tensor> {
        let mut dummy = rng::seeded(0);
        let rng = rng.unwrap_or(&mut dummy);
        let mut rows = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let vol = batch.volume(b)?;
            let out = self.forward_volume(&vol, Some(rng), Record::default())?;
            rows.push(out.probs.reshape(&[1, self.num_classes()])?);
        }
        Tensor::concat(&rows, 0)
    }
}

/// Collects pre-activations for variance analysis: one tensor per conv
/// layer stacked over batch x slices, plus the head logits over the batch.
pub fn collect_preactivations(model: &ModelGraph, batch: &VolumeBatch) -> Result<Vec<Tensor>> {
    if batch.len() == 0 {
        return Err(TensorError::Invalid {
            op: "collect_preactivations",
            message: "empty batch".into(),
        });
    }
    let conv_count = model.stack.params().len() / 2;
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); conv_count];
    let mut layer_shapes: Vec<Vec<usize>> = vec![Vec::new(); conv_count];
    let mut head_rows: Vec<f32> = Vec::new();
    let mut n_planes = 0usize;
    for b in 0..batch.len() {
        let vol = batch.volume(b)?;
        let out = model.forward_volume(&vol, None, Record { taps: false, preacts: true })?;
        for slice_out in &out.slices {
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
        let mut shape = vec![n_planes];
        shape.extend_from_slice(&layer_shapes[m]);
        result.push(Tensor::new(&shape, data)?);
    }
    result.push(Tensor::new(&[batch.len(), model.num_classes()], head_rows)?);
    Ok(result)
}

/// Convolutional autoencoder over single slices; volumes are encoded and
/// decoded slice by slice with shared weights.
pub struct Autoencoder {
    enc: ConvStack,
    dec: ConvStack,
    input: (usize, usize, usize),
    fitted: Cell<bool>,
}

impl Autoencoder {
    /// Three pooled conv blocks down to a 16-channel latent map at one
    /// eighth of the input resolution, mirrored by a nearest-upsampling
    /// decoder ending in a sigmoid.
    pub fn build(input: (usize, usize, usize), seed: u64) -> Result<Autoencoder> {
        let (c, h, w) = input;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(TensorError::Invalid {
                op: "Autoencoder::build",
                message: format!("input {h}x{w} must be divisible by 8"),
            });
        }
        let enc_specs = [
            LayerSpec::conv(8, 3, 1),
            LayerSpec::act(Act::Relu),
            LayerSpec::pool(2),
            LayerSpec::conv(16, 3, 1),
            LayerSpec::act(Act::Relu),
            LayerSpec::pool(2),
            LayerSpec::conv(16, 3, 1),
            LayerSpec::act(Act::Relu),
            LayerSpec::pool(2),
        ];
        let dec_specs = [
            LayerSpec::upsample(),
            LayerSpec::conv(16, 3, 1),
            LayerSpec::act(Act::Relu),
            LayerSpec::upsample(),
            LayerSpec::conv(8, 3, 1),
            LayerSpec::act(Act::Relu),
            LayerSpec::upsample(),
            LayerSpec::conv(c, 3, 1),
            LayerSpec::act(Act::Sigmoid),
        ];
        let enc = ConvStack::build(&enc_specs, input, seed, "encoder")?;
        let dec = ConvStack::build(&dec_specs, enc.out_shape(), seed, "decoder")?;
        Ok(Autoencoder { enc, dec, input, fitted: Cell::new(false) })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.enc.out_shape()
    }

    pub fn mark_fitted(&self) {
        self.fitted.set(true);
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.get()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.enc.params();
        out.extend(self.dec.params());
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.enc.named_params("enc.");
        out.extend(self.dec.named_params("dec."));
        out
    }

    pub fn encode_slice(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.enc.forward(x, false, None, Record::default())?.out)
    }

    pub fn decode_slice(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.dec.forward(z, false, None, Record::default())?.out)
    }

    /// Encode a volume [S,c,H,W] to latents [S,lc,lh,lw].
    pub fn encode(&self, volume: &Tensor) -> Result<Tensor> {
        let shape = volume.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(TensorError::Invalid {
                op: "Autoencoder::encode",
                message: format!("expected nonempty [S,c,H,W] volume, got {shape:?}"),
            });
        }
        let (lc, lh, lw) = self.latent_shape();
        let mut parts = Vec::with_capacity(shape[0]);
        for s in 0..shape[0] {
            let z = self.encode_slice(&volume.select0(s)?)?;
            parts.push(z.reshape(&[1, lc, lh, lw])?);
        }
        Tensor::concat(&parts, 0)
    }

    /// Decode latents [S,lc,lh,lw] back to a volume [S,c,H,W], on the tape.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(TensorError::Invalid {
                op: "Autoencoder::decode",
                message: format!("expected nonempty [S,lc,lh,lw] latents, got {shape:?}"),
            });
        }
        let (c, h, w) = self.input;
        let mut parts = Vec::with_capacity(shape[0]);
        for s in 0..shape[0] {
            let x = self.decode_slice(&z.select0(s)?)?;
            parts.push(x.reshape(&[1, c, h, w])?);
        }
        Tensor::concat(&parts, 0)
    }
}

/// Replace every named parameter's data from a saved map. Unknown and
/// missing names are both errors, and shapes must match exactly.
pub fn load_named_params(
    params: &[(String, Tensor)],
    stored: &BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    if params.len() != stored.len() {
        return Err(TensorError::Invalid {
            op: "load_named_params",
            message: format!("have {} parameters, store has {}", params.len(), stored.len()),
        });
    }
    for (name, t) in params {
        let data = stored.get(name).ok_or_else(|| TensorError::Invalid {
            op: "load_named_params",
            message: format!("missing parameter {name}"),
        })?;
        if data.len() != t.numel() {
            return Err(TensorError::Invalid {
                op: "load_named_params",
                message: format!(
                    "parameter {name}: stored length {} vs expected {}",
                    data.len(),
                    t.numel()
                ),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Invalid {
                op: "load_named_params",
                message: format!("parameter {name} contains non-finite values"),
            });
        }
        t.replace_data(data.clone());
    }
    Ok(())
}

/// Labeled volumes with localisation ground truth.
pub struct VolumeBatch {
    /// Shape [B, S, c, H, W].
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Affected regions per item; empty when the item has no lesion.
    pub truth: Vec<Vec<RegionLabel>>,
}

impl VolumeBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, truth: Vec<Vec<RegionLabel>>) -> Result<VolumeBatch> {
        let shape = images.shape();
        if shape.len() != 5 {
            return Err(TensorError::Invalid {
                op: "VolumeBatch::new",
                message: format!("expected [B,S,c,H,W] images, got {shape:?}"),
            });
        }
        if shape[1] == 0 {
            return Err(TensorError::Invalid {
                op: "VolumeBatch::new",
                message: "volumes need at least one slice".into(),
            });
        }
        if labels.len() != shape[0] || truth.len() != shape[0] {
            return Err(TensorError::Invalid {
                op: "VolumeBatch::new",
                message: format!(
                    "{} volumes vs {} labels / {} truth entries",
                    shape[0],
                    labels.len(),
                    truth.len()
                ),
            });
        }
        Ok(VolumeBatch { images, labels, truth })
    }

    pub fn from_samples(samples: &[SynthSample]) -> Result<VolumeBatch> {
        if samples.is_empty() {
            return Err(TensorError::Invalid {
                op: "VolumeBatch::from_samples",
                message: "no samples".into(),
            });
        }
        let vshape = samples[0].volume.shape();
        let mut data = Vec::with_capacity(samples.len() * samples[0].volume.numel());
        let mut labels = Vec::with_capacity(samples.len());
        let mut truth = Vec::with_capacity(samples.len());
        for s in samples {
            if s.volume.shape() != vshape {
                return Err(TensorError::Invalid {
                    op: "VolumeBatch::from_samples",
                    message: "samples disagree on volume shape".into(),
                });
            }
            data.extend_from_slice(&s.volume.to_vec());
            labels.push(s.label.index());
            truth.push(s.regions.clone());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&vshape);
        VolumeBatch::new(Tensor::new(&shape, data)?, labels, truth)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slices(&self) -> usize {
        self.images.shape()[1]
    }

    /// One volume [S,c,H,W].
    pub fn volume(&self, b: usize) -> Result<Tensor> {
        self.images.select0(b)
    }

    /// Subset by dataset indices, e.g. a split's index list.
    pub fn select(&self, indices: &[usize]) -> Result<VolumeBatch> {
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "VolumeBatch::select",
                message: "empty index list".into(),
            });
        }
        let shape = self.images.shape();
        let stride: usize = shape[1..].iter().product();
        let data = self.images.to_vec();
        let mut out = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        let mut truth = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(TensorError::Invalid {
                    op: "VolumeBatch::select",
                    message: format!("index {i} out of range for {} volumes", self.len()),
                });
            }
            out.extend_from_slice(&data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
            truth.push(self.truth[i].clone());
        }
        let mut new_shape = vec![indices.len()];
        new_shape.extend_from_slice(&shape[1..]);
        VolumeBatch::new(Tensor::new(&new_shape, out)?, labels, truth)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetSpec};
    use alloc::collections::BTreeMap;

    fn tiny_config(num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            layers: vec![
                LayerSpec::conv(4, 3, 1),
                LayerSpec::act_tapped(Act::Relu, TapLabel::Early),
                LayerSpec::pool(2),
                LayerSpec::conv(6, 3, 1),
                LayerSpec::act_tapped(Act::Relu, TapLabel::Middle),
                LayerSpec::pool(2),
                LayerSpec::conv(8, 3, 1),
                LayerSpec::act_tapped(Act::Relu, TapLabel::Late),
                LayerSpec::pool(2),
            ],
            input: (1, 16, 16),
            num_classes,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }

    fn random_volume(slices: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::substream(seed, "test-volume", 0);
        Tensor::new(
            &[slices, 1, h, w],
            rng::uniform_vec(slices * h * w, 0.0, 1.0, &mut r),
        )
        .unwrap()
    }

    #[test]
    fn standard_config_carries_three_taps() {
        let config = ClassifierConfig::standard(4);
        let model = ModelGraph::build(&config, 0).unwrap();
        let labels = model.stack().tap_labels();
        assert_eq!(labels, vec![TapLabel::Early, TapLabel::Middle, TapLabel::Late]);
        let shapes = model.stack().tap_shapes();
        assert_eq!(shapes[0].1, (8, 64, 64));
        assert_eq!(shapes[1].1, (16, 16, 16));
        assert_eq!(shapes[2].1, (32, 4, 4));
        assert_eq!(model.feature_shape(), (32, 2, 2));
        assert_eq!(model.feature_dim(), 128);
    }

    #[test]
    fn duplicate_tap_labels_are_rejected() {
        let mut config = tiny_config(4);
        config.layers[7] = LayerSpec::act_tapped(Act::Relu, TapLabel::Middle);
        let err = ModelGraph::build(&config, 0).err().unwrap();
        assert!(format!("{err}").contains("duplicate"));
    }

    #[test]
    fn binary_head_emits_two_probabilities() {
        let model = ModelGraph::build(&tiny_config(2), 1).unwrap();
        let out = model
            .forward_volume(&random_volume(1, 16, 16, 1), None, Record::default())
            .unwrap();
        assert_eq!(out.probs.shape(), vec![2]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = ModelGraph::build(&tiny_config(4), 2).unwrap();
        for seed in 0..10 {
            let out = model
                .forward_volume(&random_volume(3, 16, 16, seed), None, Record::default())
                .unwrap();
            let sum: f32 = out.probs.to_vec().iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "prob sum {sum}");
        }
    }

    #[test]
    fn single_slice_volume_equals_plain_forward() {
        let model = ModelGraph::build(&tiny_config(3), 3).unwrap();
        let vol = random_volume(1, 16, 16, 9);
        let through_volume = model
            .forward_volume(&vol, None, Record::default())
            .unwrap()
            .probs
            .to_vec();
        let slice = vol.select0(0).unwrap();
        let feat = model.forward_slice(&slice, Record::default()).unwrap().out;
        let flat = feat.reshape(&[model.feature_dim()]).unwrap();
        let direct = model
            .apply_head(&ModelGraph::mean_combine(&[flat]).unwrap())
            .unwrap()
            .softmax(0)
            .unwrap()
            .to_vec();
        assert!(through_volume
            .iter()
            .zip(direct.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn duplicated_slice_leaves_mean_combine_unchanged() {
        let model = ModelGraph::build(&tiny_config(3), 4).unwrap();
        let single = random_volume(1, 16, 16, 10);
        let base = single.to_vec();
        let mut doubled = base.clone();
        doubled.extend_from_slice(&base);
        let twin = Tensor::new(&[2, 1, 16, 16], doubled).unwrap();
        let p1 = model.forward_volume(&single, None, Record::default()).unwrap().probs.to_vec();
        let p2 = model.forward_volume(&twin, None, Record::default()).unwrap().probs.to_vec();
        assert!(p1.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn slice_permutation_leaves_mean_combine_probs_close() {
        let model = ModelGraph::build(&tiny_config(4), 5).unwrap();
        let vol = random_volume(3, 16, 16, 11);
        let data = vol.to_vec();
        let plane = 16 * 16;
        let mut permuted = Vec::with_capacity(data.len());
        for s in [2usize, 0, 1] {
            permuted.extend_from_slice(&data[s * plane..(s + 1) * plane]);
        }
        let vol_p = Tensor::new(&[3, 1, 16, 16], permuted).unwrap();
        let a = model.forward_volume(&vol, None, Record::default()).unwrap().probs.to_vec();
        let b = model.forward_volume(&vol_p, None, Record::default()).unwrap().probs.to_vec();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_rebuild_reproduces_probs_bitwise() {
        let vol = random_volume(2, 16, 16, 12);
        let run = |seed: u64| {
            let model = ModelGraph::build(&tiny_config(4), seed).unwrap();
            model
                .forward_volume(&vol, None, Record::default())
                .unwrap()
                .probs
                .to_vec()
        };
        let a = run(7);
        let b = run(7);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(run(8).iter().zip(a.iter()).any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn zero_slice_volume_is_rejected() {
        let model = ModelGraph::build(&tiny_config(4), 0).unwrap();
        let vol = Tensor::zeros(&[0, 1, 16, 16]);
        assert!(model.forward_volume(&vol, None, Record::default()).is_err());
    }

    #[test]
    fn invalid_layer_hyperparameters_are_rejected() {
        let mut bad = tiny_config(4);
        bad.layers.push(LayerSpec::dropout(1.0));
        assert!(ModelGraph::build(&bad, 0).is_err());
        let mut bad = tiny_config(4);
        bad.layers[0] = LayerSpec::conv(4, 0, 1);
        assert!(ModelGraph::build(&bad, 0).is_err());
        let mut bad = tiny_config(4);
        bad.layers[2] = LayerSpec::pool(0);
        assert!(ModelGraph::build(&bad, 0).is_err());
    }

    fn random_batch(volumes: usize, slices: usize, h: usize, w: usize, seed: u64) -> VolumeBatch {
        let mut r = rng::substream(seed, "test-batch", 0);
        let images = Tensor::new(
            &[volumes, slices, 1, h, w],
            rng::uniform_vec(volumes * slices * h * w, 0.0, 1.0, &mut r),
        )
        .unwrap();
        let labels = (0..volumes).map(|i| i % 4).collect();
        VolumeBatch::new(images, labels, vec![vec![]; volumes]).unwrap()
    }

    #[test]
    fn preactivations_cover_every_parameterized_layer() {
        let batch = random_batch(4, 2, 16, 16, 61);
        let model = ModelGraph::build(&tiny_config(4), 2).unwrap();
        let layers = collect_preactivations(&model, &batch).unwrap();
        assert_eq!(layers.len(), 3 + 1);
        assert_eq!(layers[0].shape(), vec![4 * 2, 4, 16, 16]);
        assert_eq!(layers[3].shape(), vec![4, 4]);
    }

    #[test]
    fn constant_batch_with_bias_only_conv_gives_constant_preactivation() {
        let config = ClassifierConfig {
            layers: vec![LayerSpec::conv(2, 3, 1), LayerSpec::act(Act::Relu)],
            input: (1, 8, 8),
            num_classes: 2,
            input_shift: 0.0,
            input_scale: 1.0,
        };
        let model = ModelGraph::build(&config, 0).unwrap();
        let named = model.named_params();
        let mut stored: BTreeMap<String, Vec<f32>> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        stored.insert("conv0.weight".into(), vec![0.0; 2 * 1 * 3 * 3]);
        stored.insert("conv0.bias".into(), vec![0.25, -0.5]);
        load_named_params(&named, &stored).unwrap();
        let images = Tensor::full(&[2, 1, 1, 8, 8], 0.3).unwrap();
        let batch = VolumeBatch::new(images, vec![0, 1], vec![vec![], vec![]]).unwrap();
        let layers = collect_preactivations(&model, &batch).unwrap();
        let z = layers[0].to_vec();
        let plane = 8 * 8;
        for (i, &v) in z.iter().enumerate() {
            let channel = (i / plane) % 2;
            let want = if channel == 0 { 0.25 } else { -0.5 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn one_by_one_conv_preactivation_matches_hand_loop() {
        let config = ClassifierConfig {
            layers: vec![LayerSpec {
                kind: LayerKind::Conv { out_channels: 3, kernel: 1, stride: 1, padding: 0 },
                tap: None,
            }],
            input: (1, 4, 4),
            num_classes: 2,
            input_shift: 0.0,
            input_scale: 1.0,
        };
        let model = ModelGraph::build(&config, 5).unwrap();
        let named = model.named_params();
        let w = named[0].1.to_vec();
        let b = named[1].1.to_vec();
        let vol = random_volume(1, 4, 4, 20);
        let batch = VolumeBatch::new(
            vol.reshape(&[1, 1, 1, 4, 4]).unwrap(),
            vec![0],
            vec![vec![]],
        )
        .unwrap();
        let z = collect_preactivations(&model, &batch).unwrap()[0].to_vec();
        let x = vol.to_vec();
        for c in 0..3 {
            for p in 0..16 {
                let want = w[c] * x[p] + b[c];
                let got = z[c * 16 + p];
                assert!((want - got).abs() < 1e-6, "channel {c} pixel {p}");
            }
        }
    }

    #[test]
    fn named_roundtrip_restores_forward_bitwise() {
        let vol = random_volume(2, 16, 16, 30);
        let source = ModelGraph::build(&tiny_config(4), 40).unwrap();
        let want = source
            .forward_volume(&vol, None, Record::default())
            .unwrap()
            .probs
            .to_vec();
        let stored: BTreeMap<String, Vec<f32>> = source
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        let fresh = ModelGraph::build(&tiny_config(4), 41).unwrap();
        load_named_params(&fresh.named_params(), &stored).unwrap();
        let got = fresh
            .forward_volume(&vol, None, Record::default())
            .unwrap()
            .probs
            .to_vec();
        assert!(want.iter().zip(got.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn load_rejects_wrong_names_and_shapes() {
        let model = ModelGraph::build(&tiny_config(4), 0).unwrap();
        let named = model.named_params();
        let mut stored: BTreeMap<String, Vec<f32>> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        let good = stored.clone();
        stored.remove("head.bias");
        stored.insert("head.extra".into(), vec![0.0; 4]);
        assert!(load_named_params(&named, &stored).is_err());
        let mut short = good.clone();
        short.insert("head.bias".into(), vec![0.0; 3]);
        assert!(load_named_params(&named, &short).is_err());
        let mut poisoned = good;
        poisoned.insert("head.bias".into(), vec![f32::NAN, 0.0, 0.0, 0.0]);
        assert!(load_named_params(&named, &poisoned).is_err());
    }

    #[test]
    fn autoencoder_roundtrip_preserves_shape_and_range() {
        let ae = Autoencoder::build((1, 16, 16), 3).unwrap();
        assert_eq!(ae.latent_shape(), (16, 2, 2));
        let vol = random_volume(2, 16, 16, 50);
        let z = ae.encode(&vol).unwrap();
        assert_eq!(z.shape(), vec![2, 16, 2, 2]);
        let back = ae.decode(&z).unwrap();
        assert_eq!(back.shape(), vol.shape());
        assert!(back.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn autoencoder_rejects_indivisible_extents() {
        assert!(Autoencoder::build((1, 20, 16), 0).is_err());
    }

    #[test]
    fn batch_from_samples_carries_labels_and_truth() {
        let mut spec = DatasetSpec::standard(6, 8);
        spec.height = 32;
        spec.width = 32;
        spec.slices = 2;
        let (samples, _) = generate_dataset(&spec).unwrap();
        let batch = VolumeBatch::from_samples(&samples).unwrap();
        assert_eq!(batch.images.shape(), vec![6, 2, 1, 32, 32]);
        assert_eq!(batch.len(), 6);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(batch.labels[i], s.label.index());
            assert_eq!(batch.truth[i], s.regions);
            assert_eq!(batch.volume(i).unwrap().to_vec(), s.volume.to_vec());
        }
        let sub = batch.select(&[4, 1]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels, vec![batch.labels[4], batch.labels[1]]);
        assert_eq!(sub.volume(1).unwrap().to_vec(), batch.volume(1).unwrap().to_vec());
        assert!(batch.select(&[]).is_err());
        assert!(batch.select(&[6]).is_err());
    }

    #[test]
    fn forward_batch_rows_are_probability_vectors() {
        let batch = random_batch(5, 2, 16, 16, 62);
        let model = ModelGraph::build(&tiny_config(4), 9).unwrap();
        let probs = model.forward_batch(&batch, None).unwrap();
        assert_eq!(probs.shape(), vec![5, 4]);
        let v = probs.to_vec();
        for row in v.chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[3.0]), 0);
        assert_eq!(argmax(&[-1.0, -2.0]), 0);
    }
}
