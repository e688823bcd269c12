//! Quantitative evaluation: pointing game, IoU/Dice with dynamic-percentile
//! binarization, confusion-matrix metrics, pre-activation variance under
//! input noise, and the ablation / dropout-control harnesses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{
    collect_preactivations as acat_preactivations, AblationFlags, AcatConfig, AcatModel,
    train_acat,
};
use crate::nets::{
    argmax, collect_preactivations, load_named_params, EpochStats, ModelGraph, Record,
    TrainConfig, TrainLog, VolumeBatch,
};
use crate::rng::{self, Prng};
use crate::saliency::SaliencyMap;
use crate::synth::{Geometry, Mask, RegionLabel, SizeTier};
use crate::tensor::{Result, Tensor, TensorError};

/// 64-bit FNV-1a, used for config provenance hashes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// One metric aggregated over runs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub metric: String,
    /// Mean over runs.
    pub value: f32,
    /// Standard error of the mean; present only with at least two runs.
    pub std_error: Option<f32>,
    pub config_hash: u64,
    pub seeds: Vec<u64>,
    pub runs: Vec<f32>,
    pub per_class: Vec<Option<f32>>,
}

impl EvalReport {
    pub fn from_runs(
        metric: impl Into<String>,
        config_hash: u64,
        seeds: Vec<u64>,
        runs: Vec<f32>,
    ) -> Result<EvalReport> {
        if runs.is_empty() {
            return Err(TensorError::Invalid {
                op: "EvalReport",
                message: "no runs".into(),
            });
        }
        let n = runs.len() as f64;
        let mean = runs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std_error = if runs.len() >= 2 {
            let ss: f64 = runs.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
            Some(((ss / (n - 1.0)).sqrt() / n.sqrt()) as f32)
        } else {
            None
        };
        Ok(EvalReport {
            metric: metric.into(),
            value: mean as f32,
            std_error,
            config_hash,
            seeds,
            runs,
            per_class: Vec::new(),
        })
    }
}

/// Reduces a volume map [S,1,H,W] to one plane by max over slices and
/// returns the lowest linear index of the global maximum.
fn volume_argmax(map: &SaliencyMap) -> (usize, usize) {
    let shape = map.maps.shape();
    let (slices, h, w) = (shape[0], shape[2], shape[3]);
    let plane = h * w;
    let data = map.maps.to_vec();
    let mut best_idx = 0usize;
    let mut best = f32::NEG_INFINITY;
    for p in 0..plane {
        let mut m = f32::NEG_INFINITY;
        for s in 0..slices {
            m = m.max(data[s * plane + p]);
        }
        if m > best {
            best = m;
            best_idx = p;
        }
    }
    (best_idx / w, best_idx % w)
}

/// Fraction of samples whose map maximum falls inside a ground-truth
/// region. The volume is max-reduced over slices first; ties at the
/// maximum resolve to the lowest linear index.
pub fn pointing_game(
    maps: &[SaliencyMap],
    truths: &[Vec<RegionLabel>],
    geom: &Geometry,
) -> Result<f32> {
    const OP: &str = "pointing_game";
    if maps.is_empty() || maps.len() != truths.len() {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("{} maps vs {} truths", maps.len(), truths.len()),
        });
    }
    let mut hits = 0usize;
    for (map, truth) in maps.iter().zip(truths) {
        if truth.is_empty() {
            return Err(TensorError::Invalid {
                op: OP,
                message: "sample without a ground-truth region".into(),
            });
        }
        let shape = map.maps.shape();
        if shape[2] != geom.height || shape[3] != geom.width {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!(
                    "map {}x{} vs geometry {}x{}",
                    shape[2], shape[3], geom.height, geom.width
                ),
            });
        }
        let (y, x) = volume_argmax(map);
        let region = geom.region_of(y, x)?;
        if truth.contains(&region) {
            hits += 1;
        }
    }
    Ok(hits as f32 / maps.len() as f32)
}

/// Binarizes the map by keeping exactly as many top pixels as the truth
/// mask contains (ties to the lowest index) and scores the overlap.
pub fn iou_dice(map: &SaliencyMap, truth: &Mask) -> Result<(f32, f32)> {
    const OP: &str = "iou_dice";
    let shape = map.maps.shape();
    if shape[0] != truth.slices || shape[2] != truth.height || shape[3] != truth.width {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!(
                "map {:?} vs mask {}x{}x{}",
                shape, truth.slices, truth.height, truth.width
            ),
        });
    }
    let n = truth.count_ones();
    if n == 0 {
        return Err(TensorError::Invalid { op: OP, message: "empty truth mask".into() });
    }
    let data = map.maps.to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        data[b].partial_cmp(&data[a]).expect("finite map").then(a.cmp(&b))
    });
    let mut intersection = 0usize;
    for &idx in order.iter().take(n) {
        if truth.data[idx] != 0 {
            intersection += 1;
        }
    }
    let union = 2 * n - intersection;
    Ok((
        intersection as f32 / union as f32,
        intersection as f32 / n as f32,
    ))
}

/// Confusion-matrix metrics. `sensitivity`/`specificity` use the
/// lesion-vs-none dichotomy (class 0 negative, everything else positive);
/// metrics whose denominator class is absent come back as `None`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassificationMetrics {
    pub accuracy: f32,
    pub per_class: Vec<Option<f32>>,
    pub sensitivity: Option<f32>,
    pub specificity: Option<f32>,
    /// Accuracy per size tier, when tier metadata was supplied.
    pub per_tier: Vec<Option<f32>>,
    /// confusion[truth][prediction]
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_metrics(
    probs: &Tensor,
    labels: &[usize],
    tiers: Option<&[Option<SizeTier>]>,
) -> Result<ClassificationMetrics> {
    const OP: &str = "classification_metrics";
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("expected nonempty [B,K] probabilities, got {shape:?}"),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("{} labels for {b} rows", labels.len()),
        });
    }
    if let Some(t) = tiers {
        if t.len() != b {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("{} tier entries for {b} rows", t.len()),
            });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("label {bad} outside 0..{k}"),
        });
    }
    let data = probs.to_vec();
    let mut confusion = alloc::vec![alloc::vec![0usize; k]; k];
    let mut tier_hit = [0usize; 4];
    let mut tier_count = [0usize; 4];
    for i in 0..b {
        let pred = argmax(&data[i * k..(i + 1) * k]);
        confusion[labels[i]][pred] += 1;
        if let Some(t) = tiers {
            if let Some(tier) = t[i] {
                let j = tier.index();
                tier_count[j] += 1;
                if pred == labels[i] {
                    tier_hit[j] += 1;
                }
            }
        }
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Option<f32>> = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            (total > 0).then(|| confusion[c][c] as f32 / total as f32)
        })
        .collect();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f32 / den as f32);
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for truth in 0..k {
        for pred in 0..k {
            let count = confusion[truth][pred];
            match (truth != 0, pred != 0) {
                (true, true) => tp += count,
                (true, false) => fn_ += count,
                (false, false) => tn += count,
                (false, true) => fp += count,
            }
        }
    }
    let per_tier = (0..4)
        .map(|j| ratio(tier_hit[j], tier_count[j]))
        .collect();
    Ok(ClassificationMetrics {
        accuracy: correct as f32 / b as f32,
        per_class,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        per_tier,
        confusion,
    })
}

/// Copy of the batch with N(0, sigma^2) noise added to the images only.
/// sigma = 0 returns the data unchanged.
pub fn noisy_batch(batch: &VolumeBatch, sigma: f32, seed: u64) -> Result<VolumeBatch> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(TensorError::Invalid {
            op: "noisy_batch",
            message: format!("sigma {sigma} must be finite and nonnegative"),
        });
    }
    let mut data = batch.images.to_vec();
    if sigma > 0.0 {
        let mut r = rng::substream(seed, "input-noise", 0);
        for v in data.iter_mut() {
            let n: f32 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
            *v += sigma * n;
        }
    }
    VolumeBatch::new(
        Tensor::new(&batch.images.shape(), data)?,
        batch.labels.clone(),
        batch.truth.clone(),
    )
}

/// Population variance over batch and spatial positions, averaged over
/// channels.
fn layer_variance(t: &Tensor) -> f32 {
    let shape = t.shape();
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let spatial: usize = shape.iter().skip(2).product();
    let data = t.to_vec();
    let mut acc = 0.0f64;
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for b in 0..n {
            for p in 0..spatial {
                let v = data[(b * c + ch) * spatial + p] as f64;
                sum += v;
                sumsq += v * v;
            }
        }
        let count = (n * spatial) as f64;
        let mean = sum / count;
        acc += (sumsq / count - mean * mean).max(0.0);
    }
    (acc / c as f64) as f32
}

/// Per-layer pre-activation variance of the baseline model under optional
/// input noise: one entry per conv layer plus the head.
pub fn preactivation_variance(
    f: &ModelGraph,
    batch: &VolumeBatch,
    sigma: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    let noisy = noisy_batch(batch, sigma, seed)?;
    Ok(collect_preactivations(f, &noisy)?.iter().map(layer_variance).collect())
}

/// Same measurement through the attention forward.
pub fn acat_preactivation_variance(
    model: &AcatModel,
    batch: &VolumeBatch,
    maps: &[SaliencyMap],
    sigma: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    let noisy = noisy_batch(batch, sigma, seed)?;
    Ok(acat_preactivations(model, &noisy, maps)?.iter().map(layer_variance).collect())
}

/// Fraction of volumes whose argmax prediction matches the label.
pub fn baseline_accuracy(f: &ModelGraph, batch: &VolumeBatch) -> Result<f32> {
    let probs = f.forward_batch(batch, None)?.to_vec();
    let k = f.num_classes();
    let hits = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&probs[i * k..(i + 1) * k]) == l)
        .count();
    Ok(hits as f32 / batch.len() as f32)
}

pub fn acat_accuracy(model: &AcatModel, batch: &VolumeBatch, maps: &[SaliencyMap]) -> Result<f32> {
    let probs = model.forward_batch(batch, maps, None)?.to_vec();
    let k = model.image().num_classes();
    let hits = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&probs[i * k..(i + 1) * k]) == l)
        .count();
    Ok(hits as f32 / batch.len() as f32)
}

/// Everything one seed's experiments share: a split, its trained baseline
/// and the counterfactual maps for both sides of the split.
pub struct SeedWorld {
    pub seed: u64,
    pub train: VolumeBatch,
    pub test: VolumeBatch,
    pub train_maps: Vec<SaliencyMap>,
    pub test_maps: Vec<SaliencyMap>,
    pub baseline: ModelGraph,
}

impl SeedWorld {
    pub fn new(
        seed: u64,
        train: VolumeBatch,
        test: VolumeBatch,
        train_maps: Vec<SaliencyMap>,
        test_maps: Vec<SaliencyMap>,
        baseline: ModelGraph,
    ) -> Result<SeedWorld> {
        if train_maps.len() != train.len() || test_maps.len() != test.len() {
            return Err(TensorError::Invalid {
                op: "SeedWorld",
                message: "map count does not match batch".into(),
            });
        }
        Ok(SeedWorld { seed, train, test, train_maps, test_maps, baseline })
    }

    /// Fresh model carrying the baseline's weights, so fine-tuning runs
    /// never mutate the stored baseline.
    pub fn cloned_baseline(&self) -> Result<ModelGraph> {
        let fresh = ModelGraph::build(self.baseline.config(), self.seed)?;
        let stored = self
            .baseline
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        load_named_params(&fresh.named_params(), &stored)?;
        fresh.mark_fitted();
        Ok(fresh)
    }
}

/// The four ablation rungs in the order they are reported.
pub fn ablation_ladder() -> [AblationFlags; 4] {
    [
        AblationFlags::full(),
        AblationFlags { use_fusion: false, use_late: true, use_middle: true },
        AblationFlags { use_fusion: false, use_late: false, use_middle: true },
        AblationFlags { use_fusion: false, use_late: false, use_middle: false },
    ]
}

fn acat_run(
    world: &SeedWorld,
    config: &AcatConfig,
    tune: &TrainConfig,
    stream: &str,
) -> Result<(AcatModel, f32)> {
    let image = world.cloned_baseline()?;
    let mix = fnv1a(stream.as_bytes()) ^ world.seed;
    let model = AcatModel::build(image, config, mix)?;
    let cfg = TrainConfig { seed: mix, ..*tune };
    train_acat(&model, &world.train, &world.train_maps, &cfg)?;
    let acc = acat_accuracy(&model, &world.test, &world.test_maps)?;
    Ok((model, acc))
}

/// Fine-tunes and scores the four attention configurations over every
/// world; one report per configuration, in ladder order.
pub fn run_ablation_suite(
    worlds: &[SeedWorld],
    base: &AcatConfig,
    tune: &TrainConfig,
) -> Result<Vec<EvalReport>> {
    if worlds.is_empty() {
        return Err(TensorError::Invalid {
            op: "run_ablation_suite",
            message: "no seed worlds".into(),
        });
    }
    let seeds: Vec<u64> = worlds.iter().map(|w| w.seed).collect();
    let mut reports = Vec::with_capacity(4);
    for flags in ablation_ladder() {
        let name = flags.name();
        let config = AcatConfig { ablation: flags, ..*base };
        let mut runs = Vec::with_capacity(worlds.len());
        for world in worlds {
            let (_, acc) = acat_run(world, &config, tune, &name)?;
            runs.push(acc);
        }
        let desc = format!(
            "acat;ablation={name};hidden={};dropout={};epochs={};batch={};lr={}",
            config.slice_hidden,
            config.slice_dropout,
            tune.epochs,
            tune.batch_size,
            tune.learning_rate
        );
        reports.push(EvalReport::from_runs(
            format!("accuracy[{name}]"),
            fnv1a(desc.as_bytes()),
            seeds.clone(),
            runs,
        )?);
    }
    Ok(reports)
}

/// Baseline forward with dropout applied to the image features at the
/// tapped layers, the control experiment for the attention masks.
pub fn forward_volume_with_tap_dropout(
    f: &ModelGraph,
    volume: &Tensor,
    p: f32,
    train: bool,
    rng: &mut Prng,
) -> Result<Tensor> {
    let shape = volume.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(TensorError::Invalid {
            op: "tap_dropout",
            message: format!("expected nonempty [S,c,H,W] volume, got {shape:?}"),
        });
    }
    let mut feats = Vec::with_capacity(shape[0]);
    for s in 0..shape[0] {
        let x = volume.select0(s)?;
        let out = f.forward_slice_with(&x, None, Record::default(), |_, t| {
            t.dropout(p, train, rng)
        })?;
        feats.push(out.out.reshape(&[f.feature_dim()])?);
    }
    let combined = ModelGraph::mean_combine(&feats)?;
    f.apply_head(&combined)?.softmax(0)
}

/// Cross-entropy fine-tuning with tap-layer dropout active.
pub fn train_with_tap_dropout(
    f: &ModelGraph,
    data: &VolumeBatch,
    p: f32,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    const OP: &str = "train_with_tap_dropout";
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("dropout p {p} outside [0,1)"),
        });
    }
    if data.is_empty() {
        return Err(TensorError::Invalid { op: OP, message: "empty training set".into() });
    }
    let k = f.num_classes();
    let params = f.params();
    let mut opt = crate::tensor::Optimizer::adam(cfg.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        f.set_train(true);
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
            let stage = |e: TensorError| TensorError::Invalid {
                op: OP,
                message: format!("epoch {epoch} batch {batch_idx}: {e}"),
            };
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let probs =
                    forward_volume_with_tap_dropout(f, &data.volume(i)?, p, true, &mut drop_rng)
                        .map_err(stage)?;
                if argmax(&probs.to_vec()) == data.labels[i] {
                    correct += 1;
                }
                let mut onehot = alloc::vec![0.0f32; k];
                onehot[data.labels[i]] = 1.0;
                terms.push(probs.cross_entropy(&Tensor::new(&[k], onehot)?).map_err(stage)?);
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = total.add(t)?;
            }
            let batch_loss = total.scale(1.0 / chunk.len() as f32)?;
            loss_sum += batch_loss.item()? as f64 * chunk.len() as f64;
            batch_loss.backward().map_err(stage)?;
            opt.step(&params).map_err(stage)?;
        }
        log.epochs.push(EpochStats {
            loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        });
    }
    f.set_train(false);
    Ok(log)
}

/// Fine-tunes the baseline with dropout at the tap layers for each p and
/// scores plain test accuracy; one report per p.
pub fn dropout_control(
    worlds: &[SeedWorld],
    p_values: &[f32],
    tune: &TrainConfig,
) -> Result<Vec<EvalReport>> {
    const OP: &str = "dropout_control";
    if worlds.is_empty() || p_values.is_empty() {
        return Err(TensorError::Invalid {
            op: OP,
            message: "no worlds or no p values".into(),
        });
    }
    if let Some(&bad) = p_values.iter().find(|&&p| !(0.0..1.0).contains(&p)) {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("dropout p {bad} outside [0,1)"),
        });
    }
    let seeds: Vec<u64> = worlds.iter().map(|w| w.seed).collect();
    let mut reports = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let mut runs = Vec::with_capacity(worlds.len());
        for world in worlds {
            let f = world.cloned_baseline()?;
            let mix = fnv1a(b"dropout-control") ^ world.seed;
            train_with_tap_dropout(&f, &world.train, p, &TrainConfig { seed: mix, ..*tune })?;
            runs.push(baseline_accuracy(&f, &world.test)?);
        }
        let desc = format!(
            "dropout-control;p={p};epochs={};batch={};lr={}",
            tune.epochs, tune.batch_size, tune.learning_rate
        );
        reports.push(EvalReport::from_runs(
            format!("accuracy[dropout p={p}]"),
            fnv1a(desc.as_bytes()),
            seeds.clone(),
            runs,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Act, ClassifierConfig, LayerSpec, TapLabel};
    use crate::saliency::SaliencyMethod;
    use crate::synth::{Band, Side};
    use alloc::vec;

    fn map_from(data: Vec<f32>, slices: usize, h: usize, w: usize) -> SaliencyMap {
        SaliencyMap::new(
            SaliencyMethod::Gradient,
            Tensor::new(&[slices, 1, h, w], data).unwrap(),
        )
        .unwrap()
    }

    fn tiny_config() -> ClassifierConfig {
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
            num_classes: 4,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }

    fn random_batch(count: usize, slices: usize, seed: u64) -> VolumeBatch {
        let mut r = rng::substream(seed, "eval-test", 0);
        let images = Tensor::new(
            &[count, slices, 1, 16, 16],
            rng::uniform_vec(count * slices * 256, 0.0, 1.0, &mut r),
        )
        .unwrap();
        let labels = (0..count).map(|i| i % 4).collect();
        VolumeBatch::new(images, labels, vec![vec![]; count]).unwrap()
    }

    fn random_maps(count: usize, slices: usize, seed: u64) -> Vec<SaliencyMap> {
        (0..count)
            .map(|i| {
                let mut r = rng::substream(seed, "eval-test-map", i as u64);
                map_from(rng::uniform_vec(slices * 256, 0.0, 1.0, &mut r), slices, 16, 16)
            })
            .collect()
    }

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_ne!(fnv1a(b"full"), fnv1a(b"no-fusion"));
    }

    #[test]
    fn report_standard_error_needs_two_runs() {
        let one = EvalReport::from_runs("m", 0, vec![1], vec![0.5]).unwrap();
        assert_eq!(one.value, 0.5);
        assert!(one.std_error.is_none());
        let two = EvalReport::from_runs("m", 0, vec![1, 2], vec![0.5, 0.7]).unwrap();
        assert!((two.value - 0.6).abs() < 1e-6);
        let se = two.std_error.unwrap();
        assert!((se - 0.1).abs() < 1e-6, "{se}");
        assert!(EvalReport::from_runs("m", 0, vec![], vec![]).is_err());
    }

    #[test]
    fn pointing_game_scores_planted_maxima() {
        let geom = Geometry::new(12, 12);
        let mut maps = Vec::new();
        let mut truths = Vec::new();
        for (i, region) in RegionLabel::all().iter().enumerate() {
            let mut data = vec![0.1; 144];
            let (y, x) = (2 + 4 * (i / 2), 3 + 6 * (i % 2));
            data[y * 12 + x] = 1.0;
            assert_eq!(geom.region_of(y, x).unwrap(), *region);
            maps.push(map_from(data, 1, 12, 12));
            truths.push(vec![*region]);
        }
        assert_eq!(pointing_game(&maps, &truths, &geom).unwrap(), 1.0);
        let wrong: Vec<Vec<RegionLabel>> = truths.iter().rev().cloned().collect();
        let s = pointing_game(&maps, &wrong, &geom).unwrap();
        assert_eq!(s, 0.0);
        let half: Vec<Vec<RegionLabel>> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| if i < 3 { t.clone() } else { wrong[i].clone() })
            .collect();
        assert_eq!(pointing_game(&maps, &half, &geom).unwrap(), 0.5);
    }

    #[test]
    fn pointing_game_is_invariant_to_monotone_rescale() {
        let geom = Geometry::new(12, 12);
        let mut r = rng::substream(3, "pg", 0);
        let maps: Vec<SaliencyMap> = (0..10)
            .map(|_| map_from(rng::uniform_vec(144, 0.0, 1.0, &mut r), 1, 12, 12))
            .collect();
        let truths: Vec<Vec<RegionLabel>> =
            (0..10).map(|i| vec![RegionLabel::all()[i % 6]]).collect();
        let s1 = pointing_game(&maps, &truths, &geom).unwrap();
        let rescaled: Vec<SaliencyMap> = maps
            .iter()
            .map(|m| {
                let data = m.maps.to_vec().iter().map(|v| 0.1 + 0.5 * v).collect();
                map_from(data, 1, 12, 12)
            })
            .collect();
        assert_eq!(pointing_game(&rescaled, &truths, &geom).unwrap(), s1);
    }

    #[test]
    fn pointing_game_reduces_over_slices_and_breaks_ties_low() {
        let geom = Geometry::new(12, 12);
        let mut data = vec![0.0; 2 * 144];
        data[144 + 10 * 12 + 2] = 0.9;
        let map = map_from(data, 2, 12, 12);
        let hit_region = geom.region_of(10, 2).unwrap();
        assert_eq!(pointing_game(&[map], &[vec![hit_region]], &geom).unwrap(), 1.0);

        let mut tied = vec![0.0; 144];
        tied[1 * 12 + 1] = 0.8;
        tied[9 * 12 + 9] = 0.8;
        let map = map_from(tied, 1, 12, 12);
        let low_region = geom.region_of(1, 1).unwrap();
        assert_eq!(pointing_game(&[map], &[vec![low_region]], &geom).unwrap(), 1.0);
    }

    #[test]
    fn pointing_game_rejects_bad_inputs() {
        let geom = Geometry::new(12, 12);
        assert!(pointing_game(&[], &[], &geom).is_err());
        let map = map_from(vec![0.5; 144], 1, 12, 12);
        assert!(pointing_game(&[map], &[vec![]], &geom).is_err());
        let map = map_from(vec![0.5; 144], 1, 12, 12);
        let t = vec![vec![RegionLabel { band: Band::Anterior, side: Side::Left }]];
        assert!(pointing_game(&[map], &[t[0].clone(), t[0].clone()], &geom).is_err());
        let small = map_from(vec![0.5; 64], 1, 8, 8);
        assert!(pointing_game(&[small], &t, &geom).is_err());
    }

    #[test]
    fn pointing_game_matches_brute_force_on_random_instances() {
        let geom = Geometry::new(6, 6);
        for trial in 0..20 {
            let mut r = rng::substream(40 + trial, "pg-oracle", 0);
            let n = 1 + (trial as usize % 5);
            let maps: Vec<SaliencyMap> = (0..n)
                .map(|_| map_from(rng::uniform_vec(2 * 36, 0.0, 1.0, &mut r), 2, 6, 6))
                .collect();
            let truths: Vec<Vec<RegionLabel>> = (0..n)
                .map(|_| {
                    vec![RegionLabel::all()[rand::Rng::random_range(&mut r, 0..6usize)]]
                })
                .collect();
            let mut hits = 0usize;
            for (m, t) in maps.iter().zip(&truths) {
                let d = m.maps.to_vec();
                let mut best = (0usize, f32::NEG_INFINITY);
                for p in 0..36 {
                    let v = d[p].max(d[36 + p]);
                    if v > best.1 {
                        best = (p, v);
                    }
                }
                let region = geom.region_of(best.0 / 6, best.0 % 6).unwrap();
                if t.contains(&region) {
                    hits += 1;
                }
            }
            let want = hits as f32 / n as f32;
            assert_eq!(pointing_game(&maps, &truths, &geom).unwrap(), want);
        }
    }

    #[test]
    fn iou_dice_identity_and_disjoint() {
        let mut mask = Mask::empty(1, 4, 4);
        for i in [0, 1, 4, 5] {
            mask.data[i] = 1;
        }
        let mut exact = vec![0.0; 16];
        for i in [0, 1, 4, 5] {
            exact[i] = 1.0;
        }
        let (iou, dice) = iou_dice(&map_from(exact, 1, 4, 4), &mask).unwrap();
        assert_eq!((iou, dice), (1.0, 1.0));
        let mut far = vec![0.0; 16];
        for i in [10, 11, 14, 15] {
            far[i] = 1.0;
        }
        let (iou, dice) = iou_dice(&map_from(far, 1, 4, 4), &mask).unwrap();
        assert_eq!((iou, dice), (0.0, 0.0));
    }

    #[test]
    fn iou_dice_matches_hand_counted_toy() {
        let mut mask = Mask::empty(1, 4, 4);
        for i in [0, 1, 4, 5] {
            mask.data[i] = 1;
        }
        let mut map = vec![0.0; 16];
        map[0] = 0.9;
        map[1] = 0.8;
        map[10] = 0.7;
        map[15] = 0.6;
        let (iou, dice) = iou_dice(&map_from(map, 1, 4, 4), &mask).unwrap();
        assert!((iou - 2.0 / 6.0).abs() < 1e-6);
        assert!((dice - 4.0 / 8.0).abs() < 1e-6);
        assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-6);
    }

    #[test]
    fn iou_dice_selects_exactly_n_with_low_index_ties() {
        let mut mask = Mask::empty(1, 4, 4);
        for i in [2, 3, 6] {
            mask.data[i] = 1;
        }
        let uniform = map_from(vec![0.5; 16], 1, 4, 4);
        let (iou, dice) = iou_dice(&uniform, &mask).unwrap();
        assert!((iou - 1.0 / 5.0).abs() < 1e-6, "ties keep 0,1,2 so only pixel 2 overlaps");
        assert!((dice - 1.0 / 3.0).abs() < 1e-6);
        assert!(iou_dice(&uniform, &Mask::empty(1, 4, 4)).is_err());
        assert!(iou_dice(&map_from(vec![0.5; 16], 1, 4, 4), &Mask::empty(1, 5, 5)).is_err());
    }

    #[test]
    fn iou_dice_matches_brute_force_on_random_instances() {
        for trial in 0..20 {
            let mut r = rng::substream(60 + trial, "iou-oracle", 0);
            let data = rng::uniform_vec(2 * 9, 0.0, 1.0, &mut r);
            let mut mask = Mask::empty(2, 3, 3);
            let mut ones = 0;
            for i in 0..18 {
                if rand::Rng::random_range(&mut r, 0.0f32..1.0) < 0.4 {
                    mask.data[i] = 1;
                    ones += 1;
                }
            }
            if ones == 0 {
                mask.data[4] = 1;
                ones = 1;
            }
            let mut selected = vec![false; 18];
            for _ in 0..ones {
                let mut best: Option<usize> = None;
                for i in 0..18 {
                    if selected[i] {
                        continue;
                    }
                    if best.map(|b| data[i] > data[b]).unwrap_or(true) {
                        best = Some(i);
                    }
                }
                selected[best.unwrap()] = true;
            }
            let inter = (0..18).filter(|&i| selected[i] && mask.data[i] != 0).count();
            let want_iou = inter as f32 / (2 * ones - inter) as f32;
            let want_dice = inter as f32 / ones as f32;
            let (iou, dice) = iou_dice(&map_from(data, 2, 3, 3), &mask).unwrap();
            assert_eq!(iou, want_iou, "trial {trial}");
            assert_eq!(dice, want_dice, "trial {trial}");
        }
    }

    fn onehot_rows(preds: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; preds.len() * k];
        for (i, &p) in preds.iter().enumerate() {
            data[i * k + p] = 1.0;
        }
        Tensor::new(&[preds.len(), k], data).unwrap()
    }

    #[test]
    fn perfect_and_degenerate_classifiers() {
        let labels = [0usize, 1, 2, 3, 1];
        let m = classification_metrics(&onehot_rows(&labels, 4), &labels, None).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));
        assert!(m.per_class.iter().all(|c| *c == Some(1.0)));

        let always_negative = onehot_rows(&[0, 0, 0, 0, 0], 4);
        let m = classification_metrics(&always_negative, &[0, 1, 2, 3, 1], None).unwrap();
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn absent_class_is_undefined_not_zero() {
        let labels = [0usize, 1, 1, 0];
        let m = classification_metrics(&onehot_rows(&[0, 1, 0, 0], 4), &labels, None).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.per_class[3], None);
        assert_eq!(m.per_class[0], Some(1.0));
        assert_eq!(m.per_class[1], Some(0.5));

        let all_positive = [1usize, 2, 1, 3];
        let m =
            classification_metrics(&onehot_rows(&[1, 2, 1, 3], 4), &all_positive, None).unwrap();
        assert_eq!(m.specificity, None);
        assert_eq!(m.sensitivity, Some(1.0));
    }

    #[test]
    fn ten_sample_confusion_matches_hand_counts() {
        let labels = [0usize, 0, 0, 1, 1, 1, 2, 2, 3, 3];
        let preds = [0usize, 1, 0, 1, 1, 0, 2, 3, 3, 0];
        let m = classification_metrics(&onehot_rows(&preds, 4), &labels, None).unwrap();
        assert_eq!(m.accuracy, 6.0 / 10.0);
        assert_eq!(m.confusion[0], vec![2, 1, 0, 0]);
        assert_eq!(m.confusion[1], vec![1, 2, 0, 0]);
        assert_eq!(m.confusion[2], vec![0, 0, 1, 1]);
        assert_eq!(m.confusion[3], vec![1, 0, 0, 1]);
        assert_eq!(m.per_class[0], Some(2.0 / 3.0));
        assert_eq!(m.per_class[1], Some(2.0 / 3.0));
        assert_eq!(m.per_class[2], Some(0.5));
        assert_eq!(m.per_class[3], Some(0.5));
        assert_eq!(m.sensitivity, Some(5.0 / 7.0));
        assert_eq!(m.specificity, Some(2.0 / 3.0));
        let recomputed: usize = (0..4).map(|c| m.confusion[c][c]).sum();
        assert_eq!(recomputed as f32 / 10.0, m.accuracy);
    }

    #[test]
    fn tier_accuracy_uses_only_tiered_samples() {
        let labels = [1usize, 1, 2, 0];
        let preds = [1usize, 2, 2, 0];
        let tiers = [
            Some(SizeTier::T1),
            Some(SizeTier::T1),
            Some(SizeTier::T3),
            None,
        ];
        let m =
            classification_metrics(&onehot_rows(&preds, 3), &labels, Some(&tiers)).unwrap();
        assert_eq!(m.per_tier[0], Some(0.5));
        assert_eq!(m.per_tier[1], None);
        assert_eq!(m.per_tier[2], Some(1.0));
        assert_eq!(m.per_tier[3], None);
        assert!(classification_metrics(&onehot_rows(&preds, 3), &labels[..3], None).is_err());
        assert!(classification_metrics(&onehot_rows(&preds, 3), &[0, 1, 2, 5], None).is_err());
    }

    #[test]
    fn variance_oracle_on_one_conv_model() {
        let config = ClassifierConfig {
            layers: vec![LayerSpec::conv(1, 1, 0)],
            input: (1, 2, 2),
            num_classes: 2,
            input_shift: 0.0,
            input_scale: 1.0,
        };
        let f = ModelGraph::build(&config, 1).unwrap();
        let named = f.named_params();
        let (_, w) = named.iter().find(|(n, _)| n == "conv0.weight").unwrap();
        let (_, b) = named.iter().find(|(n, _)| n == "conv0.bias").unwrap();
        w.replace_data(vec![2.0]);
        b.replace_data(vec![0.5]);
        let images = Tensor::new(
            &[2, 1, 1, 2, 2],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        )
        .unwrap();
        let batch = VolumeBatch::new(images, vec![0, 1], vec![vec![], vec![]]).unwrap();
        let vars = preactivation_variance(&f, &batch, 0.0, 0).unwrap();
        assert_eq!(vars.len(), 2);
        let z: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
            .iter()
            .map(|x| 2.0 * x + 0.5)
            .collect();
        let mean = z.iter().sum::<f64>() / 8.0;
        let want = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!((vars[0] as f64 - want).abs() < 1e-6, "{} vs {want}", vars[0]);

        let constant = Tensor::full(&[2, 1, 1, 2, 2], 0.3).unwrap();
        let cbatch = VolumeBatch::new(constant, vec![0, 1], vec![vec![], vec![]]).unwrap();
        let cvars = preactivation_variance(&f, &cbatch, 0.0, 0).unwrap();
        assert_eq!(cvars[0], 0.0);
    }

    #[test]
    fn noise_is_seeded_and_validated() {
        let batch = random_batch(3, 2, 7);
        let a = preactivation_variance(
            &ModelGraph::build(&tiny_config(), 2).unwrap(),
            &batch,
            1.0,
            11,
        )
        .unwrap();
        let f = ModelGraph::build(&tiny_config(), 2).unwrap();
        let b = preactivation_variance(&f, &batch, 1.0, 11).unwrap();
        assert_eq!(a, b);
        let c = preactivation_variance(&f, &batch, 1.0, 12).unwrap();
        assert_ne!(a, c);
        let silent = preactivation_variance(&f, &batch, 0.0, 11).unwrap();
        let silent2 = preactivation_variance(&f, &batch, 0.0, 99).unwrap();
        assert_eq!(silent, silent2);
        assert!(noisy_batch(&batch, -1.0, 0).is_err());
        assert!(noisy_batch(&batch, f32::NAN, 0).is_err());
    }

    #[test]
    fn acat_variance_matches_baseline_in_identity_mode() {
        let batch = random_batch(2, 2, 20);
        let maps = random_maps(2, 2, 21);
        let f = ModelGraph::build(&tiny_config(), 22).unwrap();
        let stored = f
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        let image = ModelGraph::build(&tiny_config(), 23).unwrap();
        load_named_params(&image.named_params(), &stored).unwrap();
        let model = AcatModel::build(image, &AcatConfig::standard(), 24).unwrap();
        model.set_identity_mode(true);
        let base = preactivation_variance(&f, &batch, 1.0, 25).unwrap();
        let acat = acat_preactivation_variance(&model, &batch, &maps, 1.0, 25).unwrap();
        assert_eq!(base.len(), acat.len());
        for (a, b) in base.iter().zip(acat.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn tiny_world(seed: u64) -> SeedWorld {
        let train = random_batch(6, 2, seed);
        let test = random_batch(4, 2, seed + 1);
        let train_maps = random_maps(6, 2, seed + 2);
        let test_maps = random_maps(4, 2, seed + 3);
        let baseline = ModelGraph::build(&tiny_config(), seed + 4).unwrap();
        baseline.mark_fitted();
        SeedWorld::new(seed, train, test, train_maps, test_maps, baseline).unwrap()
    }

    #[test]
    fn cloned_baseline_shares_values_not_storage() {
        let world = tiny_world(30);
        let clone = world.cloned_baseline().unwrap();
        let a: Vec<Vec<f32>> = world.baseline.params().iter().map(|p| p.to_vec()).collect();
        let b: Vec<Vec<f32>> = clone.params().iter().map(|p| p.to_vec()).collect();
        assert_eq!(a, b);
        assert!(clone.is_fitted());
        clone.params()[0].replace_data(vec![9.0; clone.params()[0].numel()]);
        assert_ne!(
            world.baseline.params()[0].to_vec(),
            clone.params()[0].to_vec()
        );
    }

    #[test]
    fn ablation_suite_structure_and_distinct_hashes() {
        let worlds = [tiny_world(40), tiny_world(41)];
        let tune = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-3, seed: 0 };
        let reports =
            run_ablation_suite(&worlds, &AcatConfig::standard(), &tune).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert_eq!(r.runs.len(), 2);
            assert_eq!(r.seeds, vec![40, 41]);
            assert!(r.std_error.is_some());
            assert!(r.runs.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(reports[i].config_hash, reports[j].config_hash);
            }
        }
        assert!(run_ablation_suite(&[], &AcatConfig::standard(), &tune).is_err());
    }

    #[test]
    fn zero_dropout_forward_equals_baseline() {
        let f = ModelGraph::build(&tiny_config(), 50).unwrap();
        let batch = random_batch(2, 2, 51);
        let vol = batch.volume(0).unwrap();
        let want = f.forward_volume(&vol, None, Record::default()).unwrap().probs.to_vec();
        for train in [false, true] {
            let mut r = rng::seeded(7);
            let got = forward_volume_with_tap_dropout(&f, &vol, 0.0, train, &mut r)
                .unwrap()
                .to_vec();
            assert_eq!(got, want, "train={train}");
        }
        let mut r = rng::seeded(7);
        let dropped = forward_volume_with_tap_dropout(&f, &vol, 0.5, true, &mut r)
            .unwrap()
            .to_vec();
        assert_ne!(dropped, want);
        let mut r = rng::seeded(7);
        let eval_mode = forward_volume_with_tap_dropout(&f, &vol, 0.5, false, &mut r)
            .unwrap()
            .to_vec();
        assert_eq!(eval_mode, want);
    }

    #[test]
    fn dropout_control_rejects_p_one_and_reports_per_p() {
        let worlds = [tiny_world(60)];
        let tune = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-3, seed: 0 };
        assert!(dropout_control(&worlds, &[1.0], &tune).is_err());
        assert!(dropout_control(&worlds, &[], &tune).is_err());
        let reports = dropout_control(&worlds, &[0.2, 0.6], &tune).unwrap();
        assert_eq!(reports.len(), 2);
        assert_ne!(reports[0].config_hash, reports[1].config_hash);
        assert!(reports[0].metric.contains("0.2"));
        assert!(reports[1].metric.contains("0.6"));
        assert!(reports.iter().all(|r| r.std_error.is_none()));
    }

    #[test]
    fn world_construction_validates_map_counts() {
        let train = random_batch(3, 2, 70);
        let test = random_batch(2, 2, 71);
        let baseline = ModelGraph::build(&tiny_config(), 72).unwrap();
        let err = SeedWorld::new(
            0,
            train,
            test,
            random_maps(2, 2, 73),
            random_maps(2, 2, 74),
            baseline,
        );
        assert!(err.is_err());
    }
}
