//! Training loops for the classifier and the autoencoder.

use alloc::format;
use alloc::vec::Vec;

use super::{argmax, Autoencoder, ModelGraph, Record, VolumeBatch};
use crate::rng::{self, Prng};
use crate::tensor::{Optimizer, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, learning_rate: 1e-3, seed }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TensorError::Invalid { op, message: "batch_size must be positive".into() });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TensorError::Invalid {
                op,
                message: format!("learning rate {} not usable", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Per-epoch reconstruction loss of an autoencoder run.
#[derive(Debug, Clone, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReconLog {
    pub epochs: Vec<f32>,
}

fn shuffled_indices(n: usize, r: &mut Prng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(r, 0..=i);
        order.swap(i, j);
    }
    order
}

fn stage_err(op: &'static str, epoch: usize, batch: usize, err: TensorError) -> TensorError {
    TensorError::Invalid { op, message: format!("epoch {epoch} batch {batch}: {err}") }
}

fn one_hot(class: usize, num_classes: usize) -> Result<Tensor> {
    let mut v = alloc::vec![0.0f32; num_classes];
    v[class] = 1.0;
    Tensor::new(&[num_classes], v)
}

/// Cross-entropy training with Adam. Batches are reshuffled each epoch from
/// the config seed, so a run is a pure function of model, data and config.
/// Non-finite values abort with the epoch and batch where they appeared.
pub fn train_model(model: &ModelGraph, data: &VolumeBatch, cfg: &TrainConfig) -> Result<TrainLog> {
    const OP: &str = "train_model";
    cfg.validate(OP)?;
    if data.is_empty() {
        return Err(TensorError::Invalid { op: OP, message: "empty training set".into() });
    }
    let k = model.num_classes();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid {
            op: OP,
            message: format!("label {bad} outside 0..{k}"),
        });
    }
    let params = model.params();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        model.set_train(true);
        let mut shuffle_rng = rng::substream(cfg.seed, "shuffle", epoch as u64);
        let order = shuffled_indices(data.len(), &mut shuffle_rng);
        let mut drop_rng = rng::substream(cfg.seed, "dropout", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let vol = data.volume(i)?;
                let out = model
                    .forward_volume(&vol, Some(&mut drop_rng), Record::default())
                    .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
                let probs = out.probs;
                if argmax(&probs.to_vec()) == data.labels[i] {
                    correct += 1;
                }
                let target = one_hot(data.labels[i], k)?;
                terms.push(
                    probs
                        .cross_entropy(&target)
                        .map_err(|e| stage_err(OP, epoch, batch_idx, e))?,
                );
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = total.add(t)?;
            }
            let batch_loss = total.scale(1.0 / chunk.len() as f32)?;
            loss_sum += batch_loss.item()? as f64 * chunk.len() as f64;
            batch_loss
                .backward()
                .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
            opt.step(&params)
                .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
        }
        log.epochs.push(EpochStats {
            loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        });
    }
    model.set_train(false);
    if cfg.epochs > 0 {
        model.mark_fitted();
    }
    Ok(log)
}

/// Mean squared reconstruction error of the autoencoder over a batch,
/// without touching gradients.
pub fn reconstruction_mse(ae: &Autoencoder, data: &VolumeBatch) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for b in 0..data.len() {
        let vol = data.volume(b)?;
        let recon = ae.decode(&ae.encode(&vol)?)?;
        let x = vol.to_vec();
        let y = recon.to_vec();
        sum += x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        count += x.len();
    }
    Ok((sum / count as f64) as f32)
}

/// Slice-wise MSE training of the autoencoder with Adam. Labels and truth of
/// the batch are ignored; only the images matter.
pub fn train_autoencoder(
    ae: &Autoencoder,
    data: &VolumeBatch,
    cfg: &TrainConfig,
) -> Result<ReconLog> {
    const OP: &str = "train_autoencoder";
    cfg.validate(OP)?;
    if data.is_empty() {
        return Err(TensorError::Invalid { op: OP, message: "empty training set".into() });
    }
    let params = ae.params();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut log = ReconLog::default();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream(cfg.seed, "shuffle", epoch as u64);
        let order = shuffled_indices(data.len(), &mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let vol = data.volume(i)?;
                let recon = ae
                    .decode(&ae.encode(&vol)?)
                    .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
                let diff = recon.sub(&vol)?;
                terms.push(diff.mul(&diff)?.mean()?);
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = total.add(t)?;
            }
            let batch_loss = total.scale(1.0 / chunk.len() as f32)?;
            loss_sum += batch_loss.item()? as f64 * chunk.len() as f64;
            batch_loss
                .backward()
                .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
            opt.step(&params)
                .map_err(|e| stage_err(OP, epoch, batch_idx, e))?;
        }
        log.epochs.push((loss_sum / data.len() as f64) as f32);
    }
    if cfg.epochs > 0 {
        ae.mark_fitted();
    }
    Ok(log)
}
