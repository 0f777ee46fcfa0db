//! Training loop: mixup, soft-label cross-entropy, Adam with exponential
//! learning-rate decay, and utterance-level evaluation with segment voting.

mod adam;
mod mixup;
mod metrics;

pub use adam::{Adam, AdamConfig};
pub use metrics::{compute_metrics, ClassMetrics, MetricsReport};
pub use mixup::{mixup_batch, mixup_with_lambda, MixupBatch};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::features::{FeatureSet, NormStats};
use crate::model::SerModel;
use crate::tensor::{self, Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_floor: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr0: 0.001,
            batch_size: 128,
            weight_decay: 1e-6,
            lr_gamma: 0.95,
            lr_floor: 1e-6,
            mixup_alpha: 0.2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.lr0 > 0.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.lr_gamma > 0.0
            && self.lr_floor > 0.0
            && self.mixup_alpha > 0.0;
        if !positive || self.lr_floor >= self.lr0 {
            return Err(SerError::Config(format!(
                "train config out of range: {self:?}"
            )));
        }
        Ok(())
    }

    /// Exponential decay clamped at the floor:
    /// `max(lr0 * gamma^epoch, lr_floor)`.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        (self.lr0 * self.lr_gamma.powi(epoch as i32)).max(self.lr_floor)
    }
}

/// Normalized features cast to the training element type, ready to batch.
pub struct PreparedData<T: Element> {
    pub n_mels: usize,
    pub n_frames: usize,
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Element> PreparedData<T> {
    pub fn new(set: &FeatureSet, stats: &NormStats, num_classes: usize) -> Result<Self> {
        let mut normalized = set.features.clone();
        stats.normalize(&mut normalized, set.n_mels, set.n_frames);
        let labels = set.segment_labels();
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SerError::Data(format!(
                "segment label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(PreparedData {
            n_mels: set.n_mels,
            n_frames: set.n_frames,
            features: normalized.into_iter().map(T::from_f64).collect(),
            labels,
            num_classes,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.labels.len()
    }

    fn gather_batch(&self, indices: &[usize]) -> (Vec<T>, Vec<T>) {
        let seg_len = self.n_mels * self.n_frames;
        let mut x = Vec::with_capacity(indices.len() * seg_len);
        let mut y = vec![T::zero(); indices.len() * self.num_classes];
        for (row, &idx) in indices.iter().enumerate() {
            x.extend_from_slice(&self.features[idx * seg_len..(idx + 1) * seg_len]);
            y[row * self.num_classes + self.labels[idx]] = T::one();
        }
        (x, y)
    }
}

/// Mean soft-label cross-entropy: `-(1/B) sum_b sum_k y log softmax(z)`.
pub fn soft_cross_entropy<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    let b = logits.shape()[0];
    let lp = tensor::log_softmax(logits, 1)?;
    let weighted = tensor::mul(&lp, targets)?;
    Ok(tensor::scale(&tensor::sum_all(&weighted), -1.0 / b as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub batches: usize,
}

/// One pass over the training segments: shuffle, batch, mixup, forward,
/// soft cross-entropy, backward, Adam step; gradients zeroed between
/// batches. Aborts with diagnostics on a non-finite loss.
pub fn train_epoch<T: Element, R: rand::Rng>(
    model: &SerModel<T>,
    optimizer: &mut Adam<T>,
    data: &PreparedData<T>,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    let lr = cfg.lr_schedule(epoch);
    let params = model.parameters()?;
    let mut order: Vec<usize> = (0..data.n_segments()).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    let mut lambda_min = f64::INFINITY;
    let mut lambda_max = f64::NEG_INFINITY;
    let mut lambda_sum = 0.0f64;

    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = data.gather_batch(chunk);
        let shape = [chunk.len(), 1, data.n_mels, data.n_frames];
        let mixed = mixup_batch(&x, &shape, &y, data.num_classes, cfg.mixup_alpha, rng);
        let targets =
            Tensor::from_vec(mixed.targets.clone(), &[chunk.len(), data.num_classes])?;
        let logits = model.forward(&mixed.inputs, true)?;
        let loss = soft_cross_entropy(&logits, &targets)?;
        let loss_value = loss.item().to_f64v();
        if !loss_value.is_finite() {
            return Err(SerError::NonFiniteLoss {
                epoch,
                batch: batches,
                lr,
                lambda: mixed.lambda,
            });
        }
        loss.backward()?;
        optimizer.step(&params, lr);
        for p in &params {
            p.zero_grad();
        }

        loss_sum += loss_value;
        lambda_sum += mixed.lambda;
        lambda_min = lambda_min.min(mixed.lambda);
        lambda_max = lambda_max.max(mixed.lambda);
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        loss: loss_sum / batches.max(1) as f64,
        lr,
        lambda_mean: lambda_sum / batches.max(1) as f64,
        lambda_min,
        lambda_max,
        batches,
    })
}

/// Utterance-level evaluation: per utterance, softmax probabilities are
/// averaged over its segments and the argmax (ties to the lowest class
/// index) is the prediction. Returns the report and per-utterance
/// predictions in `set.utterances` order.
pub fn evaluate<T: Element>(
    model: &SerModel<T>,
    set: &FeatureSet,
    stats: &NormStats,
    num_classes: usize,
    batch_size: usize,
) -> Result<(MetricsReport, Vec<usize>)> {
    evaluate_with_convention(model, set, stats, num_classes, batch_size, false)
}

pub fn evaluate_with_convention<T: Element>(
    model: &SerModel<T>,
    set: &FeatureSet,
    stats: &NormStats,
    num_classes: usize,
    batch_size: usize,
    acc_as_precision: bool,
) -> Result<(MetricsReport, Vec<usize>)> {
    for u in &set.utterances {
        if u.seg_count == 0 {
            return Err(SerError::Data(format!(
                "utterance `{}` has zero segments",
                u.utterance_id
            )));
        }
    }
    let data = PreparedData::<T>::new(set, stats, num_classes)?;
    let seg_len = data.n_mels * data.n_frames;
    let n_seg = data.n_segments();

    // Segment-level class probabilities.
    let mut probs = vec![0.0f64; n_seg * num_classes];
    let mut start = 0usize;
    while start < n_seg {
        let end = (start + batch_size.max(1)).min(n_seg);
        let x = Tensor::from_vec(
            data.features[start * seg_len..end * seg_len].to_vec(),
            &[end - start, 1, data.n_mels, data.n_frames],
        )?;
        let logits = model.forward(&x, false)?;
        let p = tensor::softmax(&logits, 1)?;
        for (i, v) in p.data().iter().enumerate() {
            probs[start * num_classes + i] = v.to_f64v();
        }
        start = end;
    }

    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut predictions = Vec::with_capacity(set.utterances.len());
    for u in &set.utterances {
        let mut avg = vec![0.0f64; num_classes];
        for s in u.seg_start..u.seg_start + u.seg_count {
            for k in 0..num_classes {
                avg[k] += probs[s * num_classes + k];
            }
        }
        for v in avg.iter_mut() {
            *v /= u.seg_count as f64;
        }
        // Argmax with ties to the lowest index (strict greater-than).
        let mut pred = 0usize;
        for k in 1..num_classes {
            if avg[k] > avg[pred] {
                pred = k;
            }
        }
        confusion[u.label][pred] += 1;
        predictions.push(pred);
    }
    Ok((compute_metrics(&confusion, acc_as_precision)?, predictions))
}
