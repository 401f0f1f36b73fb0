//! Plain minibatch SGD on cross-entropy, used for reference training, the
//! per-round retraining inside the dropout loop, and candidate fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{cross_entropy, MaskedModel};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            eta: 0.05,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One pass of minibatch SGD. Returns the mean batch loss.
pub fn sgd_epoch(model: &mut MaskedModel, data: &Dataset, cfg: &SgdConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    cfg.check()?;
    let batches = epoch_batches(data.len(), cfg.batch_size, rng);
    let mut total = 0.0;
    for b in &batches {
        let labels: Vec<usize> = b.iter().map(|&i| data.label(i)).collect();
        let (loss, grads) = model.ce_gradients(&data.rows_at(b), &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("training loss became {loss}")));
        }
        model.sgd_step(&grads, cfg.eta)?;
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(model: &MaskedModel, data: &Dataset) -> Result<f64> {
    let logits = model.logits(&data.rows())?;
    Ok(cross_entropy(&logits, data.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    /// Cross-entropy over the full training set after the last epoch.
    pub final_train_loss: f64,
}

/// `epochs` rounds of SGD with per-epoch validation accuracy (none is
/// recorded for an empty validation set).
pub fn fit(
    model: &mut MaskedModel,
    train: &Dataset,
    validation: &Dataset,
    epochs: usize,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<FitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_loss = Vec::with_capacity(epochs);
    let mut validation_accuracy = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        train_loss.push(sgd_epoch(model, train, cfg, &mut rng)?);
        if !validation.is_empty() {
            let pred = model.predict(&validation.rows())?;
            validation_accuracy.push(MetricsReport::from_predictions(&pred, validation.labels(), validation.class_count())?.accuracy);
        }
    }
    Ok(FitReport {
        train_loss,
        validation_accuracy,
        final_train_loss: dataset_loss(model, train)?,
    })
}
