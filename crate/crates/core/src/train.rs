//! Mini-batch training, evaluation and the baseline threshold sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, SentenceExample};
use crate::metrics::{self, EvalReport, SweepResult};
use crate::model::{HeadParams, Model};
use crate::objective::PredictionResult;
use crate::optim::{adam_step, AdamState};
use crate::params::GradAccumulator;
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drop probability on the hidden states.
    pub dropout: f64,
    pub l2: f64,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stop as soon as dev macro F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 50,
            epochs: 30,
            dropout: 0.0,
            l2: 1e-4,
            seed: 1,
            patience: 10,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sentence training loss.
    pub loss: f64,
    pub dev_f1: Option<f64>,
    pub boundary: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the best dev epoch (the last epoch without dev data).
    pub model: Model<T>,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Seeded split holding out `fraction` of the examples for dev.
pub fn split_dev(
    examples: Vec<SentenceExample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SentenceExample>, Vec<SentenceExample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("dev fraction must lie in [0, 1), got {fraction}")));
    }
    let n_dev = (examples.len() as f64 * fraction).round() as usize;
    let order = epoch_batches(examples.len(), examples.len().max(1), seed, u64::MAX)?
        .pop()
        .unwrap_or_default();
    let mut is_dev = vec![false; examples.len()];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (ex, d) in examples.into_iter().zip(is_dev) {
        if d {
            dev.push(ex)
        } else {
            train.push(ex)
        }
    }
    Ok((train, dev))
}

fn mask_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Trains with Adam and keeps the parameters of the best dev epoch.
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &[SentenceExample],
    dev: &[SentenceExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, train, dev, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    mut model: Model<T>,
    train: &[SentenceExample],
    dev: &[SentenceExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let boundary = match &model.ids.head {
        HeadParams::Capsule(c) => Some(c.boundary),
        HeadParams::Baseline(_) => None,
    };
    let mut adam = AdamState::new(&model.params);
    let mut acc = GradAccumulator::new(&model.params);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, batch) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    let mut rng = mask_rng(cfg.seed, epoch, i);
                    let mask = model.dropout_mask(ex, cfg.dropout, &mut rng);
                    model.loss_and_grads(ex, mask)
                })
                .collect();
            acc.reset();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss.to_f64_lossy();
                acc.add(&grads)?;
            }
            let grads_finite = acc.grads().iter().all(|g| g.is_finite());
            if !batch_loss.is_finite() || !grads_finite {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "batch": b,
                    "batch_loss": batch_loss.to_string(),
                    "finite_gradients": grads_finite,
                    "sentences": batch,
                    "boundary": model.boundary(),
                    "trace": trace,
                });
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    dump: Box::new(dump),
                });
            }
            total += batch_loss;
            acc.scale(T::lit(1.0 / batch.len() as f64));
            adam_step(&mut model.params, acc.grads(), &mut adam, cfg.learning_rate, cfg.l2)?;
            if let Some(id) = boundary {
                let slot = &mut model.params.get_mut(id).data_mut()[0];
                *slot = T::lit(model.config.margin.clamp_boundary(slot.to_f64_lossy()));
            }
        }

        let dev_f1 = if dev.is_empty() { None } else { Some(evaluate(&model, dev)?.f1) };
        let record = EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            dev_f1,
            boundary: model.boundary(),
        };
        on_epoch(&record);
        trace.push(record);

        let score = dev_f1.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) || dev_f1.is_none() {
            best = Some((score, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.target_f1.is_some_and(|t| dev_f1.is_some_and(|f| f >= t)) {
            break;
        }
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch,
    })
}

/// Predictions for every sentence, in corpus order.
pub fn predict_all<T: Scalar>(model: &Model<T>, corpus: &[SentenceExample]) -> Result<Vec<PredictionResult>> {
    corpus.par_iter().map(|ex| model.predict(ex)).collect()
}

/// Macro P/R/F1 and PR curve with the model's own decoding rule.
pub fn evaluate<T: Scalar>(model: &Model<T>, corpus: &[SentenceExample]) -> Result<EvalReport> {
    let preds = predict_all(model, corpus)?;
    let gold: Vec<Vec<usize>> = corpus.iter().map(|e| e.labels.clone()).collect();
    let predicted: Vec<Vec<usize>> = preds.iter().map(|p| p.labels.clone()).collect();
    let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.scores).collect();
    metrics::evaluate_predictions(&gold, &predicted, &scores, &model.schema)
}

/// Best-threshold decoding of the per-relation scores.
pub fn sweep<T: Scalar>(model: &Model<T>, corpus: &[SentenceExample]) -> Result<SweepResult> {
    let preds = predict_all(model, corpus)?;
    let gold: Vec<Vec<usize>> = corpus.iter().map(|e| e.labels.clone()).collect();
    let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.scores).collect();
    metrics::threshold_sweep(&gold, &scores, &model.schema)
}
