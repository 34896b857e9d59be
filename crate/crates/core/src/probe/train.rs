use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{metrics_from_predictions, MetricsReport};
use super::{probe_backward, ProbeParams};
use crate::error::{Error, Result};
use crate::labels::{Emotion, NUM_CLASSES};
use crate::optim::{adamw_step, AdamState, TrainConfig};

/// Samples with class labels, kept in parallel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<S> {
    pub samples: Vec<S>,
    pub labels: Vec<usize>,
}

impl<S> LabeledSet<S> {
    pub fn new(samples: Vec<S>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::dims("labeled set", samples.len(), labels.len()));
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl LabeledSet<DVector<f64>> {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let dim = self.samples.first().map_or(0, |s| s.len());
        DMatrix::from_fn(self.len(), dim, |i, j| self.samples[i][j])
    }
}

/// A model with a flat trainable parameter vector and a differentiable
/// cross-entropy objective over six classes.
pub trait Trainable: Clone {
    type Sample: Sync;

    fn num_trainable(&self) -> usize;
    fn trainable(&self) -> Vec<f64>;
    fn set_trainable(&mut self, flat: &[f64]) -> Result<()>;
    /// Mean loss over the batch and its gradient w.r.t. `trainable()`.
    fn loss_and_grad(&self, samples: &[&Self::Sample], labels: &[usize]) -> Result<(f64, Vec<f64>)>;
    fn predict(&self, samples: &[Self::Sample]) -> Result<Vec<usize>>;
}

impl Trainable for ProbeParams {
    type Sample = DVector<f64>;

    fn num_trainable(&self) -> usize {
        ProbeParams::num_trainable(self)
    }

    fn trainable(&self) -> Vec<f64> {
        ProbeParams::trainable(self)
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        ProbeParams::set_trainable(self, flat)
    }

    fn loss_and_grad(&self, samples: &[&DVector<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let x = DMatrix::from_fn(samples.len(), self.dim(), |i, j| samples[i][j]);
        let (loss, g) = probe_backward(self, &x, labels)?;
        let mut flat: Vec<f64> = g.weight.transpose().iter().copied().collect();
        flat.extend(g.bias.iter());
        Ok((loss, flat))
    }

    fn predict(&self, samples: &[DVector<f64>]) -> Result<Vec<usize>> {
        let x = DMatrix::from_fn(samples.len(), self.dim(), |i, j| samples[i][j]);
        Ok(super::metrics::argmax_rows(&self.logits(&x)?))
    }
}

pub fn evaluate_model<M: Trainable>(model: &M, set: &LabeledSet<M::Sample>) -> Result<MetricsReport> {
    metrics_from_predictions(&model.predict(&set.samples)?, &set.labels)
}

#[derive(Debug, Clone)]
pub struct FitOutcome<M> {
    /// Snapshot with the highest validation UA (earliest epoch on ties).
    pub best: M,
    /// Validation metrics of `best`, with `epoch_of_best` set.
    pub best_val: MetricsReport,
    /// Validation UA after every epoch.
    pub history: Vec<f64>,
}

/// Full-horizon AdamW training with best-validation-UA checkpoint selection.
/// Deterministic in `(model, data, config)`.
pub fn fit<M: Trainable>(
    model: M,
    train: &LabeledSet<M::Sample>,
    val: &LabeledSet<M::Sample>,
    config: &TrainConfig,
) -> Result<FitOutcome<M>> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    for class in 0..NUM_CLASSES {
        if !train.labels.contains(&class) {
            return Err(Error::Validation(format!(
                "class '{}' missing from training set",
                Emotion::ALL[class]
            )));
        }
    }

    let mut model = model;
    let mut params = model.trainable();
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(M, MetricsReport)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<&M::Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (_, grad) = model.loss_and_grad(&samples, &labels)?;
            adamw_step(&mut params, &grad, &mut state, config)?;
            model.set_trainable(&params)?;
        }
        let mut report = evaluate_model(&model, val)?;
        history.push(report.ua);
        if best.as_ref().is_none_or(|(_, b)| report.ua > b.ua) {
            report.epoch_of_best = Some(epoch);
            best = Some((model.clone(), report));
        }
    }

    let (best, best_val) = best.expect("at least one epoch");
    Ok(FitOutcome {
        best,
        best_val,
        history,
    })
}

/// Trains a zero-initialised probe; returns the best-val snapshot and its val metrics.
pub fn train_probe(
    train: &LabeledSet<DVector<f64>>,
    val: &LabeledSet<DVector<f64>>,
    config: &TrainConfig,
) -> Result<(ProbeParams, MetricsReport)> {
    let dim = train
        .samples
        .first()
        .ok_or_else(|| Error::EmptyInput("training set is empty".into()))?
        .len();
    let out = fit(ProbeParams::zeros(dim), train, val, config)?;
    Ok((out.best, out.best_val))
}
