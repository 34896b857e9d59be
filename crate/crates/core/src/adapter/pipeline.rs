use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{encoder_backward, encoder_forward, AdapterParams, EncoderWeights};
use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::pooling::{aggregate_backward, aggregate_layers, AggregatorParams};
use crate::probe::{log_softmax, ProbeParams, Trainable};
use crate::tensor::NamedTensor;

/// Frames → adapted frozen encoder → per-layer time pooling → layer
/// aggregation → linear probe. Only adapters, aggregator and probe train.
#[derive(Debug, Clone)]
pub struct PeftPipeline {
    encoder: Arc<EncoderWeights>,
    pub adapters: AdapterParams,
    pub aggregator: AggregatorParams,
    pub probe: ProbeParams,
}

/// Gradients for every trainable tensor of a [`PeftPipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeftGrads {
    pub adapters: AdapterParams,
    pub ws_logits: Vec<f64>,
    pub gate_logits: Vec<f64>,
    pub probe_weight: DMatrix<f64>,
    pub probe_bias: DVector<f64>,
}

impl PeftGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.adapters.trainable();
        out.extend(&self.ws_logits);
        out.extend(&self.gate_logits);
        for row in self.probe_weight.row_iter() {
            out.extend(row.iter());
        }
        out.extend(self.probe_bias.iter());
        out
    }
}

pub fn peft_assemble(
    encoder: Arc<EncoderWeights>,
    adapters: AdapterParams,
    aggregator: AggregatorParams,
    probe: ProbeParams,
) -> Result<PeftPipeline> {
    let cfg = &encoder.config;
    adapters.check(cfg)?;
    if aggregator.num_layers != cfg.num_layers {
        return Err(Error::dims(
            "aggregator layer count",
            cfg.num_layers,
            aggregator.num_layers,
        ));
    }
    if probe.dim() != cfg.model_dim {
        return Err(Error::dims("probe input dim", cfg.model_dim, probe.dim()));
    }
    Ok(PeftPipeline {
        encoder,
        adapters,
        aggregator,
        probe,
    })
}

struct SampleForward {
    trace: super::EncoderTrace,
    pooled: DMatrix<f64>,
    aggregated: DVector<f64>,
    logits: DVector<f64>,
}

fn pool_outputs(outputs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = outputs[0].ncols();
    let mut pooled = DMatrix::zeros(outputs.len(), d);
    for (l, y) in outputs.iter().enumerate() {
        pooled.set_row(l, &y.row_mean());
    }
    pooled
}

impl PeftPipeline {
    pub fn encoder(&self) -> &Arc<EncoderWeights> {
        &self.encoder
    }

    fn forward_sample(&self, frames: &DMatrix<f64>, adapted: bool) -> Result<SampleForward> {
        let adapters = adapted.then_some(&self.adapters);
        let trace = encoder_forward(&self.encoder, adapters, frames)?;
        let pooled = pool_outputs(trace.outputs());
        let aggregated = aggregate_layers(&pooled, &self.aggregator)?;
        let logits = &self.probe.weight * &aggregated + &self.probe.bias;
        Ok(SampleForward {
            trace,
            pooled,
            aggregated,
            logits,
        })
    }

    pub fn logits(&self, frames: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_sample(frames, true)?.logits)
    }

    /// Logits of the same pipeline with every adapter bypassed.
    pub fn frozen_logits(&self, frames: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_sample(frames, false)?.logits)
    }

    /// Mean cross-entropy over the batch.
    pub fn forward_loss(&self, samples: &[&DMatrix<f64>], labels: &[usize]) -> Result<f64> {
        check_batch(samples.len(), labels)?;
        let mut total = 0.0;
        for (x, &y) in samples.iter().zip(labels) {
            let z = self.logits(x)?;
            total -= log_softmax(&z)[y];
        }
        Ok(total / labels.len() as f64)
    }

    fn sample_backward(&self, frames: &DMatrix<f64>, label: usize, scale: f64) -> Result<(f64, PeftGrads)> {
        let fwd = self.forward_sample(frames, true)?;
        let logp = log_softmax(&fwd.logits);
        let loss = -logp[label];
        let mut dz = logp.map(f64::exp);
        dz[label] -= 1.0;
        dz *= scale;

        let probe_weight = &dz * fwd.aggregated.transpose();
        let d_agg = self.probe.weight.tr_mul(&dz);
        let agg = aggregate_backward(&fwd.pooled, &self.aggregator, &d_agg)?;
        let t = frames.nrows();
        let d_outputs: Vec<DMatrix<f64>> = (0..self.encoder.config.num_layers)
            .map(|l| {
                let row = agg.pooled.row(l) / t as f64;
                DMatrix::from_fn(t, row.len(), |_, j| row[j])
            })
            .collect();
        let adapters = encoder_backward(&self.encoder, &self.adapters, &fwd.trace, &d_outputs)?;
        Ok((
            loss,
            PeftGrads {
                adapters,
                ws_logits: agg.ws_logits,
                gate_logits: agg.gate_logits,
                probe_weight,
                probe_bias: dz,
            },
        ))
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.adapters.named_tensors();
        out.push(NamedTensor::from_slice(
            "aggregator.ws_logits",
            &self.aggregator.ws_logits,
        ));
        out.push(NamedTensor::from_slice(
            "aggregator.gate_logits",
            &self.aggregator.gate_logits,
        ));
        out.push(NamedTensor::from_matrix("probe.weight", &self.probe.weight));
        out.push(NamedTensor::from_vector("probe.bias", &self.probe.bias));
        out
    }
}

fn check_batch(n: usize, labels: &[usize]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::dims("batch labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::Validation(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Mean loss and exact gradients of every trainable tensor over a batch.
/// Per-sample work runs in parallel; the reduction order is fixed.
pub fn peft_backward(pipeline: &PeftPipeline, samples: &[&DMatrix<f64>], labels: &[usize]) -> Result<(f64, PeftGrads)> {
    check_batch(samples.len(), labels)?;
    let scale = 1.0 / labels.len() as f64;
    let per_sample: Vec<(f64, PeftGrads)> = samples
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| pipeline.sample_backward(x, y, scale))
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let (first_loss, mut acc) = iter.next().expect("non-empty batch");
    let mut acc_flat = acc.flatten();
    let mut loss = first_loss;
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc_flat.iter_mut().zip(g.flatten()) {
            *a += b;
        }
    }
    // rebuild the structured view from the reduced flat gradient
    let n_adapt = acc.adapters.num_trainable();
    let n_ws = acc.ws_logits.len();
    let n_gate = acc.gate_logits.len();
    acc.adapters.set_trainable(&acc_flat[..n_adapt])?;
    let mut pos = n_adapt;
    acc.ws_logits.copy_from_slice(&acc_flat[pos..pos + n_ws]);
    pos += n_ws;
    acc.gate_logits.copy_from_slice(&acc_flat[pos..pos + n_gate]);
    pos += n_gate;
    let (c, d) = acc.probe_weight.shape();
    acc.probe_weight = DMatrix::from_row_slice(c, d, &acc_flat[pos..pos + c * d]);
    pos += c * d;
    acc.probe_bias = DVector::from_row_slice(&acc_flat[pos..]);
    acc_flat.clear();
    Ok((loss * scale, acc))
}

impl Trainable for PeftPipeline {
    type Sample = DMatrix<f64>;

    fn num_trainable(&self) -> usize {
        self.adapters.num_trainable() + self.aggregator.num_trainable() + self.probe.num_trainable()
    }

    fn trainable(&self) -> Vec<f64> {
        let mut out = self.adapters.trainable();
        out.extend(self.aggregator.trainable());
        out.extend(self.probe.trainable());
        out
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let n = Trainable::num_trainable(self);
        if flat.len() != n {
            return Err(Error::dims("pipeline parameters", n, flat.len()));
        }
        let a = self.adapters.num_trainable();
        let g = self.aggregator.num_trainable();
        self.adapters.set_trainable(&flat[..a])?;
        self.aggregator.set_trainable(&flat[a..a + g])?;
        self.probe.set_trainable(&flat[a + g..])
    }

    fn loss_and_grad(&self, samples: &[&DMatrix<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = peft_backward(self, samples, labels)?;
        Ok((loss, grads.flatten()))
    }

    fn predict(&self, samples: &[DMatrix<f64>]) -> Result<Vec<usize>> {
        samples
            .par_iter()
            .map(|x| {
                let z = self.logits(x)?;
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                Ok(best)
            })
            .collect()
    }
}
