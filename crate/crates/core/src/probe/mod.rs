//! Linear emotion classifier: softmax regression trained with AdamW and
//! selected on validation unweighted accuracy.

mod metrics;
mod sweep;
mod train;

pub use metrics::{evaluate, metrics_from_predictions, MetricsReport};
pub use sweep::{layerwise_probe_sweep, SweepRow};
pub use train::{evaluate_model, fit, train_probe, FitOutcome, LabeledSet, Trainable};

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use nalgebra::{DMatrix, DVector};

/// `logits = W·x + b` over the six emotion classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrads {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Gradient w.r.t. the `N × D` input features.
    pub input: DMatrix<f64>,
}

impl ProbeParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(NUM_CLASSES, dim),
            bias: DVector::zeros(NUM_CLASSES),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_trainable(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Row-major weights followed by the bias.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for row in self.weight.row_iter() {
            out.extend(row.iter());
        }
        out.extend(self.bias.iter());
        out
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::dims("probe parameters", self.num_trainable(), flat.len()));
        }
        let (c, d) = self.weight.shape();
        self.weight = DMatrix::from_row_slice(c, d, &flat[..c * d]);
        self.bias = DVector::from_row_slice(&flat[c * d..]);
        Ok(())
    }

    pub fn logits(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::dims("probe input dim", self.dim(), features.ncols()));
        }
        let mut z = features * self.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(z)
    }
}

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dims("label count", rows, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::Validation(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Row-wise `log softmax`, stable for large logits.
pub fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.apply(|z| *z -= lse);
    }
    out
}

pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

/// Mean cross-entropy over the batch and the logits that produced it.
pub fn forward_loss(params: &ProbeParams, features: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    check_labels(labels, features.nrows())?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let logits = params.logits(features)?;
    let logp = log_softmax_rows(&logits);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[(i, y)]).sum::<f64>() / labels.len() as f64;
    Ok((loss, logits))
}

/// Loss and its exact gradient w.r.t. `W`, `b` and the input features.
pub fn probe_backward(params: &ProbeParams, features: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, ProbeGrads)> {
    let (loss, logits) = forward_loss(params, features, labels)?;
    let n = labels.len() as f64;
    // dL/dz = (softmax − onehot) / N
    let mut dz = log_softmax_rows(&logits).map(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        dz[(i, y)] -= 1.0;
    }
    dz /= n;
    let grads = ProbeGrads {
        weight: dz.tr_mul(features),
        bias: dz.row_sum().transpose(),
        input: &dz * &params.weight,
    };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_ln6() {
        let p = ProbeParams::zeros(3);
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -4.0, 2.0, 0.5, 0.5, 9.0]);
        let (loss, _) = forward_loss(&p, &x, &[0, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn saturated_logit_loss_is_tiny() {
        let mut p = ProbeParams::zeros(1);
        p.bias[2] = 100.0;
        let (loss, _) = forward_loss(&p, &DMatrix::zeros(1, 1), &[2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn bad_label_rejected() {
        let p = ProbeParams::zeros(2);
        assert!(matches!(
            forward_loss(&p, &DMatrix::zeros(1, 2), &[6]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            forward_loss(&p, &DMatrix::zeros(1, 3), &[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Independent scalar recomputation of softmax cross-entropy.
    fn scalar_oracle(p: &ProbeParams, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let mut z = [0.0f64; NUM_CLASSES];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = p.bias[c];
                for j in 0..x.ncols() {
                    *zc += p.weight[(c, j)] * x[(i, j)];
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total += -(z[y[i]].exp() / denom).ln();
        }
        total / x.nrows() as f64
    }

    fn random_probe(rng: &mut ChaCha8Rng, d: usize) -> ProbeParams {
        let mut p = ProbeParams::zeros(d);
        let flat: Vec<f64> = (0..p.num_trainable()).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.set_trainable(&flat).unwrap();
        p
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = random_probe(&mut rng, 4);
            let x = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
            let (loss, _) = forward_loss(&p, &x, &y).unwrap();
            assert!((loss - scalar_oracle(&p, &x, &y)).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DMatrix::from_fn(20, 6, |_, _| rng.random_range(-40.0..40.0));
        for row in log_softmax_rows(&z).row_iter() {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_probe(&mut rng, 5);
        let mut q = ProbeParams::zeros(5);
        q.set_trainable(&p.trainable()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_trainable(), 36);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let d = rng.random_range(1..6);
            let n = rng.random_range(1..5);
            let p = random_probe(&mut rng, d);
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let (_, g) = probe_backward(&p, &x, &y).unwrap();
            let mut analytic: Vec<f64> = g.weight.transpose().iter().copied().collect();
            analytic.extend(g.bias.iter());
            let flat = p.trainable();
            for i in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    let mut f = flat.clone();
                    f[i] += delta;
                    q.set_trainable(&f).unwrap();
                    forward_loss(&q, &x, &y).unwrap().0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-4,
                    "coord {i}: {} vs {numeric}",
                    analytic[i]
                );
            }
            // input gradient
            for i in 0..n {
                for j in 0..d {
                    let eval = |delta: f64| {
                        let mut x2 = x.clone();
                        x2[(i, j)] += delta;
                        forward_loss(&p, &x2, &y).unwrap().0
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = g.input[(i, j)];
                    assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7) < 1e-4);
                }
            }
        }
    }
}
