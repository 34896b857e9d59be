//! Frame pooling and layer aggregation (layer mean, softmax weighted sum,
//! and weighted sum with per-layer sigmoid gates).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingRecord;

/// Arithmetic mean over the frame axis of a `T × D` matrix.
pub fn mean_pool_time(frames: &DMatrix<f64>) -> Result<DVector<f64>> {
    if frames.nrows() == 0 {
        return Err(Error::EmptyInput("mean pooling over zero frames".into()));
    }
    Ok(frames.row_mean().transpose())
}

/// Time-pooled `L × D` matrix of a record, one row per layer.
pub fn pool_record(record: &EmbeddingRecord) -> DMatrix<f64> {
    let (t, d) = (record.num_frames(), record.dim());
    let mut out = DMatrix::zeros(record.num_layers(), d);
    for l in 0..record.num_layers() {
        let slice = record.layer(l);
        for j in 0..d {
            let sum: f64 = (0..t).map(|f| f64::from(slice[f * d + j])).sum();
            out[(l, j)] = sum / t as f64;
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    LayerMean,
    WeightedSum,
    WeightingGate,
}

/// Learnable layer aggregation. Weights are `softmax(ws_logits)`, gates are
/// `sigmoid(gate_logits)`; both start at zero logits (uniform weights, gates 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorParams {
    pub mode: AggregationMode,
    pub num_layers: usize,
    pub ws_logits: Vec<f64>,
    pub gate_logits: Vec<f64>,
}

/// Gradients of `upstream · aggregate(pooled)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorGrads {
    /// Empty in `layer_mean` mode.
    pub ws_logits: Vec<f64>,
    /// Empty unless in `weighting_gate` mode.
    pub gate_logits: Vec<f64>,
    /// Gradient w.r.t. the pooled `L × D` input.
    pub pooled: DMatrix<f64>,
}

impl AggregatorParams {
    pub fn new(mode: AggregationMode, num_layers: usize) -> Self {
        let ws = match mode {
            AggregationMode::LayerMean => Vec::new(),
            _ => vec![0.0; num_layers],
        };
        let gate = match mode {
            AggregationMode::WeightingGate => vec![0.0; num_layers],
            _ => Vec::new(),
        };
        Self {
            mode,
            num_layers,
            ws_logits: ws,
            gate_logits: gate,
        }
    }

    pub fn layer_mean(num_layers: usize) -> Self {
        Self::new(AggregationMode::LayerMean, num_layers)
    }

    pub fn weighted_sum(num_layers: usize) -> Self {
        Self::new(AggregationMode::WeightedSum, num_layers)
    }

    pub fn weighting_gate(num_layers: usize) -> Self {
        Self::new(AggregationMode::WeightingGate, num_layers)
    }

    pub fn weights(&self) -> Vec<f64> {
        match self.mode {
            AggregationMode::LayerMean => vec![1.0 / self.num_layers as f64; self.num_layers],
            _ => softmax(&self.ws_logits),
        }
    }

    pub fn gates(&self) -> Option<Vec<f64>> {
        (self.mode == AggregationMode::WeightingGate).then(|| self.gate_logits.iter().map(|&g| sigmoid(g)).collect())
    }

    /// Per-layer multiplier applied to each pooled layer.
    pub fn coefficients(&self) -> Vec<f64> {
        let w = self.weights();
        match self.gates() {
            Some(g) => w.iter().zip(g).map(|(w, g)| w * g).collect(),
            None => w,
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.ws_logits.len() + self.gate_logits.len()
    }

    /// Trainable scalars, ws logits first.
    pub fn trainable(&self) -> Vec<f64> {
        self.ws_logits.iter().chain(&self.gate_logits).copied().collect()
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::dims("aggregator parameters", self.num_trainable(), flat.len()));
        }
        let (ws, gate) = flat.split_at(self.ws_logits.len());
        self.ws_logits.copy_from_slice(ws);
        self.gate_logits.copy_from_slice(gate);
        Ok(())
    }

    fn check(&self, pooled: &DMatrix<f64>) -> Result<()> {
        if pooled.nrows() != self.num_layers {
            return Err(Error::dims("aggregated layer count", self.num_layers, pooled.nrows()));
        }
        let expect_ws = if self.mode == AggregationMode::LayerMean {
            0
        } else {
            self.num_layers
        };
        let expect_gate = if self.mode == AggregationMode::WeightingGate {
            self.num_layers
        } else {
            0
        };
        if self.ws_logits.len() != expect_ws {
            return Err(Error::dims("ws_logits", expect_ws, self.ws_logits.len()));
        }
        if self.gate_logits.len() != expect_gate {
            return Err(Error::dims("gate_logits", expect_gate, self.gate_logits.len()));
        }
        Ok(())
    }
}

/// Collapses an `L × D` stack of pooled layers to one `D`-vector.
pub fn aggregate_layers(pooled: &DMatrix<f64>, params: &AggregatorParams) -> Result<DVector<f64>> {
    params.check(pooled)?;
    let coef = params.coefficients();
    let mut out = DVector::zeros(pooled.ncols());
    for (l, c) in coef.iter().enumerate() {
        for j in 0..pooled.ncols() {
            out[j] += c * pooled[(l, j)];
        }
    }
    Ok(out)
}

pub fn aggregate_backward(
    pooled: &DMatrix<f64>,
    params: &AggregatorParams,
    upstream: &DVector<f64>,
) -> Result<AggregatorGrads> {
    params.check(pooled)?;
    if upstream.len() != pooled.ncols() {
        return Err(Error::dims(
            "aggregator upstream gradient",
            pooled.ncols(),
            upstream.len(),
        ));
    }
    let coef = params.coefficients();
    let mut d_pooled = DMatrix::zeros(pooled.nrows(), pooled.ncols());
    for (l, c) in coef.iter().enumerate() {
        for j in 0..pooled.ncols() {
            d_pooled[(l, j)] = c * upstream[j];
        }
    }
    if params.mode == AggregationMode::LayerMean {
        return Ok(AggregatorGrads {
            ws_logits: Vec::new(),
            gate_logits: Vec::new(),
            pooled: d_pooled,
        });
    }

    // projection of each layer onto the upstream direction
    let proj: Vec<f64> = (0..pooled.nrows())
        .map(|l| pooled.row(l).transpose().dot(upstream))
        .collect();
    let w = params.weights();
    let gates = params.gates();
    // s_l = g_l · (p_l · u); d/dws_k = w_k (s_k − Σ_l w_l s_l)
    let s: Vec<f64> = match &gates {
        Some(g) => proj.iter().zip(g).map(|(p, g)| p * g).collect(),
        None => proj.clone(),
    };
    let mean_s: f64 = w.iter().zip(&s).map(|(w, s)| w * s).sum();
    let ws_grad = w.iter().zip(&s).map(|(w, s)| w * (s - mean_s)).collect();
    let gate_grad = match &gates {
        Some(g) => w
            .iter()
            .zip(g)
            .zip(&proj)
            .map(|((w, g), p)| w * g * (1.0 - g) * p)
            .collect(),
        None => Vec::new(),
    };
    Ok(AggregatorGrads {
        ws_logits: ws_grad,
        gate_logits: gate_grad,
        pooled: d_pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mean_pool_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_pool_time(&m).unwrap().as_slice(), &[2.0, 3.0]);
        let m = DMatrix::from_row_slice(1, 3, &[5.0, 6.0, 7.0]);
        assert_eq!(mean_pool_time(&m).unwrap().as_slice(), &[5.0, 6.0, 7.0]);
        assert!(matches!(
            mean_pool_time(&DMatrix::zeros(0, 3)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn mean_pool_concentrates() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = DMatrix::from_fn(100, 8, |_, _| StandardNormal.sample(&mut rng));
        assert!(mean_pool_time(&m).unwrap().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn pool_record_matches_mean_pool_time() {
        use crate::labels::{Domain, Emotion};
        let data: Vec<f32> = (0..24).map(|i| (i as f32).sin()).collect();
        let r = EmbeddingRecord::new("x", Domain::Speech, Emotion::Calm, "m", (2, 4, 3), data).unwrap();
        let pooled = pool_record(&r);
        for l in 0..2 {
            let direct = mean_pool_time(&r.layer_matrix(l)).unwrap();
            for j in 0..3 {
                assert!((pooled[(l, j)] - direct[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_mean_example() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 4.0]);
        let out = aggregate_layers(&p, &AggregatorParams::layer_mean(2)).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_ws_equals_layer_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in 1..13 {
            let p = random(&mut rng, l, 5);
            let mut ws = AggregatorParams::weighted_sum(l);
            ws.ws_logits = vec![0.37; l];
            let a = aggregate_layers(&p, &ws).unwrap();
            let b = aggregate_layers(&p, &AggregatorParams::layer_mean(l)).unwrap();
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn saturated_softmax_selects_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random(&mut rng, 12, 4);
        let mut ws = AggregatorParams::weighted_sum(12);
        ws.ws_logits = vec![-30.0; 12];
        ws.ws_logits[0] = 30.0;
        let out = aggregate_layers(&p, &ws).unwrap();
        for j in 0..4 {
            assert!((out[j] - p[(0, j)]).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = DMatrix::zeros(3, 2);
        assert!(aggregate_layers(&p, &AggregatorParams::weighted_sum(4)).is_err());
        let grads = aggregate_backward(&p, &AggregatorParams::layer_mean(3), &DVector::zeros(2)).unwrap();
        assert!(grads.ws_logits.is_empty() && grads.gate_logits.is_empty());
    }

    #[test]
    fn identical_layers_give_zero_ws_gradient() {
        let row = [0.3, -1.2, 2.0];
        let p = DMatrix::from_fn(4, 3, |_, j| row[j]);
        let g = aggregate_backward(
            &p,
            &AggregatorParams::weighted_sum(4),
            &DVector::from_vec(vec![1.0, 2.0, -0.5]),
        )
        .unwrap();
        assert!(g.ws_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_gradient_sign_hand_case() {
        // layer 0 points along the upstream, layer 1 against it
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -2.0, 0.0]);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let params = AggregatorParams::weighting_gate(2);
        let g = aggregate_backward(&p, &params, &u).unwrap();
        // w = 0.5, gate = 0.5: dgate_l = 0.5 · 0.25 · (p_l · u)
        assert!((g.gate_logits[0] - 0.125).abs() < 1e-15);
        assert!((g.gate_logits[1] + 0.25).abs() < 1e-15);
    }

    /// Central-difference check of `upstream · aggregate` against the analytic gradient.
    fn fd_check(mode: AggregationMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d) = (4, 3);
        let p = random(&mut rng, l, d);
        let u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut params = AggregatorParams::new(mode, l);
        let flat: Vec<f64> = (0..params.num_trainable())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        params.set_trainable(&flat).unwrap();
        let g = aggregate_backward(&p, &params, &u).unwrap();
        let analytic: Vec<f64> = g.ws_logits.iter().chain(&g.gate_logits).copied().collect();
        let h = 1e-5;
        for i in 0..flat.len() {
            let f = |delta: f64| {
                let mut q = params.clone();
                let mut x = flat.clone();
                x[i] += delta;
                q.set_trainable(&x).unwrap();
                aggregate_layers(&p, &q).unwrap().dot(&u)
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
            assert!((analytic[i] - numeric).abs() / denom < 1e-4, "seed {seed} coord {i}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..100 {
            fd_check(AggregationMode::WeightedSum, seed);
            fd_check(AggregationMode::WeightingGate, seed);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s: f64 = softmax(&logits).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = AggregatorParams::weighting_gate(3);
        params.set_trainable(&[0.3, -0.2, 1.0, 0.5, -1.0, 2.0]).unwrap();
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let lhs = aggregate_layers(&(&a * 2.0 + &b), &params).unwrap();
        let rhs = aggregate_layers(&a, &params).unwrap() * 2.0 + aggregate_layers(&b, &params).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }
}
