//! A small frozen pre-norm transformer encoder with injectable LoRA (query
//! and value projections) and bottleneck adapters (after each FFN).

mod encoder;
mod pipeline;
#[cfg(test)]
mod tests;

pub use encoder::{encoder_backward, encoder_forward, EncoderTrace};
pub use pipeline::{peft_assemble, peft_backward, PeftGrads, PeftPipeline};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::NamedTensor;

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniEncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    /// Add sinusoidal positions to the input.
    #[serde(default)]
    pub positional: bool,
    /// Std of the Gaussian backbone weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl MiniEncoderConfig {
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, ffn_dim: usize, seed: u64) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            ffn_dim,
            seed,
            positional: false,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder sizes must be ≥ 1".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Frozen weights of one encoder layer. Linear maps are `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: DVector<f64>,
    pub ln1_bias: DVector<f64>,
    pub wq: DMatrix<f64>,
    pub bq: DVector<f64>,
    pub wk: DMatrix<f64>,
    pub bk: DVector<f64>,
    pub wv: DMatrix<f64>,
    pub bv: DVector<f64>,
    pub wo: DMatrix<f64>,
    pub bo: DVector<f64>,
    pub ln2_gain: DVector<f64>,
    pub ln2_bias: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl LayerWeights {
    fn tensors(&self) -> [&[f64]; 16] {
        [
            self.ln1_gain.as_slice(),
            self.ln1_bias.as_slice(),
            self.wq.as_slice(),
            self.bq.as_slice(),
            self.wk.as_slice(),
            self.bk.as_slice(),
            self.wv.as_slice(),
            self.bv.as_slice(),
            self.wo.as_slice(),
            self.bo.as_slice(),
            self.ln2_gain.as_slice(),
            self.ln2_bias.as_slice(),
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }
}

/// The frozen backbone. Never mutated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: MiniEncoderConfig,
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    if std == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl EncoderWeights {
    /// Seeded Gaussian matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &MiniEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, std) = (config.model_dim, config.ffn_dim, config.init_std);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gain: DVector::from_element(d, 1.0),
                ln1_bias: DVector::zeros(d),
                wq: gaussian(&mut rng, d, d, std),
                bq: DVector::zeros(d),
                wk: gaussian(&mut rng, d, d, std),
                bk: DVector::zeros(d),
                wv: gaussian(&mut rng, d, d, std),
                bv: DVector::zeros(d),
                wo: gaussian(&mut rng, d, d, std),
                bo: DVector::zeros(d),
                ln2_gain: DVector::from_element(d, 1.0),
                ln2_bias: DVector::zeros(d),
                w1: gaussian(&mut rng, f, d, std),
                b1: DVector::zeros(f),
                w2: gaussian(&mut rng, d, f, std),
                b2: DVector::zeros(d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// SHA-256 over every backbone tensor's bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for t in layer.tensors() {
                for v in t {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub bottleneck_dim: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            bottleneck_dim: 32,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank update `ΔW = (α/r)·B·A` with `A: r × D`, `B: D × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Residual block `h + W_up·relu(W_down·h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckParams {
    pub down: DMatrix<f64>,
    pub up: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub query: LoraParams,
    pub value: LoraParams,
    pub bottleneck: BottleneckParams,
}

impl LayerAdapters {
    fn tensors(&self) -> [(&'static str, &DMatrix<f64>); 6] {
        [
            ("lora_q.a", &self.query.a),
            ("lora_q.b", &self.query.b),
            ("lora_v.a", &self.value.a),
            ("lora_v.b", &self.value.b),
            ("bottleneck.down", &self.bottleneck.down),
            ("bottleneck.up", &self.bottleneck.up),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 6] {
        [
            &mut self.query.a,
            &mut self.query.b,
            &mut self.value.a,
            &mut self.value.b,
            &mut self.bottleneck.down,
            &mut self.bottleneck.up,
        ]
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Self {
            query: LoraParams {
                a: z(&self.query.a),
                b: z(&self.query.b),
            },
            value: LoraParams {
                a: z(&self.value.a),
                b: z(&self.value.b),
            },
            bottleneck: BottleneckParams {
                down: z(&self.bottleneck.down),
                up: z(&self.bottleneck.up),
            },
        }
    }
}

/// Trainable PEFT modules for every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters>,
}

impl AdapterParams {
    /// `A` and `W_down` drawn from `N(0, 1/D)`; `B` and `W_up` start at zero
    /// so the adapted encoder matches the frozen one exactly.
    pub fn init(encoder: &MiniEncoderConfig, config: &AdapterConfig) -> Result<Self> {
        if config.rank == 0 || config.bottleneck_dim == 0 {
            return Err(Error::Config("adapter rank and bottleneck dim must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = encoder.model_dim;
        let std = 1.0 / (d as f64).sqrt();
        let (r, db) = (config.rank, config.bottleneck_dim);
        let layers = (0..encoder.num_layers)
            .map(|_| LayerAdapters {
                query: LoraParams {
                    a: gaussian(&mut rng, r, d, std),
                    b: DMatrix::zeros(d, r),
                },
                value: LoraParams {
                    a: gaussian(&mut rng, r, d, std),
                    b: DMatrix::zeros(d, r),
                },
                bottleneck: BottleneckParams {
                    down: gaussian(&mut rng, db, d, std),
                    up: DMatrix::zeros(d, db),
                },
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(LayerAdapters::zeros_like).collect(),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(|(_, m)| m.len()).sum()
    }

    /// Row-major tensors, layer by layer, in `named_tensors` order.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for layer in &self.layers {
            for (_, m) in layer.tensors() {
                for row in m.row_iter() {
                    out.extend(row.iter());
                }
            }
        }
        out
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::dims("adapter parameters", self.num_trainable(), flat.len()));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            for m in layer.tensors_mut() {
                let (r, c) = m.shape();
                *m = DMatrix::from_row_slice(r, c, &flat[pos..pos + r * c]);
                pos += r * c;
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                layer
                    .tensors()
                    .into_iter()
                    .map(move |(name, m)| NamedTensor::from_matrix(format!("adapters.{l}.{name}"), m))
            })
            .collect()
    }

    /// Checks every tensor against the encoder's model dim and this config.
    pub fn check(&self, encoder: &MiniEncoderConfig) -> Result<()> {
        if self.layers.len() != encoder.num_layers {
            return Err(Error::dims(
                "adapter layer count",
                encoder.num_layers,
                self.layers.len(),
            ));
        }
        let (d, r, db) = (encoder.model_dim, self.config.rank, self.config.bottleneck_dim);
        for (l, layer) in self.layers.iter().enumerate() {
            let expected = [(r, d), (d, r), (r, d), (d, r), (db, d), (d, db)];
            for ((name, m), shape) in layer.tensors().into_iter().zip(expected) {
                if m.shape() != shape {
                    return Err(Error::DimensionMismatch {
                        context: format!("adapters.{l}.{name} shape {:?}", m.shape()),
                        expected: shape.0 * shape.1,
                        actual: m.len(),
                    });
                }
            }
        }
        Ok(())
    }
}
