//! Seeded Gaussian fixtures that stand in for extracted embeddings.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{make_stratified_split, DatasetManifest, EmbeddingRecord, ManifestRecord};
use crate::error::{Error, Result};
use crate::fad::matrix_sqrt_psd;
use crate::labels::{Domain, Emotion, NUM_CLASSES};

/// Class-conditional frame distribution for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassSpec {
    /// Records per emotion, in canonical emotion order.
    pub counts: [usize; NUM_CLASSES],
    /// Per-emotion mean, each of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Per-emotion `dim × dim` covariance; isotropic `noise_std²·I` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default = "one")]
    pub noise_std: f64,
}

fn one() -> f64 {
    1.0
}

fn default_tag() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(default = "default_tag")]
    pub model_tag: String,
    pub num_layers: usize,
    pub num_frames: usize,
    pub dim: usize,
    pub speech: DomainClassSpec,
    pub music: DomainClassSpec,
    /// 1.0 makes music share the speech class means exactly, 0.0 keeps its own.
    pub coupling: f64,
    /// Per-layer multiplier on the class mean; 0 makes a layer pure noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_signal: Option<Vec<f64>>,
}

impl SyntheticConfig {
    /// Isotropic unit-variance blobs: speech class `c` sits at `separation·e_c`,
    /// music class `c` at `-separation·e_c` before coupling. Needs `dim ≥ 6`.
    pub fn blobs(
        num_layers: usize,
        num_frames: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        coupling: f64,
    ) -> Self {
        let means = |sign: f64| {
            (0..NUM_CLASSES)
                .map(|c| {
                    let mut m = vec![0.0; dim];
                    m[c % dim] = sign * separation;
                    m
                })
                .collect()
        };
        let spec = |sign| DomainClassSpec {
            counts: [per_class; NUM_CLASSES],
            means: means(sign),
            covariances: None,
            noise_std: 1.0,
        };
        Self {
            model_tag: default_tag(),
            num_layers,
            num_frames,
            dim,
            speech: spec(1.0),
            music: spec(-1.0),
            coupling,
            layer_signal: None,
        }
    }

    pub fn with_layer_signal(mut self, signal: Vec<f64>) -> Self {
        self.layer_signal = Some(signal);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.model_tag = tag.into();
        self
    }

    fn spec(&self, domain: Domain) -> &DomainClassSpec {
        match domain {
            Domain::Speech => &self.speech,
            Domain::Music => &self.music,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_frames == 0 || self.dim == 0 {
            return Err(Error::Config("num_layers, num_frames and dim must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if let Some(sig) = &self.layer_signal {
            if sig.len() != self.num_layers {
                return Err(Error::Config(format!(
                    "layer_signal has {} entries for {} layers",
                    sig.len(),
                    self.num_layers
                )));
            }
        }
        for domain in Domain::ALL {
            let spec = self.spec(domain);
            if spec.means.len() != NUM_CLASSES || spec.means.iter().any(|m| m.len() != self.dim) {
                return Err(Error::Config(format!(
                    "{domain} means must be {NUM_CLASSES} vectors of length {}",
                    self.dim
                )));
            }
            if let Some(covs) = &spec.covariances {
                let square = covs.len() == NUM_CLASSES
                    && covs
                        .iter()
                        .all(|c| c.len() == self.dim && c.iter().all(|row| row.len() == self.dim));
                if !square {
                    return Err(Error::Config(format!(
                        "{domain} covariances must be {NUM_CLASSES} matrices of {0}×{0}",
                        self.dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Symmetric square-root factor of each class covariance.
    fn factors(&self, domain: Domain) -> Result<Vec<DMatrix<f64>>> {
        let spec = self.spec(domain);
        let d = self.dim;
        match &spec.covariances {
            None => Ok(vec![DMatrix::identity(d, d) * spec.noise_std.abs(); NUM_CLASSES]),
            Some(covs) => covs
                .iter()
                .zip(Emotion::ALL)
                .map(|(c, emotion)| {
                    let m = DMatrix::from_fn(d, d, |i, j| c[i][j]);
                    if (&m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
                        return Err(Error::Config(format!("{domain}/{emotion} covariance is not symmetric")));
                    }
                    matrix_sqrt_psd(&m).map_err(|e| Error::Config(format!("{domain}/{emotion} covariance: {e}")))
                })
                .collect(),
        }
    }

    fn class_mean(&self, domain: Domain, emotion: Emotion) -> DVector<f64> {
        let own = DVector::from_vec(self.spec(domain).means[emotion.index()].clone());
        match domain {
            Domain::Speech => own,
            Domain::Music => {
                let speech = DVector::from_vec(self.speech.means[emotion.index()].clone());
                speech * self.coupling + own * (1.0 - self.coupling)
            }
        }
    }
}

pub fn generate_synthetic_manifest(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(Vec<EmbeddingRecord>, DatasetManifest)> {
    config.validate()?;
    let (layers, frames, dim) = (config.num_layers, config.num_frames, config.dim);
    let signal = config.layer_signal.clone().unwrap_or_else(|| vec![1.0; layers]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();

    for domain in Domain::ALL {
        let factors = config.factors(domain)?;
        for emotion in Emotion::ALL {
            let mean = config.class_mean(domain, emotion);
            let factor = &factors[emotion.index()];
            for i in 0..config.spec(domain).counts[emotion.index()] {
                let mut data = Vec::with_capacity(layers * frames * dim);
                for &s in &signal {
                    for _ in 0..frames {
                        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                        let x = &mean * s + factor * z;
                        data.extend(x.iter().map(|&v| v as f32));
                    }
                }
                records.push(EmbeddingRecord::new(
                    format!("{}-{domain}-{emotion}-{i:05}", config.model_tag),
                    domain,
                    emotion,
                    config.model_tag.clone(),
                    (layers, frames, dim),
                    data,
                )?);
            }
        }
    }

    let manifest = make_stratified_split(&ManifestRecord::from_records(&records), seed)?;
    Ok((records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_config() {
        let cfg = SyntheticConfig::blobs(2, 3, 6, 20, 3.0, 1.0);
        let (recs, manifest) = generate_synthetic_manifest(&cfg, 1).unwrap();
        assert_eq!(recs.len(), 240);
        assert_eq!(manifest.counts.len(), 12);
        assert!(manifest.counts.iter().all(|c| c.total == 20));
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticConfig::blobs(2, 2, 6, 3, 1.0, 0.5);
        let a = generate_synthetic_manifest(&cfg, 9).unwrap();
        let b = generate_synthetic_manifest(&cfg, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_synthetic_manifest(&cfg, 10).unwrap();
        assert_ne!(a.0[0].data(), c.0[0].data());
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let mut cfg = SyntheticConfig::blobs(1, 1, 6, 2, 1.0, 1.0);
        let mut cov = vec![vec![0.0; 6]; 6];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        cov[0][0] = -1.0;
        cfg.speech.covariances = Some(vec![cov; 6]);
        assert!(matches!(generate_synthetic_manifest(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn coupling_shares_means() {
        // mean of per-class sample means converges when the domains share means
        let cfg = SyntheticConfig::blobs(1, 1, 6, 500, 2.0, 1.0);
        let (recs, _) = generate_synthetic_manifest(&cfg, 5).unwrap();
        for emotion in Emotion::ALL {
            let mean = |domain: Domain| {
                let rows: Vec<_> = recs
                    .iter()
                    .filter(|r| r.domain == domain && r.emotion == emotion)
                    .collect();
                let mut acc = vec![0.0f64; 6];
                for r in &rows {
                    for (a, &v) in acc.iter_mut().zip(r.layer(0)) {
                        *a += f64::from(v);
                    }
                }
                acc.into_iter().map(|v| v / rows.len() as f64).collect::<Vec<_>>()
            };
            let (s, m) = (mean(Domain::Speech), mean(Domain::Music));
            for (a, b) in s.iter().zip(&m) {
                // difference of two 500-sample means has std ~0.063
                assert!((a - b).abs() < 0.35, "{emotion}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SyntheticConfig::blobs(3, 2, 6, 4, 2.5, 0.25).with_layer_signal(vec![0.0, 1.0, 0.0]);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut cfg = SyntheticConfig::blobs(2, 1, 6, 2, 1.0, 1.0);
        cfg.layer_signal = Some(vec![1.0]);
        assert!(matches!(generate_synthetic_manifest(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = SyntheticConfig::blobs(2, 1, 6, 2, 1.0, 1.5);
        assert!(generate_synthetic_manifest(&cfg, 0).is_err());
        cfg.coupling = 1.0;
        cfg.music.means.pop();
        assert!(matches!(generate_synthetic_manifest(&cfg, 0), Err(Error::Config(_))));
    }
}
