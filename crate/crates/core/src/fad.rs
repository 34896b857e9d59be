//! Fréchet audio distance between Gaussian summaries of two embedding sets:
//!
//! ```text
//! F(a, b) = ‖μa − μb‖² + tr(Σa) + tr(Σb) − 2·tr( sqrt(Σa^½ Σb Σa^½) )
//! ```
//!
//! The symmetric inner form has the same trace as `sqrt(Σa Σb)` but can be
//! handled by a symmetric eigensolver.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Domain, Emotion};
use crate::pooling::pool_record;
use crate::store::{DatasetManifest, EmbeddingRecord};

/// Negative eigenvalues above `-PSD_TOLERANCE·‖M‖` are round-off and get clamped.
pub const PSD_TOLERANCE: f64 = 1e-6;
/// Final scores in `(-SCORE_CLAMP, 0)` are clamped to zero.
pub const SCORE_CLAMP: f64 = 1e-6;
/// Relative ridge added to near-singular covariances before square roots.
pub const RIDGE: f64 = 1e-10;
/// A covariance counts as near-singular when its smallest eigenvalue is
/// below this fraction of its spectral norm.
const SINGULAR_FRACTION: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and unbiased covariance of the rows of an `N × D` matrix.
pub fn gaussian_stats(embeddings: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in embeddings".into()));
    }
    let mu = embeddings.row_mean().transpose();
    let mut centered = embeddings.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let sigma = centered.tr_mul(&centered) / (n - 1) as f64;
    Ok(GaussianStats {
        mu,
        sigma: symmetrize(&sigma),
        count: n,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn spectral_norm(eigenvalues: &DVector<f64>) -> f64 {
    eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric PSD eigendecomposition with round-off negatives clamped.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::dims("square matrix columns", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
        return Err(Error::Validation("matrix is not symmetric".into()));
    }
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let norm = spectral_norm(&eig.eigenvalues);
    let min = eig.eigenvalues.min();
    let tolerance = PSD_TOLERANCE * norm;
    if min < -tolerance {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            tolerance,
        });
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(&s))
}

fn regularized(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(sigma)?;
    let norm = spectral_norm(&eig.eigenvalues);
    let d = sigma.nrows();
    if eig.eigenvalues.min() <= SINGULAR_FRACTION * norm {
        let eps = RIDGE * sigma.trace() / d as f64;
        Ok(sigma + DMatrix::identity(d, d) * eps)
    } else {
        Ok(sigma.clone())
    }
}

/// Components of one distance evaluation, before and after clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetBreakdown {
    pub mean_term: f64,
    pub trace_term: f64,
    pub raw: f64,
    pub score: f64,
}

pub fn frechet_breakdown(a: &GaussianStats, b: &GaussianStats) -> Result<FrechetBreakdown> {
    if a.dim() != b.dim() || a.sigma.nrows() != a.dim() || b.sigma.nrows() != b.dim() {
        return Err(Error::dims("gaussian dimension", a.dim(), b.dim()));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let sa = regularized(&a.sigma)?;
    let sb = regularized(&b.sigma)?;
    let root_a = matrix_sqrt_psd(&sa)?;
    let inner = symmetrize(&(&root_a * &sb * &root_a));
    let eig = SymmetricEigen::new(inner);
    let norm = spectral_norm(&eig.eigenvalues);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * norm {
        return Err(Error::Numerical(format!(
            "inner product Σa^½ Σb Σa^½ has eigenvalue {min:e} (spectral norm {norm:e}, dim {})",
            a.dim()
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let trace_term = sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    let raw = mean_term + trace_term;
    if raw < -SCORE_CLAMP {
        return Err(Error::Numerical(format!(
            "distance {raw:e} is negative beyond round-off (mean term {mean_term:e}, trace term {trace_term:e})"
        )));
    }
    Ok(FrechetBreakdown {
        mean_term,
        trace_term,
        raw,
        score: raw.max(0.0),
    })
}

pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    frechet_breakdown(a, b).map(|f| f.score)
}

/// Emotion subset of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionSubset {
    One(Emotion),
    All,
}

impl EmotionSubset {
    pub fn sweep_order() -> Vec<EmotionSubset> {
        Emotion::ALL
            .into_iter()
            .map(EmotionSubset::One)
            .chain(std::iter::once(EmotionSubset::All))
            .collect()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EmotionSubset::One(e) => e.as_str(),
            EmotionSubset::All => "all",
        }
    }

    fn contains(&self, e: Emotion) -> bool {
        match self {
            EmotionSubset::One(x) => *x == e,
            EmotionSubset::All => true,
        }
    }
}

/// One `(layer, emotion)` cell. `fad` is absent when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadResult {
    pub model_tag: String,
    /// 1-based layer index.
    pub layer: usize,
    pub emotion: String,
    pub fad: Option<f64>,
    pub n_speech: usize,
    pub n_music: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FadOptions {
    /// Use every frame as a sample instead of one pooled vector per record.
    #[serde(default)]
    pub per_frame: bool,
}

fn stack(rows: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}

/// FAD between the speech and music subsets for every layer and emotion
/// (plus the pooled "all" subset), ordered by layer then emotion.
pub fn fad_sweep(
    records: &[EmbeddingRecord],
    manifest: Option<&DatasetManifest>,
    model_tag: &str,
    options: &FadOptions,
) -> Result<Vec<FadResult>> {
    let selected: Vec<&EmbeddingRecord> = records
        .iter()
        .filter(|r| r.model_tag == model_tag)
        .filter(|r| manifest.is_none_or(|m| m.split_of(&r.utterance_id).is_some()))
        .collect();
    let Some(first) = selected.first() else {
        return Err(Error::EmptyInput(format!("no records for model '{model_tag}'")));
    };
    let (num_layers, dim) = (first.num_layers(), first.dim());
    if let Some(r) = selected.iter().find(|r| r.num_layers() != num_layers || r.dim() != dim) {
        return Err(Error::dims(
            format!("shape of record '{}'", r.utterance_id),
            num_layers * dim,
            r.num_layers() * r.dim(),
        ));
    }

    // samples[layer][(domain, emotion)] → rows
    let pooled: Vec<DMatrix<f64>> = if options.per_frame {
        Vec::new()
    } else {
        selected.par_iter().map(|r| pool_record(r)).collect()
    };
    let cells: Vec<Vec<FadResult>> = (0..num_layers)
        .into_par_iter()
        .map(|layer| {
            let mut groups: BTreeMap<(Domain, Emotion), Vec<DVector<f64>>> = BTreeMap::new();
            for (i, r) in selected.iter().enumerate() {
                let rows = groups.entry((r.domain, r.emotion)).or_default();
                if options.per_frame {
                    let m = r.layer_matrix(layer);
                    rows.extend(m.row_iter().map(|row| row.transpose()));
                } else {
                    rows.push(pooled[i].row(layer).transpose());
                }
            }
            EmotionSubset::sweep_order()
                .into_iter()
                .map(|subset| {
                    let gather = |domain: Domain| -> Vec<DVector<f64>> {
                        groups
                            .iter()
                            .filter(|((d, e), _)| *d == domain && subset.contains(*e))
                            .flat_map(|(_, rows)| rows.iter().cloned())
                            .collect()
                    };
                    let (speech, music) = (gather(Domain::Speech), gather(Domain::Music));
                    let score = gaussian_stats(&stack(&speech, dim))
                        .and_then(|a| Ok((a, gaussian_stats(&stack(&music, dim))?)))
                        .and_then(|(a, b)| frechet_distance(&a, &b));
                    let (fad, error) = match score {
                        Ok(v) => (Some(v), None),
                        Err(e) => {
                            log::warn!("fad {model_tag} layer {} {}: {e}", layer + 1, subset.as_str());
                            (None, Some(e.to_string()))
                        }
                    };
                    FadResult {
                        model_tag: model_tag.to_string(),
                        layer: layer + 1,
                        emotion: subset.as_str().to_string(),
                        fad,
                        n_speech: speech.len(),
                        n_music: music.len(),
                        error,
                    }
                })
                .collect()
        })
        .collect();
    Ok(cells.into_iter().flatten().collect())
}
