//! Cached per-layer embeddings: the record type, the binary file format,
//! stratified splits and synthetic fixtures.

mod format;
mod split;
mod synth;

pub use format::{
    layout_offsets, lint_embedding_file, read_embedding_file, write_embedding_file, EmbeddingFileHeader,
    EmbeddingReader, LintReport, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use split::{make_stratified_split, DatasetManifest, ManifestRecord, StratumCounts};
pub use synth::{generate_synthetic_manifest, DomainClassSpec, SyntheticConfig};

use crate::error::{Error, Result};
use crate::labels::{Domain, Emotion};

/// One utterance's hidden states: `num_layers × num_frames × dim`, stored
/// layer-major in a flat f32 buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub domain: Domain,
    pub emotion: Emotion,
    pub model_tag: String,
    num_layers: usize,
    num_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(
        utterance_id: impl Into<String>,
        domain: Domain,
        emotion: Emotion,
        model_tag: impl Into<String>,
        shape: (usize, usize, usize),
        data: Vec<f32>,
    ) -> Result<Self> {
        let (num_layers, num_frames, dim) = shape;
        let utterance_id = utterance_id.into();
        if num_layers == 0 || num_frames == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "record '{utterance_id}' has an empty axis: L={num_layers}, T={num_frames}, D={dim}"
            )));
        }
        let expected = num_layers * num_frames * dim;
        if data.len() != expected {
            return Err(Error::dims(
                format!("payload of record '{utterance_id}'"),
                expected,
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record '{utterance_id}' has a non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            utterance_id,
            domain,
            emotion,
            model_tag: model_tag.into(),
            num_layers,
            num_frames,
            dim,
            data,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major `T × D` slice for one layer.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let stride = self.num_frames * self.dim;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    /// Frames of one layer as an f64 `T × D` matrix.
    pub fn layer_matrix(&self, layer: usize) -> nalgebra::DMatrix<f64> {
        let slice = self.layer(layer);
        nalgebra::DMatrix::from_row_iterator(self.num_frames, self.dim, slice.iter().map(|&v| f64::from(v)))
    }
}
