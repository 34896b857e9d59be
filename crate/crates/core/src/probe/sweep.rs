use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_probe};
use crate::dataset::split_features;
use crate::error::{Error, Result};
use crate::labels::Task;
use crate::optim::TrainConfig;
use crate::pooling::pool_record;
use crate::store::{DatasetManifest, EmbeddingRecord};

/// One independent probe on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_tag: String,
    pub task: Task,
    /// 1-based layer index.
    pub layer: usize,
    pub val_ua: f64,
    pub test_ua: f64,
    /// Test recall per emotion in canonical order.
    pub recall: Vec<Option<f64>>,
    pub epoch_of_best: Option<usize>,
}

/// Trains one probe per layer on time-pooled features of the task's domain
/// and reports validation and test UA for each.
pub fn layerwise_probe_sweep(
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    model_tag: &str,
    task: Task,
    config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let data = split_features(records, manifest, model_tag, task.domain(), pool_record)?;
    let num_layers = data.train.samples[0].nrows();
    if let Some(bad) = [&data.train, &data.val, &data.test]
        .iter()
        .flat_map(|s| &s.samples)
        .find(|m| m.nrows() != num_layers)
    {
        return Err(Error::dims("layer count", num_layers, bad.nrows()));
    }

    (0..num_layers)
        .into_par_iter()
        .map(|layer| {
            let layer_data = data.map(|pooled| pooled.row(layer).transpose());
            let (params, val) = train_probe(&layer_data.train, &layer_data.val, config)?;
            let test = evaluate(&params, &layer_data.test.to_matrix(), &layer_data.test.labels)?;
            Ok(SweepRow {
                model_tag: model_tag.to_string(),
                task,
                layer: layer + 1,
                val_ua: val.ua,
                test_ua: test.ua,
                recall: test.per_class_recall,
                epoch_of_best: val.epoch_of_best,
            })
        })
        .collect()
}
