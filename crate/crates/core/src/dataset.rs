//! Assembles labelled train/val/test sets from records and a manifest.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::{Domain, Split};
use crate::probe::LabeledSet;
use crate::store::{make_stratified_split, DatasetManifest, EmbeddingRecord, ManifestRecord};

#[derive(Debug, Clone)]
pub struct SplitData<S> {
    pub train: LabeledSet<S>,
    pub val: LabeledSet<S>,
    pub test: LabeledSet<S>,
}

impl<S> SplitData<S> {
    pub fn map<T, F>(&self, f: F) -> SplitData<T>
    where
        F: Fn(&S) -> T,
    {
        let conv = |set: &LabeledSet<S>| LabeledSet {
            samples: set.samples.iter().map(&f).collect(),
            labels: set.labels.clone(),
        };
        SplitData {
            train: conv(&self.train),
            val: conv(&self.val),
            test: conv(&self.test),
        }
    }
}

/// Records of `model_tag` and `domain` that the manifest assigns to a split,
/// each converted by `featurize`, in input order.
pub fn split_features<S, F>(
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    model_tag: &str,
    domain: Domain,
    featurize: F,
) -> Result<SplitData<S>>
where
    S: Send,
    F: Fn(&EmbeddingRecord) -> S + Sync,
{
    let chosen: Vec<(&EmbeddingRecord, Split)> = records
        .iter()
        .filter(|r| r.model_tag == model_tag && r.domain == domain)
        .filter_map(|r| manifest.split_of(&r.utterance_id).map(|s| (r, s)))
        .collect();
    let features: Vec<S> = chosen.par_iter().map(|(r, _)| featurize(r)).collect();

    let mut out = SplitData {
        train: LabeledSet::new(vec![], vec![])?,
        val: LabeledSet::new(vec![], vec![])?,
        test: LabeledSet::new(vec![], vec![])?,
    };
    for ((r, split), f) in chosen.into_iter().zip(features) {
        let set = match split {
            Split::Train => &mut out.train,
            Split::Val => &mut out.val,
            Split::Test => &mut out.test,
        };
        set.samples.push(f);
        set.labels.push(r.emotion.index());
    }
    for (name, set) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        if set.is_empty() {
            return Err(Error::EmptyInput(format!(
                "no {domain} records of model '{model_tag}' in the {name} split"
            )));
        }
    }
    Ok(out)
}

/// All records of one model together with the split assignment built for them.
#[derive(Debug, Clone)]
pub struct ModelCorpus {
    pub model_tag: String,
    pub records: Vec<EmbeddingRecord>,
    pub manifest: DatasetManifest,
}

impl ModelCorpus {
    /// Splits the records tagged `model_tag` with `split_seed`; records of
    /// other tags are kept but never selected.
    pub fn new(model_tag: impl Into<String>, records: Vec<EmbeddingRecord>, split_seed: u64) -> Result<Self> {
        let model_tag = model_tag.into();
        let entries: Vec<ManifestRecord> = ManifestRecord::from_records(&records)
            .into_iter()
            .zip(&records)
            .filter(|(_, r)| r.model_tag == model_tag)
            .map(|(m, _)| m)
            .collect();
        let manifest = make_stratified_split(&entries, split_seed)?;
        Ok(Self {
            model_tag,
            records,
            manifest,
        })
    }

    /// `(num_layers, dim)` of this model's records.
    pub fn dims(&self) -> Result<(usize, usize)> {
        self.records
            .iter()
            .find(|r| r.model_tag == self.model_tag)
            .map(|r| (r.num_layers(), r.dim()))
            .ok_or_else(|| Error::EmptyInput(format!("no records of model '{}'", self.model_tag)))
    }
}
