use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layout_offsets, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::labels::{Domain, Emotion, Split};

/// Strata smaller than this still split, but the manifest carries a warning.
const SMALL_STRATUM: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub domain: Domain,
    pub emotion: Emotion,
    pub file_offset: u64,
}

impl ManifestRecord {
    /// Metadata for records in the order they would be written to disk.
    pub fn from_records(records: &[EmbeddingRecord]) -> Vec<Self> {
        records
            .iter()
            .zip(layout_offsets(records))
            .map(|(r, file_offset)| Self {
                utterance_id: r.utterance_id.clone(),
                domain: r.domain,
                emotion: r.emotion,
                file_offset,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub domain: Domain,
    pub emotion: Emotion,
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
    pub split: BTreeMap<String, Split>,
    pub counts: Vec<StratumCounts>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Per-stratum sizes: train = ⌊0.6n⌋, val = ⌊0.2n⌋, test takes the remainder.
pub(crate) fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

pub fn make_stratified_split(records: &[ManifestRecord], seed: u64) -> Result<DatasetManifest> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut strata: BTreeMap<(Domain, Emotion), Vec<&str>> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.utterance_id.as_str()) {
            return Err(Error::DuplicateKey(r.utterance_id.clone()));
        }
        strata.entry((r.domain, r.emotion)).or_default().push(&r.utterance_id);
    }

    let domains: Vec<Domain> = Domain::ALL
        .into_iter()
        .filter(|d| strata.keys().any(|(sd, _)| sd == d))
        .collect();
    for &domain in &domains {
        for emotion in Emotion::ALL {
            if !strata.contains_key(&(domain, emotion)) {
                return Err(Error::EmptyStratum {
                    domain: domain.to_string(),
                    emotion: emotion.to_string(),
                });
            }
        }
    }

    let mut split = BTreeMap::new();
    let mut counts = Vec::with_capacity(strata.len());
    let mut warnings = Vec::new();
    for ((domain, emotion), mut ids) in strata {
        // sort first so the assignment does not depend on input order
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((domain.code() as u64) << 8 | emotion.index() as u64);
        ids.shuffle(&mut rng);

        let n = ids.len();
        if n < SMALL_STRATUM {
            warnings.push(format!("stratum ({domain}, {emotion}) has only {n} records"));
        }
        let (train, val, test) = split_sizes(n);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            split.insert(id.to_string(), s);
        }
        counts.push(StratumCounts {
            domain,
            emotion,
            total: n,
            train,
            val,
            test,
        });
    }

    Ok(DatasetManifest {
        seed,
        records: records.to_vec(),
        split,
        counts,
        warnings,
    })
}

impl DatasetManifest {
    pub fn split_of(&self, utterance_id: &str) -> Option<Split> {
        self.split.get(utterance_id).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
