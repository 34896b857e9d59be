//! Experiment configuration and the runners behind each CLI subcommand.
//! Runners write their artifacts under the output directory and return the
//! rows they wrote plus any per-model failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{adaptation_grid, AdaptGridConfig, AdaptRow};
use crate::dataset::ModelCorpus;
use crate::error::{Error, Result};
use crate::fad::{fad_sweep, FadOptions, FadResult};
use crate::labels::Task;
use crate::optim::TrainConfig;
use crate::probe::{layerwise_probe_sweep, SweepRow};
use crate::report::{
    adapt_csv, fad_chart, fad_csv, probe_chart, probe_csv, render_svg, summarize_sweep, summary_csv, to_json,
    write_text, ProbeSummary,
};
use crate::store::{
    generate_synthetic_manifest, lint_embedding_file, read_embedding_file, write_embedding_file, LintReport,
    SyntheticConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub tasks: Vec<Task>,
    pub train: TrainConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Ser, Task::Mer],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Model tag → embedding file. Relative paths resolve against the
    /// config file's directory.
    pub embedding_paths: BTreeMap<String, PathBuf>,
    pub split_seed: u64,
    pub probe: ProbeSettings,
    pub adapt: AdaptGridConfig,
    pub fad: FadOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            embedding_paths: BTreeMap::new(),
            split_seed: 0,
            probe: ProbeSettings::default(),
            adapt: AdaptGridConfig::default(),
            fad: FadOptions::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.embedding_paths.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// One seed for the split and every training run.
    pub fn set_seed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.probe.train.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.probe.train.epochs = epochs;
        self.adapt.epochs = epochs;
    }

    /// Keeps only `models`, which must all be configured.
    pub fn select_models(&mut self, models: &[String]) -> Result<()> {
        if models.is_empty() {
            return Err(Error::Config("model list is empty".into()));
        }
        let mut kept = BTreeMap::new();
        for m in models {
            let path = self
                .embedding_paths
                .get(m)
                .ok_or_else(|| Error::Config(format!("model '{m}' has no embedding path")))?;
            kept.insert(m.clone(), path.clone());
        }
        self.embedding_paths = kept;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_paths.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        if self.probe.tasks.is_empty() {
            return Err(Error::Config("probe task list is empty".into()));
        }
        self.probe.train.validate()
    }
}

/// A model that could not be processed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelFailure {
    pub model_tag: String,
    pub error: String,
}

fn failure(model_tag: &str, e: &Error) -> ModelFailure {
    log::error!("{model_tag}: {e}");
    ModelFailure {
        model_tag: model_tag.to_string(),
        error: e.to_string(),
    }
}

/// Reads every configured file. Records take the tag they are configured
/// under.
fn load_corpora(cfg: &ExperimentConfig) -> (Vec<ModelCorpus>, Vec<ModelFailure>) {
    let mut corpora = Vec::new();
    let mut failures = Vec::new();
    for (tag, path) in &cfg.embedding_paths {
        let loaded = read_embedding_file(path).and_then(|mut records| {
            for r in &mut records {
                r.model_tag.clone_from(tag);
            }
            ModelCorpus::new(tag.clone(), records, cfg.split_seed)
        });
        match loaded {
            Ok(c) => {
                for w in &c.manifest.warnings {
                    log::warn!("{tag}: {w}");
                }
                corpora.push(c);
            }
            Err(e) => failures.push(failure(tag, &e)),
        }
    }
    (corpora, failures)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<ProbeSummary>,
    pub failures: Vec<ModelFailure>,
}

/// Layerwise probes for every model and task. Writes `probe/layers.csv`,
/// `probe/layers.json`, `probe/summary.csv` and one chart per task.
pub fn run_probe(cfg: &ExperimentConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let (corpora, mut failures) = load_corpora(cfg);
    let mut rows = Vec::new();
    for corpus in &corpora {
        for &task in &cfg.probe.tasks {
            match layerwise_probe_sweep(
                &corpus.records,
                &corpus.manifest,
                &corpus.model_tag,
                task,
                &cfg.probe.train,
            ) {
                Ok(r) => rows.extend(r),
                Err(e) => failures.push(failure(&format!("{} {task}", corpus.model_tag), &e)),
            }
        }
    }
    let summaries = summarize_sweep(&rows);
    let dir = cfg.output_dir.join("probe");
    write_text(&dir.join("layers.csv"), &probe_csv(&rows)?)?;
    write_text(&dir.join("layers.json"), &to_json(&rows)?)?;
    write_text(&dir.join("summary.csv"), &summary_csv(&summaries)?)?;
    for &task in &cfg.probe.tasks {
        let name = format!("{}.svg", task.to_string().to_lowercase());
        write_text(&dir.join(name), &render_svg(&probe_chart(&rows, task)))?;
    }
    Ok(ProbeOutcome {
        rows,
        summaries,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub rows: Vec<AdaptRow>,
    pub failures: Vec<ModelFailure>,
}

/// The two-stage grid. Writes `adapt/grid.csv`, `adapt/grid.json` and one
/// checkpoint per cell under `adapt/checkpoints`.
pub fn run_adapt(cfg: &ExperimentConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let (corpora, failures) = load_corpora(cfg);
    let dir = cfg.output_dir.join("adapt");
    let rows = adaptation_grid(&corpora, &cfg.adapt, &dir.join("checkpoints"))?;
    write_text(&dir.join("grid.csv"), &adapt_csv(&rows)?)?;
    write_text(&dir.join("grid.json"), &to_json(&rows)?)?;
    Ok(AdaptOutcome { rows, failures })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FadOutcome {
    pub rows: Vec<FadResult>,
    pub failures: Vec<ModelFailure>,
}

/// Per-layer, per-emotion FAD over every record of each model. Writes
/// `fad/fad.csv`, `fad/fad.json` and one chart per model.
pub fn run_fad(cfg: &ExperimentConfig) -> Result<FadOutcome> {
    cfg.validate()?;
    let (corpora, mut failures) = load_corpora(cfg);
    let dir = cfg.output_dir.join("fad");
    let mut rows = Vec::new();
    for corpus in &corpora {
        match fad_sweep(&corpus.records, None, &corpus.model_tag, &cfg.fad) {
            Ok(r) => {
                write_text(
                    &dir.join(format!("{}.svg", corpus.model_tag)),
                    &render_svg(&fad_chart(&r, &corpus.model_tag)),
                )?;
                rows.extend(r);
            }
            Err(e) => failures.push(failure(&corpus.model_tag, &e)),
        }
    }
    write_text(&dir.join("fad.csv"), &fad_csv(&rows)?)?;
    write_text(&dir.join("fad.json"), &to_json(&rows)?)?;
    Ok(FadOutcome { rows, failures })
}

/// Paths written by [`run_synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
    pub record_count: usize,
}

/// Generates a fixture from a synthetic config file and writes
/// `<tag>.emb` and `<tag>.manifest.json` into `out_dir`.
pub fn run_synth(config_path: &Path, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let cfg: SyntheticConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    synth_to_dir(&cfg, seed, out_dir)
}

pub fn synth_to_dir(cfg: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    let (records, manifest) = generate_synthetic_manifest(cfg, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let embeddings = out_dir.join(format!("{}.emb", cfg.model_tag));
    let manifest_path = out_dir.join(format!("{}.manifest.json", cfg.model_tag));
    write_embedding_file(&records, &embeddings)?;
    manifest.save(&manifest_path)?;
    Ok(SynthOutput {
        embeddings,
        manifest: manifest_path,
        record_count: records.len(),
    })
}

pub fn validate(path: &Path) -> LintReport {
    lint_embedding_file(path)
}
