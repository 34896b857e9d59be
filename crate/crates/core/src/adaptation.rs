//! Two-stage cross-domain fine-tuning: train on the source task, keep the
//! best-validation snapshot, then continue training the same parameters on
//! the target task.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{peft_assemble, AdapterConfig, AdapterParams, EncoderWeights, MiniEncoderConfig, PeftPipeline};
use crate::dataset::{split_features, ModelCorpus, SplitData};
use crate::error::{Error, Result};
use crate::labels::Task;
use crate::optim::TrainConfig;
use crate::pooling::{aggregate_backward, aggregate_layers, pool_record, AggregatorParams};
use crate::probe::{evaluate_model, fit, probe_backward, MetricsReport, ProbeParams, Trainable};
use crate::tensor::NamedTensor;

pub const DEFAULT_STAGE_EPOCHS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    /// Linear probe on the mean of all layers; only the probe trains.
    Baseline,
    /// Probe on a learned weighted sum of layers.
    Ws,
    /// Adapters in a frozen encoder, weighting gate and probe.
    Peft,
}

impl Approach {
    pub const ALL: [Approach; 3] = [Approach::Baseline, Approach::Ws, Approach::Peft];

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Approach::Peft => 1e-4,
            _ => 1e-3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Baseline => "baseline",
            Approach::Ws => "ws",
            Approach::Peft => "peft",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown approach '{s}'")))
    }
}

/// Shape of the frozen encoder the PEFT approach adapts. The encoder reads
/// the frames of one stored layer and has its own depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftSettings {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Defaults to twice the embedding dim.
    pub ffn_dim: Option<usize>,
    pub positional: bool,
    pub init_std: f64,
    pub encoder_seed: u64,
    /// 0-based stored layer whose frames feed the encoder.
    pub input_layer: usize,
    pub adapter: AdapterConfig,
}

impl Default for PeftSettings {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 1,
            ffn_dim: None,
            positional: false,
            init_std: 0.02,
            encoder_seed: 0,
            input_layer: 0,
            adapter: AdapterConfig::default(),
        }
    }
}

impl PeftSettings {
    pub fn encoder_config(&self, dim: usize) -> MiniEncoderConfig {
        let mut cfg = MiniEncoderConfig::new(
            self.num_layers,
            dim,
            self.num_heads,
            self.ffn_dim.unwrap_or(2 * dim),
            self.encoder_seed,
        );
        cfg.positional = self.positional;
        cfg.init_std = self.init_std;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub approach: Approach,
    pub source_task: Task,
    pub target_task: Task,
    pub stage_configs: [TrainConfig; 2],
    pub checkpoint_path: PathBuf,
    pub peft: PeftSettings,
}

impl StagePlan {
    /// Defaults: 300 epochs per stage at the approach's learning rate.
    pub fn new(approach: Approach, source_task: Task, target_task: Task, checkpoint_path: impl Into<PathBuf>) -> Self {
        let cfg = TrainConfig::default()
            .with_learning_rate(approach.default_learning_rate())
            .with_epochs(DEFAULT_STAGE_EPOCHS);
        Self {
            approach,
            source_task,
            target_task,
            stage_configs: [cfg.clone(), cfg],
            checkpoint_path: checkpoint_path.into(),
            peft: PeftSettings::default(),
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        for c in &mut self.stage_configs {
            c.epochs = epochs;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        for c in &mut self.stage_configs {
            c.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_task == self.target_task {
            return Err(Error::Config(format!(
                "source and target task are both {}",
                self.source_task
            )));
        }
        for c in &self.stage_configs {
            c.validate()?;
        }
        Ok(())
    }
}

/// Trainable scalars per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub adapters: usize,
    pub aggregator: usize,
    pub probe: usize,
}

impl ParameterCensus {
    pub fn total(&self) -> usize {
        self.adapters + self.aggregator + self.probe
    }
}

/// Layer aggregation followed by a probe, over time-pooled `L × D` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledClassifier {
    pub aggregator: AggregatorParams,
    pub probe: ProbeParams,
}

impl PooledClassifier {
    fn aggregated(&self, samples: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let rows: Vec<DVector<f64>> = samples
            .iter()
            .map(|p| aggregate_layers(p, &self.aggregator))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(rows.len(), self.probe.dim(), |i, j| rows[i][j]))
    }
}

impl Trainable for PooledClassifier {
    type Sample = DMatrix<f64>;

    fn num_trainable(&self) -> usize {
        self.aggregator.num_trainable() + self.probe.num_trainable()
    }

    fn trainable(&self) -> Vec<f64> {
        let mut out = self.aggregator.trainable();
        out.extend(self.probe.trainable());
        out
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let n = Trainable::num_trainable(self);
        if flat.len() != n {
            return Err(Error::dims("classifier parameters", n, flat.len()));
        }
        let (agg, probe) = flat.split_at(self.aggregator.num_trainable());
        self.aggregator.set_trainable(agg)?;
        self.probe.set_trainable(probe)
    }

    fn loss_and_grad(&self, samples: &[&DMatrix<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let x = self.aggregated(samples)?;
        let (loss, g) = probe_backward(&self.probe, &x, labels)?;
        let mut flat = vec![0.0; self.aggregator.num_trainable()];
        if !flat.is_empty() {
            for (i, pooled) in samples.iter().enumerate() {
                let up = g.input.row(i).transpose();
                let ag = aggregate_backward(pooled, &self.aggregator, &up)?;
                for (a, b) in flat.iter_mut().zip(ag.ws_logits.iter().chain(&ag.gate_logits)) {
                    *a += b;
                }
            }
        }
        for row in g.weight.row_iter() {
            flat.extend(row.iter());
        }
        flat.extend(g.bias.iter());
        Ok((loss, flat))
    }

    fn predict(&self, samples: &[DMatrix<f64>]) -> Result<Vec<usize>> {
        let refs: Vec<&DMatrix<f64>> = samples.iter().collect();
        let x = self.aggregated(&refs)?;
        let rows: Vec<DVector<f64>> = x.row_iter().map(|r| r.transpose()).collect();
        Trainable::predict(&self.probe, &rows)
    }
}

/// The trainable model behind one approach.
#[derive(Debug, Clone)]
pub enum AdaptModel {
    Pooled(PooledClassifier),
    Peft(PeftPipeline),
}

impl AdaptModel {
    /// Fresh model for `approach` over records with `num_layers` layers of
    /// width `dim`.
    pub fn build(approach: Approach, num_layers: usize, dim: usize, peft: &PeftSettings) -> Result<Self> {
        let pooled = |aggregator| {
            AdaptModel::Pooled(PooledClassifier {
                aggregator,
                probe: ProbeParams::zeros(dim),
            })
        };
        Ok(match approach {
            Approach::Baseline => pooled(AggregatorParams::layer_mean(num_layers)),
            Approach::Ws => pooled(AggregatorParams::weighted_sum(num_layers)),
            Approach::Peft => {
                if peft.input_layer >= num_layers {
                    return Err(Error::Config(format!(
                        "input layer {} outside the {num_layers} stored layers",
                        peft.input_layer
                    )));
                }
                let cfg = peft.encoder_config(dim);
                let encoder = Arc::new(EncoderWeights::init(&cfg)?);
                let adapters = AdapterParams::init(&cfg, &peft.adapter)?;
                AdaptModel::Peft(peft_assemble(
                    encoder,
                    adapters,
                    AggregatorParams::weighting_gate(cfg.num_layers),
                    ProbeParams::zeros(dim),
                )?)
            }
        })
    }

    pub fn census(&self) -> ParameterCensus {
        match self {
            AdaptModel::Pooled(m) => ParameterCensus {
                adapters: 0,
                aggregator: m.aggregator.num_trainable(),
                probe: m.probe.num_trainable(),
            },
            AdaptModel::Peft(p) => ParameterCensus {
                adapters: p.adapters.num_trainable(),
                aggregator: p.aggregator.num_trainable(),
                probe: p.probe.num_trainable(),
            },
        }
    }

    /// Trainable tensors in `trainable()` order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        match self {
            AdaptModel::Pooled(m) => {
                let mut out = Vec::new();
                if !m.aggregator.ws_logits.is_empty() {
                    out.push(NamedTensor::from_slice("aggregator.ws_logits", &m.aggregator.ws_logits));
                }
                if !m.aggregator.gate_logits.is_empty() {
                    out.push(NamedTensor::from_slice(
                        "aggregator.gate_logits",
                        &m.aggregator.gate_logits,
                    ));
                }
                out.push(NamedTensor::from_matrix("probe.weight", &m.probe.weight));
                out.push(NamedTensor::from_vector("probe.bias", &m.probe.bias));
                out
            }
            AdaptModel::Peft(p) => p.named_tensors(),
        }
    }

    /// Overwrites the trainable tensors; names and shapes must match.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let expected = self.named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut flat = Vec::with_capacity(Trainable::num_trainable(self));
        for (t, e) in tensors.iter().zip(&expected) {
            if t.name != e.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor '{}', found '{}'",
                    e.name, t.name
                )));
            }
            t.expect_shape(&e.shape)?;
            flat.extend(&t.data);
        }
        self.set_trainable(&flat)
    }

    pub fn encoder_checksum(&self) -> Option<String> {
        match self {
            AdaptModel::Peft(p) => Some(p.encoder().checksum()),
            AdaptModel::Pooled(_) => None,
        }
    }
}

impl Trainable for AdaptModel {
    type Sample = DMatrix<f64>;

    fn num_trainable(&self) -> usize {
        match self {
            AdaptModel::Pooled(m) => Trainable::num_trainable(m),
            AdaptModel::Peft(p) => Trainable::num_trainable(p),
        }
    }

    fn trainable(&self) -> Vec<f64> {
        match self {
            AdaptModel::Pooled(m) => Trainable::trainable(m),
            AdaptModel::Peft(p) => Trainable::trainable(p),
        }
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            AdaptModel::Pooled(m) => Trainable::set_trainable(m, flat),
            AdaptModel::Peft(p) => Trainable::set_trainable(p, flat),
        }
    }

    fn loss_and_grad(&self, samples: &[&DMatrix<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        match self {
            AdaptModel::Pooled(m) => m.loss_and_grad(samples, labels),
            AdaptModel::Peft(p) => p.loss_and_grad(samples, labels),
        }
    }

    fn predict(&self, samples: &[DMatrix<f64>]) -> Result<Vec<usize>> {
        match self {
            AdaptModel::Pooled(m) => m.predict(samples),
            AdaptModel::Peft(p) => p.predict(samples),
        }
    }
}

/// Hash of everything that fixes the trainable tensors' meaning.
pub fn config_hash(approach: Approach, num_layers: usize, dim: usize, peft: &PeftSettings) -> String {
    let body = match approach {
        Approach::Peft => serde_json::json!({
            "approach": approach,
            "num_layers": num_layers,
            "model_dim": dim,
            "peft": peft,
        }),
        _ => serde_json::json!({
            "approach": approach,
            "num_layers": num_layers,
            "model_dim": dim,
        }),
    };
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Best-validation snapshot of a stage-one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub approach: Approach,
    pub model_tag: String,
    pub source_task: Task,
    pub config_hash: String,
    pub num_layers: usize,
    pub model_dim: usize,
    /// Frozen backbone checksum, PEFT only.
    pub encoder_checksum: Option<String>,
    pub epoch_of_best: Option<usize>,
    pub val_ua: f64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the snapshot for `plan` on data with the given dims.
    pub fn restore(&self, plan: &StagePlan, num_layers: usize, dim: usize) -> Result<AdaptModel> {
        if self.approach != plan.approach {
            return Err(Error::Checkpoint(format!(
                "checkpoint is for {}, plan is {}",
                self.approach, plan.approach
            )));
        }
        if self.model_dim != dim || self.num_layers != num_layers {
            return Err(Error::Checkpoint(format!(
                "checkpoint shape {}×{} does not match data {num_layers}×{dim} (layers×dim)",
                self.num_layers, self.model_dim
            )));
        }
        if self.config_hash != config_hash(plan.approach, num_layers, dim, &plan.peft) {
            return Err(Error::Checkpoint("config hash does not match the plan".into()));
        }
        let mut model = AdaptModel::build(plan.approach, num_layers, dim, &plan.peft)?;
        if model.encoder_checksum() != self.encoder_checksum {
            return Err(Error::Checkpoint("frozen encoder checksum differs".into()));
        }
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }
}

fn task_data(plan: &StagePlan, corpus: &ModelCorpus, task: Task) -> Result<SplitData<DMatrix<f64>>> {
    let tag = &corpus.model_tag;
    match plan.approach {
        Approach::Peft => {
            let layer = plan.peft.input_layer;
            split_features(&corpus.records, &corpus.manifest, tag, task.domain(), |r| {
                // layer bounds are checked when the model is built
                r.layer_matrix(layer.min(r.num_layers() - 1))
            })
        }
        _ => split_features(&corpus.records, &corpus.manifest, tag, task.domain(), pool_record),
    }
}

/// Trains a model on `task` starting from `model`, returning the best
/// snapshot, its validation report and its test report.
fn train_on(
    model: AdaptModel,
    data: &SplitData<DMatrix<f64>>,
    config: &TrainConfig,
) -> Result<(AdaptModel, MetricsReport, MetricsReport)> {
    let out = fit(model, &data.train, &data.val, config)?;
    let mut test = evaluate_model(&out.best, &data.test)?;
    test.epoch_of_best = out.best_val.epoch_of_best;
    Ok((out.best, out.best_val, test))
}

/// Stage one: train on the source task, write the best-validation snapshot
/// to the plan's checkpoint path, report source test metrics.
pub fn run_stage_one(plan: &StagePlan, corpus: &ModelCorpus) -> Result<(Checkpoint, MetricsReport)> {
    plan.validate()?;
    let (num_layers, dim) = corpus.dims()?;
    let model = AdaptModel::build(plan.approach, num_layers, dim, &plan.peft)?;
    let data = task_data(plan, corpus, plan.source_task)?;
    let (best, val, test) = train_on(model, &data, &plan.stage_configs[0])?;
    let checkpoint = Checkpoint {
        approach: plan.approach,
        model_tag: corpus.model_tag.clone(),
        source_task: plan.source_task,
        config_hash: config_hash(plan.approach, num_layers, dim, &plan.peft),
        num_layers,
        model_dim: dim,
        encoder_checksum: best.encoder_checksum(),
        epoch_of_best: val.epoch_of_best,
        val_ua: val.ua,
        tensors: best.named_tensors(),
    };
    checkpoint.save(&plan.checkpoint_path)?;
    Ok((checkpoint, test))
}

/// Stage two: continue from the checkpoint on the target task with a fresh
/// optimizer and the same trainable set; report target test metrics.
pub fn run_stage_two(plan: &StagePlan, checkpoint: &Checkpoint, corpus: &ModelCorpus) -> Result<MetricsReport> {
    plan.validate()?;
    let (num_layers, dim) = corpus.dims()?;
    let model = checkpoint.restore(plan, num_layers, dim)?;
    let data = task_data(plan, corpus, plan.target_task)?;
    Ok(train_on(model, &data, &plan.stage_configs[1])?.2)
}

/// Target-only training from a fresh model with the stage-two schedule.
pub fn run_scratch(plan: &StagePlan, corpus: &ModelCorpus) -> Result<MetricsReport> {
    plan.validate()?;
    let (num_layers, dim) = corpus.dims()?;
    let model = AdaptModel::build(plan.approach, num_layers, dim, &plan.peft)?;
    let data = task_data(plan, corpus, plan.target_task)?;
    Ok(train_on(model, &data, &plan.stage_configs[1])?.2)
}

/// Validation UA of a checkpoint re-evaluated on its source task.
pub fn checkpoint_val_ua(plan: &StagePlan, checkpoint: &Checkpoint, corpus: &ModelCorpus) -> Result<f64> {
    let (num_layers, dim) = corpus.dims()?;
    let model = checkpoint.restore(plan, num_layers, dim)?;
    let data = task_data(plan, corpus, checkpoint.source_task)?;
    Ok(evaluate_model(&model, &data.val)?.ua)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Direction {
    pub source: Task,
    pub target: Task,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [
        Direction {
            source: Task::Ser,
            target: Task::Mer,
        },
        Direction {
            source: Task::Mer,
            target: Task::Ser,
        },
    ];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptGridConfig {
    pub approaches: Vec<Approach>,
    pub directions: Vec<Direction>,
    pub epochs: usize,
    /// Overrides every approach's default learning rate.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Training seed shared by every cell.
    pub seed: u64,
    /// Also train a target-only model per cell.
    pub scratch: bool,
    pub peft: PeftSettings,
}

impl Default for AdaptGridConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            approaches: Approach::ALL.to_vec(),
            directions: Direction::BOTH.to_vec(),
            epochs: DEFAULT_STAGE_EPOCHS,
            learning_rate: None,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            seed: 0,
            scratch: false,
            peft: PeftSettings::default(),
        }
    }
}

impl AdaptGridConfig {
    pub fn plan(&self, approach: Approach, direction: Direction, checkpoint_path: PathBuf) -> StagePlan {
        let mut plan = StagePlan::new(approach, direction.source, direction.target, checkpoint_path)
            .with_epochs(self.epochs)
            .with_seed(self.seed);
        for c in &mut plan.stage_configs {
            if let Some(lr) = self.learning_rate {
                c.learning_rate = lr;
            }
            c.batch_size = self.batch_size;
            c.weight_decay = self.weight_decay;
        }
        plan.peft = self.peft.clone();
        plan
    }
}

/// One (model, approach, direction) cell of the adaptation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub model_tag: String,
    pub approach: Approach,
    pub source_task: Task,
    pub target_task: Task,
    pub seed: u64,
    pub trainable_params: Option<usize>,
    /// Source test UA after stage one.
    pub stage_one_ua: Option<f64>,
    /// Target test UA after stage two.
    pub stage_two_ua: Option<f64>,
    pub scratch_target_ua: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(corpus: &ModelCorpus, plan: &StagePlan, scratch: bool, row: &mut AdaptRow) -> Result<()> {
    let (num_layers, dim) = corpus.dims()?;
    let census = AdaptModel::build(plan.approach, num_layers, dim, &plan.peft)?.census();
    row.trainable_params = Some(census.total());
    let (checkpoint, source) = run_stage_one(plan, corpus)?;
    row.stage_one_ua = Some(source.ua);
    row.stage_two_ua = Some(run_stage_two(plan, &checkpoint, corpus)?.ua);
    if scratch {
        row.scratch_target_ua = Some(run_scratch(plan, corpus)?.ua);
    }
    Ok(())
}

/// Runs every (model, approach, direction) cell in parallel. A failing cell
/// keeps the values it reached and records its error; the grid continues.
/// Checkpoints go to `checkpoint_dir`, one file per cell.
pub fn adaptation_grid(
    corpora: &[ModelCorpus],
    config: &AdaptGridConfig,
    checkpoint_dir: &Path,
) -> Result<Vec<AdaptRow>> {
    if config.approaches.is_empty() || config.directions.is_empty() {
        return Err(Error::Config(
            "adaptation grid needs at least one approach and direction".into(),
        ));
    }
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    let cells: Vec<(&ModelCorpus, Approach, Direction)> = corpora
        .iter()
        .flat_map(|c| {
            config
                .approaches
                .iter()
                .flat_map(move |&a| config.directions.iter().map(move |&d| (c, a, d)))
        })
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(corpus, approach, direction)| {
            let file = format!(
                "{}-{}-{}-to-{}.ckpt.json",
                corpus.model_tag,
                approach,
                direction.source.to_string().to_lowercase(),
                direction.target.to_string().to_lowercase()
            );
            let plan = config.plan(approach, direction, checkpoint_dir.join(file));
            let mut row = AdaptRow {
                model_tag: corpus.model_tag.clone(),
                approach,
                source_task: direction.source,
                target_task: direction.target,
                seed: config.seed,
                trainable_params: None,
                stage_one_ua: None,
                stage_two_ua: None,
                scratch_target_ua: None,
                error: None,
            };
            if let Err(e) = run_cell(corpus, &plan, config.scratch, &mut row) {
                log::warn!("adaptation cell {} {approach} {direction}: {e}", corpus.model_tag);
                row.error = Some(e.to_string());
            }
            row
        })
        .collect())
}
