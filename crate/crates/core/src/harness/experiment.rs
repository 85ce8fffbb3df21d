use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::commpass::{derive_seed, estimate_weight_matrix, BaseModelConfig, TaskSplits, Trainer, TrainerConfig, WeightMatrix};
use crate::datakit::{gen_synthetic_task, split, DatasetManifest, Split, TaskDataset, Vocab};
use crate::readops::{evaluate, EncoderSpec, Model, ModelSpec, ReadOpKind, TaskHeadSpec};
use crate::registry::Registry;
use crate::writeops::{register_discriminator, Constraints};

use super::config::{EvalSetting, ExperimentConfig, ModelKind, WeightSource};
use super::HarnessError;

const SPLIT_STREAM: u64 = 7;
const INIT_STREAM: u64 = 11;
const DISC_STREAM: u64 = 12;
const ADAPT_STREAM: u64 = 13;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train_tasks: Vec<TaskSplits>,
    pub held_out: Vec<TaskSplits>,
    pub vocab: Option<Arc<Vocab>>,
}

impl LoadedData {
    pub fn is_text(&self) -> bool {
        self.vocab.is_some()
    }
}

fn split_all(sets: Vec<TaskDataset>, config: &ExperimentConfig) -> Result<Vec<TaskSplits>, HarnessError> {
    sets.into_iter()
        .map(|d| {
            let (train, dev, test) = split(&d, config.data.split, derive_seed(config.seed, SPLIT_STREAM))?;
            Ok(TaskSplits { train, dev, test })
        })
        .collect()
}

/// Training and held-out tasks, each split into train/dev/test.
pub fn load_data(config: &ExperimentConfig) -> Result<LoadedData, HarnessError> {
    let d = &config.data;
    if let Some(spec) = &d.synthetic {
        let gen = |range: std::ops::Range<usize>| -> Result<Vec<TaskDataset>, HarnessError> {
            range.map(|i| Ok(gen_synthetic_task(spec, i)?)).collect()
        };
        return Ok(LoadedData {
            train_tasks: split_all(gen(0..spec.num_tasks)?, config)?,
            held_out: split_all(gen(spec.num_tasks..spec.num_tasks + d.held_out_tasks)?, config)?,
            vocab: None,
        });
    }
    let path = config.resolve(d.manifest.as_ref().expect("validated data source"));
    let manifest = DatasetManifest::read(&path)?;
    let manifest = DatasetManifest { min_count: d.min_count.max(manifest.min_count), ..manifest };
    for id in &d.held_out_ids {
        if !manifest.tasks.iter().any(|t| &t.id == id) {
            return Err(HarnessError::Config(format!("data.held_out_ids: `{id}` is not in the manifest")));
        }
    }
    let sets = manifest.load(path.parent().unwrap_or(Path::new(".")))?;
    let vocab = sets.iter().find_map(|s| s.vocab.clone());
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (t, s) in manifest.tasks.iter().zip(sets) {
        let counts = t.counts.or(d.split);
        let (a, b, c) = split(&s, counts, derive_seed(config.seed, SPLIT_STREAM))?;
        let splits = TaskSplits { train: a, dev: b, test: c };
        if d.held_out_ids.contains(&t.id) {
            held.push(splits);
        } else {
            train.push(splits);
        }
    }
    if train.is_empty() {
        return Err(HarnessError::Config("data: no training tasks left after held_out_ids".into()));
    }
    if config.model.comm_mode().is_some() && train.len() < 2 {
        return Err(HarnessError::Config(format!("model: {} needs at least 2 training tasks", config.model.name())));
    }
    if train.iter().chain(&held).any(|t| t.train.is_text() != vocab.is_some()) {
        return Err(HarnessError::Config("data: mixing text and dense tasks is not supported".into()));
    }
    Ok(LoadedData { train_tasks: train, held_out: held, vocab })
}

/// Encoder layout for the configured architecture and the data's input kind.
pub fn model_spec(config: &ExperimentConfig, data: &LoadedData, read_op: ReadOpKind) -> ModelSpec {
    let a = &config.architecture;
    let encoder = |widths: &[usize]| match &data.vocab {
        Some(v) => EncoderSpec::bag_of_words(v.len(), a.embed_dim, widths, a.activation),
        None => {
            let dim = match &data.train_tasks[0].train.samples[0].input {
                crate::datakit::Input::Dense(x) => x.len(),
                crate::datakit::Input::Tokens(_) => unreachable!("dense data"),
            };
            EncoderSpec::mlp(dim, widths, a.activation)
        }
    };
    ModelSpec { read_op, shared: encoder(&a.shared_widths), private: (read_op != ReadOpKind::Flat).then(|| encoder(&a.private_widths)) }
}

fn heads(tasks: &[&TaskSplits]) -> Vec<TaskHeadSpec> {
    tasks.iter().map(|t| TaskHeadSpec { id: t.train.task_id.clone(), num_classes: t.train.num_classes }).collect()
}

/// Registry and layout for `tasks` under the configured model kind; frozen.
pub fn build_model(
    config: &ExperimentConfig,
    data: &LoadedData,
    tasks: &[&TaskSplits],
    seed: u64,
) -> Result<(Model, Registry), HarnessError> {
    let mut registry = Registry::new();
    let spec = model_spec(config, data, config.model.read_op());
    let model = Model::build(&mut registry, spec, &heads(tasks), derive_seed(seed, INIT_STREAM))?;
    if config.model.constraints(config.grl_lambda).adversarial {
        register_discriminator(&mut registry, model.spec.shared.out_dim(), tasks.len(), derive_seed(seed, DISC_STREAM))?;
    }
    registry.freeze();
    Ok((model, registry))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub epoch: usize,
    pub task: String,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// One JSON object per line.
pub fn metrics_jsonl(lines: &[MetricLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("metric line serializes"));
        out.push('\n');
    }
    out
}

/// Per-epoch flattened parameter groups: `shared` and one per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub groups: BTreeMap<String, Vec<Vec<f64>>>,
}

impl TrajectoryLog {
    fn record(&mut self, model: &Model, registry: &Registry) -> Result<(), HarnessError> {
        let flatten = |ids: Vec<String>| -> Result<Vec<f64>, HarnessError> {
            let mut v = Vec::new();
            for id in ids {
                v.extend_from_slice(registry.value(&id)?.data());
            }
            Ok(v)
        };
        let shared = flatten(model.shared_encoder_ids())?;
        self.groups.entry("shared".into()).or_default().push(shared);
        for t in model.task_ids() {
            let v = flatten(model.private_ids(&t))?;
            self.groups.entry(t).or_default().push(v);
        }
        Ok(())
    }

    /// One JSON object per (group, epoch).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (group, rows) in &self.groups {
            for (epoch, values) in rows.iter().enumerate() {
                let line = serde_json::json!({ "group": group, "epoch": epoch, "values": values });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        struct Row {
            group: String,
            epoch: usize,
            values: Vec<f64>,
        }
        let mut log = TrajectoryLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line).map_err(|e| HarnessError::Runtime(format!("trajectory line {}: {e}", i + 1)))?;
            let rows = log.groups.entry(row.group.clone()).or_default();
            if rows.len() != row.epoch {
                return Err(HarnessError::Runtime(format!("trajectory group `{}` is not in epoch order", row.group)));
            }
            if rows.first().is_some_and(|r| r.len() != row.values.len()) {
                return Err(HarnessError::Runtime(format!("trajectory group `{}` changes length", row.group)));
            }
            rows.push(row.values);
        }
        Ok(log)
    }
}

/// One trained model: a multi-task model, or one of the single-task models.
#[derive(Debug, Clone)]
pub struct TrainedUnit {
    pub name: String,
    pub model: Model,
    pub registry: Registry,
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub model: ModelKind,
    pub lines: Vec<MetricLine>,
    /// Epoch (1-based; 0 is the initialization) whose parameters were kept,
    /// per unit.
    pub best_epoch: BTreeMap<String, usize>,
    pub final_test: BTreeMap<String, f64>,
    pub weights: Option<WeightMatrix>,
    pub trajectory: Option<TrajectoryLog>,
    pub units: Vec<TrainedUnit>,
    pub adapt: Vec<AdaptPoint>,
    /// Not part of any deterministic output file.
    pub wall_clock_secs: f64,
}

impl MetricsRecord {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.final_test.values().sum::<f64>() / self.final_test.len() as f64
    }

    pub fn metrics_jsonl(&self) -> String {
        metrics_jsonl(&self.lines)
    }

    pub fn summary_json(&self) -> String {
        let adapt: Vec<_> =
            self.adapt.iter().map(|p| serde_json::json!({"task": p.task, "count": p.count, "accuracy": p.accuracy})).collect();
        let v = serde_json::json!({
            "model": self.model.name(),
            "best_epoch": self.best_epoch,
            "test_accuracy": self.final_test,
            "mean_test_accuracy": self.mean_test_accuracy(),
            "out_of_task": adapt,
        });
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
    }
}

fn train_unit(
    config: &ExperimentConfig,
    model: &Model,
    registry: &mut Registry,
    tasks: &[&TaskSplits],
    beta: Option<WeightMatrix>,
    seed: u64,
    trajectory: Option<&mut TrajectoryLog>,
) -> Result<(Vec<MetricLine>, usize), HarnessError> {
    let trainer_config = TrainerConfig {
        weights: config.loss_weights,
        constraints: config.model.constraints(config.grl_lambda),
        meta: config.model.comm_mode().map(|m| config.meta.with_mode(m)),
        beta,
        batch_size: config.batch_size,
        optimizer: config.optimizer,
    };
    let mut trainer = Trainer::new(model.clone(), trainer_config, seed)?;
    let train: Vec<TaskDataset> = tasks.iter().map(|t| t.train.clone()).collect();
    let mut lines = Vec::new();
    let mut trajectory = trajectory;
    if let Some(log) = trajectory.as_deref_mut() {
        log.record(model, registry)?;
    }
    let dev_mean = |registry: &Registry| -> Result<f64, HarnessError> {
        let mut s = 0.0;
        for t in tasks {
            s += evaluate(model, registry, &t.train.task_id, &t.dev)?.accuracy;
        }
        Ok(s / tasks.len() as f64)
    };
    let mut best = (dev_mean(registry)?, 0usize, registry.snapshot());
    for epoch in 1..=config.epochs {
        trainer.train_epoch(registry, &train)?;
        for t in tasks {
            for (split, data) in [(Split::Train, &t.train), (Split::Dev, &t.dev), (Split::Test, &t.test)] {
                let e = evaluate(model, registry, &t.train.task_id, data)?;
                lines.push(MetricLine { epoch, task: t.train.task_id.clone(), split, loss: e.loss, accuracy: e.accuracy });
            }
        }
        if let Some(log) = trajectory.as_deref_mut() {
            log.record(model, registry)?;
        }
        let dev = dev_mean(registry)?;
        if dev > best.0 {
            best = (dev, epoch, registry.snapshot());
        }
    }
    registry.restore(&best.2)?;
    Ok((lines, best.1))
}

fn base_config(config: &ExperimentConfig, data: &LoadedData, epochs: usize) -> BaseModelConfig {
    BaseModelConfig {
        spec: model_spec(config, data, ReadOpKind::Star),
        epochs,
        trainer: TrainerConfig {
            weights: config.loss_weights,
            constraints: Constraints::NONE,
            meta: None,
            beta: None,
            batch_size: config.batch_size,
            optimizer: config.optimizer,
        },
        seed: derive_seed(config.seed, 21),
    }
}

/// Accuracy of each task's base model on every task, when estimated.
pub type SourceAccuracies = Option<Vec<Vec<f64>>>;

/// Weight matrix for list-wise kinds and its source accuracies when
/// estimated.
pub fn run_weights(config: &ExperimentConfig, data: &LoadedData) -> Result<(WeightMatrix, SourceAccuracies), HarnessError> {
    let ids: Vec<String> = data.train_tasks.iter().map(|t| t.train.task_id.clone()).collect();
    match config.weights.clone().unwrap_or(WeightSource::Estimate { q_exp: 2.0, epochs: None }) {
        WeightSource::Uniform => Ok((WeightMatrix::uniform(&ids), None)),
        WeightSource::File(p) => {
            let text = fs::read_to_string(config.resolve(&p)).map_err(|e| HarnessError::Runtime(format!("{}: {e}", p.display())))?;
            let w = WeightMatrix::from_csv(&text)?;
            if w.tasks() != ids.as_slice() {
                return Err(HarnessError::Config(format!("weights.file: task ids {:?} differ from training tasks {ids:?}", w.tasks())));
            }
            Ok((w, None))
        }
        WeightSource::Estimate { q_exp, epochs } => {
            let (w, v) = estimate_weight_matrix(&data.train_tasks, &base_config(config, data, epochs.unwrap_or(config.epochs)), q_exp)?;
            Ok((w, Some(v)))
        }
    }
}

/// Trains the configured model, keeping the best-dev epoch, and evaluates
/// out-of-task adaptation when the evaluation setting asks for it.
pub fn run(config: &ExperimentConfig) -> Result<MetricsRecord, HarnessError> {
    let start = Instant::now();
    let data = load_data(config)?;
    let mut lines = Vec::new();
    let mut best_epoch = BTreeMap::new();
    let mut final_test = BTreeMap::new();
    let mut units = Vec::new();
    let mut trajectory = config.log_trajectory.then(TrajectoryLog::default);
    let weights = match config.model.comm_mode() {
        Some(crate::commpass::CommMode::Listwise) => Some(run_weights(config, &data)?.0),
        _ => None,
    };

    let groups: Vec<(String, Vec<&TaskSplits>)> = if config.model == ModelKind::SingleTask {
        data.train_tasks.iter().map(|t| (t.train.task_id.clone(), vec![t])).collect()
    } else {
        vec![(config.model.name().to_string(), data.train_tasks.iter().collect())]
    };
    for (name, tasks) in groups {
        let (model, mut registry) = build_model(config, &data, &tasks, config.seed)?;
        let log = if units.is_empty() { trajectory.as_mut() } else { None };
        let (l, best) = train_unit(config, &model, &mut registry, &tasks, weights.clone(), config.seed, log)?;
        lines.extend(l);
        best_epoch.insert(name.clone(), best);
        for t in &tasks {
            final_test.insert(t.train.task_id.clone(), evaluate(&model, &registry, &t.train.task_id, &t.test)?.accuracy);
        }
        units.push(TrainedUnit { name, model, registry });
    }

    let mut adapt = Vec::new();
    if config.evaluation.setting == EvalSetting::OutOfTask {
        if data.held_out.is_empty() {
            return Err(HarnessError::Config("evaluation.setting: out-of-task needs held-out tasks".into()));
        }
        let unit = &units[0];
        for task in &data.held_out {
            adapt.extend(out_of_task_adapt(config, &data, &unit.model, &unit.registry, task, &config.evaluation.counts, config.seed)?);
        }
    }
    Ok(MetricsRecord {
        model: config.model,
        lines,
        best_epoch,
        final_test,
        weights,
        trajectory,
        units,
        adapt,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn checkpoint_path(out_dir: &Path, unit: &str, single: bool) -> PathBuf {
    if single {
        out_dir.join(format!("checkpoint-{unit}.bin"))
    } else {
        out_dir.join("checkpoint.bin")
    }
}

/// Writes metrics, summary, checkpoints and optional artifacts. Wall-clock
/// time goes to `timing.json` only, so every other file is reproducible.
pub fn write_run(config: &ExperimentConfig, record: &MetricsRecord, out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.jsonl"), record.metrics_jsonl())?;
    fs::write(out_dir.join("summary.json"), record.summary_json())?;
    fs::write(out_dir.join("timing.json"), format!("{{\"wall_clock_secs\": {}}}\n", record.wall_clock_secs))?;
    let single = config.model == ModelKind::SingleTask;
    for unit in &record.units {
        let mut f = fs::File::create(checkpoint_path(out_dir, &unit.name, single))?;
        unit.registry.save_checkpoint(&mut f)?;
        f.flush()?;
    }
    if let Some(w) = &record.weights {
        fs::write(out_dir.join("weights.csv"), w.to_csv())?;
    }
    if let Some(t) = &record.trajectory {
        fs::write(out_dir.join("trajectory.jsonl"), t.to_jsonl())?;
    }
    if !record.adapt.is_empty() {
        fs::write(out_dir.join("adapt.csv"), adapt_csv(&record.adapt))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub task: String,
    pub count: usize,
    pub accuracy: f64,
}

pub fn adapt_csv(points: &[AdaptPoint]) -> String {
    let mut out = String::from("task,count,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{},{:.6}\n", p.task, p.count, p.accuracy));
    }
    out
}

/// For each count `N`: a fresh private encoder and head for `task`, shared
/// encoder values copied from `source`, fine-tuning of every parameter on
/// the first `N` training samples, and the test accuracy of the best-dev
/// epoch.
pub fn out_of_task_adapt(
    config: &ExperimentConfig,
    data: &LoadedData,
    source_model: &Model,
    source: &Registry,
    task: &TaskSplits,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<AdaptPoint>, HarnessError> {
    let id = task.train.task_id.clone();
    let read_op = match source_model.spec.read_op {
        ReadOpKind::Structural => ReadOpKind::Star,
        k => k,
    };
    let mut points = Vec::new();
    for &n in counts {
        if n == 0 {
            return Err(HarnessError::Config("evaluation.counts: sample counts must be positive".into()));
        }
        if n > task.train.len() {
            return Err(HarnessError::Runtime(format!("task `{id}` has {} training samples, {n} requested", task.train.len())));
        }
        let mut registry = Registry::new();
        let spec = ModelSpec { read_op, ..model_spec(config, data, read_op) };
        let head = TaskHeadSpec { id: id.clone(), num_classes: task.train.num_classes };
        let model = Model::build(&mut registry, spec, &[head], derive_seed(seed, ADAPT_STREAM))?;
        for sid in model.shared_encoder_ids() {
            registry.set_value(&sid, source.value(&sid)?.clone())?;
        }
        registry.freeze();
        let few = TaskSplits { train: task.train.take(n), dev: task.dev.clone(), test: task.test.clone() };
        let adapt_config = ExperimentConfig {
            model: if read_op == ReadOpKind::Flat { ModelKind::Fr } else { ModelKind::Sr },
            epochs: config.evaluation.adapt_epochs,
            ..config.clone()
        };
        train_unit(&adapt_config, &model, &mut registry, &[&few], None, derive_seed(seed, ADAPT_STREAM + n as u64), None)?;
        let acc = evaluate(&model, &registry, &id, &task.test)?.accuracy;
        points.push(AdaptPoint { task: id.clone(), count: n, accuracy: acc });
    }
    Ok(points)
}

/// Loads the checkpoint(s) written by `train` and evaluates every training
/// task on its dev and test splits.
pub fn eval_checkpoint(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricLine>, HarnessError> {
    let data = load_data(config)?;
    let units = load_units(config, &data, out_dir)?;
    let mut lines = Vec::new();
    for unit in &units {
        for task in unit.model.task_ids() {
            let t = data.train_tasks.iter().find(|t| t.train.task_id == task).expect("unit tasks come from data");
            for (split, d) in [(Split::Dev, &t.dev), (Split::Test, &t.test)] {
                let e = evaluate(&unit.model, &unit.registry, &task, d)?;
                lines.push(MetricLine { epoch: 0, task: task.clone(), split, loss: e.loss, accuracy: e.accuracy });
            }
        }
    }
    Ok(lines)
}

/// Rebuilds the trained units from checkpoint files.
pub fn load_units(config: &ExperimentConfig, data: &LoadedData, out_dir: &Path) -> Result<Vec<TrainedUnit>, HarnessError> {
    let single = config.model == ModelKind::SingleTask;
    let groups: Vec<(String, Vec<&TaskSplits>)> = if single {
        data.train_tasks.iter().map(|t| (t.train.task_id.clone(), vec![t])).collect()
    } else {
        vec![(config.model.name().to_string(), data.train_tasks.iter().collect())]
    };
    groups
        .into_iter()
        .map(|(name, tasks)| {
            let path = checkpoint_path(out_dir, &name, single);
            let mut f = fs::File::open(&path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?;
            let registry = Registry::load_checkpoint(&mut f)?;
            let model = Model::attach(&registry, model_spec(config, data, config.model.read_op()), &heads(&tasks))?;
            Ok(TrainedUnit { name, model, registry })
        })
        .collect()
}
