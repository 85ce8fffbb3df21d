//! Gradient passing: fast weights, pairwise and list-wise meta-losses, the
//! task-relatedness weight matrix and the multi-task training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{batch_iter, sample_batch, Batch, TaskDataset};
use crate::readops::{evaluate, Model, ModelError, ModelSpec, ReadOpKind, ReadOptions, TaskHeadSpec};
use crate::registry::{ParamMode, Registry};
use crate::writeops::{objective, task_loss, Constraints, LossWeights, Optimizer, OptimizerConfig};
use crate::{GradientMap, Graph, Tensor, Var};

/// SplitMix64 finalizer; derives independent stream seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared parameters after one simulated SGD step from a source task.
#[derive(Debug, Clone)]
pub struct FastWeights<'g> {
    vars: BTreeMap<String, Var<'g>>,
    pub source_task: String,
    pub alpha: f64,
    pub first_order: bool,
}

impl<'g> FastWeights<'g> {
    pub fn from_vars(vars: BTreeMap<String, Var<'g>>, source_task: &str, alpha: f64, first_order: bool) -> Self {
        Self { vars, source_task: source_task.to_string(), alpha, first_order }
    }

    pub fn get(&self, id: &str) -> Option<Var<'g>> {
        self.vars.get(id).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.value())).collect()
    }
}

/// `φ = θ − α·g` for every entry of `grads`. In first-order mode `g` is
/// detached, so `∂φ/∂θ = I`.
pub fn compute_fast_weights<'g>(
    graph: &'g Graph,
    registry: &Registry,
    grads: &BTreeMap<String, Var<'g>>,
    alpha: f64,
    first_order: bool,
    source_task: &str,
) -> Result<FastWeights<'g>, ModelError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(ModelError::Contract(format!("inner rate must be finite and non-negative, got {alpha}")));
    }
    let mut vars = BTreeMap::new();
    for (id, g) in grads {
        if registry.param(id)?.mode() != ParamMode::Swr {
            return Err(ModelError::Override(format!("`{id}` is not a shared parameter")));
        }
        let theta = match graph.param_var(id) {
            Some(v) => v,
            None => graph.param(id, registry.value(id)?.clone()),
        };
        if theta.shape() != g.shape() {
            return Err(ModelError::Override(format!("gradient shape mismatch for `{id}`")));
        }
        let g = if first_order { g.detach() } else { *g };
        vars.insert(id.clone(), theta.sub(g.scale(alpha)?)?);
    }
    Ok(FastWeights::from_vars(vars, source_task, alpha, first_order))
}

/// A per-task differentiable loss that can be evaluated under fast weights.
pub trait MetaObjective {
    type Batch;

    fn batch_len(batch: &Self::Batch) -> usize;

    fn loss<'g>(
        &self,
        graph: &'g Graph,
        registry: &Registry,
        task: &str,
        batch: &Self::Batch,
        opts: ReadOptions<'_, 'g>,
    ) -> Result<Var<'g>, ModelError>;
}

impl MetaObjective for Model {
    type Batch = Batch;

    fn batch_len(batch: &Batch) -> usize {
        batch.len()
    }

    fn loss<'g>(
        &self,
        graph: &'g Graph,
        registry: &Registry,
        task: &str,
        batch: &Batch,
        opts: ReadOptions<'_, 'g>,
    ) -> Result<Var<'g>, ModelError> {
        let read = self.read(graph, registry, task, batch, opts)?;
        Ok(task_loss(read.logits, &batch.labels)?)
    }
}

/// Fast weights from task `k`'s loss. Non-shared parameters enter as
/// constants, so only shared parameters are reachable from the result.
pub fn inner_fast_weights<'g, O: MetaObjective>(
    objective: &O,
    graph: &'g Graph,
    registry: &Registry,
    k: &str,
    batch_k: &O::Batch,
    alpha: f64,
    first_order: bool,
) -> Result<FastWeights<'g>, ModelError> {
    if O::batch_len(batch_k) == 0 {
        return Err(ModelError::Contract(format!("empty batch for task `{k}`")));
    }
    let inner = objective.loss(graph, registry, k, batch_k, ReadOptions::frozen_private())?;
    let shared = registry.shared_ids();
    let ids: Vec<&str> = shared.iter().map(String::as_str).collect();
    let grads = if ids.is_empty() { BTreeMap::new() } else { graph.grad_vars(inner, &ids)? };
    compute_fast_weights(graph, registry, &grads, alpha, first_order, k)
}

fn outer_loss<'g, O: MetaObjective>(
    objective: &O,
    graph: &'g Graph,
    registry: &Registry,
    fast: &FastWeights<'g>,
    j: &str,
    batch_j: &O::Batch,
) -> Result<Var<'g>, ModelError> {
    if O::batch_len(batch_j) == 0 {
        return Err(ModelError::Contract(format!("empty batch for task `{j}`")));
    }
    objective.loss(graph, registry, j, batch_j, ReadOptions { fast: Some(fast), freeze_private: true })
}

/// `L_GP^{k←j}`: task `j`'s loss under the fast weights produced by task `k`.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_gp_loss<'g, O: MetaObjective>(
    objective: &O,
    graph: &'g Graph,
    registry: &Registry,
    k: &str,
    batch_k: &O::Batch,
    j: &str,
    batch_j: &O::Batch,
    alpha: f64,
    first_order: bool,
) -> Result<Var<'g>, ModelError> {
    if j == k {
        return Err(ModelError::Contract(format!("gradient passing needs two distinct tasks, got `{k}` twice")));
    }
    let fast = inner_fast_weights(objective, graph, registry, k, batch_k, alpha, first_order)?;
    outer_loss(objective, graph, registry, &fast, j, batch_j)
}

/// `Σ_{j≠k} β^{k←j}·L_GP^{k←j}` with one fast-weight computation shared by
/// all partners. Zero weights are skipped; an all-zero row yields a
/// constant 0.
#[allow(clippy::too_many_arguments)]
pub fn listwise_gp_loss<'g, O: MetaObjective>(
    objective: &O,
    graph: &'g Graph,
    registry: &Registry,
    k: &str,
    batch_k: &O::Batch,
    partners: &BTreeMap<String, O::Batch>,
    beta: &BTreeMap<String, f64>,
    alpha: f64,
    first_order: bool,
) -> Result<Var<'g>, ModelError> {
    let others: Vec<String> = registry.task_ids().into_iter().filter(|t| t != k).collect();
    for j in &others {
        if !partners.contains_key(j) {
            return Err(ModelError::Contract(format!("missing partner batch for task `{j}`")));
        }
        if !beta.contains_key(j) {
            return Err(ModelError::Contract(format!("missing weight for partner `{j}`")));
        }
    }
    let fast = inner_fast_weights(objective, graph, registry, k, batch_k, alpha, first_order)?;
    let mut total: Option<Var<'g>> = None;
    for j in &others {
        let b = beta[j];
        if b == 0.0 {
            continue;
        }
        let term = outer_loss(objective, graph, registry, &fast, j, &partners[j])?.scale(b)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| graph.constant(Tensor::scalar(0.0))))
}

/// `min(V_ij / V_jj, 1)^(1/q)`.
pub fn beta_transform(v_ij: f64, v_jj: f64, q_exp: f64) -> Result<f64, ModelError> {
    if !(v_jj > 0.0) {
        return Err(ModelError::Contract(format!("degenerate self-accuracy {v_jj}")));
    }
    if !(q_exp > 0.0 && q_exp.is_finite()) {
        return Err(ModelError::Contract(format!("q_exp must be positive, got {q_exp}")));
    }
    Ok((v_ij / v_jj).min(1.0).powf(1.0 / q_exp))
}

/// `β[k][j]` weights the gradient passed from task `k` to partner `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    tasks: Vec<String>,
    values: Vec<f64>,
}

impl WeightMatrix {
    /// Transforms cross-task accuracies `v[i][j]` (trained on `i`, tested on
    /// `j`) column by column.
    pub fn from_accuracies(tasks: &[String], v: &[Vec<f64>], q_exp: f64) -> Result<Self, ModelError> {
        let k = tasks.len();
        if v.len() != k || v.iter().any(|r| r.len() != k) {
            return Err(ModelError::Contract("accuracy matrix must be K×K".into()));
        }
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                values[i * k + j] = if i == j {
                    beta_transform(v[j][j], v[j][j], q_exp)?;
                    1.0
                } else {
                    let b = beta_transform(v[i][j], v[j][j], q_exp)?;
                    if !(b > 0.0) {
                        return Err(ModelError::Contract(format!("zero cross accuracy from `{}` to `{}`", tasks[i], tasks[j])));
                    }
                    b
                };
            }
        }
        Ok(Self { tasks: tasks.to_vec(), values })
    }

    /// Explicit weights; diagonal must be 1 and entries lie in [0, 1].
    pub fn from_values(tasks: &[String], values: Vec<f64>) -> Result<Self, ModelError> {
        let k = tasks.len();
        if values.len() != k * k {
            return Err(ModelError::Contract(format!("expected {} weights, got {}", k * k, values.len())));
        }
        for i in 0..k {
            for j in 0..k {
                let v = values[i * k + j];
                let ok = if i == j { v == 1.0 } else { (0.0..=1.0).contains(&v) };
                if !ok {
                    return Err(ModelError::Contract(format!("invalid weight {v} at ({i}, {j})")));
                }
            }
        }
        Ok(Self { tasks: tasks.to_vec(), values })
    }

    pub fn uniform(tasks: &[String]) -> Self {
        Self { tasks: tasks.to_vec(), values: vec![1.0; tasks.len() * tasks.len()] }
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tasks.len() + j]
    }

    /// Partner weights of task `k`, excluding `k` itself.
    pub fn row(&self, k: &str) -> Result<BTreeMap<String, f64>, ModelError> {
        let i = self.tasks.iter().position(|t| t == k).ok_or_else(|| ModelError::Contract(format!("task `{k}` not in weight matrix")))?;
        Ok(self.tasks.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, t)| (t.clone(), self.get(i, j))).collect())
    }

    /// Header row of task ids, then one labeled row per task.
    pub fn to_csv(&self) -> String {
        let mut out = format!("task,{}\n", self.tasks.join(","));
        for (i, t) in self.tasks.iter().enumerate() {
            out.push_str(t);
            for j in 0..self.tasks.len() {
                let _ = write!(out, ",{:.6}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Contract(format!("weight matrix csv: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let tasks: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default().trim();
            if tasks.get(i).map(String::as_str) != Some(label) {
                return Err(bad(format!("row {} should be `{}`", i + 1, tasks.get(i).map_or("", String::as_str))));
            }
            for f in fields {
                values.push(f.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
        }
        Self::from_values(&tasks, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    Pairwise,
    Listwise,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharedUpdate {
    GpOnly,
    #[default]
    GpPlusTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub first_order: bool,
    pub mode: CommMode,
    #[serde(default)]
    pub shared_update: SharedUpdate,
    #[serde(default)]
    pub partner_seed: u64,
}

fn default_alpha() -> f64 {
    0.1
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err("meta.alpha must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub weights: LossWeights,
    pub constraints: Constraints,
    pub meta: Option<MetaConfig>,
    pub beta: Option<WeightMatrix>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            constraints: Constraints::NONE,
            meta: None,
            beta: None,
            batch_size: crate::datakit::DEFAULT_BATCH_SIZE,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean training loss and accuracy per task over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tasks: BTreeMap<String, TaskEpochMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Partner batches for one gradient-passing step.
#[derive(Debug, Clone, PartialEq)]
pub enum Partners {
    None,
    One(String, Batch),
    All(BTreeMap<String, Batch>),
}

const STREAM_SCHEDULE: u64 = 1;
const STREAM_PARTNER_BATCH: u64 = 2;
const STREAM_PARTNER_CHOICE: u64 = 3;

/// Training state: optimizer accumulators and the random streams for batch
/// order and partner sampling. Partner streams never touch batch order, so a
/// gradient-passing run with `λ_gp = 0` sees the same batches as its plain
/// counterpart.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainerConfig,
    pub optimizer: Optimizer,
    seed: u64,
    epoch: usize,
    partner_batch_rng: ChaCha8Rng,
    partner_choice_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainerConfig, seed: u64) -> Result<Self, ModelError> {
        config.weights.validate().map_err(ModelError::Contract)?;
        config.optimizer.validate().map_err(ModelError::Contract)?;
        if config.batch_size == 0 {
            return Err(ModelError::Contract("batch size must be positive".into()));
        }
        if let Some(meta) = &config.meta {
            meta.validate().map_err(ModelError::Contract)?;
            if model.tasks.len() < 2 {
                return Err(ModelError::Contract("gradient passing needs at least 2 tasks".into()));
            }
            if meta.mode == CommMode::Listwise && config.beta.is_none() {
                return Err(ModelError::Contract("list-wise gradient passing needs a weight matrix".into()));
            }
        }
        let partner_seed = config.meta.map_or(0, |m| m.partner_seed);
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer),
            partner_batch_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed ^ partner_seed, STREAM_PARTNER_BATCH)),
            partner_choice_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed ^ partner_seed, STREAM_PARTNER_CHOICE)),
            model,
            config,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn check_tasks(&self, train: &[TaskDataset]) -> Result<(), ModelError> {
        let ids = self.model.task_ids();
        if train.len() != ids.len() || train.iter().zip(&ids).any(|(d, id)| &d.task_id != id) {
            return Err(ModelError::Contract(format!("training sets must follow the model's task order {ids:?}")));
        }
        if let Some(d) = train.iter().find(|d| d.is_empty()) {
            return Err(ModelError::Contract(format!("empty training set for `{}`", d.task_id)));
        }
        Ok(())
    }

    /// One pass over every task's training batches in a seeded interleaving.
    pub fn train_epoch(&mut self, registry: &mut Registry, train: &[TaskDataset]) -> Result<EpochMetrics, ModelError> {
        self.check_tasks(train)?;
        let epoch = self.epoch;
        let per_task: Vec<Vec<Batch>> = train
            .iter()
            .enumerate()
            .map(|(k, d)| batch_iter(d, self.config.batch_size, derive_seed(self.seed, 100 + k as u64), epoch).collect())
            .collect();
        let mut schedule: Vec<(usize, usize)> =
            per_task.iter().enumerate().flat_map(|(k, bs)| (0..bs.len()).map(move |i| (k, i))).collect();
        schedule.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.seed, STREAM_SCHEDULE), epoch as u64)));

        let mut sums = vec![(0.0, 0usize, 0usize); train.len()];
        for (k, i) in schedule {
            let out = self.train_step(registry, train, k, &per_task[k][i])?;
            sums[k].0 += out.loss * out.count as f64;
            sums[k].1 += out.correct;
            sums[k].2 += out.count;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            tasks: train
                .iter()
                .zip(sums)
                .map(|(d, (l, c, n))| (d.task_id.clone(), TaskEpochMetrics { loss: l / n as f64, accuracy: c as f64 / n as f64 }))
                .collect(),
        })
    }

    /// Samples partner batches as configured, then runs
    /// [`Trainer::step_with_partners`].
    pub fn train_step(
        &mut self,
        registry: &mut Registry,
        train: &[TaskDataset],
        k: usize,
        batch: &Batch,
    ) -> Result<StepOutcome, ModelError> {
        let bs = self.config.batch_size;
        let partners = match self.config.meta.map(|m| m.mode) {
            None => Partners::None,
            Some(CommMode::Pairwise) => {
                let mut j = self.partner_choice_rng.random_range(0..train.len() - 1);
                if j >= k {
                    j += 1;
                }
                Partners::One(train[j].task_id.clone(), sample_batch(&train[j], bs, &mut self.partner_batch_rng))
            }
            Some(CommMode::Listwise) => Partners::All(
                train
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, d)| (d.task_id.clone(), sample_batch(d, bs, &mut self.partner_batch_rng)))
                    .collect(),
            ),
        };
        self.step_with_partners(registry, k, batch, &partners)
    }

    /// Updates task `k`'s private parameters from its objective, then the
    /// shared parameters from the objective and/or the gradient-passing loss
    /// according to the shared-update policy.
    pub fn step_with_partners(
        &mut self,
        registry: &mut Registry,
        k: usize,
        batch: &Batch,
        partners: &Partners,
    ) -> Result<StepOutcome, ModelError> {
        let task = self.model.tasks[k].id.clone();
        let writable: Vec<String> = registry.writable_view(&task)?.iter().map(|p| p.id().to_string()).collect();
        let ids: Vec<&str> = writable.iter().map(String::as_str).collect();

        let graph = Graph::new();
        let obj = objective(&self.model, &graph, registry, &task, batch, &self.config.weights, &self.config.constraints)?;
        let outcome = StepOutcome {
            loss: obj.task.item(),
            correct: obj.logits.value().argmax_rows().iter().zip(&batch.labels).filter(|(p, l)| p == l).count(),
            count: batch.len(),
        };
        let grads = graph.backward(obj.total, &ids, false)?;
        drop(graph);
        let is_shared = |id: &str| registry.param(id).map(|p| p.mode() == ParamMode::Swr).unwrap_or(false);
        let private = grads.filtered(|id| !is_shared(id));
        let task_shared = grads.filtered(|id| is_shared(id));

        registry.apply_update(&task, &private, &mut self.optimizer)?;

        let shared = match (&self.config.meta, partners) {
            (None, _) | (Some(_), Partners::None) => task_shared,
            (Some(meta), partners) => {
                let gp = self.gp_gradient(registry, meta, &task, batch, partners)?;
                match meta.shared_update {
                    SharedUpdate::GpOnly => gp,
                    SharedUpdate::GpPlusTask => task_shared.add_scaled(&gp, self.config.weights.gp),
                }
            }
        };
        registry.apply_update(&task, &shared, &mut self.optimizer)?;
        Ok(outcome)
    }

    fn gp_gradient(
        &self,
        registry: &Registry,
        meta: &MetaConfig,
        task: &str,
        batch: &Batch,
        partners: &Partners,
    ) -> Result<GradientMap, ModelError> {
        let graph = Graph::new();
        let loss = match partners {
            Partners::None => unreachable!("handled by caller"),
            Partners::One(j, bj) => pairwise_gp_loss(&self.model, &graph, registry, task, batch, j, bj, meta.alpha, meta.first_order)?,
            Partners::All(map) => {
                let beta = self.config.beta.as_ref().ok_or_else(|| ModelError::Contract("missing weight matrix".into()))?.row(task)?;
                listwise_gp_loss(&self.model, &graph, registry, task, batch, map, &beta, meta.alpha, meta.first_order)?
            }
        };
        let shared = registry.shared_ids();
        let ids: Vec<&str> = shared.iter().map(String::as_str).collect();
        Ok(graph.backward(loss, &ids, false)?)
    }
}

/// Runs one epoch of `trainer` over `train`.
pub fn train_epoch(trainer: &mut Trainer, registry: &mut Registry, train: &[TaskDataset]) -> Result<EpochMetrics, ModelError> {
    trainer.train_epoch(registry, train)
}

#[derive(Debug, Clone)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModelConfig {
    /// Read-op is forced to star.
    pub spec: ModelSpec,
    pub epochs: usize,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

/// Cap on worker threads: `PRAWN_THREADS` if set, else available cores.
pub fn thread_cap() -> usize {
    std::env::var("PRAWN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains a single-task star model on `task` and returns its registry
/// restored to the best-dev epoch.
pub fn train_single_task(task: &TaskSplits, base: &BaseModelConfig) -> Result<(Model, Registry), ModelError> {
    let mut registry = Registry::new();
    let spec = ModelSpec { read_op: ReadOpKind::Star, ..base.spec.clone() };
    let head = TaskHeadSpec { id: task.train.task_id.clone(), num_classes: task.train.num_classes };
    let model = Model::build(&mut registry, spec, &[head], base.seed)?;
    registry.freeze();
    let trainer_config = TrainerConfig { meta: None, beta: None, constraints: Constraints::NONE, ..base.trainer.clone() };
    let mut trainer = Trainer::new(model.clone(), trainer_config, base.seed)?;
    let id = task.train.task_id.clone();
    let mut best = (evaluate(&model, &registry, &id, &task.dev)?.accuracy, registry.snapshot());
    for _ in 0..base.epochs {
        trainer.train_epoch(&mut registry, std::slice::from_ref(&task.train))?;
        let acc = evaluate(&model, &registry, &id, &task.dev)?.accuracy;
        if acc > best.0 {
            best = (acc, registry.snapshot());
        }
    }
    registry.restore(&best.1)?;
    Ok((model, registry))
}

/// Cross-task accuracy matrix `V` (row: trained on, column: tested on) and
/// the weight matrix derived from it.
pub fn estimate_weight_matrix(
    tasks: &[TaskSplits],
    base: &BaseModelConfig,
    q_exp: f64,
) -> Result<(WeightMatrix, Vec<Vec<f64>>), ModelError> {
    if tasks.len() < 2 {
        return Err(ModelError::Contract("weight estimation needs at least 2 tasks".into()));
    }
    let classes = tasks[0].train.num_classes;
    if tasks.iter().any(|t| t.train.num_classes != classes) {
        return Err(ModelError::Contract("weight estimation needs a common label space".into()));
    }
    let row = |i: usize| -> Result<Vec<f64>, ModelError> {
        let own = BaseModelConfig { seed: derive_seed(base.seed, i as u64), ..base.clone() };
        let (model, registry) = train_single_task(&tasks[i], &own)?;
        let id = &tasks[i].train.task_id;
        tasks.iter().map(|t| Ok(evaluate(&model, &registry, id, &t.test)?.accuracy)).collect()
    };
    let workers = thread_cap().min(tasks.len());
    let mut rows: Vec<Option<Result<Vec<f64>, ModelError>>> = (0..tasks.len()).map(|_| None).collect();
    thread::scope(|s| {
        let row = &row;
        for (w, chunk) in rows.chunks_mut(tasks.len().div_ceil(workers)).enumerate() {
            let start = w * tasks.len().div_ceil(workers);
            s.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(row(start + off));
                }
            });
        }
    });
    let v: Vec<Vec<f64>> = rows.into_iter().map(|r| r.expect("every row computed")).collect::<Result<_, _>>()?;
    let ids: Vec<String> = tasks.iter().map(|t| t.train.task_id.clone()).collect();
    Ok((WeightMatrix::from_accuracies(&ids, &v, q_exp)?, v))
}
