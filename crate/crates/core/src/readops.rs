//! Read-ops: flat, star and structural architectures over registry
//! parameters, with optional substitution of fast shared weights.
//!
//! Parameter ids:
//! - shared encoder: `shared.enc.emb`, `shared.enc.l{i}.W`, `shared.enc.l{i}.b`
//! - private encoder of task `t`: `t.enc.*` with the same suffixes
//! - head of task `t`: `t.head.W`, `t.head.b`
//! - read-only view of a private parameter (structural models): `<id>#pr`

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commpass::FastWeights;
use crate::datakit::{Batch, BatchInputs, DataError, TaskDataset};
use crate::registry::{Owner, ParamMode, Registry, RegistryError, TaskAgent};
use crate::{Graph, Tensor, TensorError, Var};

pub const SHARED_PREFIX: &str = "shared.enc";
pub const ALIAS_SUFFIX: &str = "#pr";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("fast weights: {0}")]
    Override(String),
    #[error("task `{0}` has no private encoder")]
    NoPrivateEncoder(String),
    #[error("structural read needs at least 2 tasks, model has {0}")]
    TooFewTasks(usize),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadOpKind {
    Flat,
    Star,
    Structural,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    BagOfWordsEmbeddingMean,
}

/// An encoder: optional mean embedding followed by activated dense layers.
/// `input_dim` is the feature count for `Mlp` and the vocabulary size for
/// the embedding kind. The last width is the output feature dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn mlp(input_dim: usize, widths: &[usize], activation: Activation) -> Self {
        Self { kind: EncoderKind::Mlp, input_dim, embed_dim: None, widths: widths.to_vec(), activation }
    }

    pub fn bag_of_words(vocab_size: usize, embed_dim: usize, widths: &[usize], activation: Activation) -> Self {
        Self {
            kind: EncoderKind::BagOfWordsEmbeddingMean,
            input_dim: vocab_size,
            embed_dim: Some(embed_dim),
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::Spec("encoder input_dim and widths must be positive and non-empty".into()));
        }
        match (self.kind, self.embed_dim) {
            (EncoderKind::BagOfWordsEmbeddingMean, Some(e)) if e > 0 => Ok(()),
            (EncoderKind::BagOfWordsEmbeddingMean, _) => Err(ModelError::Spec("embedding encoder needs embed_dim > 0".into())),
            (EncoderKind::Mlp, None) => Ok(()),
            (EncoderKind::Mlp, Some(_)) => Err(ModelError::Spec("mlp encoder takes no embed_dim".into())),
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// `(suffix, shape)` of every parameter, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        if let Some(e) = self.embed_dim {
            out.push(("emb".to_string(), vec![self.input_dim, e]));
            fan_in = e;
        }
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("l{i}.W"), vec![fan_in, w]));
            out.push((format!("l{i}.b"), vec![1, w]));
            fan_in = w;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub read_op: ReadOpKind,
    pub shared: EncoderSpec,
    /// Required by star and structural read-ops; ignored by flat.
    #[serde(default)]
    pub private: Option<EncoderSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.shared.validate()?;
        if self.read_op == ReadOpKind::Flat {
            return Ok(());
        }
        let p = self.private.as_ref().ok_or_else(|| ModelError::Spec(format!("{:?} read-op needs a private encoder", self.read_op)))?;
        p.validate()?;
        if p.kind != self.shared.kind || p.input_dim != self.shared.input_dim {
            return Err(ModelError::Spec("private and shared encoders must take the same input".into()));
        }
        Ok(())
    }

    fn private_spec(&self) -> Option<&EncoderSpec> {
        match self.read_op {
            ReadOpKind::Flat => None,
            _ => self.private.as_ref(),
        }
    }

    pub fn head_input_width(&self) -> usize {
        let d = self.shared.out_dim();
        let dp = self.private_spec().map_or(0, EncoderSpec::out_dim);
        match self.read_op {
            ReadOpKind::Flat => d,
            ReadOpKind::Star => d + dp,
            ReadOpKind::Structural => d + 2 * dp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHeadSpec {
    pub id: String,
    pub num_classes: usize,
}

/// Layout of a multi-task model; parameter values live in a [`Registry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub tasks: Vec<TaskHeadSpec>,
}

fn init_tensor(shape: &[usize], suffix: &str, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if suffix.ends_with(".b") {
        vec![0.0; n]
    } else if suffix == "emb" {
        (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
    } else {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    Tensor::new(shape, data).expect("init shape")
}

pub fn alias_id(id: &str) -> String {
    format!("{id}{ALIAS_SUFFIX}")
}

impl Model {
    /// Registers the shared encoder, each task's private encoder and head,
    /// and (for structural models) read-only aliases of every private
    /// encoder parameter. Draws initial values from `seed`.
    pub fn build(registry: &mut Registry, spec: ModelSpec, tasks: &[TaskHeadSpec], seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        if tasks.is_empty() {
            return Err(ModelError::Spec("model needs at least one task".into()));
        }
        if spec.read_op == ReadOpKind::Structural && tasks.len() < 2 {
            return Err(ModelError::TooFewTasks(tasks.len()));
        }
        if let Some(t) = tasks.iter().find(|t| t.num_classes < 2) {
            return Err(ModelError::Spec(format!("task `{}` needs at least 2 classes", t.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (suffix, shape) in spec.shared.param_shapes() {
            let t = init_tensor(&shape, &suffix, &mut rng);
            registry.register(&format!("{SHARED_PREFIX}.{suffix}"), t, ParamMode::Swr, Owner::Shared)?;
        }
        let model = Self { spec, tasks: tasks.to_vec() };
        for task in tasks {
            registry.add_task(TaskAgent::new(&task.id, &task.id))?;
            let mut enc_ids = Vec::new();
            if let Some(p) = model.spec.private_spec() {
                for (suffix, shape) in p.param_shapes() {
                    let id = format!("{}.enc.{suffix}", task.id);
                    registry.register(&id, init_tensor(&shape, &suffix, &mut rng), ParamMode::Pwr, Owner::task(&task.id))?;
                    enc_ids.push(id);
                }
            }
            let (w, b) = model.head_ids(&task.id);
            let width = model.spec.head_input_width();
            registry.register(&w, init_tensor(&[width, task.num_classes], "W", &mut rng), ParamMode::Pwr, Owner::task(&task.id))?;
            registry.register(&b, Tensor::zeros(&[1, task.num_classes]), ParamMode::Pwr, Owner::task(&task.id))?;
            registry.assign_head(&task.id, &[w, b])?;
            if !enc_ids.is_empty() {
                registry.assign_private_encoder(&task.id, &enc_ids)?;
            }
        }
        if model.spec.read_op == ReadOpKind::Structural {
            for task in tasks {
                for id in model.private_encoder_ids(&task.id) {
                    registry.register_alias(&alias_id(&id), &id)?;
                }
            }
        }
        Ok(model)
    }

    /// Layout over an existing registry (e.g. a loaded checkpoint); every
    /// parameter the layout needs must be present with the right shape.
    pub fn attach(registry: &Registry, spec: ModelSpec, tasks: &[TaskHeadSpec]) -> Result<Self, ModelError> {
        spec.validate()?;
        let model = Self { spec, tasks: tasks.to_vec() };
        let mut expected: Vec<(String, Vec<usize>)> =
            model.spec.shared.param_shapes().into_iter().map(|(s, shape)| (format!("{SHARED_PREFIX}.{s}"), shape)).collect();
        for task in tasks {
            registry.task(&task.id)?;
            if let Some(p) = model.spec.private_spec() {
                expected.extend(p.param_shapes().into_iter().map(|(s, shape)| (format!("{}.enc.{s}", task.id), shape)));
            }
            let (w, b) = model.head_ids(&task.id);
            expected.push((w, vec![model.spec.head_input_width(), task.num_classes]));
            expected.push((b, vec![1, task.num_classes]));
        }
        for (id, shape) in expected {
            let got = registry.value(&id)?.shape();
            if got != shape.as_slice() {
                return Err(ModelError::Spec(format!("`{id}` has shape {got:?}, layout expects {shape:?}")));
            }
        }
        Ok(model)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == task)
    }

    pub fn head_ids(&self, task: &str) -> (String, String) {
        (format!("{task}.head.W"), format!("{task}.head.b"))
    }

    pub fn shared_encoder_ids(&self) -> Vec<String> {
        self.spec.shared.param_shapes().into_iter().map(|(s, _)| format!("{SHARED_PREFIX}.{s}")).collect()
    }

    pub fn private_encoder_ids(&self, task: &str) -> Vec<String> {
        self.spec.private_spec().map(|p| p.param_shapes().into_iter().map(|(s, _)| format!("{task}.enc.{s}")).collect()).unwrap_or_default()
    }

    /// Private encoder and head ids of `task`.
    pub fn private_ids(&self, task: &str) -> Vec<String> {
        let (w, b) = self.head_ids(task);
        let mut ids = self.private_encoder_ids(task);
        ids.extend([w, b]);
        ids
    }

    fn check_task(&self, task: &str) -> Result<(), ModelError> {
        match self.task_index(task) {
            Some(_) => Ok(()),
            None => Err(RegistryError::UnknownTask(task.to_string()).into()),
        }
    }

    /// Forward pass of `task` on `batch` with the model's read-op.
    pub fn read<'g>(
        &self,
        graph: &'g Graph,
        registry: &Registry,
        task: &str,
        batch: &Batch,
        opts: ReadOptions<'_, 'g>,
    ) -> Result<ReadResult<'g>, ModelError> {
        self.check_task(task)?;
        let reader = ParamReader::new(graph, registry, task, opts);
        if let Some(fw) = opts.fast {
            for id in self.shared_encoder_ids() {
                if fw.get(&id).is_none() {
                    return Err(ModelError::Override(format!("missing shared parameter `{id}`")));
                }
            }
        }
        let shared = encode(&self.spec.shared, SHARED_PREFIX, "", &reader, batch)?;
        let (features, private) = match self.spec.read_op {
            ReadOpKind::Flat => (shared, None),
            ReadOpKind::Star => {
                let p = self.private_features(&reader, task, "", batch)?;
                (Var::concat(&[shared, p])?, Some(p))
            }
            ReadOpKind::Structural => {
                if self.tasks.len() < 2 {
                    return Err(ModelError::TooFewTasks(self.tasks.len()));
                }
                let p = self.private_features(&reader, task, "", batch)?;
                let mut summary: Option<Var<'g>> = None;
                for other in self.tasks.iter().filter(|t| t.id != task) {
                    let f = self.private_features(&reader, &other.id, ALIAS_SUFFIX, batch)?;
                    summary = Some(match summary {
                        Some(s) => s.add(f)?,
                        None => f,
                    });
                }
                let summary = summary.expect("at least one other task").scale(1.0 / (self.tasks.len() - 1) as f64)?;
                (Var::concat(&[shared, p, summary])?, Some(p))
            }
        };
        let (w, b) = self.head_ids(task);
        let logits = features.matmul(reader.get(&w)?)?.add_row(reader.get(&b)?)?;
        Ok(ReadResult { logits, shared, private, touched: reader.touched.into_inner() })
    }

    fn private_features<'g>(&self, reader: &ParamReader<'_, 'g>, task: &str, suffix: &str, batch: &Batch) -> Result<Var<'g>, ModelError> {
        let spec = self.spec.private_spec().ok_or_else(|| ModelError::NoPrivateEncoder(task.to_string()))?;
        let registered = reader.registry.task(task)?;
        if registered.private_encoder.is_empty() {
            return Err(ModelError::NoPrivateEncoder(task.to_string()));
        }
        encode(spec, &format!("{task}.enc"), suffix, reader, batch)
    }

    /// Shared-encoder features without gradient tracking.
    pub fn shared_features(&self, registry: &Registry, task: &str, batch: &Batch) -> Result<Tensor, ModelError> {
        self.check_task(task)?;
        let graph = Graph::new();
        let reader = ParamReader::new(&graph, registry, task, ReadOptions::default());
        Ok(encode(&self.spec.shared, SHARED_PREFIX, "", &reader, batch)?.value())
    }

    fn check_kind(&self, kind: ReadOpKind) -> Result<(), ModelError> {
        if self.spec.read_op == kind {
            Ok(())
        } else {
            Err(ModelError::Contract(format!("model uses the {:?} read-op, not {kind:?}", self.spec.read_op)))
        }
    }
}

/// Layered encoder over `prefix.*` ids, each suffixed by `suffix`.
fn encode<'g>(spec: &EncoderSpec, prefix: &str, suffix: &str, reader: &ParamReader<'_, 'g>, batch: &Batch) -> Result<Var<'g>, ModelError> {
    let id = |s: &str| format!("{prefix}.{s}{suffix}");
    let mut h = match (&batch.inputs, spec.kind) {
        (BatchInputs::Dense(x), EncoderKind::Mlp) => {
            if x.cols() != spec.input_dim {
                return Err(TensorError::shape("encode", format!("expected {} features, got {}", spec.input_dim, x.cols())).into());
            }
            reader.graph.constant(x.clone())
        }
        (BatchInputs::Tokens(seqs), EncoderKind::BagOfWordsEmbeddingMean) => reader.get(&id("emb"))?.embed_mean(seqs)?,
        _ => return Err(ModelError::Contract("batch input kind does not match the encoder".into())),
    };
    for i in 0..spec.widths.len() {
        h = h.matmul(reader.get(&id(&format!("l{i}.W")))?)?.add_row(reader.get(&id(&format!("l{i}.b")))?)?;
        h = match spec.activation {
            Activation::Tanh => h.tanh()?,
            Activation::Relu => h.relu()?,
        };
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions<'a, 'g> {
    /// Substitutes for the stored shared parameters.
    pub fast: Option<&'a FastWeights<'g>>,
    /// Binds every non-shared parameter as a constant.
    pub freeze_private: bool,
}

impl<'a, 'g> ReadOptions<'a, 'g> {
    pub fn with_fast(fast: &'a FastWeights<'g>) -> Self {
        Self { fast: Some(fast), freeze_private: false }
    }

    pub fn frozen_private() -> Self {
        Self { fast: None, freeze_private: true }
    }
}

/// Binds registry parameters into a graph on behalf of one task. Every
/// access is permission-checked and recorded.
pub struct ParamReader<'a, 'g> {
    graph: &'g Graph,
    registry: &'a Registry,
    task: &'a str,
    opts: ReadOptions<'a, 'g>,
    touched: RefCell<BTreeSet<String>>,
}

impl<'a, 'g> ParamReader<'a, 'g> {
    pub fn new(graph: &'g Graph, registry: &'a Registry, task: &'a str, opts: ReadOptions<'a, 'g>) -> Self {
        Self { graph, registry, task, opts, touched: RefCell::new(BTreeSet::new()) }
    }

    /// Shared parameters resolve to the fast weight when one is supplied,
    /// read-only parameters to constants, the rest to graph parameters.
    pub fn get(&self, id: &str) -> Result<Var<'g>, ModelError> {
        let p = self.registry.param(id)?;
        if !self.registry.can_read(self.task, id)? {
            return Err(RegistryError::ReadPermission { task: self.task.to_string(), param: id.to_string(), mode: p.mode() }.into());
        }
        self.touched.borrow_mut().insert(id.to_string());
        let value = || self.registry.value(id).cloned();
        Ok(match p.mode() {
            ParamMode::Swr => match self.opts.fast {
                Some(fw) => fw.get(id).ok_or_else(|| ModelError::Override(format!("missing shared parameter `{id}`")))?,
                None => self.param(id)?,
            },
            ParamMode::Pwr if !self.opts.freeze_private => self.param(id)?,
            _ => self.graph.constant(value()?),
        })
    }

    fn param(&self, id: &str) -> Result<Var<'g>, ModelError> {
        match self.graph.param_var(id) {
            Some(v) => Ok(v),
            None => Ok(self.graph.param(id, self.registry.value(id)?.clone())),
        }
    }

    pub fn touched(&self) -> BTreeSet<String> {
        self.touched.borrow().clone()
    }
}

#[derive(Debug, Clone)]
pub struct ReadResult<'g> {
    /// `[batch, classes]`.
    pub logits: Var<'g>,
    /// `[batch, d]`.
    pub shared: Var<'g>,
    /// `[batch, d_p]` for star and structural read-ops.
    pub private: Option<Var<'g>>,
    /// Every parameter id the read accessed.
    pub touched: BTreeSet<String>,
}

pub fn flat_read<'g>(
    model: &Model,
    graph: &'g Graph,
    registry: &Registry,
    task: &str,
    batch: &Batch,
    fast: Option<&FastWeights<'g>>,
) -> Result<ReadResult<'g>, ModelError> {
    model.check_kind(ReadOpKind::Flat)?;
    model.read(graph, registry, task, batch, ReadOptions { fast, freeze_private: false })
}

pub fn star_read<'g>(
    model: &Model,
    graph: &'g Graph,
    registry: &Registry,
    task: &str,
    batch: &Batch,
    fast: Option<&FastWeights<'g>>,
) -> Result<ReadResult<'g>, ModelError> {
    model.check_kind(ReadOpKind::Star)?;
    model.read(graph, registry, task, batch, ReadOptions { fast, freeze_private: false })
}

pub fn structural_read<'g>(
    model: &Model,
    graph: &'g Graph,
    registry: &Registry,
    task: &str,
    batch: &Batch,
    fast: Option<&FastWeights<'g>>,
) -> Result<ReadResult<'g>, ModelError> {
    model.check_kind(ReadOpKind::Structural)?;
    model.read(graph, registry, task, batch, ReadOptions { fast, freeze_private: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub const EVAL_CHUNK: usize = 256;

/// Mean cross-entropy and accuracy of `task`'s predictions on `data`.
pub fn evaluate(model: &Model, registry: &Registry, task: &str, data: &TaskDataset) -> Result<Evaluation, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Contract(format!("cannot evaluate `{task}` on an empty dataset")));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.samples.chunks(EVAL_CHUNK) {
        let batch = Batch::from_samples(chunk);
        let graph = Graph::new();
        let out = model.read(&graph, registry, task, &batch, ReadOptions::default())?;
        let logits = out.logits.value();
        loss += logits.cross_entropy_rows(&batch.labels)?.iter().sum::<f64>();
        correct += logits.argmax_rows().iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    let n = data.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n })
}
