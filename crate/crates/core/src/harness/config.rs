use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commpass::{CommMode, MetaConfig, SharedUpdate};
use crate::datakit::{SplitCounts, SyntheticSpec};
use crate::readops::{Activation, ReadOpKind};
use crate::writeops::{Constraints, LossWeights, OptimizerConfig};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "PGP-FR")]
    PgpFr,
    #[serde(rename = "PGP-SR")]
    PgpSr,
    #[serde(rename = "LGP-FR")]
    LgpFr,
    #[serde(rename = "LGP-SR")]
    LgpSr,
    #[serde(rename = "single-task")]
    SingleTask,
}

impl ModelKind {
    pub fn read_op(self) -> ReadOpKind {
        match self {
            ModelKind::Fr | ModelKind::PgpFr | ModelKind::LgpFr => ReadOpKind::Flat,
            _ => ReadOpKind::Star,
        }
    }

    pub fn comm_mode(self) -> Option<CommMode> {
        match self {
            ModelKind::PgpFr | ModelKind::PgpSr => Some(CommMode::Pairwise),
            ModelKind::LgpFr | ModelKind::LgpSr => Some(CommMode::Listwise),
            _ => None,
        }
    }

    pub fn constraints(self, grl_lambda: f64) -> Constraints {
        match self {
            ModelKind::Asr => Constraints { adversarial: true, orthogonal: true, grl_lambda },
            _ => Constraints { grl_lambda, ..Constraints::NONE },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fr => "FR",
            ModelKind::Sr => "SR",
            ModelKind::Asr => "ASR",
            ModelKind::PgpFr => "PGP-FR",
            ModelKind::PgpSr => "PGP-SR",
            ModelKind::LgpFr => "LGP-FR",
            ModelKind::LgpSr => "LGP-SR",
            ModelKind::SingleTask => "single-task",
        }
    }
}

/// Exactly one of `synthetic` and `manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Path of a dataset manifest; relative to the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Synthetic only: extra tasks of the same family held out of training.
    #[serde(default)]
    pub held_out_tasks: usize,
    /// Manifest only: task ids held out of training.
    #[serde(default)]
    pub held_out_ids: Vec<String>,
    #[serde(default)]
    pub split: Option<SplitCounts>,
    #[serde(default = "one_usize")]
    pub min_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default = "default_shared_widths")]
    pub shared_widths: Vec<usize>,
    #[serde(default = "default_private_widths")]
    pub private_widths: Vec<usize>,
    /// Text inputs only.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            shared_widths: default_shared_widths(),
            private_widths: default_private_widths(),
            embed_dim: default_embed_dim(),
            activation: Activation::default(),
        }
    }
}

/// Gradient-passing settings; the communication mode follows the model kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSettings {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub first_order: bool,
    #[serde(default)]
    pub shared_update: SharedUpdate,
    #[serde(default)]
    pub partner_seed: u64,
}

impl Default for MetaSettings {
    fn default() -> Self {
        Self { alpha: default_alpha(), first_order: false, shared_update: SharedUpdate::default(), partner_seed: 0 }
    }
}

impl MetaSettings {
    pub fn with_mode(&self, mode: CommMode) -> MetaConfig {
        MetaConfig {
            alpha: self.alpha,
            first_order: self.first_order,
            mode,
            shared_update: self.shared_update,
            partner_seed: self.partner_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSource {
    /// CSV written by the `weights` command.
    File(PathBuf),
    /// Train single-task base models and transform their cross accuracies.
    Estimate {
        #[serde(default = "default_q_exp")]
        q_exp: f64,
        #[serde(default)]
        epochs: Option<usize>,
    },
    /// Every weight 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSetting {
    #[default]
    InTask,
    OutOfTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub setting: EvalSetting,
    #[serde(default = "default_counts")]
    pub counts: Vec<usize>,
    #[serde(default = "default_adapt_epochs")]
    pub adapt_epochs: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { setting: EvalSetting::InTask, counts: default_counts(), adapt_epochs: default_adapt_epochs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_pca_dims")]
    pub pca_dims: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { pca_dims: default_pca_dims(), top_k: default_top_k() }
    }
}

/// One experiment. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub data: DataConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub meta: MetaSettings,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "one_f64")]
    pub grl_lambda: f64,
    #[serde(default)]
    pub weights: Option<WeightSource>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Record per-epoch parameter copies for trajectory analysis.
    #[serde(default)]
    pub log_trajectory: bool,
    /// Directory that relative paths resolve against; set when loading.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_shared_widths() -> Vec<usize> {
    vec![16]
}

fn default_private_widths() -> Vec<usize> {
    vec![8]
}

fn default_embed_dim() -> usize {
    16
}

fn default_alpha() -> f64 {
    0.1
}

fn default_q_exp() -> f64 {
    2.0
}

fn default_counts() -> Vec<usize> {
    (1..=10).map(|i| i * 100).collect()
}

fn default_adapt_epochs() -> usize {
    10
}

fn default_pca_dims() -> usize {
    3
}

fn default_top_k() -> usize {
    10
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    crate::datakit::DEFAULT_BATCH_SIZE
}

impl ExperimentConfig {
    /// Parses JSON; errors carry the path of the offending field.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut config: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config(format!("{}: {}", e.path(), e.inner())))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        let d = &self.data;
        match (&d.synthetic, &d.manifest) {
            (Some(spec), None) => {
                if let Err(e) = spec.validate() {
                    return err(format!("data.synthetic: {e}"));
                }
                if !d.held_out_ids.is_empty() {
                    return err("data.held_out_ids: only for manifest data; use data.held_out_tasks".into());
                }
            }
            (None, Some(_)) => {
                if d.held_out_tasks != 0 {
                    return err("data.held_out_tasks: only for synthetic data; use data.held_out_ids".into());
                }
            }
            _ => return err("data: set exactly one of `synthetic` and `manifest`".into()),
        }
        let a = &self.architecture;
        if a.shared_widths.is_empty() || a.shared_widths.contains(&0) {
            return err("architecture.shared_widths: must be non-empty and positive".into());
        }
        if a.private_widths.is_empty() || a.private_widths.contains(&0) {
            return err("architecture.private_widths: must be non-empty and positive".into());
        }
        if a.embed_dim == 0 {
            return err("architecture.embed_dim: must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size: must be positive".into());
        }
        if let Err(e) = self.optimizer.validate() {
            return err(format!("optimizer: {e}"));
        }
        if let Err(e) = self.loss_weights.validate() {
            return err(e);
        }
        if !(self.grl_lambda >= 0.0) {
            return err("grl_lambda: must be non-negative".into());
        }
        if let Err(e) = self.meta.with_mode(CommMode::Pairwise).validate() {
            return err(e);
        }
        if self.model.comm_mode() == Some(CommMode::Listwise) && self.weights.is_none() {
            return err(format!("weights: {} needs a weight matrix source (file, estimate or uniform)", self.model.name()));
        }
        if let Some(WeightSource::Estimate { q_exp, .. }) = &self.weights {
            if !(*q_exp > 0.0) {
                return err("weights.estimate.q_exp: must be positive".into());
            }
        }
        if self.model.comm_mode().is_some() && self.training_task_count() < 2 {
            return err(format!("model: {} needs at least 2 training tasks", self.model.name()));
        }
        if self.evaluation.counts.is_empty() || self.evaluation.counts.contains(&0) {
            return err("evaluation.counts: sample counts must be positive".into());
        }
        if self.analysis.pca_dims == 0 || self.analysis.top_k == 0 {
            return err("analysis: pca_dims and top_k must be positive".into());
        }
        Ok(())
    }

    /// Training tasks, when known without reading data files.
    fn training_task_count(&self) -> usize {
        match &self.data.synthetic {
            Some(spec) => spec.num_tasks,
            None => usize::MAX,
        }
    }
}
