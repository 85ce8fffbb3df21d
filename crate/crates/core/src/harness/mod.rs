//! Experiment runner: configuration, the model zoo, out-of-task adaptation
//! and the trajectory and neuron analyses.

mod config;
mod experiment;
mod neurons;
mod pca;

pub use config::{
    AnalysisConfig, ArchitectureConfig, DataConfig, EvalSetting, EvaluationConfig, ExperimentConfig, MetaSettings, ModelKind, WeightSource,
};
pub use experiment::{
    adapt_csv, build_model, checkpoint_path, eval_checkpoint, load_data, load_units, metrics_jsonl, model_spec, out_of_task_adapt, run,
    run_weights, write_run, AdaptPoint, LoadedData, MetricLine, MetricsRecord, TrainedUnit, TrajectoryLog,
};
pub use neurons::{neuron_feature_stat, NeuronReport, WordStat};
pub use pca::{pca_trajectory, power_eigen, PcaResult};

use crate::datakit::DataError;
use crate::readops::ModelError;
use crate::registry::RegistryError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for everything that fails later.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<RegistryError> for HarnessError {
    fn from(e: RegistryError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<crate::TensorError> for HarnessError {
    fn from(e: crate::TensorError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}
