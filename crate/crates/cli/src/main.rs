//! `prawn`: train, evaluate, adapt and analyze multi-task models from a JSON
//! config. Exit code 0 on success, 1 on configuration errors, 2 on runtime
//! errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prawn::datakit::{gen_synthetic_task, write_dense_csv, DataFormat, DatasetManifest, ManifestTask};
use prawn::harness::{
    adapt_csv, eval_checkpoint, load_data, load_units, metrics_jsonl, neuron_feature_stat, out_of_task_adapt, pca_trajectory, run,
    run_weights, write_run, ExperimentConfig, HarnessError, TrajectoryLog,
};

#[derive(Parser)]
#[command(name = "prawn", version, about = "Multi-task parameter read-write networks with gradient passing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs; also where checkpoints are read from.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write metrics and checkpoints.
    Train(Common),
    /// Evaluate saved checkpoints on the dev and test splits.
    Eval(Common),
    /// Fine-tune a saved model's shared encoder on held-out tasks.
    Adapt(Common),
    /// Estimate the task weight matrix from single-task base models.
    Weights(Common),
    #[command(subcommand)]
    Analyze(Analysis),
    /// Write the configured synthetic tasks as dense CSV files plus a manifest;
    /// `--seed` overrides the generator seed.
    SynthGen(Common),
}

#[derive(Subcommand)]
enum Analysis {
    /// Project the logged parameter trajectory onto its principal components.
    Pca(Common),
    /// Per-word neuron statistic for a text model.
    Neurons(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train(c) => {
            let config = load(&c)?;
            let record = run(&config)?;
            write_run(&config, &record, &c.out_dir)?;
            for (task, acc) in &record.final_test {
                println!("{task}\ttest_accuracy={acc:.6}");
            }
        }
        Command::Eval(c) => {
            let config = load(&c)?;
            let lines = eval_checkpoint(&config, &c.out_dir)?;
            let text = metrics_jsonl(&lines);
            write(&c.out_dir.join("eval.jsonl"), &text)?;
            print!("{text}");
        }
        Command::Adapt(c) => {
            let config = load(&c)?;
            let data = load_data(&config)?;
            if data.held_out.is_empty() {
                return Err(HarnessError::Config("data: adapt needs held-out tasks".into()));
            }
            let units = load_units(&config, &data, &c.out_dir)?;
            let mut points = Vec::new();
            for task in &data.held_out {
                points.extend(out_of_task_adapt(
                    &config,
                    &data,
                    &units[0].model,
                    &units[0].registry,
                    task,
                    &config.evaluation.counts,
                    config.seed,
                )?);
            }
            let text = adapt_csv(&points);
            write(&c.out_dir.join("adapt.csv"), &text)?;
            print!("{text}");
        }
        Command::Weights(c) => {
            let config = load(&c)?;
            let data = load_data(&config)?;
            let (w, _) = run_weights(&config, &data)?;
            let text = w.to_csv();
            write(&c.out_dir.join("weights.csv"), &text)?;
            print!("{text}");
        }
        Command::Analyze(Analysis::Pca(c)) => {
            let config = load(&c)?;
            let path = c.out_dir.join("trajectory.jsonl");
            let text = fs::read_to_string(&path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?;
            let result = pca_trajectory(&TrajectoryLog::from_jsonl(&text)?, config.analysis.pca_dims)?;
            for w in result.warnings() {
                eprintln!("warning: {w}");
            }
            write(&c.out_dir.join("pca.csv"), &result.to_csv())?;
        }
        Command::Analyze(Analysis::Neurons(c)) => {
            let config = load(&c)?;
            let data = load_data(&config)?;
            let units = load_units(&config, &data, &c.out_dir)?;
            let tests: Vec<_> = data.train_tasks.iter().map(|t| &t.test).collect();
            let report = neuron_feature_stat(&units[0].model, &units[0].registry, &tests, config.analysis.top_k)?;
            write(&c.out_dir.join("neurons.csv"), &report.to_csv())?;
            write(&c.out_dir.join("neurons.json"), &report.to_json())?;
            print!("{}", report.to_csv());
        }
        Command::SynthGen(c) => {
            let config = load(&c)?;
            let mut spec = config
                .data
                .synthetic
                .clone()
                .ok_or_else(|| HarnessError::Config("data.synthetic: synth-gen needs a synthetic data source".into()))?;
            if let Some(seed) = c.seed {
                spec.seed = seed;
            }
            fs::create_dir_all(&c.out_dir)?;
            let mut tasks = Vec::new();
            for i in 0..spec.num_tasks + config.data.held_out_tasks {
                let ds = gen_synthetic_task(&spec, i)?;
                let file = PathBuf::from(format!("{}.csv", ds.task_id));
                write_dense_csv(&ds, &c.out_dir.join(&file))?;
                tasks.push(ManifestTask {
                    id: ds.task_id.clone(),
                    path: file,
                    format: DataFormat::Dense,
                    num_classes: ds.num_classes,
                    counts: None,
                });
            }
            DatasetManifest { tasks, min_count: 1 }.write(&c.out_dir.join("manifest.json"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
