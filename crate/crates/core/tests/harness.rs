use std::path::Path;

use prawn::commpass::{derive_seed, train_single_task, BaseModelConfig, TaskSplits, TrainerConfig};
use prawn::datakit::{gen_synthetic, split, SyntheticSpec};
use prawn::harness::{
    load_data, load_units, out_of_task_adapt, pca_trajectory, run, write_run, ExperimentConfig, HarnessError, TrajectoryLog,
};
use prawn::readops::{evaluate, Activation, EncoderSpec, ModelSpec, ReadOpKind};

fn config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::from_json(text, Path::new("."))
}

fn synthetic(model: &str, seed: u64, sigma_p: f64, noise: f64, extra: &str) -> ExperimentConfig {
    config(&format!(
        r#"{{"model": "{model}",
            "data": {{"synthetic": {{"num_tasks": 3, "input_dim": 10, "rank": 2, "sigma_p": {sigma_p}, "label_noise": {noise}, "samples_per_task": 600, "seed": {seed}}}, "held_out_tasks": 1}},
            "epochs": 4, "seed": {seed}, "weights": "uniform" {extra}}}"#
    ))
    .unwrap()
}

#[test]
fn single_task_on_separable_data_regression_baseline() {
    let mut c = synthetic("single-task", 1, 0.0, 0.0, "");
    c.epochs = 10;
    let record = run(&c).unwrap();
    let acc = record.final_test["task0"];
    assert!(acc > 0.95, "{acc}");
    // Frozen from the first run at this seed.
    assert_eq!(acc, 115.0 / 120.0);
    assert_eq!(record.units.len(), 3);
}

#[test]
fn shared_labeling_transfers_between_tasks() {
    let spec = SyntheticSpec {
        num_tasks: 2,
        input_dim: 10,
        num_classes: 2,
        rank: 2,
        sigma_p: 0.0,
        label_noise: 0.0,
        samples_per_task: 2000,
        seed: 3,
    };
    let tasks: Vec<TaskSplits> = gen_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|d| {
            let (train, dev, test) = split(&d, None, 3).unwrap();
            TaskSplits { train, dev, test }
        })
        .collect();
    let base = BaseModelConfig {
        spec: ModelSpec {
            read_op: ReadOpKind::Star,
            shared: EncoderSpec::mlp(10, &[16], Activation::Tanh),
            private: Some(EncoderSpec::mlp(10, &[8], Activation::Tanh)),
        },
        epochs: 10,
        trainer: TrainerConfig::default(),
        seed: 3,
    };
    let (model, registry) = train_single_task(&tasks[0], &base).unwrap();
    let acc = evaluate(&model, &registry, "task0", &tasks[1].test).unwrap().accuracy;
    assert!(acc > 0.95, "{acc}");
}

#[test]
fn unknown_model_kind_is_a_config_error() {
    let e = config(
        r#"{"model": "XR", "data": {"synthetic": {"num_tasks": 2, "input_dim": 3, "rank": 1, "sigma_p": 0, "label_noise": 0, "seed": 0}}}"#,
    )
    .unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("model"), "{e}");
}

#[test]
fn config_errors_name_the_field() {
    let e = config(r#"{"model": "FR", "data": {"synthetic": {"num_tasks": 2, "input_dim": 3, "rank": 1, "sigma_p": 0, "label_noise": 0, "seed": 0, "bogus": 1}}}"#)
        .unwrap_err();
    assert!(e.to_string().contains("data.synthetic"), "{e}");
    let e = config(r#"{"model": "LGP-FR", "data": {"synthetic": {"num_tasks": 2, "input_dim": 3, "rank": 1, "sigma_p": 0, "label_noise": 0, "seed": 0}}}"#)
        .unwrap_err();
    assert!(e.to_string().contains("weights"), "{e}");
    let e = config(r#"{"model": "PGP-SR", "data": {"synthetic": {"num_tasks": 1, "input_dim": 3, "rank": 1, "sigma_p": 0, "label_noise": 0, "seed": 0}}}"#)
        .unwrap_err();
    assert!(e.to_string().contains("at least 2"), "{e}");
    let e = config(r#"{"model": "FR", "data": {"synthetic": {"num_tasks": 2, "input_dim": 3, "rank": 1, "sigma_p": 0, "label_noise": 0, "seed": 0}}, "evaluation": {"counts": [0]}}"#)
        .unwrap_err();
    assert!(e.to_string().contains("evaluation.counts"), "{e}");
}

#[test]
fn defaults_sweep_one_hundred_to_one_thousand() {
    let c = synthetic("FR", 0, 0.3, 0.0, "");
    assert_eq!(c.evaluation.counts, (1..=10).map(|i| i * 100).collect::<Vec<_>>());
}

#[test]
fn fr_and_inert_gradient_passing_agree() {
    let plain = run(&synthetic("FR", 2, 0.3, 0.05, "")).unwrap();
    let inert = run(&synthetic("PGP-FR", 2, 0.3, 0.05, r#", "loss_weights": {"gp": 0.0}, "meta": {"alpha": 0.0}"#)).unwrap();
    assert_eq!(plain.metrics_jsonl(), inert.metrics_jsonl());
}

#[test]
fn accuracies_are_probabilities_and_dev_selection_is_recorded() {
    let r = run(&synthetic("ASR", 4, 0.3, 0.05, "")).unwrap();
    assert!(r.lines.iter().all(|l| (0.0..=1.0).contains(&l.accuracy)));
    assert_eq!(r.lines.len(), 4 * 3 * 3);
    assert!(r.best_epoch["ASR"] <= 4);
}

#[test]
fn adaptation_rejects_bad_counts() {
    let c = synthetic("PGP-FR", 5, 0.3, 0.05, "");
    let r = run(&c).unwrap();
    let data = load_data(&c).unwrap();
    let unit = &r.units[0];
    let held = &data.held_out[0];
    let zero = out_of_task_adapt(&c, &data, &unit.model, &unit.registry, held, &[0], 1).unwrap_err();
    assert_eq!(zero.exit_code(), 1);
    let n = held.train.len() + 1;
    let too_many = out_of_task_adapt(&c, &data, &unit.model, &unit.registry, held, &[n], 1).unwrap_err();
    assert_eq!(too_many.exit_code(), 2);
}

#[test]
fn trained_checkpoint_adapts_better_than_random() {
    let mut trained = 0.0;
    let mut random = 0.0;
    for seed in 1..=5 {
        let text = |epochs: usize| {
            format!(
                r#"{{"model": "PGP-FR",
                    "data": {{"synthetic": {{"num_tasks": 5, "input_dim": 20, "rank": 2, "sigma_p": 0.3, "label_noise": 0.05, "seed": {seed}}}, "held_out_tasks": 2}},
                    "epochs": {epochs}, "seed": {seed}, "evaluation": {{"setting": "out-of-task", "counts": [100]}}}}"#
            )
        };
        let mean = |epochs| {
            let r = run(&config(&text(epochs)).unwrap()).unwrap();
            r.adapt.iter().map(|p| p.accuracy).sum::<f64>() / r.adapt.len() as f64
        };
        trained += mean(10) / 5.0;
        random += mean(0) / 5.0;
    }
    assert!(trained > random, "trained {trained} vs random {random}");
}

#[test]
fn checkpoints_round_trip_and_single_task_writes_one_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let c = synthetic("single-task", 6, 0.3, 0.05, "");
    let r = run(&c).unwrap();
    write_run(&c, &r, dir.path()).unwrap();
    for t in 0..3 {
        assert!(dir.path().join(format!("checkpoint-task{t}.bin")).exists());
    }
    let data = load_data(&c).unwrap();
    let units = load_units(&c, &data, dir.path()).unwrap();
    for (a, b) in r.units.iter().zip(&units) {
        let task = &a.model.task_ids()[0];
        let split = &data.train_tasks.iter().find(|t| &t.train.task_id == task).unwrap().test;
        let (x, y) = (evaluate(&a.model, &a.registry, task, split).unwrap(), evaluate(&b.model, &b.registry, task, split).unwrap());
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    assert!(load_units(&synthetic("FR", 6, 0.3, 0.05, ""), &data, dir.path()).is_err());
}

#[test]
fn trajectory_log_feeds_pca() {
    let c = synthetic("SR", 7, 0.3, 0.05, r#", "log_trajectory": true"#);
    let r = run(&c).unwrap();
    let log = r.trajectory.unwrap();
    assert_eq!(log.groups.len(), 4);
    assert!(log.groups.values().all(|rows| rows.len() == 5 && rows.iter().all(|v| v.len() == rows[0].len())));
    let parsed = TrajectoryLog::from_jsonl(&log.to_jsonl()).unwrap();
    assert_eq!(parsed, log);
    let pca = pca_trajectory(&log, 3).unwrap();
    let csv = pca.to_csv();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4 * 5);
}

#[test]
fn split_seed_is_derived_from_the_run_seed() {
    let a = load_data(&synthetic("FR", 8, 0.3, 0.05, "")).unwrap();
    let mut c = synthetic("FR", 8, 0.3, 0.05, "");
    c.seed = derive_seed(8, 1);
    let b = load_data(&c).unwrap();
    let ids = |d: &prawn::harness::LoadedData| d.train_tasks[0].test.samples.iter().map(|s| s.id).collect::<Vec<_>>();
    assert_ne!(ids(&a), ids(&b));
}
