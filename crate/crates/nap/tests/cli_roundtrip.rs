//! End-to-end checks of the command layer: generate tasks, train, resume,
//! evaluate, all through the public command functions.

use std::path::Path;

use nap::checkpoint;
use nap::cli::{cmd_eval, cmd_gen_tasks, cmd_train, RunConfig};
use nap::tasks::KernelKind;

fn tiny_config(iterations: usize) -> RunConfig {
    let mut config = RunConfig::desk();
    config.embed_dim = 8;
    config.ff_dim = 16;
    config.layers = 1;
    config.heads = 2;
    config.bucket_count = 8;
    config.learning_rate = 1e-3;
    config.iterations = iterations;
    config.horizon = 4;
    config.trajectories_per_iteration = 2;
    config.minibatch = 8;
    config.ppo_epochs_per_iteration = 1;
    config.validation_interval = 2;
    config.n_init_validation = 2;
    config.seed = 7;
    config
}

fn metrics_lines(out: &Path) -> Vec<String> {
    std::fs::read_to_string(out.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn train_writes_one_metrics_row_per_iteration_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let tasks_dir = dir.path().join("tasks");
    cmd_gen_tasks(5, 6, 16, 1, KernelKind::Matern52, &tasks_dir, false, None, (0.05, 0.5)).unwrap();
    let manifest = tasks_dir.join("manifest.json");

    // straight run: 4 iterations → header + 4 rows, final counter at 4
    let config_path = dir.path().join("config.json");
    tiny_config(4).save(&config_path).unwrap();
    let out_a = dir.path().join("run_a");
    cmd_train(&config_path, Some(&manifest), Some(&out_a), false, None).unwrap();
    let lines = metrics_lines(&out_a);
    assert_eq!(lines.len(), 5, "header + one row per iteration");
    let final_a = checkpoint::load(&out_a.join("final.ckpt")).unwrap();
    assert_eq!(final_a.iteration, 4);

    // interrupted run: 2 iterations, then the config grows to 4 and the run
    // resumes from last.ckpt, continuing the iteration counter
    let out_b = dir.path().join("run_b");
    tiny_config(2).save(&config_path).unwrap();
    cmd_train(&config_path, Some(&manifest), Some(&out_b), false, None).unwrap();
    assert_eq!(metrics_lines(&out_b).len(), 3);
    tiny_config(4).save(&config_path).unwrap();
    cmd_train(&config_path, Some(&manifest), Some(&out_b), true, None).unwrap();
    let lines = metrics_lines(&out_b);
    assert_eq!(lines.len(), 5, "resume appends the remaining iterations");
    let iterations: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(iterations, ["0", "1", "2", "3"]);
    let final_b = checkpoint::load(&out_b.join("final.ckpt")).unwrap();
    assert_eq!(final_b.iteration, 4);
    assert_eq!(final_b.mode, final_a.mode);

    // evaluating with the checkpoint produces the expected row count:
    // methods × test tasks × seeds × budget
    let eval_out = dir.path().join("eval");
    cmd_eval(
        Some(&out_a.join("final.ckpt")),
        &manifest,
        6,
        2,
        2,
        &["nap".to_string(), "random".to_string()],
        &eval_out,
        None,
    )
    .unwrap();
    let rows = std::fs::read_to_string(eval_out.join("regret.csv")).unwrap();
    assert_eq!(rows.lines().count() - 1, 2 * 1 * 2 * 6);
    assert!(eval_out.join("regret.svg").exists());
}

#[test]
fn resume_without_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let tasks_dir = dir.path().join("tasks");
    cmd_gen_tasks(5, 4, 8, 1, KernelKind::Matern52, &tasks_dir, false, None, (0.05, 0.5)).unwrap();
    let config_path = dir.path().join("config.json");
    tiny_config(2).save(&config_path).unwrap();
    let out = dir.path().join("run");
    let err = cmd_train(
        &config_path,
        Some(&tasks_dir.join("manifest.json")),
        Some(&out),
        true,
        None,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
