//! Run configuration and the command implementations behind the `nap`
//! binary. Each command is a plain function so the behavior is testable
//! without spawning a process.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::{ModelConfig, ModelParams, PolicyMode};
use crate::baselines::{GpEi, NapPolicy, NpEi, Optimizer, RandomSearch};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::evaluate::{aggregate, emit, run_bo, EvalError, RegretCurve};
use crate::sparsity::{
    exact_record_distribution, harmonic, monte_carlo_records, policy_record_profile,
    SparsityError, MAX_ENUMERATION_T,
};
use crate::tasks::{
    denormalize, gp_fit, synthetic_family, write_task_csv, KernelKind, Manifest, ManifestEntry,
    TaskDataset, TaskError,
};
use crate::trainer::{MetricsRow, TrainConfig, TrainError, TrainMode, Trainer};

/// Lengthscale range for generated synthetic tasks.
pub const SYNTHETIC_LENGTHSCALES: (f64, f64) = (0.05, 0.5);

/// Errors grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit code 2: flags or config files that fail validation.
    #[error("config error: {0}")]
    Config(String),
    /// Exit code 3: missing, malformed, or inconsistent data on disk.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 4: numeric failure during compute.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn task_error_to_cli(e: &TaskError) -> CliError {
    match e {
        TaskError::CholeskyFailure { .. } | TaskError::NonFinite(_) => {
            CliError::Numeric(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        task_error_to_cli(&e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Task(t) => task_error_to_cli(t),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SparsityError> for CliError {
    fn from(e: SparsityError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_data(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Resolves the effective global seed: explicit flag, then the NAP_SEED
/// environment variable, then `default`.
pub fn effective_seed(flag: Option<u64>, default: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("NAP_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|e| CliError::Config(format!("NAP_SEED={text}: {e}"))),
        Err(_) => Ok(default),
    }
}

/// Flat run configuration file. Unknown keys are rejected so typos fail
/// loudly before any compute starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model extents
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub bucket_count: usize,
    pub dropout: f64,
    // training schedule
    pub learning_rate: f64,
    pub iterations: usize,
    pub horizon: usize,
    pub trajectories_per_iteration: usize,
    pub minibatch: usize,
    pub lambda_aux: f64,
    pub value_loss_weight: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub grad_clip_l2: f64,
    pub temperature: f64,
    pub ppo_epochs_per_iteration: usize,
    pub validation_interval: usize,
    pub n_init_train: usize,
    pub n_init_validation: usize,
    pub mode: TrainMode,
    pub augmentation: bool,
    pub augment_perturb: f64,
    pub augment_points: usize,
    pub seed: u64,
    /// Task manifest path; the --tasks flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Output directory; the --out flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig::from_parts(&ModelConfig::desk(1), &TrainConfig::desk())
    }

    pub fn paper() -> Self {
        RunConfig::from_parts(&ModelConfig::paper(1), &TrainConfig::paper())
    }

    fn from_parts(model: &ModelConfig, train: &TrainConfig) -> Self {
        RunConfig {
            embed_dim: model.embed_dim,
            ff_dim: model.ff_dim,
            layers: model.layers,
            heads: model.heads,
            bucket_count: model.bucket_count,
            dropout: model.dropout,
            learning_rate: train.learning_rate,
            iterations: train.iterations,
            horizon: train.horizon,
            trajectories_per_iteration: train.trajectories_per_iteration,
            minibatch: train.minibatch,
            lambda_aux: train.lambda_aux,
            value_loss_weight: train.value_loss_weight,
            gae_lambda: train.gae_lambda,
            gamma: train.gamma,
            clip_epsilon: train.clip_epsilon,
            grad_clip_l2: train.grad_clip_l2,
            temperature: train.temperature,
            ppo_epochs_per_iteration: train.ppo_epochs_per_iteration,
            validation_interval: train.validation_interval,
            n_init_train: train.n_init_train,
            n_init_validation: train.n_init_validation,
            mode: train.mode,
            augmentation: train.augmentation,
            augment_perturb: train.augment_perturb,
            augment_points: train.augment_points,
            seed: train.seed,
            tasks: None,
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_data(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| io_data(path, e))
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            embed_dim: self.embed_dim,
            ff_dim: self.ff_dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            bucket_count: self.bucket_count,
            softmax_temperature_train: self.temperature,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            horizon: self.horizon,
            trajectories_per_iteration: self.trajectories_per_iteration,
            minibatch: self.minibatch,
            lambda_aux: self.lambda_aux,
            value_loss_weight: self.value_loss_weight,
            gae_lambda: self.gae_lambda,
            gamma: self.gamma,
            clip_epsilon: self.clip_epsilon,
            grad_clip_l2: self.grad_clip_l2,
            temperature: self.temperature,
            ppo_epochs_per_iteration: self.ppo_epochs_per_iteration,
            validation_interval: self.validation_interval,
            n_init_train: self.n_init_train,
            n_init_validation: self.n_init_validation,
            mode: self.mode,
            augmentation: self.augmentation,
            augment_perturb: self.augment_perturb,
            augment_points: self.augment_points,
            seed: self.seed,
        }
    }

    /// Collects every validation failure before reporting, so a bad config
    /// is fixed in one round.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errors = Vec::new();
        if let Err(e) = self.model_config(1).validate() {
            errors.push(e);
        }
        if let Err(e) = self.train_config().validate() {
            errors.push(e);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errors.join("; ")))
        }
    }
}

/// Generates a deterministic synthetic task family, writes one CSV per
/// task plus a manifest with an explicit train/validation/test split.
#[allow(clippy::too_many_arguments)]
pub fn cmd_gen_tasks(
    seed: u64,
    num_tasks: usize,
    points: usize,
    dim: usize,
    kernel: KernelKind,
    out: &Path,
    force: bool,
    split: Option<(usize, usize, usize)>,
    lengthscales: (f64, f64),
) -> Result<(), CliError> {
    if !(lengthscales.0 > 0.0 && lengthscales.0 < lengthscales.1) {
        return Err(CliError::Config(format!(
            "lengthscale range ({}, {}) must be positive and increasing",
            lengthscales.0, lengthscales.1
        )));
    }
    if num_tasks < 3 {
        return Err(CliError::Config(
            "need at least 3 tasks to populate all three splits".into(),
        ));
    }
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| io_data(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Data(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out).map_err(|e| io_data(out, e))?;
    }

    let (n_train, n_val, n_test) = match split {
        Some((a, b, c)) => {
            if a + b + c != num_tasks || a == 0 || b == 0 || c == 0 {
                return Err(CliError::Config(format!(
                    "split {a}/{b}/{c} must be positive and sum to {num_tasks}"
                )));
            }
            (a, b, c)
        }
        None => {
            // default 6/1/1 proportions
            let n_val = (num_tasks / 8).max(1);
            let n_test = (num_tasks / 8).max(1);
            (num_tasks - n_val - n_test, n_val, n_test)
        }
    };

    let tasks = synthetic_family(seed, num_tasks, points, dim, kernel, lengthscales);
    let mut entries = Vec::with_capacity(num_tasks);
    for task in &tasks {
        let raw = denormalize(task);
        let file = format!("{}.csv", task.id);
        write_task_csv(&raw, &out.join(&file))?;
        entries.push(ManifestEntry {
            id: task.id.clone(),
            file,
        });
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let manifest = Manifest {
        tasks: entries,
        train: ids[..n_train].to_vec(),
        validation: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "wrote {num_tasks} tasks ({n_train} train / {n_val} validation / {n_test} test) to {}",
        out.display()
    );
    Ok(())
}

fn check_dims(tasks: &[TaskDataset], label: &str) -> Result<usize, CliError> {
    let dim = tasks
        .first()
        .ok_or_else(|| CliError::Data(format!("{label} split is empty")))?
        .input_dim();
    for t in tasks {
        if t.input_dim() != dim {
            return Err(CliError::Data(format!(
                "task `{}` has input dimension {}, expected {dim}",
                t.id,
                t.input_dim()
            )));
        }
    }
    Ok(dim)
}

fn append_metrics(path: &Path, rows: &[MetricsRow], fresh: bool) -> Result<(), CliError> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_data(path, e))?;
    let mut write = |line: &str| {
        writeln!(file, "{line}").map_err(|e| io_data(path, e))
    };
    if fresh {
        write(MetricsRow::csv_header())?;
    }
    for row in rows {
        write(&row.to_csv())?;
    }
    Ok(())
}

/// Keeps the header plus the first `completed` data rows, dropping rows
/// from iterations past the checkpoint being resumed.
fn truncate_metrics(path: &Path, completed: usize) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_data(path, e))?;
    let kept: Vec<&str> = text.lines().take(completed + 1).collect();
    std::fs::write(path, kept.join("\n") + "\n").map_err(|e| io_data(path, e))
}

/// Trains per the run configuration, writing a metrics CSV with one row
/// per completed iteration plus `last.ckpt` / `best.ckpt` / `final.ckpt`.
pub fn cmd_train(
    config_path: &Path,
    tasks_flag: Option<&Path>,
    out_flag: Option<&Path>,
    resume: bool,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    config.seed = effective_seed(seed_flag, config.seed)?;
    let manifest_path = tasks_flag
        .map(Path::to_path_buf)
        .or(config.tasks.clone())
        .ok_or_else(|| CliError::Config("no task manifest (set --tasks or `tasks`)".into()))?;
    let out = out_flag
        .map(Path::to_path_buf)
        .or(config.out.clone())
        .ok_or_else(|| CliError::Config("no output directory (set --out or `out`)".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| io_data(&out, e))?;

    let manifest = Manifest::load(&manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let train_tasks = manifest.load_split(dir, &manifest.train)?;
    let validation_tasks = manifest.load_split(dir, &manifest.validation)?;
    let input_dim = check_dims(&train_tasks, "train")?;
    if !validation_tasks.is_empty() {
        let vdim = check_dims(&validation_tasks, "validation")?;
        if vdim != input_dim {
            return Err(CliError::Data(format!(
                "validation input dimension {vdim} does not match train dimension {input_dim}"
            )));
        }
    }

    let model_config = config.model_config(input_dim);
    let train_config = config.train_config();
    let metrics_path = out.join("metrics.csv");
    let last_path = out.join("last.ckpt");

    let mut fresh = true;
    let params;
    let mut resumed: Option<Checkpoint> = None;
    if resume {
        if !last_path.exists() {
            return Err(CliError::Data(format!(
                "--resume requested but {} does not exist",
                last_path.display()
            )));
        }
        let ckpt = checkpoint::load(&last_path)?;
        if ckpt.params.config() != &model_config {
            return Err(CliError::Config(
                "checkpoint model configuration does not match the run config".into(),
            ));
        }
        if ckpt.mode != train_config.mode {
            return Err(CliError::Config(format!(
                "checkpoint mode {} does not match config mode {}",
                ckpt.mode, train_config.mode
            )));
        }
        params = ckpt.params.clone();
        truncate_metrics(&metrics_path, ckpt.iteration)?;
        fresh = false;
        resumed = Some(ckpt);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        params = ModelParams::init(model_config.clone(), &mut rng);
    }

    config.save(&out.join("config.json"))?;
    let mut trainer = Trainer::new(train_config.clone(), params, train_tasks, validation_tasks)?;
    if let Some(ckpt) = resumed {
        trainer.iteration = ckpt.iteration;
        if let Some(adam) = ckpt.adam {
            trainer.adam = adam;
        }
        println!("resuming from iteration {}", trainer.iteration);
    }
    if fresh {
        append_metrics(&metrics_path, &[], true)?;
    }

    let save_ckpt = |trainer: &Trainer, path: &Path| -> Result<(), CliError> {
        checkpoint::save(
            &Checkpoint {
                mode: trainer.config.mode,
                iteration: trainer.iteration,
                seed: trainer.config.seed,
                params: trainer.params.clone(),
                adam: Some(trainer.adam.clone()),
            },
            path,
        )?;
        Ok(())
    };

    while trainer.iteration < trainer.config.iterations {
        let row = trainer.run_iteration()?;
        if let Some(regret) = row.val_regret {
            println!(
                "iteration {:>5}: validation regret {regret:.4}",
                row.iteration
            );
        }
        append_metrics(&metrics_path, &[row], false)?;
        if trainer.iteration % trainer.config.validation_interval == 0
            || trainer.iteration == trainer.config.iterations
        {
            save_ckpt(&trainer, &last_path)?;
        }
    }

    save_ckpt(&trainer, &out.join("final.ckpt"))?;
    let best_params = trainer
        .best
        .as_ref()
        .map(|(_, p)| p.clone())
        .unwrap_or_else(|| trainer.params.clone());
    checkpoint::save(
        &Checkpoint {
            mode: trainer.config.mode,
            iteration: trainer.iteration,
            seed: trainer.config.seed,
            params: best_params,
            adam: None,
        },
        &out.join("best.ckpt"),
    )?;
    println!("finished {} iterations; outputs in {}", trainer.iteration, out.display());
    Ok(())
}

/// Fits GP-EI's starting hyperparameters on the first training task, or
/// falls back to a generic prior when the fit fails or no training task
/// exists.
fn gp_ei_initial(
    train_tasks: &[TaskDataset],
    input_dim: usize,
    kernel: KernelKind,
) -> crate::tasks::GpHyperparams {
    for task in train_tasks.iter().take(1) {
        match gp_fit(task, kernel) {
            Ok(model) => return model.hyper,
            Err(err) => {
                eprintln!("warning: GP-EI prior fit on `{}` failed ({err})", task.id);
            }
        }
    }
    GpEi::default_hyper(input_dim, kernel)
}

/// Runs regret evaluation on the manifest's test split for each method and
/// writes `regret.csv` and `regret.svg` under `out`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    ckpt_path: Option<&Path>,
    manifest_path: &Path,
    budget: usize,
    n_init: usize,
    seeds: usize,
    methods: &[String],
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    if budget == 0 || seeds == 0 || methods.is_empty() {
        return Err(CliError::Config(
            "budget, seeds, and methods must be non-empty".into(),
        ));
    }
    for m in methods {
        if !["nap", "np-ei", "gp-ei", "random"].contains(&m.as_str()) {
            return Err(CliError::Config(format!(
                "unknown method `{m}` (expected nap, np-ei, gp-ei, or random)"
            )));
        }
    }
    let needs_ckpt = methods.iter().any(|m| m == "nap" || m == "np-ei");
    if needs_ckpt && ckpt_path.is_none() {
        return Err(CliError::Config(
            "methods nap and np-ei require --ckpt".into(),
        ));
    }
    let base_seed = effective_seed(seed_flag, 0)?;

    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let test_tasks = manifest.load_split(dir, &manifest.test)?;
    let input_dim = check_dims(&test_tasks, "test")?;

    let ckpt = match ckpt_path {
        Some(path) => {
            let c = checkpoint::load(path)?;
            let model_dim = c.params.config().input_dim;
            if model_dim != input_dim {
                return Err(CliError::Data(format!(
                    "checkpoint input dimension {model_dim} does not match task dimension {input_dim}"
                )));
            }
            Some(c)
        }
        None => None,
    };

    let kernel = KernelKind::Matern52;
    let gp_prior = if methods.iter().any(|m| m == "gp-ei") {
        let train_tasks = manifest.load_split(dir, &manifest.train)?;
        Some(gp_ei_initial(&train_tasks, input_dim, kernel))
    } else {
        None
    };

    std::fs::create_dir_all(out).map_err(|e| io_data(out, e))?;
    let mut curves: Vec<RegretCurve> = Vec::new();
    for method in methods {
        for task in &test_tasks {
            for s in 0..seeds {
                // shared seed per (task, s) so every method starts from the
                // same initial design
                let seed = base_seed + s as u64;
                let mut optimizer: Box<dyn Optimizer> = match method.as_str() {
                    "random" => Box::new(RandomSearch),
                    "gp-ei" => Box::new(GpEi::new(gp_prior.clone().expect("prior fitted"))),
                    "np-ei" => Box::new(NpEi {
                        params: &ckpt.as_ref().expect("checkpoint loaded").params,
                    }),
                    "nap" => Box::new(NapPolicy {
                        params: &ckpt.as_ref().expect("checkpoint loaded").params,
                    }),
                    _ => unreachable!("methods validated above"),
                };
                curves.push(run_bo(
                    optimizer.as_mut(),
                    method,
                    task,
                    budget,
                    n_init,
                    seed,
                )?);
            }
        }
    }
    let (csv, svg) = emit(&curves, out)?;
    println!("final normalized regret (mean ± 95% interval):");
    for agg in aggregate(&curves) {
        let last = agg.mean.len() - 1;
        println!(
            "  {:<8} {:.4} ± {:.4}  ({} episodes)",
            agg.method, agg.mean[last], agg.half_width[last], agg.curves
        );
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

/// One row of the sparsity report.
#[derive(Debug, Clone)]
pub struct SparsityRow {
    pub t: usize,
    pub exact_mean: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub trials: usize,
    pub tv_to_exact: Option<f64>,
    pub policy_mean: Option<f64>,
}

/// Record-count statistics per horizon: exact harmonic mean, Monte Carlo
/// mean ± stderr, optionally total-variation distance to the exact
/// distribution and the trained policy's profile.
pub fn sparsity_report(
    horizons: &[usize],
    trials: usize,
    exact: bool,
    ckpt: Option<&Checkpoint>,
    seed: u64,
) -> Result<Vec<SparsityRow>, CliError> {
    if horizons.is_empty() {
        return Err(CliError::Config("no horizons given".into()));
    }
    if trials == 0 {
        return Err(CliError::Config("trials must be positive".into()));
    }
    if exact {
        if let Some(&t) = horizons.iter().find(|&&t| t > MAX_ENUMERATION_T) {
            return Err(CliError::Config(format!(
                "--exact supports T <= {MAX_ENUMERATION_T}, got {t}"
            )));
        }
    }
    let policy_tasks: Option<Vec<TaskDataset>> = ckpt.map(|c| {
        synthetic_family(
            seed,
            8,
            64,
            c.params.config().input_dim,
            KernelKind::Matern52,
            SYNTHETIC_LENGTHSCALES,
        )
    });
    let mut rows = Vec::with_capacity(horizons.len());
    for &t in horizons {
        if t == 0 {
            return Err(CliError::Config("horizon T must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let (mc_mean, mc_dist) = monte_carlo_records(t, t, trials, &mut rng)?;
        // stderr of the mean from the empirical record-count distribution
        let probs: Vec<f64> = mc_dist
            .probability
            .iter()
            .map(|p| {
                use num::ToPrimitive;
                p.to_f64().expect("probability fits in f64")
            })
            .collect();
        let e2: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, p)| ((i + 1) * (i + 1)) as f64 * p)
            .sum();
        let mc_stderr = ((e2 - mc_mean * mc_mean).max(0.0) / trials as f64).sqrt();
        let tv_to_exact = if exact {
            Some(exact_record_distribution(t)?.total_variation(&mc_dist))
        } else {
            None
        };
        let policy_mean = match (&ckpt, &policy_tasks) {
            (Some(c), Some(tasks)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f6c696379);
                let profile_trials = trials.min(1000);
                Some(
                    policy_record_profile(
                        &c.params,
                        tasks,
                        t,
                        PolicyMode::Argmax,
                        profile_trials,
                        &mut rng,
                    )
                    .map_err(|e| CliError::Data(e.to_string()))?,
                )
            }
            _ => None,
        };
        rows.push(SparsityRow {
            t,
            exact_mean: harmonic(t),
            mc_mean,
            mc_stderr,
            trials,
            tv_to_exact,
            policy_mean,
        });
    }
    Ok(rows)
}

pub fn cmd_sparsity(
    horizons: &[usize],
    trials: usize,
    exact: bool,
    ckpt_path: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let seed = effective_seed(seed_flag, 0)?;
    let ckpt = match ckpt_path {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    if exact {
        for &t in horizons.iter().filter(|&&t| t <= MAX_ENUMERATION_T) {
            let dist = exact_record_distribution(t)?;
            let cells: Vec<String> = dist
                .probability
                .iter()
                .enumerate()
                .map(|(i, p)| format!("P(k={})={p}", i + 1))
                .collect();
            println!("T={t} exact: {}", cells.join(" "));
        }
    }
    let rows = sparsity_report(horizons, trials, exact, ckpt.as_ref(), seed)?;
    let mut header = format!(
        "{:>4} {:>12} {:>12} {:>12} {:>9}",
        "T", "exact_mean", "mc_mean", "mc_stderr", "trials"
    );
    if exact {
        header.push_str(&format!(" {:>10}", "tv_exact"));
    }
    if ckpt.is_some() {
        header.push_str(&format!(" {:>12}", "policy_mean"));
    }
    println!("{header}");
    for row in rows {
        let mut line = format!(
            "{:>4} {:>12.6} {:>12.6} {:>12.6} {:>9}",
            row.t, row.exact_mean, row.mc_mean, row.mc_stderr, row.trials
        );
        if let Some(tv) = row.tv_to_exact {
            line.push_str(&format!(" {tv:>10.6}"));
        }
        if let Some(p) = row.policy_mean {
            line.push_str(&format!(" {p:>12.6}"));
        }
        println!("{line}");
    }
    Ok(())
}

/// Prints the checkpoint header summary.
pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let (header, _) = checkpoint::read_header(path)?;
    let model_tensors = header
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with("adam."));
    let param_count: usize = model_tensors
        .clone()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    println!("format version: {}", header.version);
    println!("mode: {}", header.mode);
    println!("iteration: {}", header.iteration);
    println!("seed: {} (rng digest {})", header.seed, header.rng_digest);
    println!(
        "parameters: {param_count} scalars in {} tensors ({} precision)",
        model_tensors.count(),
        header.precision
    );
    println!(
        "model: input_dim={} embed_dim={} ff_dim={} layers={} heads={} buckets={}",
        header.model.input_dim,
        header.model.embed_dim,
        header.model.ff_dim,
        header.model.layers,
        header.model.heads,
        header.model.bucket_count
    );
    println!(
        "optimizer state: {}",
        if header.adam_step.is_some() {
            "present"
        } else {
            "absent"
        }
    );
    Ok(())
}
