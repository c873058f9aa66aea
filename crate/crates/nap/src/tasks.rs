//! Task datasets, normalization, context/prediction splits, exact GP
//! fitting and sampling for data augmentation, and synthetic task-family
//! generation for desk-scale experiments.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("dataset `{0}` needs at least 2 points")]
    TooFewPoints(String),
    #[error("non-finite value in dataset `{0}`")]
    NonFinite(String),
    #[error("Cholesky factorization failed even with jitter up to {max_jitter}")]
    CholeskyFailure { max_jitter: f64 },
    #[error("task file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Per-dimension min-max metadata recording the inverse transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub output_min: f64,
    pub output_max: f64,
}

/// One black-box task as a finite set of (input vector, output) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub id: String,
    /// Row-major `n x input_dim`.
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub normalization: Option<Normalization>,
}

impl TaskDataset {
    pub fn new(id: impl Into<String>, inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Self {
        assert_eq!(inputs.len(), outputs.len(), "inputs/outputs length mismatch");
        TaskDataset {
            id: id.into(),
            inputs,
            outputs,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_range(&self) -> (f64, f64) {
        let min = self.outputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .outputs
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

/// Per-dimension min-max normalization of inputs and outputs to [0, 1].
/// Constant dimensions map to 0.5.
pub fn normalize(raw: &TaskDataset) -> Result<TaskDataset, TaskError> {
    let n = raw.len();
    if n < 2 {
        return Err(TaskError::TooFewPoints(raw.id.clone()));
    }
    let d = raw.input_dim();
    if raw
        .inputs
        .iter()
        .flatten()
        .chain(raw.outputs.iter())
        .any(|v| !v.is_finite())
    {
        return Err(TaskError::NonFinite(raw.id.clone()));
    }
    let mut input_min = vec![f64::INFINITY; d];
    let mut input_max = vec![f64::NEG_INFINITY; d];
    for row in &raw.inputs {
        for j in 0..d {
            input_min[j] = input_min[j].min(row[j]);
            input_max[j] = input_max[j].max(row[j]);
        }
    }
    let (output_min, output_max) = raw.output_range();
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let inputs = raw
        .inputs
        .iter()
        .map(|row| {
            (0..d)
                .map(|j| scale(row[j], input_min[j], input_max[j]))
                .collect()
        })
        .collect();
    let outputs = raw
        .outputs
        .iter()
        .map(|&y| scale(y, output_min, output_max))
        .collect();
    Ok(TaskDataset {
        id: raw.id.clone(),
        inputs,
        outputs,
        normalization: Some(Normalization {
            input_min,
            input_max,
            output_min,
            output_max,
        }),
    })
}

/// Inverse of [`normalize`], recovering raw values from the stored metadata.
pub fn denormalize(d: &TaskDataset) -> TaskDataset {
    let norm = d
        .normalization
        .as_ref()
        .expect("dataset carries no normalization metadata");
    let unscale = |v: f64, lo: f64, hi: f64| if hi > lo { lo + v * (hi - lo) } else { lo };
    TaskDataset {
        id: d.id.clone(),
        inputs: d
            .inputs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| unscale(v, norm.input_min[j], norm.input_max[j]))
                    .collect()
            })
            .collect(),
        outputs: d
            .outputs
            .iter()
            .map(|&y| unscale(y, norm.output_min, norm.output_max))
            .collect(),
        normalization: None,
    }
}

/// Disjoint observed/prediction index sets over one dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub observed: Vec<usize>,
    pub prediction: Vec<usize>,
}

/// Draws a context size uniformly from 1..n-1, then a uniform subset of
/// that size as the observed side; the remainder is the prediction side.
pub fn split_obs_pred(d: &TaskDataset, rng: &mut impl Rng) -> SplitPair {
    let n = d.len();
    assert!(n >= 2, "split needs at least 2 points");
    let c = rng.random_range(1..n);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let observed = indices[..c].to_vec();
    let prediction = indices[c..].to_vec();
    SplitPair {
        observed,
        prediction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    SquaredExponential,
    Matern52,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::SquaredExponential => write!(f, "squared-exponential"),
            KernelKind::Matern52 => write!(f, "matern52"),
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-exponential" | "se" => Ok(KernelKind::SquaredExponential),
            "matern52" => Ok(KernelKind::Matern52),
            other => Err(format!(
                "unknown kernel `{other}` (expected squared-exponential or matern52)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpHyperparams {
    pub kernel: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyperparams {
    fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
            let s = (x - y) / l;
            r2 += s * s;
        }
        match self.kernel {
            KernelKind::SquaredExponential => self.signal_variance * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let a5 = 5.0_f64.sqrt() * r;
                self.signal_variance * (1.0 + a5 + 5.0 * r2 / 3.0) * (-a5).exp()
            }
        }
    }

    /// d k(a, b) / d log(lengthscale_d).
    fn covariance_grad_log_lengthscale(&self, a: &[f64], b: &[f64], dim: usize) -> f64 {
        let mut r2 = 0.0;
        for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
            let s = (x - y) / l;
            r2 += s * s;
        }
        let sd = (a[dim] - b[dim]) / self.lengthscales[dim];
        let sd2 = sd * sd;
        match self.kernel {
            KernelKind::SquaredExponential => {
                self.signal_variance * (-0.5 * r2).exp() * sd2
            }
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let a5 = 5.0_f64.sqrt() * r;
                self.signal_variance * (5.0 / 3.0) * (1.0 + a5) * (-a5).exp() * sd2
            }
        }
    }
}

/// An exact GP fitted to one task, holding the Cholesky factor of the
/// regularized kernel matrix.
pub struct GPModel {
    pub hyper: GpHyperparams,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
}

const JITTERS: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

fn kernel_matrix(hyper: &GpHyperparams, xs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| hyper.covariance(&xs[i], &xs[j]))
}

fn cholesky_with_jitter(k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), TaskError> {
    for &jitter in &JITTERS {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            return Ok((chol, jitter));
        }
    }
    Err(TaskError::CholeskyFailure {
        max_jitter: *JITTERS.last().unwrap(),
    })
}

/// Log marginal likelihood and its gradient with respect to
/// (log lengthscales.., log signal variance, log noise variance).
pub fn log_marginal_likelihood_grad(
    hyper: &GpHyperparams,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(f64, Vec<f64>), TaskError> {
    let n = xs.len();
    let d = hyper.lengthscales.len();
    let mut k = kernel_matrix(hyper, xs);
    for i in 0..n {
        k[(i, i)] += hyper.noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(k)?;
    let y = DVector::from_column_slice(ys);
    let alpha = chol.solve(&y);
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let lml = -0.5 * y.dot(&alpha)
        - log_det
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dL/dtheta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
    let k_inv = chol.inverse();
    let mut grads = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            for dim in 0..d {
                grads[dim] += 0.5
                    * w
                    * hyper.covariance_grad_log_lengthscale(&xs[i], &xs[j], dim);
            }
            grads[d] += 0.5 * w * hyper.covariance(&xs[i], &xs[j]);
            if i == j {
                grads[d + 1] += 0.5 * w * hyper.noise_variance;
            }
        }
    }
    Ok((lml, grads))
}

fn build_model(hyper: GpHyperparams, xs: &[Vec<f64>], ys: &[f64]) -> Result<GPModel, TaskError> {
    let n = xs.len();
    let mut k = kernel_matrix(&hyper, xs);
    for i in 0..n {
        k[(i, i)] += hyper.noise_variance;
    }
    let (chol, jitter) = cholesky_with_jitter(k)?;
    let y = DVector::from_column_slice(ys);
    let alpha = chol.solve(&y);
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let lml = -0.5 * y.dot(&alpha)
        - log_det
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(GPModel {
        hyper,
        train_x: xs.to_vec(),
        train_y: ys.to_vec(),
        chol,
        alpha,
        jitter,
        log_marginal_likelihood: lml,
    })
}

/// Fits an exact GP on `xs`/`ys` with the given starting hyperparameters.
pub fn gp_condition(
    hyper: GpHyperparams,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<GPModel, TaskError> {
    build_model(hyper, xs, ys)
}

pub const GP_FIT_RESTARTS: usize = 8;
pub const GP_FIT_STEPS: usize = 200;

/// Hyperparameters maximizing the log marginal likelihood via multi-start
/// Adam ascent in log-space (8 restarts, 200 steps). Deterministic: restart
/// initializations come from a fixed internal stream.
pub fn gp_fit(d: &TaskDataset, kernel: KernelKind) -> Result<GPModel, TaskError> {
    gp_fit_xy(&d.inputs, &d.outputs, kernel)
}

pub fn gp_fit_xy(
    xs: &[Vec<f64>],
    ys: &[f64],
    kernel: KernelKind,
) -> Result<GPModel, TaskError> {
    let dim = xs.first().map_or(0, Vec::len);
    let y_var = {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).max(1e-6)
    };
    let mut restart_rng = ChaCha8Rng::seed_from_u64(0x6e61705f6770);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..GP_FIT_RESTARTS {
        // theta = (log lengthscales.., log signal var, log noise var)
        let mut theta: Vec<f64> = if restart == 0 {
            let mut t = vec![(0.3_f64).ln(); dim];
            t.push(y_var.ln());
            t.push((1e-3 * y_var).ln());
            t
        } else {
            let mut t: Vec<f64> = (0..dim)
                .map(|_| restart_rng.random_range(0.02_f64.ln()..2.0_f64.ln()))
                .collect();
            t.push(y_var.ln() + restart_rng.random_range(-1.0..1.0));
            t.push(restart_rng.random_range((1e-6 * y_var).ln()..(0.1 * y_var).ln()));
            t
        };
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        let mut last_lml = f64::NEG_INFINITY;
        for step in 0..GP_FIT_STEPS {
            let hyper = theta_to_hyper(&theta, kernel);
            let Ok((lml, grad)) = log_marginal_likelihood_grad(&hyper, xs, ys) else {
                break;
            };
            last_lml = lml;
            let lr = 0.05;
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let t = (step + 1) as f64;
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powf(t));
                let vh = v[i] / (1.0 - b2.powf(t));
                theta[i] += lr * mh / (vh.sqrt() + eps);
            }
            // keep noise away from exact zero so the Cholesky stays stable
            let floor = (1e-8_f64).ln();
            let last = theta.len() - 1;
            if theta[last] < floor {
                theta[last] = floor;
            }
        }
        let hyper = theta_to_hyper(&theta, kernel);
        if let Ok((lml, _)) = log_marginal_likelihood_grad(&hyper, xs, ys) {
            last_lml = lml;
        }
        if best.as_ref().is_none_or(|(b, _)| last_lml > *b) {
            best = Some((last_lml, theta));
        }
    }
    let (_, theta) = best.ok_or(TaskError::CholeskyFailure {
        max_jitter: *JITTERS.last().unwrap(),
    })?;
    build_model(theta_to_hyper(&theta, kernel), xs, ys)
}

fn theta_to_hyper(theta: &[f64], kernel: KernelKind) -> GpHyperparams {
    let d = theta.len() - 2;
    GpHyperparams {
        kernel,
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        noise_variance: theta[d + 1].exp(),
    }
}

impl GPModel {
    /// Exact posterior mean vector and covariance matrix at `x_star`.
    pub fn posterior(&self, x_star: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.train_x.len();
        let m = x_star.len();
        let k_star = DMatrix::from_fn(n, m, |i, j| {
            self.hyper.covariance(&self.train_x[i], &x_star[j])
        });
        let mean: Vec<f64> = (0..m)
            .map(|j| k_star.column(j).dot(&self.alpha))
            .collect();
        let k_ss = DMatrix::from_fn(m, m, |i, j| self.hyper.covariance(&x_star[i], &x_star[j]));
        let solved = self.chol.solve(&k_star);
        let cov = k_ss - k_star.transpose() * solved;
        (mean, cov)
    }

    /// One joint draw from the posterior at `x_star`.
    pub fn sample(&self, x_star: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
        let (mean, cov) = self.posterior(x_star);
        // jitter in the training factor leaks into the posterior variance at
        // training points; anything of that order is numerically zero
        sample_gaussian_thresholded(&mean, cov, (16.0 * self.jitter).max(1e-10), rng)
    }
}

/// Draws from N(mean, cov) via Cholesky of (cov + jitter I).
///
/// Points whose variance is numerically zero are emitted at their mean
/// exactly (their cross-covariances are negligible by Cauchy-Schwarz), so
/// noiseless training points interpolate without jitter noise.
fn sample_gaussian(mean: &[f64], cov: DMatrix<f64>, rng: &mut impl Rng) -> Vec<f64> {
    sample_gaussian_thresholded(mean, cov, 1e-10, rng)
}

fn sample_gaussian_thresholded(
    mean: &[f64],
    mut cov: DMatrix<f64>,
    zero_var: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let m = mean.len();
    // symmetrize before factoring
    for i in 0..m {
        for j in (i + 1)..m {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    let stochastic: Vec<usize> = (0..m).filter(|&i| cov[(i, i)] > zero_var).collect();
    let mut out = mean.to_vec();
    if stochastic.is_empty() {
        return out;
    }
    let s = stochastic.len();
    let sub = DMatrix::from_fn(s, s, |i, j| cov[(stochastic[i], stochastic[j])]);
    let chol = JITTERS
        .iter()
        .find_map(|&jitter| {
            let mut cj = sub.clone();
            for i in 0..s {
                cj[(i, i)] += jitter;
            }
            Cholesky::new(cj)
        })
        .expect("posterior covariance not factorizable even with jitter");
    let z = DVector::from_fn(s, |_, _| standard_normal(rng));
    let correlated = chol.l() * z;
    for (pos, &i) in stochastic.iter().enumerate() {
        out[i] += correlated[pos];
    }
    out
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// GP data augmentation: base inputs resampled with replacement, perturbed
/// by per-coordinate uniform noise in [-perturb, perturb], clipped to
/// [0, 1], with outputs drawn jointly from the GP posterior and then
/// re-normalized to [0, 1].
pub fn augment(
    d: &TaskDataset,
    m: &GPModel,
    perturb: f64,
    size: usize,
    rng: &mut impl Rng,
) -> TaskDataset {
    assert!(perturb >= 0.0, "perturbation must be non-negative");
    let dim = d.input_dim();
    let inputs: Vec<Vec<f64>> = (0..size)
        .map(|_| {
            let base = &d.inputs[rng.random_range(0..d.len())];
            (0..dim)
                .map(|j| (base[j] + rng.random_range(-perturb..=perturb)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let raw_outputs = m.sample(&inputs, rng);
    let min = raw_outputs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw_outputs
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let outputs = raw_outputs
        .iter()
        .map(|&y| if max > min { (y - min) / (max - min) } else { 0.5 })
        .collect();
    TaskDataset {
        id: format!("{}#aug", d.id),
        inputs,
        outputs,
        normalization: d.normalization.clone(),
    }
}

/// Default augmented-set size.
pub fn augment_size(n: usize) -> usize {
    n.max(256)
}

/// Synthetic task family: per task, lengthscales drawn log-uniformly from
/// `lengthscale_range`, inputs uniform in the unit cube, outputs one joint
/// GP prior sample, all normalized. Deterministic in `seed`.
pub fn synthetic_family(
    seed: u64,
    num_tasks: usize,
    points: usize,
    dim: usize,
    kernel: KernelKind,
    lengthscale_range: (f64, f64),
) -> Vec<TaskDataset> {
    assert!(points >= 2, "need at least 2 points per task");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_tasks)
        .map(|k| {
            let hyper = GpHyperparams {
                kernel,
                lengthscales: (0..dim)
                    .map(|_| {
                        let lo = lengthscale_range.0.ln();
                        let hi = lengthscale_range.1.ln();
                        rng.random_range(lo..hi).exp()
                    })
                    .collect(),
                signal_variance: 1.0,
                noise_variance: 0.0,
            };
            let inputs: Vec<Vec<f64>> = (0..points)
                .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let prior_cov = DMatrix::from_fn(points, points, |i, j| {
                hyper.covariance(&inputs[i], &inputs[j])
            });
            let outputs = sample_gaussian(&vec![0.0; points], prior_cov, &mut rng);
            let raw = TaskDataset::new(format!("task{k:03}"), inputs, outputs);
            normalize(&raw).expect("synthetic task is finite by construction")
        })
        .collect()
}

/// Manifest listing task files and the train/validation/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tasks: Vec<ManifestEntry>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads and normalizes the named subset ("train", "validation", "test").
    pub fn load_split(&self, dir: &Path, ids: &[String]) -> Result<Vec<TaskDataset>, TaskError> {
        ids.iter()
            .map(|id| {
                let entry = self
                    .tasks
                    .iter()
                    .find(|e| &e.id == id)
                    .ok_or_else(|| TaskError::Parse {
                        path: dir.to_path_buf(),
                        message: format!("manifest split references unknown task `{id}`"),
                    })?;
                let raw = read_task_csv(&dir.join(&entry.file), id)?;
                normalize(&raw)
            })
            .collect()
    }
}

/// Writes one task as CSV with header `x_1,..,x_D,y` (raw values).
pub fn write_task_csv(d: &TaskDataset, path: &Path) -> Result<(), TaskError> {
    let file = std::fs::File::create(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let dim = d.input_dim();
    let mut io_err = |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = (1..=dim).map(|j| format!("x_{j}")).collect();
    writeln!(w, "{},y", header.join(",")).map_err(&mut io_err)?;
    for (row, y) in d.inputs.iter().zip(&d.outputs) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17}")).collect();
        writeln!(w, "{},{y:.17}", cells.join(",")).map_err(&mut io_err)?;
    }
    Ok(())
}

pub fn read_task_csv(path: &Path, id: &str) -> Result<TaskDataset, TaskError> {
    let file = std::fs::File::open(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut dim = None;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line_no == 0 {
            dim = Some(line.split(',').count() - 1);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let expected = dim.unwrap() + 1;
        if cells.len() != expected {
            return Err(TaskError::Parse {
                path: path.to_path_buf(),
                message: format!(
                    "line {}: expected {expected} columns, got {}",
                    line_no + 1,
                    cells.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(cells.len() - 1);
        for cell in &cells[..cells.len() - 1] {
            row.push(cell.trim().parse::<f64>().map_err(|e| TaskError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", line_no + 1),
            })?);
        }
        outputs.push(
            cells[cells.len() - 1]
                .trim()
                .parse::<f64>()
                .map_err(|e| TaskError::Parse {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", line_no + 1),
                })?,
        );
        inputs.push(row);
    }
    Ok(TaskDataset::new(id, inputs, outputs))
}
