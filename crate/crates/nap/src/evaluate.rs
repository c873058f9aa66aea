//! BO evaluation harness: normalized-regret curves per (method, task,
//! seed), aggregation with confidence intervals, and CSV/SVG emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::Optimizer;
use crate::environment::{candidate_set, reset, step, EnvError};
use crate::tasks::TaskDataset;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("task `{0}` has a constant output range; regret is undefined")]
    ConstantTask(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One episode's best-so-far and normalized-regret trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub method: String,
    pub task_id: String,
    pub seed: u64,
    pub best_y: Vec<f64>,
    pub regret: Vec<f64>,
}

/// (y_max − best)/(y_max − y_min) over the task's full dataset.
pub fn normalized_regret(best_so_far: f64, task: &TaskDataset) -> Result<f64, EvalError> {
    let (y_min, y_max) = task.output_range();
    if y_max <= y_min {
        return Err(EvalError::ConstantTask(task.id.clone()));
    }
    Ok((y_max - best_so_far) / (y_max - y_min))
}

/// Runs one episode of `budget` acquisitions starting from `n_init`
/// uniformly chosen initial points, recording best-so-far after each step.
pub fn run_bo(
    optimizer: &mut dyn Optimizer,
    method: &str,
    task: &TaskDataset,
    budget: usize,
    n_init: usize,
    seed: u64,
) -> Result<RegretCurve, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = reset(task, n_init, budget, &mut rng)?;
    let mut best_y = Vec::with_capacity(budget);
    let mut regret = Vec::with_capacity(budget);
    for _ in 0..budget {
        if candidate_set(task, &state).is_err() {
            // dataset exhausted: the curve stays flat at the final best
            let last = *best_y.last().expect("exhaustion implies prior steps");
            best_y.push(last);
            regret.push(normalized_regret(last, task)?);
            continue;
        }
        let action = optimizer.select(task, &state, &mut rng);
        let (next, reward, _) = step(task, &state, action)?;
        best_y.push(reward);
        regret.push(normalized_regret(reward, task)?);
        state = next;
    }
    Ok(RegretCurve {
        method: method.to_string(),
        task_id: task.id.clone(),
        seed,
        best_y,
        regret,
    })
}

/// Per-step mean and 95% normal-approximation half-width across curves.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub method: String,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
    pub curves: usize,
}

/// Aggregates curves per method across (task × seed).
pub fn aggregate(curves: &[RegretCurve]) -> Vec<AggregateCurve> {
    let mut by_method: BTreeMap<&str, Vec<&RegretCurve>> = BTreeMap::new();
    for c in curves {
        by_method.entry(&c.method).or_default().push(c);
    }
    by_method
        .into_iter()
        .map(|(method, group)| {
            assert!(group.len() >= 2, "need at least 2 curves per method");
            let steps = group[0].regret.len();
            assert!(
                group.iter().all(|c| c.regret.len() == steps),
                "curve lengths disagree"
            );
            let n = group.len() as f64;
            let mut mean = vec![0.0; steps];
            let mut half_width = vec![0.0; steps];
            for t in 0..steps {
                let m = group.iter().map(|c| c.regret[t]).sum::<f64>() / n;
                let var = group
                    .iter()
                    .map(|c| (c.regret[t] - m) * (c.regret[t] - m))
                    .sum::<f64>()
                    / (n - 1.0);
                mean[t] = m;
                half_width[t] = 1.96 * (var / n).sqrt();
            }
            AggregateCurve {
                method: method.to_string(),
                mean,
                half_width,
                curves: group.len(),
            }
        })
        .collect()
}

/// Writes the long-format CSV (method, task, seed, step, best_y, regret)
/// and an SVG of the mean curve ± interval per method. Returns the two
/// file paths (csv, svg).
pub fn emit(curves: &[RegretCurve], out_dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source| EvalError::Io {
            path: p.clone(),
            source,
        }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("regret.csv");
    let mut csv = std::io::BufWriter::new(
        std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?,
    );
    writeln!(csv, "method,task,seed,step,best_y,regret").map_err(io_err(&csv_path))?;
    for c in curves {
        for (t, (b, r)) in c.best_y.iter().zip(&c.regret).enumerate() {
            writeln!(
                csv,
                "{},{},{},{},{b:.9},{r:.9}",
                c.method,
                c.task_id,
                c.seed,
                t + 1
            )
            .map_err(io_err(&csv_path))?;
        }
    }
    csv.flush().map_err(io_err(&csv_path))?;

    let svg_path = out_dir.join("regret.svg");
    std::fs::write(&svg_path, render_svg(&aggregate(curves))).map_err(io_err(&svg_path))?;
    Ok((csv_path, svg_path))
}

/// Reads a CSV written by [`emit`] back into curves.
pub fn read_curves(path: &Path) -> Result<Vec<RegretCurve>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut by_key: BTreeMap<(String, String, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let key = (
            cells[0].to_string(),
            cells[1].to_string(),
            cells[2].parse().expect("seed column"),
        );
        let entry = by_key.entry(key).or_default();
        entry.0.push(cells[4].parse().expect("best_y column"));
        entry.1.push(cells[5].parse().expect("regret column"));
    }
    Ok(by_key
        .into_iter()
        .map(|((method, task_id, seed), (best_y, regret))| RegretCurve {
            method,
            task_id,
            seed,
            best_y,
            regret,
        })
        .collect())
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 420.0;
const SVG_MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn render_svg(aggregates: &[AggregateCurve]) -> String {
    let steps = aggregates.first().map_or(0, |a| a.mean.len());
    let x = |t: usize| {
        SVG_MARGIN
            + (SVG_WIDTH - 2.0 * SVG_MARGIN) * t as f64 / (steps.max(2) - 1) as f64
    };
    let y = |r: f64| SVG_MARGIN + (SVG_HEIGHT - 2.0 * SVG_MARGIN) * (1.0 - r.clamp(0.0, 1.0));
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = SVG_MARGIN,
        b = SVG_HEIGHT - SVG_MARGIN,
        r = SVG_WIDTH - SVG_MARGIN,
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">BO step</text>\n",
        SVG_WIDTH / 2.0,
        SVG_HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">normalized regret</text>\n",
        SVG_HEIGHT / 2.0,
        SVG_HEIGHT / 2.0
    ));
    for (i, agg) in aggregates.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // confidence band
        let mut band = String::new();
        for (t, (m, h)) in agg.mean.iter().zip(&agg.half_width).enumerate() {
            band.push_str(&format!("{:.2},{:.2} ", x(t), y(m + h)));
        }
        for (t, (m, h)) in agg.mean.iter().zip(&agg.half_width).enumerate().rev() {
            band.push_str(&format!("{:.2},{:.2} ", x(t), y(m - h)));
        }
        svg.push_str(&format!(
            "  <polygon points=\"{}\" fill=\"{color}\" opacity=\"0.15\"/>\n",
            band.trim_end()
        ));
        let points: Vec<String> = agg
            .mean
            .iter()
            .enumerate()
            .map(|(t, m)| format!("{:.2},{:.2}", x(t), y(*m)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} (n={})</text>\n",
            SVG_WIDTH - SVG_MARGIN - 120.0,
            SVG_MARGIN + 16.0 * (i + 1) as f64,
            agg.method,
            agg.curves
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
