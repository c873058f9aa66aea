//! The multi-task BO MDP: states over a finite dataset, simple-regret
//! rewards, policy rollouts, and discounted returns.

use rand::Rng;

use crate::architecture::{forward, policy_probs, value_estimate, ModelParams, PolicyMode};
use crate::diffcore::Array;
use crate::tasks::TaskDataset;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("n_init = {n_init} must be smaller than the dataset size {n}")]
    InitTooLarge { n_init: usize, n: usize },
    #[error("no remaining candidate points")]
    Exhausted,
    #[error("action index {index} out of range for {candidates} candidates")]
    InvalidAction { index: usize, candidates: usize },
}

/// State of one BO episode over a finite dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BOState {
    /// Observed (x, y) pairs so far, in observation order.
    pub history: Vec<(Vec<f64>, f64)>,
    /// Current step t, 1-based; the next action is the t-th.
    pub step: usize,
    /// Budget T.
    pub budget: usize,
    /// Dataset indices not yet selected, in stable index order.
    pub remaining: Vec<usize>,
}

impl BOState {
    /// Running maximum of all observed outputs; 0 before any observation.
    pub fn best_y(&self) -> f64 {
        self.history
            .iter()
            .map(|(_, y)| *y)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(if self.history.is_empty() { 0.0 } else { f64::NEG_INFINITY })
    }
}

/// Starts an episode with `n_init` uniformly chosen (without replacement)
/// pre-observed points.
pub fn reset(
    task: &TaskDataset,
    n_init: usize,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<BOState, EnvError> {
    let n = task.len();
    if n_init >= n {
        return Err(EnvError::InitTooLarge { n_init, n });
    }
    let chosen = rand::seq::index::sample(rng, n, n_init).into_vec();
    let history = chosen
        .iter()
        .map(|&i| (task.inputs[i].clone(), task.outputs[i]))
        .collect();
    let remaining = (0..n).filter(|i| !chosen.contains(i)).collect();
    Ok(BOState {
        history,
        step: 1,
        budget,
        remaining,
    })
}

/// Inputs of the remaining points as an `m x D` matrix, stable index order.
pub fn candidate_set(task: &TaskDataset, state: &BOState) -> Result<Array, EnvError> {
    if state.remaining.is_empty() {
        return Err(EnvError::Exhausted);
    }
    let d = task.input_dim();
    Ok(Array::from_fn(state.remaining.len(), d, |i, j| {
        task.inputs[state.remaining[i]][j]
    }))
}

/// Applies one acquisition: observes the chosen remaining point, pays the
/// simple-regret reward (running max of everything observed so far,
/// initial points included), and advances t.
pub fn step(
    task: &TaskDataset,
    state: &BOState,
    action_index: usize,
) -> Result<(BOState, f64, bool), EnvError> {
    if action_index >= state.remaining.len() {
        return Err(EnvError::InvalidAction {
            index: action_index,
            candidates: state.remaining.len(),
        });
    }
    let dataset_index = state.remaining[action_index];
    let mut next = state.clone();
    next.remaining.remove(action_index);
    next.history.push((
        task.inputs[dataset_index].clone(),
        task.outputs[dataset_index],
    ));
    next.step += 1;
    let reward = next
        .history
        .iter()
        .map(|(_, y)| *y)
        .fold(f64::NEG_INFINITY, f64::max);
    let done = next.step > state.budget || next.remaining.is_empty();
    Ok((next, reward, done))
}

/// One step of one episode: the state the policy saw, the action it took
/// (an index into that state's remaining set), and the PPO bookkeeping.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: BOState,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub terminal: bool,
}

/// Plays one full episode with the given policy mode, recording behavior
/// log-probabilities and value estimates for PPO.
pub fn rollout(
    params: &ModelParams,
    task: &TaskDataset,
    n_init: usize,
    budget: usize,
    mode: PolicyMode,
    rng: &mut impl Rng,
) -> Result<Trajectory, EnvError> {
    let mut state = reset(task, n_init, budget, rng)?;
    let mut steps = Vec::new();
    loop {
        let candidates = candidate_set(task, &state)?;
        let (acq, _) = forward(params, &state.history, &candidates, state.step, budget);
        let probs = policy_probs(&acq, mode);
        let action = match mode {
            PolicyMode::Argmax => crate::architecture::argmax(&acq),
            PolicyMode::Softmax(_) => sample_index(&probs, rng),
        };
        let value = value_estimate(params, state.step, budget, state.best_y());
        let (next, reward, done) = step(task, &state, action)?;
        steps.push(StepRecord {
            state,
            action,
            reward,
            log_prob: probs[action].ln(),
            value,
        });
        state = next;
        if done {
            break;
        }
    }
    Ok(Trajectory {
        task_id: task.id.clone(),
        steps,
        terminal: true,
    })
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Σ_t γ^{t-1} r_t.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&gamma), "gamma must be in [0, 1)");
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, &r| r + gamma * acc)
}
