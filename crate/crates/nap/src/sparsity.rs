//! Reward-sparsity analysis: exact record-count distributions via unsigned
//! Stirling numbers of the first kind, harmonic-number expectations, Monte
//! Carlo record counting, and the policy-vs-random comparison.
//!
//! Under uniform sampling without replacement of pairwise-distinct values,
//! the number of running-maximum records in a length-T sequence is
//! distributed like the number of cycles of a uniform T-permutation.

use num::bigint::BigUint;
use num::rational::Ratio;
use num::{BigInt, One, ToPrimitive, Zero};
use rand::Rng;

use crate::architecture::{ModelParams, PolicyMode};
use crate::environment::rollout;
use crate::tasks::TaskDataset;

#[derive(Debug, thiserror::Error)]
pub enum SparsityError {
    #[error("stirling_first requires 1 <= k <= T <= {MAX_EXACT_T}, got k = {k}, T = {t}")]
    OutOfRange { t: usize, k: usize },
    #[error("enumeration oracle is limited to T <= {MAX_ENUMERATION_T}, got {0}")]
    EnumerationTooLarge(usize),
    #[error("value pool of size {pool} cannot cover sequences of length {t}")]
    PoolTooSmall { pool: usize, t: usize },
}

pub const MAX_EXACT_T: usize = 64;
pub const MAX_ENUMERATION_T: usize = 10;

/// Exact record-count distribution (or empirical histogram) for horizon T.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordCount {
    pub t: usize,
    /// `probability[k - 1]` is P(exactly k records), k = 1..T.
    pub probability: Vec<Ratio<BigInt>>,
}

impl RecordCount {
    /// Exact expectation Σ k·P(k).
    pub fn expectation(&self) -> Ratio<BigInt> {
        self.probability
            .iter()
            .enumerate()
            .map(|(i, p)| p * BigInt::from(i + 1))
            .sum()
    }

    pub fn expectation_f64(&self) -> f64 {
        self.expectation().to_f64().expect("expectation fits in f64")
    }

    /// Total-variation distance to another distribution on the same support.
    pub fn total_variation(&self, other: &RecordCount) -> f64 {
        assert_eq!(self.t, other.t);
        0.5 * self
            .probability
            .iter()
            .zip(&other.probability)
            .map(|(a, b)| {
                (a - b).to_f64().expect("probability difference fits in f64").abs()
            })
            .sum::<f64>()
    }
}

/// Unsigned Stirling number of the first kind via the recurrence
/// C(k, T) = C(k-1, T-1) + (T-1)·C(k, T-1), with C(1, T) = (T-1)! and
/// C(T, T) = 1.
pub fn stirling_first(t: usize, k: usize) -> Result<BigUint, SparsityError> {
    if k < 1 || k > t || t > MAX_EXACT_T {
        return Err(SparsityError::OutOfRange { t, k });
    }
    Ok(stirling_row(t)[k - 1].clone())
}

/// Row `[C(1, T), .., C(T, T)]` of the Stirling triangle.
fn stirling_row(t: usize) -> Vec<BigUint> {
    let mut row = vec![BigUint::one()];
    for n in 2..=t {
        let mut next = vec![BigUint::zero(); n];
        for (k, v) in row.iter().enumerate() {
            // v = C(k+1, n-1)
            next[k + 1] += v;
            next[k] += v * BigUint::from(n - 1);
        }
        row = next;
    }
    row
}

pub fn factorial(t: usize) -> BigUint {
    (1..=t).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

/// Number of strict running-maximum records; the first element always counts.
pub fn informative_count(y_sequence: &[f64]) -> usize {
    assert!(!y_sequence.is_empty(), "empty value sequence");
    let mut best = f64::NEG_INFINITY;
    let mut records = 0;
    for &y in y_sequence {
        if y > best {
            best = y;
            records += 1;
        }
    }
    records
}

/// H_T = Σ_{i=1}^{T} 1/i.
pub fn harmonic(t: usize) -> f64 {
    assert!(t >= 1);
    (1..=t).map(|i| 1.0 / i as f64).sum()
}

/// Exact H_T as a rational.
pub fn harmonic_exact(t: usize) -> Ratio<BigInt> {
    (1..=t)
        .map(|i| Ratio::new(BigInt::one(), BigInt::from(i)))
        .sum()
}

/// P(exactly k records) = C(k, T) / T! in exact rational arithmetic.
pub fn exact_record_distribution(t: usize) -> Result<RecordCount, SparsityError> {
    if t < 1 || t > MAX_EXACT_T {
        return Err(SparsityError::OutOfRange { t, k: 1 });
    }
    let tf = BigInt::from(factorial(t));
    let probability = stirling_row(t)
        .into_iter()
        .map(|c| Ratio::new(BigInt::from(c), tf.clone()))
        .collect();
    Ok(RecordCount { t, probability })
}

/// Brute-force oracle: enumerates all T! permutations of 1..T and counts
/// records directly.
pub fn enumerated_record_distribution(t: usize) -> Result<RecordCount, SparsityError> {
    if t < 1 {
        return Err(SparsityError::OutOfRange { t, k: 1 });
    }
    if t > MAX_ENUMERATION_T {
        return Err(SparsityError::EnumerationTooLarge(t));
    }
    let mut counts = vec![0u64; t];
    let mut perm: Vec<f64> = (1..=t).map(|i| i as f64).collect();
    // Heap's algorithm
    fn visit(perm: &[f64], counts: &mut [u64]) {
        counts[informative_count(perm) - 1] += 1;
    }
    fn heap(perm: &mut Vec<f64>, n: usize, counts: &mut [u64]) {
        if n <= 1 {
            visit(perm, counts);
            return;
        }
        for i in 0..n {
            heap(perm, n - 1, counts);
            if n % 2 == 0 {
                perm.swap(i, n - 1);
            } else {
                perm.swap(0, n - 1);
            }
        }
    }
    let n = perm.len();
    heap(&mut perm, n, &mut counts);
    let total = BigInt::from(factorial(t));
    Ok(RecordCount {
        t,
        probability: counts
            .into_iter()
            .map(|c| Ratio::new(BigInt::from(c), total.clone()))
            .collect(),
    })
}

/// Empirical record statistics under uniform sampling without replacement
/// from a pool of `pool` distinct values.
pub fn monte_carlo_records(
    t: usize,
    pool: usize,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<(f64, RecordCount), SparsityError> {
    assert!(trials >= 1);
    if pool < t {
        return Err(SparsityError::PoolTooSmall { pool, t });
    }
    let mut counts = vec![0u64; t];
    let mut total = 0u64;
    for _ in 0..trials {
        let picks = rand::seq::index::sample(rng, pool, t);
        let seq: Vec<f64> = picks.iter().map(|i| i as f64).collect();
        let records = informative_count(&seq);
        counts[records - 1] += 1;
        total += records as u64;
    }
    let trials_big = BigInt::from(trials);
    let dist = RecordCount {
        t,
        probability: counts
            .into_iter()
            .map(|c| Ratio::new(BigInt::from(c), trials_big.clone()))
            .collect(),
    };
    Ok((total as f64 / trials as f64, dist))
}

/// Mean number of informative rewards per episode when the given policy
/// plays the tasks. Untrained parameters should land near H_T; trained
/// policies are expected to be sparser.
pub fn policy_record_profile(
    params: &ModelParams,
    tasks: &[TaskDataset],
    t: usize,
    mode: PolicyMode,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64, crate::environment::EnvError> {
    assert!(trials >= 1 && !tasks.is_empty());
    let mut total = 0usize;
    for trial in 0..trials {
        let task = &tasks[trial % tasks.len()];
        let traj = rollout(params, task, 0, t, mode, rng)?;
        let ys: Vec<f64> = traj
            .steps
            .iter()
            .map(|s| task.outputs[s.state.remaining[s.action]])
            .collect();
        total += informative_count(&ys);
    }
    Ok(total as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::ModelConfig;
    use crate::tasks::{synthetic_family, KernelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn stirling_row_three() {
        assert_eq!(stirling_first(3, 1).unwrap(), big(2));
        assert_eq!(stirling_first(3, 2).unwrap(), big(3));
        assert_eq!(stirling_first(3, 3).unwrap(), big(1));
    }

    #[test]
    fn stirling_boundary_columns() {
        assert_eq!(stirling_first(5, 1).unwrap(), big(24));
        for t in 1..=10 {
            assert_eq!(stirling_first(t, 1).unwrap(), factorial(t - 1));
            assert_eq!(stirling_first(t, t).unwrap(), BigUint::one());
        }
    }

    #[test]
    fn stirling_out_of_range_rejected() {
        assert!(stirling_first(3, 0).is_err());
        assert!(stirling_first(3, 4).is_err());
        assert!(stirling_first(65, 1).is_err());
    }

    #[test]
    fn stirling_rows_sum_to_factorial() {
        for t in 1..=20 {
            let sum: BigUint = stirling_row(t).into_iter().sum();
            assert_eq!(sum, factorial(t), "row {t}");
        }
    }

    #[test]
    fn stirling_row_generating_identity_at_two() {
        // Σ_k C(k, T) z^k = z(z+1)...(z+T-1) at z = 2.
        for t in 1..=12 {
            let lhs: BigUint = stirling_row(t)
                .iter()
                .enumerate()
                .map(|(i, c)| c * big(2).pow(i as u32 + 1))
                .sum();
            let rhs: BigUint = (0..t).fold(BigUint::one(), |acc, i| acc * big(2 + i as u64));
            assert_eq!(lhs, rhs, "T = {t}");
        }
    }

    #[test]
    fn record_counting() {
        assert_eq!(informative_count(&[0.2, 0.5, 0.3]), 2);
        let increasing: Vec<f64> = (0..17).map(|i| i as f64).collect();
        assert_eq!(informative_count(&increasing), 17);
        let decreasing: Vec<f64> = (0..17).map(|i| -(i as f64)).collect();
        assert_eq!(informative_count(&decreasing), 1);
    }

    #[test]
    fn record_count_invariant_to_monotone_transform() {
        let seq = [0.3_f64, 0.1, 0.7, 0.4, 0.9, 0.2];
        let mapped: Vec<f64> = seq.iter().map(|y| (3.0 * y).exp()).collect();
        assert_eq!(informative_count(&seq), informative_count(&mapped));
    }

    #[test]
    fn harmonic_values() {
        assert_eq!(harmonic(1), 1.0);
        assert!((harmonic(3) - 11.0 / 6.0).abs() < 1e-12);
        assert!((harmonic(10) - 2.928968).abs() < 1e-6);
        assert!((harmonic(24) - 3.775958).abs() < 1e-6);
    }

    #[test]
    fn exact_distribution_for_three() {
        let d = exact_record_distribution(3).unwrap();
        let expect = |n: i64, den: i64| Ratio::new(BigInt::from(n), BigInt::from(den));
        assert_eq!(d.probability, vec![expect(1, 3), expect(1, 2), expect(1, 6)]);
    }

    #[test]
    fn exact_distribution_matches_enumeration() {
        for t in 1..=8 {
            let exact = exact_record_distribution(t).unwrap();
            let enumerated = enumerated_record_distribution(t).unwrap();
            assert_eq!(exact, enumerated, "T = {t}");
        }
    }

    #[test]
    fn enumeration_beyond_limit_rejected() {
        assert!(matches!(
            enumerated_record_distribution(11),
            Err(SparsityError::EnumerationTooLarge(11))
        ));
    }

    #[test]
    fn exact_expectation_is_the_harmonic_number() {
        for t in 1..=20 {
            let d = exact_record_distribution(t).unwrap();
            assert_eq!(d.expectation(), harmonic_exact(t), "T = {t}");
        }
    }

    #[test]
    fn monte_carlo_mean_matches_harmonic_24() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 100_000;
        let (mean, _) = monte_carlo_records(24, 64, trials, &mut rng).unwrap();
        // Var(records) = H_T - Σ 1/i^2
        let var = harmonic(24) - (1..=24).map(|i| 1.0 / (i * i) as f64).sum::<f64>();
        let bound = 3.0 * (var / trials as f64).sqrt();
        assert!(
            (mean - harmonic(24)).abs() < bound,
            "mean {mean} vs H_24 {} (bound {bound})",
            harmonic(24)
        );
    }

    #[test]
    fn monte_carlo_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (mean, _) = monte_carlo_records(1, 5, 100, &mut rng).unwrap();
        assert_eq!(mean, 1.0);
        assert!(matches!(
            monte_carlo_records(10, 5, 1, &mut rng),
            Err(SparsityError::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn monte_carlo_distribution_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (_, empirical) = monte_carlo_records(5, 32, 100_000, &mut rng).unwrap();
        let exact = exact_record_distribution(5).unwrap();
        assert!(exact.total_variation(&empirical) < 0.01);
    }

    #[test]
    fn untrained_policy_matches_harmonic_at_high_temperature() {
        // At a very high temperature the policy is near-uniform over the
        // remaining points, i.e. sampling without replacement.
        let config = ModelConfig {
            input_dim: 1,
            embed_dim: 8,
            ff_dim: 16,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            bucket_count: 8,
            softmax_temperature_train: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = ModelParams::init(config, &mut rng);
        let tasks = synthetic_family(21, 4, 16, 1, KernelKind::Matern52, (0.2, 0.5));
        let t = 8;
        let mean = policy_record_profile(
            &params,
            &tasks,
            t,
            PolicyMode::Softmax(1e4),
            1000,
            &mut rng,
        )
        .unwrap();
        let h = harmonic(t);
        assert!(
            (mean - h).abs() / h < 0.10,
            "mean {mean} vs H_{t} = {h}"
        );
    }

    #[test]
    fn record_profile_is_at_least_one() {
        let config = ModelConfig {
            input_dim: 1,
            embed_dim: 8,
            ff_dim: 16,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            bucket_count: 8,
            softmax_temperature_train: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = ModelParams::init(config, &mut rng);
        let tasks = synthetic_family(23, 2, 10, 1, KernelKind::Matern52, (0.2, 0.5));
        let mean =
            policy_record_profile(&params, &tasks, 5, PolicyMode::Softmax(0.1), 50, &mut rng)
                .unwrap();
        assert!(mean >= 1.0);
    }
}
