//! Bucketed ("bar plot") predictive densities.
//!
//! The distribution head emits one unnormalized log weight per bucket; the
//! induced density is piecewise constant over a bounded support and
//! integrates to one. Buckets are right-open, with the final bucket closed,
//! so assignment is total on the support.

#[derive(Debug, thiserror::Error)]
pub enum DistributionError {
    #[error("cannot build buckets from an empty value set")]
    EmptyValues,
    #[error("value {y} outside the bucket support [{lower}, {upper}]")]
    OutOfSupport { y: f64, lower: f64, upper: f64 },
    #[error("non-finite value in bucket construction")]
    NonFinite,
}

/// Uniform-width bucket boundaries over a bounded support.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BucketSpec {
    lower: f64,
    upper: f64,
    count: usize,
}

impl BucketSpec {
    pub fn new(lower: f64, upper: f64, count: usize) -> Self {
        assert!(count > 0, "bucket count must be positive");
        assert!(lower < upper, "bucket support must have positive width");
        BucketSpec { lower, upper, count }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.count as f64
    }

    pub fn boundary(&self, i: usize) -> f64 {
        debug_assert!(i <= self.count);
        if i == self.count {
            self.upper
        } else {
            self.lower + self.width() * i as f64
        }
    }

    pub fn center(&self, b: usize) -> f64 {
        self.lower + self.width() * (b as f64 + 0.5)
    }

    /// Bucket index of `y`. Right-open buckets; the last bucket is closed.
    pub fn bucket_of(&self, y: f64) -> Result<usize, DistributionError> {
        if !(self.lower..=self.upper).contains(&y) {
            return Err(DistributionError::OutOfSupport {
                y,
                lower: self.lower,
                upper: self.upper,
            });
        }
        let raw = ((y - self.lower) / self.width()) as usize;
        Ok(raw.min(self.count - 1))
    }
}

/// Buckets spanning the observed values plus a symmetric margin. A
/// degenerate range (all values equal) expands to unit width centered on
/// the value.
pub fn make_buckets(
    y_values: &[f64],
    count: usize,
    margin_fraction: f64,
) -> Result<BucketSpec, DistributionError> {
    if y_values.is_empty() {
        return Err(DistributionError::EmptyValues);
    }
    if y_values.iter().any(|v| !v.is_finite()) || !margin_fraction.is_finite() {
        return Err(DistributionError::NonFinite);
    }
    assert!(margin_fraction >= 0.0, "margin_fraction must be >= 0");
    let min = y_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = y_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lower, upper) = if max == min {
        (min - 0.5, min + 0.5)
    } else {
        let range = max - min;
        (min - margin_fraction * range, max + margin_fraction * range)
    };
    Ok(BucketSpec::new(lower, upper, count))
}

/// Buckets over the normalized output support [0, 1] used throughout
/// training and evaluation (datasets are min-max normalized).
pub fn unit_buckets(count: usize) -> BucketSpec {
    BucketSpec::new(0.0, 1.0, count)
}

/// Normalized bucket weights, `softmax(logits)`.
pub fn bucket_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log density of `y` under the piecewise-constant density implied by
/// `logits`: `log(weight_b / width_b)` for y's bucket.
pub fn log_prob(logits: &[f64], y: f64, spec: &BucketSpec) -> Result<f64, DistributionError> {
    assert_eq!(logits.len(), spec.count(), "logit count mismatch");
    let b = spec.bucket_of(y)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits[b] - lse - spec.width().ln())
}

/// Exact `E[max(0, y - best)]` under the bucketed density.
///
/// Buckets entirely above `best` contribute `weight * (center - best)`; the
/// bucket straddling `best` contributes `weight * (upper_b - best)^2 /
/// (2 * width)`.
pub fn expected_improvement(logits: &[f64], spec: &BucketSpec, best: f64) -> f64 {
    assert_eq!(logits.len(), spec.count(), "logit count mismatch");
    assert!(best.is_finite(), "best must be finite");
    let weights = bucket_weights(logits);
    let width = spec.width();
    let mut ei = 0.0;
    for (b, w) in weights.iter().enumerate() {
        let lo = spec.boundary(b);
        let hi = spec.boundary(b + 1);
        if hi <= best {
            continue;
        }
        if lo >= best {
            ei += w * (spec.center(b) - best);
        } else {
            ei += w * (hi - best) * (hi - best) / (2.0 * width);
        }
    }
    ei.max(0.0)
}
