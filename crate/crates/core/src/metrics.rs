//! Effectiveness measures derived from first-solve counts, and the unbiased
//! pass@k estimator.
//!
//! All values here are fractions in `[0, 1]`; percentages only appear in
//! rendered reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("n_total must be at least 1")]
    EmptyPopulation,
    #[error("cannot normalize: value at the first attempt is {0}")]
    ZeroBaseline(f64),
    #[error("pass@k domain error: {0}")]
    PassAtKDomain(String),
}

/// Attempt index → number of problems first solved at that index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram(BTreeMap<u32, u64>);

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, t: u32) -> u64 {
        self.0.get(&t).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.0.keys().next_back().copied()
    }
}

impl From<BTreeMap<u32, u64>> for Histogram {
    fn from(map: BTreeMap<u32, u64>) -> Self {
        Self(map.into_iter().filter(|&(_, c)| c > 0).collect())
    }
}

impl<const N: usize> From<[(u32, u64); N]> for Histogram {
    fn from(pairs: [(u32, u64); N]) -> Self {
        Self::from(BTreeMap::from(pairs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: u32,
    pub value: f64,
}

/// Ordered (attempt index, effectiveness) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessSeries {
    points: Vec<SeriesPoint>,
    normalized: bool,
}

impl EffectivenessSeries {
    /// Builds a series; points are sorted by `t`. Panics on duplicate `t`
    /// or negative / non-finite values.
    pub fn new(points: impl IntoIterator<Item = (u32, f64)>, normalized: bool) -> Self {
        let mut points: Vec<SeriesPoint> = points
            .into_iter()
            .map(|(t, value)| SeriesPoint { t, value })
            .collect();
        points.sort_by_key(|p| p.t);
        assert!(
            points.windows(2).all(|w| w[0].t < w[1].t),
            "series attempt indices must be distinct"
        );
        assert!(
            points.iter().all(|p| p.value.is_finite() && p.value >= 0.0),
            "series values must be finite and non-negative"
        );
        Self { points, normalized }
    }

    pub fn raw(points: impl IntoIterator<Item = (u32, f64)>) -> Self {
        Self::new(points, false)
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn value_at(&self, t: u32) -> Option<f64> {
        self.points.iter().find(|p| p.t == t).map(|p| p.value)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fraction of problems solved by the very first generation.
pub fn initial_effectiveness(histogram: &Histogram, n_total: u64) -> Result<f64, MetricsError> {
    if n_total == 0 {
        return Err(MetricsError::EmptyPopulation);
    }
    Ok(histogram.get(0) as f64 / n_total as f64)
}

/// Fraction of problems solved at some attempt index below `budget`.
pub fn final_accuracy(
    histogram: &Histogram,
    budget: u32,
    n_total: u64,
) -> Result<f64, MetricsError> {
    if n_total == 0 {
        return Err(MetricsError::EmptyPopulation);
    }
    let solved: u64 = histogram.counts().range(..budget).map(|(_, c)| c).sum();
    Ok(solved as f64 / n_total as f64)
}

/// Raw series `(t, count(t) / n_total)` for every `t` in `0..=max_t`.
pub fn effectiveness_series(
    histogram: &Histogram,
    n_total: u64,
    max_t: u32,
) -> Result<EffectivenessSeries, MetricsError> {
    if n_total == 0 {
        return Err(MetricsError::EmptyPopulation);
    }
    let n = n_total as f64;
    Ok(EffectivenessSeries::raw(
        (0..=max_t).map(|t| (t, histogram.get(t) as f64 / n)),
    ))
}

/// Rescales a series so its first point is exactly 1.0.
pub fn normalize_series(series: &EffectivenessSeries) -> Result<EffectivenessSeries, MetricsError> {
    let first = series.points.first().map_or(0.0, |p| p.value);
    if first <= 0.0 {
        return Err(MetricsError::ZeroBaseline(first));
    }
    let mut points: Vec<SeriesPoint> = series
        .points
        .iter()
        .map(|p| SeriesPoint {
            t: p.t,
            value: p.value / first,
        })
        .collect();
    points[0].value = 1.0;
    Ok(EffectivenessSeries {
        points,
        normalized: true,
    })
}

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`.
///
/// The binomial ratio is evaluated as a running product of `k` ratios, so
/// large `n` never overflows.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::PassAtKDomain("k must be at least 1".into()));
    }
    if k > n {
        return Err(MetricsError::PassAtKDomain(format!(
            "k = {k} exceeds n = {n}"
        )));
    }
    if c > n {
        return Err(MetricsError::PassAtKDomain(format!(
            "c = {c} exceeds n = {n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let none_correct = (0..k).fold(1.0_f64, |acc, i| acc * (n - c - i) as f64 / (n - i) as f64);
    Ok((1.0 - none_correct).clamp(0.0, 1.0))
}
