//! Exponential decay of debugging effectiveness.
//!
//! Effectiveness is modelled as `E(t) = A·exp(−λ·t)`. Fitting is nonlinear
//! least squares on the untransformed residuals:
//!
//! 1. zero-valued points are dropped; fewer than three survivors means no fit;
//! 2. `(A, λ)` are initialised by ordinary least squares on `(t, ln E)`;
//! 3. a damped Gauss–Newton (Levenberg–Marquardt) iteration refines them.
//!    The damping term is `μ·diag(JᵀJ)`; `μ` starts at 1e−3, is multiplied by
//!    10 when a trial step increases the residual and divided by 10 when it
//!    does not, and stays within `[1e−12, 1e12]`. Iteration stops when the
//!    proposed step has ∞-norm below 1e−10, or fails after 200 iterations.
//!
//! From λ follow the half-life `ln 2 / λ` and the intervention points
//! `t_θ = ⌈ln(100 / (100 − θ)) / λ⌉`, the number of debugging attempts after
//! which θ percent of the initial effectiveness has been lost.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, EffectivenessSeries};
use crate::trace::{self, RunTrace};

pub const STEP_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 200;
const INITIAL_DAMPING: f64 = 1e-3;
const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e12;
const COST_NOISE: f64 = 1e-12;

/// Minimum number of nonzero points required for a fit.
pub const MIN_FIT_POINTS: usize = 3;

/// Thresholds reported by default: 50, 80, 90, 95 and 99 percent.
pub const DEFAULT_THETAS: [f64; 5] = [50.0, 80.0, 90.0, 95.0, 99.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecayError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("fit did not converge after {iterations} iterations ({diagnostic})")]
    NonConvergence {
        best: DecayFit,
        iterations: usize,
        diagnostic: String,
    },
}

/// Fitted decay curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    pub lambda: f64,
    pub r_squared: f64,
    pub n_points_used: usize,
}

/// Effectiveness-loss threshold in percent, strictly between 0 and 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Theta(f64);

impl Theta {
    pub fn new(percent: f64) -> Result<Self, DecayError> {
        if percent.is_finite() && percent > 0.0 && percent < 100.0 {
            Ok(Self(percent))
        } else {
            Err(DecayError::Domain(format!(
                "theta must lie strictly between 0 and 100, got {percent}"
            )))
        }
    }

    pub fn percent(self) -> f64 {
        self.0
    }

    pub fn defaults() -> Vec<Theta> {
        DEFAULT_THETAS.iter().map(|&p| Theta(p)).collect()
    }

    /// Remaining fraction of initial effectiveness at this threshold.
    pub fn remaining_fraction(self) -> f64 {
        (100.0 - self.0) / 100.0
    }
}

impl TryFrom<f64> for Theta {
    type Error = DecayError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Theta::new(v)
    }
}

impl From<Theta> for f64 {
    fn from(t: Theta) -> f64 {
        t.0
    }
}

impl Eq for Theta {}

impl PartialOrd for Theta {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Theta {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.fract() == 0.0 {
            write!(f, "{}", self.0 as i64)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Fit quality class from R².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitQuality {
    Excellent,
    Good,
    Poor,
    #[serde(rename = "None")]
    NoFit,
}

impl fmt::Display for FitQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitQuality::Excellent => "Excellent",
            FitQuality::Good => "Good",
            FitQuality::Poor => "Poor",
            FitQuality::NoFit => "None",
        })
    }
}

/// `R² ≥ 0.9` Excellent, `0.7 ≤ R² < 0.9` Good, below that Poor.
pub fn classify_fit(r2: Option<f64>) -> FitQuality {
    match r2 {
        None => FitQuality::NoFit,
        Some(r) if r >= 0.9 => FitQuality::Excellent,
        Some(r) if r >= 0.7 => FitQuality::Good,
        Some(_) => FitQuality::Poor,
    }
}

pub fn predict(fit: &DecayFit, t: f64) -> f64 {
    fit.amplitude * (-fit.lambda * t).exp()
}

pub fn half_life(lambda: f64) -> Result<f64, DecayError> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(DecayError::Domain(format!(
            "half-life needs a positive decay constant, got {lambda}"
        )));
    }
    Ok(std::f64::consts::LN_2 / lambda)
}

/// Debugging attempts until θ percent of effectiveness is lost, rounded up
/// and never below one. Absent when the curve does not decay.
pub fn t_theta(lambda: f64, theta: Theta) -> Option<u32> {
    if lambda.is_nan() || lambda <= 0.0 || !lambda.is_finite() {
        return None;
    }
    let attempts = (100.0 / (100.0 - theta.percent())).ln() / lambda;
    let ceiled = attempts.ceil();
    if ceiled >= u32::MAX as f64 {
        return Some(u32::MAX);
    }
    Some((ceiled as u32).max(1))
}

/// Coefficient of determination over `(t, observed)` points.
///
/// When every observation is identical the total sum of squares vanishes;
/// the result is then 1.0 for an exact fit and 0.0 otherwise.
pub fn r_squared(points: &[(f64, f64)], amplitude: f64, lambda: f64) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|&(_, y)| (y - mean).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|&(t, y)| (y - amplitude * (-lambda * t).exp()).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

fn sum_of_squares(points: &[(f64, f64)], amplitude: f64, lambda: f64) -> f64 {
    points
        .iter()
        .map(|&(t, y)| (amplitude * (-lambda * t).exp() - y).powi(2))
        .sum()
}

/// Least-squares line `ln y = a + b·t`; returns `(exp(a), −b)`.
fn log_linear_start(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_ly = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in points {
        sxy += (t - mean_t) * (y.ln() - mean_ly);
        sxx += (t - mean_t).powi(2);
    }
    let slope = sxy / sxx;
    let intercept = mean_ly - slope * mean_t;
    (intercept.exp(), -slope)
}

/// Fits `A·exp(−λt)` to the nonzero points of `series`.
///
/// Returns `Ok(None)` when fewer than three nonzero points remain.
pub fn fit_exponential(series: &EffectivenessSeries) -> Result<Option<DecayFit>, DecayError> {
    let points: Vec<(f64, f64)> = series
        .points()
        .iter()
        .filter(|p| p.value > 0.0)
        .map(|p| (p.t as f64, p.value))
        .collect();
    if points.len() < MIN_FIT_POINTS {
        return Ok(None);
    }
    fit_points(&points).map(Some)
}

fn fit_points(original: &[(f64, f64)]) -> Result<DecayFit, DecayError> {
    // Fit in a frame starting at the first point so the amplitude stays
    // well conditioned; it is mapped back to t = 0 at the end.
    let origin = original
        .iter()
        .map(|&(t, _)| t)
        .fold(f64::INFINITY, f64::min);
    let shifted: Vec<(f64, f64)> = original.iter().map(|&(t, y)| (t - origin, y)).collect();
    let points = shifted.as_slice();

    let (mut amplitude, mut lambda) = log_linear_start(points);
    let mut cost = sum_of_squares(points, amplitude, lambda);
    let mut damping = INITIAL_DAMPING;

    let finish = |amplitude: f64, lambda: f64| {
        let amplitude = amplitude * (lambda * origin).exp();
        DecayFit {
            amplitude,
            lambda,
            r_squared: r_squared(original, amplitude, lambda),
            n_points_used: original.len(),
        }
    };

    for _ in 0..MAX_ITERATIONS {
        // Normal equations for residual r = A·e^{−λt} − y.
        let (mut h_aa, mut h_al, mut h_ll, mut g_a, mut g_l) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(t, y) in points {
            let e = (-lambda * t).exp();
            let r = amplitude * e - y;
            let j_a = e;
            let j_l = -amplitude * t * e;
            h_aa += j_a * j_a;
            h_al += j_a * j_l;
            h_ll += j_l * j_l;
            g_a += j_a * r;
            g_l += j_l * r;
        }

        let m_aa = h_aa * (1.0 + damping);
        let m_ll = h_ll * (1.0 + damping);
        let det = m_aa * m_ll - h_al * h_al;
        if !(det.is_finite() && det > 0.0) {
            if damping >= MAX_DAMPING {
                break;
            }
            damping = (damping * 10.0).min(MAX_DAMPING);
            continue;
        }
        let step_a = (-g_a * m_ll + g_l * h_al) / det;
        let step_l = (-g_l * m_aa + g_a * h_al) / det;

        let trial_a = amplitude + step_a;
        let trial_l = lambda + step_l;
        let trial_cost = sum_of_squares(points, trial_a, trial_l);
        // Near the optimum the cost cannot resolve parameter changes below
        // ~sqrt(eps); increases within rounding noise count as no increase.
        let acceptable =
            trial_a > 0.0 && trial_cost.is_finite() && trial_cost <= cost + COST_NOISE * cost;

        if step_a.abs().max(step_l.abs()) < STEP_TOLERANCE {
            if acceptable {
                amplitude = trial_a;
                lambda = trial_l;
            }
            return Ok(finish(amplitude, lambda));
        }

        if acceptable {
            amplitude = trial_a;
            lambda = trial_l;
            cost = trial_cost;
            damping = (damping / 10.0).max(MIN_DAMPING);
        } else {
            damping = (damping * 10.0).min(MAX_DAMPING);
        }
    }

    Err(DecayError::NonConvergence {
        best: finish(amplitude, lambda),
        iterations: MAX_ITERATIONS,
        diagnostic: format!("step norm stayed above {STEP_TOLERANCE:e}; damping {damping:e}"),
    })
}

/// The decay index: initial effectiveness, fitted decay, intervention
/// points, fit quality and final accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdiResult {
    pub e0: f64,
    pub fit: Option<DecayFit>,
    pub t_theta: Vec<(Theta, Option<u32>)>,
    pub r2_class: FitQuality,
    pub final_accuracy: f64,
    /// Set when the fit failed to converge; `fit` then holds the best
    /// parameters found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl DdiResult {
    pub fn lambda(&self) -> Option<f64> {
        self.fit.map(|f| f.lambda)
    }

    pub fn t_theta_for(&self, theta: Theta) -> Option<u32> {
        self.t_theta
            .iter()
            .find(|(t, _)| *t == theta)
            .and_then(|(_, v)| *v)
    }
}

pub fn ddi(
    series: &EffectivenessSeries,
    thetas: &[Theta],
    e0: f64,
    final_accuracy: f64,
) -> Result<DdiResult, DecayError> {
    if thetas.is_empty() {
        return Err(DecayError::Domain("at least one theta is required".into()));
    }
    let mut thetas = thetas.to_vec();
    thetas.sort();
    thetas.dedup();

    let (fit, r2_class, diagnostic) = match fit_exponential(series) {
        Ok(Some(fit)) => (Some(fit), classify_fit(Some(fit.r_squared)), None),
        Ok(None) => (None, FitQuality::NoFit, None),
        Err(DecayError::NonConvergence {
            best, diagnostic, ..
        }) => (Some(best), FitQuality::Poor, Some(diagnostic)),
        Err(e) => return Err(e),
    };
    let t_theta = thetas
        .iter()
        .map(|&th| (th, fit.and_then(|f| t_theta(f.lambda, th))))
        .collect();
    Ok(DdiResult {
        e0,
        fit,
        t_theta,
        r2_class,
        final_accuracy,
        diagnostic,
    })
}

/// Full pipeline from a trace: first-solve histogram, raw series over
/// `0..budget`, normalisation (falling back to the raw series when nothing
/// was solved at the first attempt), then [`ddi`].
pub fn ddi_from_trace(trace: &RunTrace, thetas: &[Theta]) -> Result<DdiResult, DecayError> {
    let hist = trace::first_solve_histogram(trace);
    let n = trace.n_problems as u64;
    let to_domain = |e: metrics::MetricsError| DecayError::Domain(e.to_string());
    let e0 = metrics::initial_effectiveness(&hist, n).map_err(to_domain)?;
    let acc = metrics::final_accuracy(&hist, trace.budget, n).map_err(to_domain)?;
    let raw = metrics::effectiveness_series(&hist, n, trace.budget.saturating_sub(1))
        .map_err(to_domain)?;
    let series = metrics::normalize_series(&raw).unwrap_or(raw);
    ddi(&series, thetas, e0, acc)
}
