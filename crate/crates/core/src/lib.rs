//! Debugging decay analysis for iterative LLM code repair.
//!
//! The crate is organised bottom-up:
//!
//! - [`trace`]: attempt records, run traces, the line-delimited trace file
//!   format, and first-solve aggregation.
//! - [`metrics`]: initial effectiveness, final accuracy, effectiveness
//!   series and the unbiased pass@k estimator.
//! - [`decayfit`]: exponential decay fitting, R², half-life, intervention
//!   points and the assembled decay index.
//! - [`harness`]: budgeted generate/evaluate/repair loops with fresh-start
//!   scheduling against pluggable solvers and evaluators.
//! - [`simbench`]: a synthetic solver with known decay and its analytic
//!   first-solve oracle.
//! - [`report`]: tables, curve data and the command implementations used by
//!   the `ddi` binary.

pub mod decayfit;
pub mod harness;
pub mod metrics;
pub mod report;
pub mod simbench;
pub mod trace;

pub use decayfit::{ddi, fit_exponential, DdiResult, DecayFit, FitQuality, Theta};
pub use harness::{
    Candidate, Conversation, Evaluation, Evaluator, FreshStartPolicy, PolicyMode, Solver,
};
pub use metrics::{pass_at_k, EffectivenessSeries, Histogram};
pub use trace::{AttemptKind, AttemptRecord, ProblemRecord, RunTrace};
