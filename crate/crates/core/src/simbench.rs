//! Synthetic solver with known decay, plus its analytic first-solve oracle.
//!
//! A generation succeeds with probability `p0`. The `j`-th consecutive
//! repair since the last generation succeeds with probability
//! `q0·exp(−λ*·(j−1))`. With `fresh_redraw`, a fresh generation is a new
//! draw at `p0`; without it, the regenerated candidate is the original
//! failing one (success probability 0). Either way the context reset
//! restarts the repair clock.
//!
//! Every draw is a pure function of `(seed, problem_id, attempt index)`,
//! taken from a counter-based ChaCha stream, so scheduling and thread
//! interleaving cannot change outcomes.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{
    self, AttemptKind, Candidate, GenerateRequest, RepairRequest, RunConfig, Solver, SolverError,
    VerdictEvaluator, FAIL_VERDICT, PASS_VERDICT,
};
use crate::trace::{ProblemRecord, RunTrace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid synthetic model: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub p0: f64,
    pub q0: f64,
    pub lambda_star: f64,
    pub fresh_redraw: bool,
    pub seed: u64,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            p0: 0.5,
            q0: 0.3,
            lambda_star: 1.2,
            fresh_redraw: true,
            seed: 42,
        }
    }
}

impl SyntheticModelSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::InvalidSpec(format!(
                    "{name} = {v} is not a probability"
                )))
            }
        };
        prob("p0", self.p0)?;
        prob("q0", self.q0)?;
        if !(self.lambda_star >= 0.0 && self.lambda_star.is_finite()) {
            return Err(SimError::InvalidSpec(format!(
                "lambda_star = {} must be finite and non-negative",
                self.lambda_star
            )));
        }
        Ok(())
    }

    /// Success probability of an attempt of `kind` with `clock` consecutive
    /// repairs since the last generation (including this one).
    pub fn success_probability(&self, kind: AttemptKind, clock: u32) -> f64 {
        match kind {
            AttemptKind::Generation => self.p0,
            AttemptKind::FreshGeneration if self.fresh_redraw => self.p0,
            AttemptKind::FreshGeneration => 0.0,
            AttemptKind::Debug => self.q0 * (-self.lambda_star * (clock.max(1) - 1) as f64).exp(),
        }
    }

    pub fn descriptor(&self) -> String {
        format!(
            "synthetic p0={} q0={} lambda_star={} fresh_redraw={} seed={}",
            self.p0, self.q0, self.lambda_star, self.fresh_redraw, self.seed
        )
    }
}

fn stream_id(problem_id: &str) -> u64 {
    // FNV-1a
    problem_id.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Uniform draw in `[0, 1)` for one attempt.
pub fn attempt_uniform(seed: u64, problem_id: &str, attempt_index: u32) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(problem_id));
    rng.set_word_pos(attempt_index as u128 * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Solver whose success follows [`SyntheticModelSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticSolver {
    spec: SyntheticModelSpec,
}

pub fn synthetic_solver(spec: SyntheticModelSpec) -> Result<SyntheticSolver, SimError> {
    spec.validate()?;
    Ok(SyntheticSolver { spec })
}

impl SyntheticSolver {
    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    fn attempt(
        &self,
        problem_id: &str,
        index: u32,
        kind: AttemptKind,
        clock: u32,
        tokens_in: u64,
    ) -> Candidate {
        let p = self.spec.success_probability(kind, clock);
        let passed = attempt_uniform(self.spec.seed, problem_id, index) < p;
        let verdict = if passed { PASS_VERDICT } else { FAIL_VERDICT };
        let code = format!("def solve():\n    return {index:04}\n{verdict}");
        Candidate {
            tokens_out: code.chars().count() as u64,
            code,
            tokens_in,
        }
    }
}

impl Solver for SyntheticSolver {
    fn generate(&self, r: &GenerateRequest<'_>) -> Result<Candidate, SolverError> {
        Ok(self.attempt(
            r.problem_id,
            r.attempt_index,
            r.kind,
            0,
            r.statement.chars().count() as u64,
        ))
    }

    fn repair(&self, r: &RepairRequest<'_>) -> Result<Candidate, SolverError> {
        let clock = r.context.turns.len() as u32;
        Ok(self.attempt(
            r.problem_id,
            r.attempt_index,
            AttemptKind::Debug,
            clock,
            r.context.char_len() as u64,
        ))
    }

    fn descriptor(&self) -> String {
        self.spec.descriptor()
    }
}

/// Expected fraction of problems first solved at each schedule position:
/// `s(t)·∏_{u<t}(1 − s(u))`.
pub fn expected_first_solve_mass(spec: &SyntheticModelSpec, schedule: &[AttemptKind]) -> Vec<f64> {
    let mut survival = 1.0;
    let mut clock = 0;
    schedule
        .iter()
        .map(|&kind| {
            clock = if kind.is_generation() { 0 } else { clock + 1 };
            let s = spec.success_probability(kind, clock);
            let mass = s * survival;
            survival *= 1.0 - s;
            mass
        })
        .collect()
}

/// Expected fraction solved within the schedule.
pub fn expected_final_accuracy(spec: &SyntheticModelSpec, schedule: &[AttemptKind]) -> f64 {
    expected_first_solve_mass(spec, schedule).iter().sum()
}

/// `n` synthetic problems with stable ids.
pub fn synthetic_problems(n: usize) -> Vec<ProblemRecord> {
    (0..n)
        .map(|i| ProblemRecord {
            problem_id: format!("sim-{i:05}"),
            statement: format!("Synthetic problem {i:05}: implement solve()."),
            test_suite_id: format!("sim-tests-{i:05}"),
            dataset_id: "synthetic".into(),
        })
        .collect()
}

pub fn schedule_descriptor(schedule: &[AttemptKind]) -> String {
    let kinds: Vec<&str> = schedule.iter().map(|k| k.short_name()).collect();
    format!("schedule={}", kinds.join(","))
}

/// Monte Carlo trace through the real harness path.
pub fn generate_trace(
    spec: &SyntheticModelSpec,
    n_problems: usize,
    schedule: &[AttemptKind],
) -> Result<RunTrace, SimError> {
    if n_problems == 0 {
        return Err(SimError::InvalidSpec(
            "n_problems must be at least 1".into(),
        ));
    }
    let solver = synthetic_solver(*spec)?;
    let problems = synthetic_problems(n_problems);
    let config = RunConfig {
        model_id: "synthetic".into(),
        dataset_id: "synthetic".into(),
        budget: schedule.len() as u32,
        parallelism: rayon::current_num_threads(),
        ..RunConfig::default()
    };
    let descriptor = format!("{} {}", schedule_descriptor(schedule), spec.descriptor());
    let outcome = harness::run_with_schedule(
        &problems,
        &solver,
        &VerdictEvaluator,
        schedule,
        &config,
        descriptor,
        None,
    )?;
    Ok(outcome.trace)
}
