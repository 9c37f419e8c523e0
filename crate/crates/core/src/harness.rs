//! Budgeted generate → evaluate → repair loops with fresh-start scheduling.
//!
//! A run gives every problem the same attempt budget. Generations, fresh
//! generations and repair attempts all count against it. A fresh start
//! discards the conversation and regenerates from the bare statement; the
//! debug clock (`attempts_since_generation`) restarts with it.

use std::fmt;
use std::fs;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::decayfit::{self, DdiResult, Theta};
use crate::trace::{AttemptRecord, ProblemRecord, RunTrace};

pub use crate::trace::AttemptKind;

pub const DEFAULT_BUDGET: u32 = 6;
pub const DEFAULT_FEEDBACK_CAP: usize = 4_000;
pub const DEFAULT_EVAL_TIMEOUT: Duration = Duration::from_secs(10);

/// Feedback recorded when a failing evaluation produced no output.
pub const EMPTY_FAILURE_FEEDBACK: &str = "tests failed (no output)";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("solver error: {0}")]
    Failed(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation timed out after {0:?}")]
    Timeout(Duration),
    #[error("evaluator io error: {0}")]
    Io(#[from] io::Error),
}

/// A candidate solution and the tokens spent producing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub code: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// One prior attempt as seen by the repair call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub candidate: String,
    pub feedback: String,
}

/// Conversation context since the last (fresh) generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub statement: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    fn fresh(statement: &str) -> Self {
        Self {
            statement: statement.to_string(),
            turns: Vec::new(),
        }
    }

    /// Feedback of the most recent attempt.
    pub fn latest_feedback(&self) -> Option<&str> {
        self.turns.last().map(|t| t.feedback.as_str())
    }

    /// Total characters of context, used by token estimators.
    pub fn char_len(&self) -> usize {
        self.statement.chars().count()
            + self
                .turns
                .iter()
                .map(|t| t.candidate.chars().count() + t.feedback.chars().count())
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub problem_id: &'a str,
    pub statement: &'a str,
    pub kind: AttemptKind,
    pub attempt_index: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct RepairRequest<'a> {
    pub problem_id: &'a str,
    pub attempt_index: u32,
    pub context: &'a Conversation,
}

/// Produces candidates. `generate` sees only the problem statement;
/// `repair` sees exactly the context the harness passes.
pub trait Solver: Send + Sync {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Candidate, SolverError>;
    fn repair(&self, request: &RepairRequest<'_>) -> Result<Candidate, SolverError>;

    /// Maximum number of problems the solver may serve concurrently.
    fn concurrency_limit(&self) -> Option<usize> {
        None
    }

    /// Extra text appended to the run's policy descriptor.
    fn descriptor(&self) -> String {
        String::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    pub passed: bool,
    pub feedback: String,
}

/// Judges candidates against a test suite. Must be deterministic.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, candidate: &str, test_suite_id: &str) -> Result<Evaluation, EvalError>;
}

/// Line marking a candidate as passing for [`VerdictEvaluator`].
pub const PASS_VERDICT: &str = "# verdict: pass";
/// Line marking a candidate as failing for [`VerdictEvaluator`].
pub const FAIL_VERDICT: &str = "# verdict: fail";

/// Evaluator for synthetic and scripted solvers: a candidate passes iff its
/// last line is [`PASS_VERDICT`].
#[derive(Debug, Clone, Default)]
pub struct VerdictEvaluator;

impl Evaluator for VerdictEvaluator {
    fn evaluate(&self, candidate: &str, test_suite_id: &str) -> Result<Evaluation, EvalError> {
        let passed = candidate.lines().last().map(str::trim) == Some(PASS_VERDICT);
        Ok(Evaluation {
            passed,
            feedback: if passed {
                String::new()
            } else {
                format!("AssertionError: {test_suite_id} failed")
            },
        })
    }
}

/// Runs an external test-runner command per candidate.
///
/// The command is invoked as `program [args..] <candidate-file> <test-suite-id>`;
/// exit status 0 means every test passed. Combined stdout and stderr become
/// the feedback.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
    pub file_suffix: String,
}

impl CommandEvaluator {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout: DEFAULT_EVAL_TIMEOUT,
            file_suffix: ".py".into(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, candidate: &str, test_suite_id: &str) -> Result<Evaluation, EvalError> {
        let dir = tempfile::tempdir()?;
        let source = dir.path().join(format!("candidate{}", self.file_suffix));
        fs::write(&source, candidate)?;
        let stdout_path = dir.path().join("stdout");
        let stderr_path = dir.path().join("stderr");

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&source)
            .arg(test_suite_id)
            .stdin(Stdio::null())
            .stdout(fs::File::create(&stdout_path)?)
            .stderr(fs::File::create(&stderr_path)?)
            .spawn()?;

        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EvalError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        };

        let mut feedback = fs::read_to_string(&stdout_path)?;
        feedback.push_str(&fs::read_to_string(&stderr_path)?);
        if status.success() {
            return Ok(Evaluation {
                passed: true,
                feedback: String::new(),
            });
        }
        let feedback = feedback.trim().to_string();
        Ok(Evaluation {
            passed: false,
            feedback: if feedback.is_empty() {
                format!("test runner exited with {status}")
            } else {
                feedback
            },
        })
    }
}

/// When fresh starts happen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyMode {
    None,
    FixedT(u32),
    DdiCalibrated { theta: Theta },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreshStartPolicy {
    pub mode: PolicyMode,
    /// Fresh starts recur after every `t` consecutive debug attempts.
    pub repeat: bool,
}

impl FreshStartPolicy {
    pub fn none() -> Self {
        Self {
            mode: PolicyMode::None,
            repeat: true,
        }
    }

    pub fn fixed(t: u32) -> Self {
        Self {
            mode: PolicyMode::FixedT(t),
            repeat: true,
        }
    }

    pub fn ddi(theta: Theta) -> Self {
        Self {
            mode: PolicyMode::DdiCalibrated { theta },
            repeat: true,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            PolicyMode::None => "none",
            PolicyMode::FixedT(_) => "fixed_t",
            PolicyMode::DdiCalibrated { .. } => "ddi_calibrated",
        }
    }

    pub fn theta(&self) -> Option<Theta> {
        match self.mode {
            PolicyMode::DdiCalibrated { theta } => Some(theta),
            _ => None,
        }
    }

    /// Debug attempts between fresh starts: the fixed interval, or `t_θ`
    /// from the calibration decay constant.
    pub fn resolve_interval(
        &self,
        calibration_lambda: Option<f64>,
    ) -> Result<Option<u32>, HarnessError> {
        match self.mode {
            PolicyMode::None => Ok(None),
            PolicyMode::FixedT(0) => Err(HarnessError::Config(
                "fixed_t interval must be at least 1".into(),
            )),
            PolicyMode::FixedT(t) => Ok(Some(t)),
            PolicyMode::DdiCalibrated { theta } => {
                let lambda = calibration_lambda.ok_or_else(|| {
                    HarnessError::Config(
                        "ddi_calibrated policy needs a calibration decay constant".into(),
                    )
                })?;
                decayfit::t_theta(lambda, theta).map(Some).ok_or_else(|| {
                    HarnessError::Config(format!(
                        "calibration decay constant {lambda} does not decay; no intervention point"
                    ))
                })
            }
        }
    }
}

impl fmt::Display for FreshStartPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode={}", self.mode_name())?;
        match self.mode {
            PolicyMode::None => {}
            PolicyMode::FixedT(t) => write!(f, " t={t}")?,
            PolicyMode::DdiCalibrated { theta } => write!(f, " theta={theta}")?,
        }
        write!(f, " repeat={}", self.repeat)
    }
}

/// The attempt kinds issued for one problem, in order. Always exactly
/// `budget` long and starting with a generation.
pub fn schedule_kinds(
    policy: &FreshStartPolicy,
    t_theta: Option<u32>,
    budget: u32,
) -> Result<Vec<AttemptKind>, HarnessError> {
    if budget == 0 {
        return Err(HarnessError::Config("budget must be at least 1".into()));
    }
    let interval = match policy.mode {
        PolicyMode::None => None,
        _ => match t_theta {
            Some(0) => return Err(HarnessError::Config("t_theta must be at least 1".into())),
            Some(t) => Some(t),
            None => {
                return Err(HarnessError::Config(format!(
                    "policy {} needs a resolved t_theta",
                    policy.mode_name()
                )))
            }
        },
    };

    let mut kinds = Vec::with_capacity(budget as usize);
    kinds.push(AttemptKind::Generation);
    let mut since_generation = 0;
    let mut fresh_starts = 0;
    while kinds.len() < budget as usize {
        let due =
            interval.is_some_and(|t| since_generation == t) && (policy.repeat || fresh_starts == 0);
        if due {
            kinds.push(AttemptKind::FreshGeneration);
            since_generation = 0;
            fresh_starts += 1;
        } else {
            kinds.push(AttemptKind::Debug);
            since_generation += 1;
        }
    }
    Ok(kinds)
}

fn truncate_chars(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text.to_string(),
    }
}

/// Runs one problem through `schedule`, stopping at the first pass.
pub fn run_problem(
    problem: &ProblemRecord,
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    schedule: &[AttemptKind],
    feedback_cap: usize,
    model_id: &str,
) -> Vec<AttemptRecord> {
    let mut records = Vec::new();
    let mut context = Conversation::fresh(&problem.statement);
    let mut since_generation = 0u32;

    for (index, &kind) in schedule.iter().enumerate() {
        let index = index as u32;
        let produced = if kind.is_generation() {
            context = Conversation::fresh(&problem.statement);
            since_generation = 0;
            solver.generate(&GenerateRequest {
                problem_id: &problem.problem_id,
                statement: &problem.statement,
                kind,
                attempt_index: index,
            })
        } else {
            since_generation += 1;
            solver.repair(&RepairRequest {
                problem_id: &problem.problem_id,
                attempt_index: index,
                context: &context,
            })
        };

        let (candidate, evaluation, tokens) = match produced {
            Ok(c) => {
                let evaluation = match evaluator.evaluate(&c.code, &problem.test_suite_id) {
                    Ok(e) => e,
                    Err(e) => Evaluation {
                        passed: false,
                        feedback: e.to_string(),
                    },
                };
                (c.code, evaluation, (c.tokens_in, c.tokens_out))
            }
            Err(e) => (
                String::new(),
                Evaluation {
                    passed: false,
                    feedback: e.to_string(),
                },
                (0, 0),
            ),
        };
        let feedback = if evaluation.passed {
            String::new()
        } else if evaluation.feedback.is_empty() {
            EMPTY_FAILURE_FEEDBACK.to_string()
        } else {
            evaluation.feedback
        };

        records.push(AttemptRecord {
            problem_id: problem.problem_id.clone(),
            global_attempt_index: index,
            attempt_kind: kind,
            attempts_since_generation: since_generation,
            passed: evaluation.passed,
            feedback: feedback.clone(),
            tokens_in: tokens.0,
            tokens_out: tokens.1,
            model_id: model_id.to_string(),
            candidate: None,
        });
        if evaluation.passed {
            break;
        }
        context.turns.push(Turn {
            candidate,
            feedback: truncate_chars(&feedback, feedback_cap),
        });
    }
    records
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model_id: String,
    pub dataset_id: String,
    pub policy: FreshStartPolicy,
    pub budget: u32,
    pub parallelism: usize,
    pub feedback_cap: usize,
    /// Decay constant from a prior calibration run, for `ddi_calibrated`.
    pub calibration_lambda: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_id: "model".into(),
            dataset_id: "dataset".into(),
            policy: FreshStartPolicy::none(),
            budget: DEFAULT_BUDGET,
            parallelism: 1,
            feedback_cap: DEFAULT_FEEDBACK_CAP,
            calibration_lambda: None,
        }
    }
}

/// Non-fatal events collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunReport {
    pub warnings: Vec<String>,
    /// Problems whose attempt loop aborted (solver panic); they have no records.
    pub failed_problems: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub report: RunReport,
}

/// Callback invoked with each problem's records as soon as it finishes.
pub type ProblemSink<'a> = &'a (dyn Fn(&[AttemptRecord]) + Sync);

/// Runs every problem through the same schedule. Records appear in the
/// trace grouped by problem, in input order, whatever the parallelism.
pub fn run_with_schedule(
    problems: &[ProblemRecord],
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    schedule: &[AttemptKind],
    config: &RunConfig,
    policy_descriptor: String,
    sink: Option<ProblemSink<'_>>,
) -> Result<RunOutcome, HarnessError> {
    if problems.is_empty() {
        return Err(HarnessError::Config("no problems to run".into()));
    }
    if schedule.first() != Some(&AttemptKind::Generation) {
        return Err(HarnessError::Config(
            "schedule must start with a generation".into(),
        ));
    }
    let threads = config
        .parallelism
        .max(1)
        .min(solver.concurrency_limit().unwrap_or(usize::MAX).max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;

    let sink_lock = Mutex::new(());
    let results: Vec<Result<Vec<AttemptRecord>, String>> = pool.install(|| {
        problems
            .par_iter()
            .map(|problem| {
                let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
                    run_problem(
                        problem,
                        solver,
                        evaluator,
                        schedule,
                        config.feedback_cap,
                        &config.model_id,
                    )
                }));
                let records = outcome.map_err(|payload| {
                    let msg = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    format!("{}: {msg}", problem.problem_id)
                })?;
                if let Some(sink) = sink {
                    let _guard = sink_lock.lock().unwrap_or_else(|e| e.into_inner());
                    sink(&records);
                }
                Ok(records)
            })
            .collect()
    });

    let mut trace = RunTrace::new(
        &config.model_id,
        &config.dataset_id,
        schedule.len() as u32,
        policy_descriptor,
        problems.len() as u32,
    );
    let mut report = RunReport::default();
    for result in results {
        match result {
            Ok(records) => trace.records.extend(records),
            Err(msg) => {
                report.warnings.push(format!("problem aborted: {msg}"));
                report.failed_problems.push(msg);
            }
        }
    }
    Ok(RunOutcome { trace, report })
}

pub fn policy_descriptor(
    policy: &FreshStartPolicy,
    t_theta: Option<u32>,
    feedback_cap: usize,
    solver: &dyn Solver,
) -> String {
    let mut out = policy.to_string();
    if let Some(t) = t_theta {
        out.push_str(&format!(" t_theta={t}"));
    }
    out.push_str(&format!(" feedback_cap={feedback_cap}"));
    let extra = solver.descriptor();
    if !extra.is_empty() {
        out.push(' ');
        out.push_str(&extra);
    }
    out
}

/// Resolves the policy's schedule and runs every problem under it.
pub fn run_benchmark(
    problems: &[ProblemRecord],
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    config: &RunConfig,
    sink: Option<ProblemSink<'_>>,
) -> Result<RunOutcome, HarnessError> {
    let interval = config.policy.resolve_interval(config.calibration_lambda)?;
    let schedule = schedule_kinds(&config.policy, interval, config.budget)?;
    let descriptor = policy_descriptor(&config.policy, interval, config.feedback_cap, solver);
    run_with_schedule(
        problems, solver, evaluator, &schedule, config, descriptor, sink,
    )
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub calibration: DdiResult,
    pub baseline: RunTrace,
    pub intervention: RunTrace,
    pub report: RunReport,
}

/// Two-phase campaign: a baseline run without fresh starts calibrates the
/// decay constant, then a second run restarts at the calibrated `t_θ`.
///
/// If the baseline yields no decaying fit, the second run falls back to no
/// fresh starts and the report carries a warning.
pub fn calibrate_and_run(
    problems: &[ProblemRecord],
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    theta: Theta,
    config: &RunConfig,
) -> Result<CalibrationOutcome, HarnessError> {
    let baseline_config = RunConfig {
        policy: FreshStartPolicy::none(),
        calibration_lambda: None,
        ..config.clone()
    };
    let baseline = run_benchmark(problems, solver, evaluator, &baseline_config, None)?;

    let mut thetas = Theta::defaults();
    thetas.push(theta);
    let calibration = decayfit::ddi_from_trace(&baseline.trace, &thetas)
        .map_err(|e| HarnessError::Config(format!("calibration failed: {e}")))?;

    let mut report = baseline.report;
    let lambda = calibration.lambda().filter(|l| *l > 0.0);
    let intervention = match lambda {
        Some(lambda) => {
            let cfg = RunConfig {
                policy: FreshStartPolicy {
                    mode: PolicyMode::DdiCalibrated { theta },
                    repeat: config.policy.repeat,
                },
                calibration_lambda: Some(lambda),
                ..config.clone()
            };
            run_benchmark(problems, solver, evaluator, &cfg, None)?
        }
        None => {
            let reason = match calibration.lambda() {
                None => "calibration fit absent".to_string(),
                Some(l) => format!("calibration decay constant {l:.4} is not positive"),
            };
            report.warnings.push(format!(
                "{reason}; intervention run degraded to policy none"
            ));
            let schedule = schedule_kinds(&FreshStartPolicy::none(), None, config.budget)?;
            let descriptor = format!(
                "{} degraded_from=ddi_calibrated theta={theta}",
                policy_descriptor(&FreshStartPolicy::none(), None, config.feedback_cap, solver)
            );
            run_with_schedule(
                problems,
                solver,
                evaluator,
                &schedule,
                &baseline_config,
                descriptor,
                None,
            )?
        }
    };
    report.warnings.extend(intervention.report.warnings);
    report
        .failed_problems
        .extend(intervention.report.failed_problems);

    Ok(CalibrationOutcome {
        calibration,
        baseline: baseline.trace,
        intervention: intervention.trace,
        report,
    })
}

/// Scripted solver for tests and demos: per-problem verdicts by attempt
/// index, with every request captured.
pub mod scripted {
    use std::collections::HashMap;
    use std::sync::Mutex;

    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub enum Captured {
        Generate {
            problem_id: String,
            attempt_index: u32,
            kind: AttemptKind,
            statement: String,
        },
        Repair {
            problem_id: String,
            attempt_index: u32,
            context: Conversation,
        },
    }

    /// Passes at the listed attempt indices (per problem id, or for every
    /// problem via `default_pass_at`). Tokens in are the context length in
    /// characters, tokens out a constant.
    #[derive(Debug, Default)]
    pub struct ScriptedSolver {
        pub pass_at: HashMap<String, Vec<u32>>,
        pub default_pass_at: Vec<u32>,
        pub fail_transport_at: Vec<u32>,
        captured: Mutex<Vec<Captured>>,
    }

    impl ScriptedSolver {
        pub fn passing_at(indices: &[u32]) -> Self {
            Self {
                default_pass_at: indices.to_vec(),
                ..Default::default()
            }
        }

        pub fn never_passing() -> Self {
            Self::default()
        }

        /// Makes the solver fail with a transport error at these indices.
        pub fn failing_transport_at(mut self, indices: &[u32]) -> Self {
            self.fail_transport_at = indices.to_vec();
            self
        }

        pub fn captured(&self) -> Vec<Captured> {
            self.captured.lock().unwrap().clone()
        }

        fn verdict(&self, problem_id: &str, index: u32) -> Result<Candidate, SolverError> {
            if self.fail_transport_at.contains(&index) {
                return Err(SolverError::Transport("scripted endpoint failure".into()));
            }
            let passes = self
                .pass_at
                .get(problem_id)
                .unwrap_or(&self.default_pass_at)
                .contains(&index);
            let verdict = if passes { PASS_VERDICT } else { FAIL_VERDICT };
            Ok(Candidate {
                code: format!("def solve():\n    return {index}\n{verdict}"),
                tokens_in: 0,
                tokens_out: 8,
            })
        }
    }

    impl Solver for ScriptedSolver {
        fn generate(&self, r: &GenerateRequest<'_>) -> Result<Candidate, SolverError> {
            self.captured.lock().unwrap().push(Captured::Generate {
                problem_id: r.problem_id.into(),
                attempt_index: r.attempt_index,
                kind: r.kind,
                statement: r.statement.into(),
            });
            let mut c = self.verdict(r.problem_id, r.attempt_index)?;
            c.tokens_in = r.statement.chars().count() as u64;
            Ok(c)
        }

        fn repair(&self, r: &RepairRequest<'_>) -> Result<Candidate, SolverError> {
            self.captured.lock().unwrap().push(Captured::Repair {
                problem_id: r.problem_id.into(),
                attempt_index: r.attempt_index,
                context: r.context.clone(),
            });
            let mut c = self.verdict(r.problem_id, r.attempt_index)?;
            c.tokens_in = r.context.char_len() as u64;
            Ok(c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::scripted::{Captured, ScriptedSolver};
    use super::*;
    use crate::metrics;
    use crate::trace::first_solve_histogram;
    use proptest::prelude::*;
    use AttemptKind::{Debug as D, FreshGeneration as F, Generation as G};

    fn problem(id: &str) -> ProblemRecord {
        ProblemRecord {
            problem_id: id.into(),
            statement: format!("Write solve() for {id}."),
            test_suite_id: format!("tests/{id}"),
            dataset_id: "toy".into(),
        }
    }

    fn problems(n: usize) -> Vec<ProblemRecord> {
        (0..n).map(|i| problem(&format!("P{i:03}"))).collect()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(
            schedule_kinds(&FreshStartPolicy::none(), None, 6).unwrap(),
            vec![G, D, D, D, D, D]
        );
        assert_eq!(
            schedule_kinds(&FreshStartPolicy::fixed(2), Some(2), 6).unwrap(),
            vec![G, D, D, F, D, D]
        );
        assert_eq!(
            schedule_kinds(&FreshStartPolicy::fixed(1), Some(1), 4).unwrap(),
            vec![G, D, F, D]
        );
        let once = FreshStartPolicy {
            mode: PolicyMode::FixedT(1),
            repeat: false,
        };
        assert_eq!(
            schedule_kinds(&once, Some(1), 6).unwrap(),
            vec![G, D, F, D, D, D]
        );
        assert_eq!(
            schedule_kinds(&FreshStartPolicy::none(), None, 1).unwrap(),
            vec![G]
        );
        assert!(schedule_kinds(&FreshStartPolicy::fixed(2), None, 6).is_err());
        assert!(schedule_kinds(&FreshStartPolicy::none(), None, 0).is_err());
    }

    #[test]
    fn resolve_interval_from_calibration() {
        let p = FreshStartPolicy::ddi(Theta::new(50.0).unwrap());
        assert_eq!(p.resolve_interval(Some(1.1142)).unwrap(), Some(1));
        assert!(p.resolve_interval(None).is_err());
        assert!(p.resolve_interval(Some(-0.2)).is_err());
        assert!(FreshStartPolicy::fixed(0).resolve_interval(None).is_err());
    }

    #[test]
    fn pass_at_generation_gives_one_record() {
        let solver = ScriptedSolver::passing_at(&[0]);
        let recs = run_problem(
            &problem("a"),
            &solver,
            &VerdictEvaluator,
            &[G, D, D],
            4000,
            "m",
        );
        assert_eq!(recs.len(), 1);
        assert!(recs[0].passed);
        assert_eq!(recs[0].attempt_kind, G);
        assert!(recs[0].feedback.is_empty());
    }

    #[test]
    fn never_passing_exhausts_budget() {
        let solver = ScriptedSolver::never_passing();
        let schedule = schedule_kinds(&FreshStartPolicy::none(), None, 6).unwrap();
        let recs = run_problem(
            &problem("a"),
            &solver,
            &VerdictEvaluator,
            &schedule,
            4000,
            "m",
        );
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| !r.passed && !r.feedback.is_empty()));
        let clocks: Vec<u32> = recs.iter().map(|r| r.attempts_since_generation).collect();
        assert_eq!(clocks, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fresh_generation_sees_only_statement() {
        let solver = ScriptedSolver::passing_at(&[3]);
        let p = problem("a");
        let recs = run_problem(
            &p,
            &solver,
            &VerdictEvaluator,
            &[G, D, D, F, D, D],
            4000,
            "m",
        );
        assert_eq!(recs.len(), 4);
        assert!(recs[3].passed);
        assert_eq!(recs[3].attempt_kind, F);
        assert_eq!(recs[3].attempts_since_generation, 0);

        let captured = solver.captured();
        assert_eq!(
            captured[3],
            Captured::Generate {
                problem_id: "a".into(),
                attempt_index: 3,
                kind: F,
                statement: p.statement.clone(),
            }
        );
        // the second repair carries the generation and first repair
        match &captured[2] {
            Captured::Repair { context, .. } => {
                assert_eq!(context.turns.len(), 2);
                assert_eq!(context.statement, p.statement);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repair_after_fresh_start_has_no_earlier_material() {
        let solver = ScriptedSolver::never_passing();
        let p = problem("a");
        run_problem(&p, &solver, &VerdictEvaluator, &[G, D, F, D, D], 4000, "m");
        let captured = solver.captured();
        match &captured[3] {
            Captured::Repair {
                context,
                attempt_index,
                ..
            } => {
                assert_eq!(*attempt_index, 3);
                assert_eq!(context.turns.len(), 1);
                assert!(context.turns[0].candidate.contains("return 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feedback_is_truncated_for_repair_only() {
        struct Verbose;
        impl Evaluator for Verbose {
            fn evaluate(&self, _: &str, _: &str) -> Result<Evaluation, EvalError> {
                Ok(Evaluation {
                    passed: false,
                    feedback: "é".repeat(50),
                })
            }
        }
        let solver = ScriptedSolver::never_passing();
        let recs = run_problem(&problem("a"), &solver, &Verbose, &[G, D], 10, "m");
        assert_eq!(recs[0].feedback.chars().count(), 50);
        match &solver.captured()[1] {
            Captured::Repair { context, .. } => {
                assert_eq!(context.latest_feedback().unwrap().chars().count(), 10)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn solver_failure_is_a_failed_attempt() {
        let solver = ScriptedSolver::passing_at(&[1]).failing_transport_at(&[0]);
        let recs = run_problem(
            &problem("a"),
            &solver,
            &VerdictEvaluator,
            &[G, D],
            4000,
            "m",
        );
        assert_eq!(recs.len(), 2);
        assert!(recs[0].feedback.contains("transport error"));
        assert_eq!((recs[0].tokens_in, recs[0].tokens_out), (0, 0));
        assert!(recs[1].passed);
    }

    #[test]
    fn evaluator_timeout_is_a_failed_attempt() {
        struct Slow;
        impl Evaluator for Slow {
            fn evaluate(&self, _: &str, _: &str) -> Result<Evaluation, EvalError> {
                Err(EvalError::Timeout(Duration::from_secs(10)))
            }
        }
        let recs = run_problem(
            &problem("a"),
            &ScriptedSolver::passing_at(&[0]),
            &Slow,
            &[G],
            4000,
            "m",
        );
        assert!(!recs[0].passed);
        assert!(recs[0].feedback.contains("timed out"));
    }

    #[test]
    fn benchmark_all_pass() {
        let ps = problems(10);
        let out = run_benchmark(
            &ps,
            &ScriptedSolver::passing_at(&[0]),
            &VerdictEvaluator,
            &RunConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.trace.records.len(), 10);
        out.trace.validate().unwrap();
        let hist = first_solve_histogram(&out.trace);
        assert_eq!(metrics::final_accuracy(&hist, 6, 10).unwrap(), 1.0);
    }

    #[test]
    fn benchmark_is_order_stable_under_parallelism() {
        let ps = problems(40);
        let solver = ScriptedSolver::passing_at(&[2]);
        let serial =
            run_benchmark(&ps, &solver, &VerdictEvaluator, &RunConfig::default(), None).unwrap();
        let cfg = RunConfig {
            parallelism: 8,
            ..RunConfig::default()
        };
        let parallel = run_benchmark(&ps, &solver, &VerdictEvaluator, &cfg, None).unwrap();
        assert_eq!(serial.trace, parallel.trace);
    }

    #[test]
    fn panicking_solver_does_not_abort_run() {
        struct Flaky;
        impl Solver for Flaky {
            fn generate(&self, r: &GenerateRequest<'_>) -> Result<Candidate, SolverError> {
                if r.problem_id == "P001" {
                    panic!("boom");
                }
                Ok(Candidate {
                    code: PASS_VERDICT.into(),
                    tokens_in: 1,
                    tokens_out: 1,
                })
            }
            fn repair(&self, _: &RepairRequest<'_>) -> Result<Candidate, SolverError> {
                unreachable!()
            }
        }
        let out = run_benchmark(
            &problems(3),
            &Flaky,
            &VerdictEvaluator,
            &RunConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.trace.records.len(), 2);
        assert_eq!(out.report.failed_problems.len(), 1);
        assert!(out.report.failed_problems[0].contains("boom"));
    }

    #[test]
    fn sink_receives_every_problem() {
        let seen = Mutex::new(0usize);
        let sink = |recs: &[AttemptRecord]| *seen.lock().unwrap() += recs.len();
        let out = run_benchmark(
            &problems(5),
            &ScriptedSolver::passing_at(&[1]),
            &VerdictEvaluator,
            &RunConfig::default(),
            Some(&sink),
        )
        .unwrap();
        assert_eq!(*seen.lock().unwrap(), out.trace.records.len());
    }

    #[test]
    fn descriptor_records_policy() {
        let cfg = RunConfig {
            policy: FreshStartPolicy::ddi(Theta::new(50.0).unwrap()),
            calibration_lambda: Some(1.1142),
            ..RunConfig::default()
        };
        let out = run_benchmark(
            &problems(2),
            &ScriptedSolver::never_passing(),
            &VerdictEvaluator,
            &cfg,
            None,
        )
        .unwrap();
        let d = &out.trace.policy_descriptor;
        assert!(d.contains("mode=ddi_calibrated"), "{d}");
        assert!(d.contains("theta=50"), "{d}");
        assert!(d.contains("t_theta=1"), "{d}");
        assert!(d.contains("feedback_cap=4000"), "{d}");
        let kinds: Vec<_> = out.trace.records[..6]
            .iter()
            .map(|r| r.attempt_kind)
            .collect();
        assert_eq!(kinds, vec![G, D, F, D, F, D]);
    }

    #[test]
    fn calibration_degrades_when_everything_passes_first() {
        let ps = problems(6);
        let solver = ScriptedSolver::passing_at(&[0]);
        let out = calibrate_and_run(
            &ps,
            &solver,
            &VerdictEvaluator,
            Theta::new(50.0).unwrap(),
            &RunConfig::default(),
        )
        .unwrap();
        assert!(out.calibration.fit.is_none());
        assert_eq!(out.baseline.records, out.intervention.records);
        assert!(out.report.warnings.iter().any(|w| w.contains("degraded")));
        assert!(out.intervention.policy_descriptor.contains("degraded_from"));
    }

    #[test]
    fn command_evaluator_runs_tests_with_timeout() {
        let pass = CommandEvaluator::new("sh", vec!["-c".into(), "exit 0".into()]);
        assert!(pass.evaluate("x", "suite").unwrap().passed);

        let fail = CommandEvaluator::new(
            "sh",
            vec![
                "-c".into(),
                "echo \"failed $1 on $2\"; exit 1".into(),
                "runner".into(),
            ],
        );
        let e = fail.evaluate("x", "suite-7").unwrap();
        assert!(!e.passed);
        assert!(e.feedback.contains("suite-7"), "{}", e.feedback);

        let slow = CommandEvaluator::new("sh", vec!["-c".into(), "sleep 5".into()])
            .with_timeout(Duration::from_millis(100));
        assert!(matches!(
            slow.evaluate("x", "s"),
            Err(EvalError::Timeout(_))
        ));

        let silent = CommandEvaluator::new("sh", vec!["-c".into(), "exit 3".into()]);
        assert!(silent.evaluate("x", "s").unwrap().feedback.contains("exit"));
    }

    proptest! {
        #[test]
        fn schedule_shape(t in 1u32..8, budget in 1u32..20, repeat in any::<bool>()) {
            let p = FreshStartPolicy { mode: PolicyMode::FixedT(t), repeat };
            let s = schedule_kinds(&p, Some(t), budget).unwrap();
            prop_assert_eq!(s.len(), budget as usize);
            prop_assert_eq!(s[0], G);
            prop_assert!(s[1..].iter().all(|k| *k != G));
            // never more than t consecutive debug attempts before a fresh start is due
            let mut run = 0;
            let mut fresh = 0;
            for k in &s[1..] {
                match k {
                    D => run += 1,
                    _ => { prop_assert_eq!(run, t); run = 0; fresh += 1; }
                }
                if repeat { prop_assert!(run <= t); }
            }
            if !repeat { prop_assert!(fresh <= 1); }
        }

        #[test]
        fn attempts_never_exceed_budget(
            pass_at in proptest::collection::vec(0u32..10, 0..3),
            t in 1u32..4,
            budget in 1u32..8,
            mode in 0u8..3,
        ) {
            let policy = match mode {
                0 => FreshStartPolicy::none(),
                1 => FreshStartPolicy::fixed(t),
                _ => FreshStartPolicy { mode: PolicyMode::FixedT(t), repeat: false },
            };
            let cfg = RunConfig { policy, budget, ..RunConfig::default() };
            let solver = ScriptedSolver::passing_at(&pass_at);
            let out = run_benchmark(&problems(3), &solver, &VerdictEvaluator, &cfg, None).unwrap();
            out.trace.validate().unwrap();
            for pid in out.trace.problem_ids() {
                let recs: Vec<_> = out.trace.records.iter().filter(|r| r.problem_id == pid).collect();
                prop_assert!(recs.len() <= budget as usize);
                // nothing after the first pass
                if let Some(pos) = recs.iter().position(|r| r.passed) {
                    prop_assert_eq!(pos, recs.len() - 1);
                }
            }
        }
    }
}
