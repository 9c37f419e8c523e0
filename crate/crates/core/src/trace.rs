//! Debugging traces: the append-only log of every generation, repair and
//! fresh-start attempt made for each problem of a run.
//!
//! On disk a trace is line-delimited JSON. The first line is the run header
//! (`model_id`, `dataset_id`, `budget`, `policy`, `n_problems`); every
//! following line is one [`AttemptRecord`]. Field names are the contract,
//! field order is not.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Histogram;

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub statement: String,
    pub test_suite_id: String,
    #[serde(default)]
    pub dataset_id: String,
}

/// Kind of attempt. `FreshGeneration` regenerates from the bare problem
/// statement after clearing the conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptKind {
    Generation,
    Debug,
    FreshGeneration,
}

impl AttemptKind {
    pub fn is_generation(self) -> bool {
        matches!(self, AttemptKind::Generation | AttemptKind::FreshGeneration)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            AttemptKind::Generation => "gen",
            AttemptKind::Debug => "dbg",
            AttemptKind::FreshGeneration => "fresh",
        }
    }
}

impl fmt::Display for AttemptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

fn is_empty_str(s: &str) -> bool {
    s.is_empty()
}

/// A single attempt on a single problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub problem_id: String,
    pub global_attempt_index: u32,
    pub attempt_kind: AttemptKind,
    pub attempts_since_generation: u32,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "is_empty_str")]
    pub feedback: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub model_id: String,
    /// Opaque candidate blob; not interpreted by any analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
}

/// Run-level metadata stored on the first line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_id: String,
    pub dataset_id: String,
    pub budget: u32,
    pub policy: String,
    pub n_problems: u32,
}

/// A complete run: header metadata plus records in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunTrace {
    pub model_id: String,
    pub dataset_id: String,
    pub budget: u32,
    pub policy_descriptor: String,
    pub n_problems: u32,
    pub records: Vec<AttemptRecord>,
}

/// Named invariants checked by [`RunTrace::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceRule {
    BudgetPositive,
    ProblemCountPositive,
    AttemptIndexSequence,
    FirstAttemptGeneration,
    GenerationClockReset,
    DebugClockIncrement,
    NoAttemptAfterPass,
    BudgetExceeded,
    ProblemCount,
    UnknownProblem,
}

impl TraceRule {
    pub fn name(self) -> &'static str {
        match self {
            TraceRule::BudgetPositive => "budget-positive",
            TraceRule::ProblemCountPositive => "n-problems-positive",
            TraceRule::AttemptIndexSequence => "attempt-index-sequence",
            TraceRule::FirstAttemptGeneration => "first-attempt-generation",
            TraceRule::GenerationClockReset => "generation-clock-reset",
            TraceRule::DebugClockIncrement => "debug-clock-increment",
            TraceRule::NoAttemptAfterPass => "no-attempt-after-pass",
            TraceRule::BudgetExceeded => "per-problem-budget",
            TraceRule::ProblemCount => "problem-count",
            TraceRule::UnknownProblem => "problem-in-dataset",
        }
    }
}

impl fmt::Display for TraceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace file is empty (missing run header)")]
    MissingHeader,
    #[error("problem `{problem_id}` violates {rule}: {detail}")]
    Invariant {
        problem_id: String,
        rule: TraceRule,
        detail: String,
    },
}

impl TraceError {
    fn invariant(problem_id: &str, rule: TraceRule, detail: impl Into<String>) -> Self {
        TraceError::Invariant {
            problem_id: problem_id.to_string(),
            rule,
            detail: detail.into(),
        }
    }
}

impl RunTrace {
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        budget: u32,
        policy_descriptor: impl Into<String>,
        n_problems: u32,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            budget,
            policy_descriptor: policy_descriptor.into(),
            n_problems,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            budget: self.budget,
            policy: self.policy_descriptor.clone(),
            n_problems: self.n_problems,
        }
    }

    fn from_header(header: TraceHeader) -> Self {
        Self {
            model_id: header.model_id,
            dataset_id: header.dataset_id,
            budget: header.budget,
            policy_descriptor: header.policy,
            n_problems: header.n_problems,
            records: Vec::new(),
        }
    }

    /// Checks every per-problem and run-level invariant.
    ///
    /// Records of different problems may interleave; per-problem order is
    /// file order.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.budget == 0 {
            return Err(TraceError::invariant(
                "",
                TraceRule::BudgetPositive,
                "budget is 0",
            ));
        }
        if self.n_problems == 0 {
            return Err(TraceError::invariant(
                "",
                TraceRule::ProblemCountPositive,
                "n_problems is 0",
            ));
        }

        struct State {
            last: AttemptRecord,
            count: u32,
        }
        let mut states: HashMap<&str, State> = HashMap::new();
        for rec in &self.records {
            let pid = rec.problem_id.as_str();
            match states.get_mut(pid) {
                None => {
                    if rec.global_attempt_index != 0 {
                        return Err(TraceError::invariant(
                            pid,
                            TraceRule::AttemptIndexSequence,
                            format!("first record has index {}", rec.global_attempt_index),
                        ));
                    }
                    if rec.attempt_kind != AttemptKind::Generation {
                        return Err(TraceError::invariant(
                            pid,
                            TraceRule::FirstAttemptGeneration,
                            format!("attempt 0 is {}", rec.attempt_kind),
                        ));
                    }
                    check_clock(rec, None)?;
                    states.insert(
                        pid,
                        State {
                            last: rec.clone(),
                            count: 1,
                        },
                    );
                }
                Some(state) => {
                    if state.last.passed {
                        return Err(TraceError::invariant(
                            pid,
                            TraceRule::NoAttemptAfterPass,
                            format!(
                                "attempt {} follows a pass at {}",
                                rec.global_attempt_index, state.last.global_attempt_index
                            ),
                        ));
                    }
                    if rec.global_attempt_index != state.last.global_attempt_index + 1 {
                        return Err(TraceError::invariant(
                            pid,
                            TraceRule::AttemptIndexSequence,
                            format!(
                                "index {} follows {}",
                                rec.global_attempt_index, state.last.global_attempt_index
                            ),
                        ));
                    }
                    if rec.attempt_kind == AttemptKind::Generation {
                        return Err(TraceError::invariant(
                            pid,
                            TraceRule::FirstAttemptGeneration,
                            format!(
                                "generation at index {}; later generations must be fresh",
                                rec.global_attempt_index
                            ),
                        ));
                    }
                    check_clock(rec, Some(&state.last))?;
                    state.count += 1;
                    state.last = rec.clone();
                }
            }
            let count = states[pid].count;
            if count > self.budget {
                return Err(TraceError::invariant(
                    pid,
                    TraceRule::BudgetExceeded,
                    format!("{count} attempts exceed budget {}", self.budget),
                ));
            }
        }
        if states.len() > self.n_problems as usize {
            return Err(TraceError::invariant(
                "",
                TraceRule::ProblemCount,
                format!(
                    "{} distinct problems exceed n_problems {}",
                    states.len(),
                    self.n_problems
                ),
            ));
        }
        Ok(())
    }

    /// Checks that every problem referenced by the trace belongs to `problems`.
    pub fn validate_against(&self, problems: &[ProblemRecord]) -> Result<(), TraceError> {
        let known: HashSet<&str> = problems.iter().map(|p| p.problem_id.as_str()).collect();
        for rec in &self.records {
            if !known.contains(rec.problem_id.as_str()) {
                return Err(TraceError::invariant(
                    &rec.problem_id,
                    TraceRule::UnknownProblem,
                    format!("not in dataset `{}`", self.dataset_id),
                ));
            }
        }
        Ok(())
    }

    /// Distinct problem ids in first-appearance order.
    pub fn problem_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.problem_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), TraceError> {
        write_json_line(out, &self.header())?;
        for rec in &self.records {
            write_json_line(out, rec)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, TraceError> {
        let mut trace: Option<RunTrace> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match trace.as_mut() {
                None => {
                    let header: TraceHeader =
                        serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                            line: line_no,
                            message: format!("invalid run header: {e}"),
                        })?;
                    trace = Some(RunTrace::from_header(header));
                }
                Some(t) => {
                    let rec: AttemptRecord =
                        serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                            line: line_no,
                            message: format!("invalid attempt record: {e}"),
                        })?;
                    t.records.push(rec);
                }
            }
        }
        let trace = trace.ok_or(TraceError::MissingHeader)?;
        trace.validate()?;
        Ok(trace)
    }
}

fn check_clock(rec: &AttemptRecord, prev: Option<&AttemptRecord>) -> Result<(), TraceError> {
    let pid = &rec.problem_id;
    if rec.attempt_kind.is_generation() {
        if rec.attempts_since_generation != 0 {
            return Err(TraceError::invariant(
                pid,
                TraceRule::GenerationClockReset,
                format!(
                    "{} at index {} has attempts_since_generation {}",
                    rec.attempt_kind, rec.global_attempt_index, rec.attempts_since_generation
                ),
            ));
        }
        return Ok(());
    }
    let expected = prev.map_or(1, |p| p.attempts_since_generation + 1);
    if rec.attempts_since_generation != expected {
        return Err(TraceError::invariant(
            pid,
            TraceRule::DebugClockIncrement,
            format!(
                "debug at index {} has attempts_since_generation {}, expected {}",
                rec.global_attempt_index, rec.attempts_since_generation, expected
            ),
        ));
    }
    Ok(())
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *out, value).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads and validates a trace file.
pub fn load_trace(path: impl AsRef<Path>) -> Result<RunTrace, TraceError> {
    let file = File::open(path)?;
    RunTrace::read_from(BufReader::new(file))
}

/// Appends records to a trace file while a run is in progress, so an
/// interrupted run still leaves a readable partial trace.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &TraceHeader) -> Result<Self, TraceError> {
        let out = BufWriter::new(File::create(path)?);
        Self::new(out, header)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> Result<Self, TraceError> {
        write_json_line(&mut out, header)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, records: &[AttemptRecord]) -> Result<(), TraceError> {
        for rec in records {
            write_json_line(&mut self.out, rec)?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Count of problems per attempt index at which they were first solved.
/// Unsolved problems do not appear.
pub fn first_solve_histogram(trace: &RunTrace) -> Histogram {
    let mut first: HashMap<&str, u32> = HashMap::new();
    for rec in trace.records.iter().filter(|r| r.passed) {
        first
            .entry(rec.problem_id.as_str())
            .and_modify(|t| *t = (*t).min(rec.global_attempt_index))
            .or_insert(rec.global_attempt_index);
    }
    let mut hist: BTreeMap<u32, u64> = BTreeMap::new();
    for t in first.into_values() {
        *hist.entry(t).or_insert(0) += 1;
    }
    Histogram::from(hist)
}

/// Total (tokens_in, tokens_out) over all records.
pub fn token_totals(trace: &RunTrace) -> (u64, u64) {
    trace
        .records
        .iter()
        .fold((0, 0), |(i, o), r| (i + r.tokens_in, o + r.tokens_out))
}

/// Reads a dataset file: one JSON problem per line.
pub fn load_problems(
    path: impl AsRef<Path>,
    dataset_id: &str,
) -> Result<Vec<ProblemRecord>, TraceError> {
    let file = File::open(path)?;
    let mut problems: Vec<ProblemRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: ProblemRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 1,
            message: format!("invalid problem: {e}"),
        })?;
        if p.dataset_id.is_empty() {
            p.dataset_id = dataset_id.to_string();
        }
        if p.statement.trim().is_empty() {
            return Err(TraceError::Parse {
                line: i + 1,
                message: format!("problem `{}` has an empty statement", p.problem_id),
            });
        }
        if !seen.insert(p.problem_id.clone()) {
            return Err(TraceError::Parse {
                line: i + 1,
                message: format!("duplicate problem_id `{}`", p.problem_id),
            });
        }
        problems.push(p);
    }
    Ok(problems)
}
