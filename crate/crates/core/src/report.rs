//! Report emission and the command implementations behind the `ddi` binary.
//!
//! Every table is written twice: a tab-separated text file for reading and a
//! JSON-lines file with one record per row for tooling. Percentages carry
//! four decimal places. Output depends only on the inputs.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decayfit::{self, predict, DdiResult, DecayError, FitQuality, Theta};
use crate::harness::{
    self, calibrate_and_run, run_benchmark, schedule_kinds, AttemptKind, Evaluator,
    FreshStartPolicy, HarnessError, PolicyMode, RunConfig, Solver,
};
use crate::metrics::{self, EffectivenessSeries, MetricsError};
use crate::simbench::{self, SimError, SyntheticModelSpec};
use crate::trace::{self, load_trace, ProblemRecord, RunTrace, TraceError, TraceWriter};

pub const DDI_TABLE_TSV: &str = "ddi_table.tsv";
pub const DDI_TABLE_JSONL: &str = "ddi_table.jsonl";
pub const COMPARE_TSV: &str = "compare.tsv";
pub const COMPARE_JSONL: &str = "compare.jsonl";

/// Note attached to rows whose fit is too poor for λ to be trusted.
pub const POOR_FIT_NOTE: &str = "poor fit: rely on E0";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid arguments: {0}")]
    Validation(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Decay(#[from] DecayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl ReportError {
    /// 1 for bad input or arguments, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReportError::Input(_)
            | ReportError::Validation(_)
            | ReportError::Trace(_)
            | ReportError::Decay(DecayError::Domain(_))
            | ReportError::Metrics(_)
            | ReportError::Harness(HarnessError::Config(_))
            | ReportError::Sim(SimError::InvalidSpec(_)) => 1,
            _ => 2,
        }
    }
}

pub fn format_percent(fraction: f64) -> String {
    format!("{:.4}", fraction * 100.0)
}

pub fn format_lambda(lambda: Option<f64>) -> String {
    lambda.map_or_else(|| "None".to_string(), |l| format!("{l:.4}"))
}

/// `[1, 2, 2, 3, 4]`; `[]` when no intervention point exists.
pub fn format_t_theta(values: &[Option<u32>]) -> String {
    if values.iter().all(Option::is_none) {
        return "[]".into();
    }
    let items: Vec<String> = values
        .iter()
        .map(|v| v.map_or_else(|| "None".to_string(), |t| t.to_string()))
        .collect();
    format!("[{}]", items.join(", "))
}

fn format_thetas(thetas: &[Theta]) -> String {
    let items: Vec<String> = thetas.iter().map(Theta::to_string).collect();
    items.join(",")
}

/// One row of the decay index table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdiTableRow {
    pub model_id: String,
    pub e0_percent: Option<String>,
    pub lambda: String,
    pub a0_percent: Option<String>,
    pub thetas: Vec<Theta>,
    pub t_theta: Vec<Option<u32>>,
    pub r_squared: Option<f64>,
    pub r2_class: FitQuality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DdiTableRow {
    pub fn from_result(model_id: &str, result: &DdiResult) -> Self {
        Self::with_measures(
            model_id,
            result,
            Some(result.e0),
            Some(result.final_accuracy),
        )
    }

    fn with_measures(model_id: &str, result: &DdiResult, e0: Option<f64>, a0: Option<f64>) -> Self {
        let note = match (&result.diagnostic, result.r2_class) {
            (Some(d), _) => Some(format!("{POOR_FIT_NOTE}; {d}")),
            (None, FitQuality::Poor) => Some(POOR_FIT_NOTE.to_string()),
            _ => None,
        };
        Self {
            model_id: model_id.to_string(),
            e0_percent: e0.map(format_percent),
            lambda: format_lambda(result.lambda()),
            a0_percent: a0.map(format_percent),
            thetas: result.t_theta.iter().map(|(t, _)| *t).collect(),
            t_theta: result.t_theta.iter().map(|(_, v)| *v).collect(),
            r_squared: result.fit.map(|f| f.r_squared),
            r2_class: result.r2_class,
            note,
        }
    }

    pub fn t_theta_list(&self) -> String {
        format_t_theta(&self.t_theta)
    }
}

pub fn render_ddi_table(rows: &[DdiTableRow]) -> String {
    let thetas = rows
        .first()
        .map(|r| format_thetas(&r.thetas))
        .unwrap_or_default();
    let mut out = format!("model\tE0\tlambda\tA0\tt_theta[{thetas}]\tR2\tR2_value\tnote\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.model_id,
            r.e0_percent.as_deref().unwrap_or("None"),
            r.lambda,
            r.a0_percent.as_deref().unwrap_or("None"),
            r.t_theta_list(),
            r.r2_class,
            r.r_squared
                .map_or_else(|| "None".into(), |v| format!("{v:.4}")),
            r.note.as_deref().unwrap_or(""),
        );
    }
    out
}

fn render_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("report rows serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLine {
    pub theta: Theta,
    pub level: f64,
    pub t_theta: Option<u32>,
}

/// Plot data for one model: observations, the fitted curve sampled every
/// 0.1 attempts, and horizontal threshold levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub model_id: String,
    pub normalized: bool,
    pub observed: Vec<(u32, f64)>,
    pub fitted: Option<Vec<(f64, f64)>>,
    pub lambda: Option<f64>,
    pub amplitude: Option<f64>,
    pub r_squared: Option<f64>,
    pub thresholds: Vec<ThresholdLine>,
}

pub fn curve_data(model_id: &str, series: &EffectivenessSeries, result: &DdiResult) -> CurveData {
    let observed: Vec<(u32, f64)> = series.points().iter().map(|p| (p.t, p.value)).collect();
    let max_t = observed.last().map_or(0, |p| p.0);
    let fitted = result.fit.map(|fit| {
        (0..=max_t * 10)
            .map(|i| {
                let t = i as f64 / 10.0;
                (t, predict(&fit, t))
            })
            .collect()
    });
    let thresholds = match result.fit {
        Some(fit) => result
            .t_theta
            .iter()
            .map(|&(theta, t)| ThresholdLine {
                theta,
                level: theta.remaining_fraction() * fit.amplitude,
                t_theta: t,
            })
            .collect(),
        None => Vec::new(),
    };
    CurveData {
        model_id: model_id.to_string(),
        normalized: series.is_normalized(),
        observed,
        fitted,
        lambda: result.lambda(),
        amplitude: result.fit.map(|f| f.amplitude),
        r_squared: result.fit.map(|f| f.r_squared),
        thresholds,
    }
}

/// Pre-aggregated effectiveness series, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesInput {
    pub model_id: String,
    pub points: Vec<(u32, f64)>,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
}

struct FitInput {
    model_id: String,
    series: EffectivenessSeries,
    e0: Option<f64>,
    a0: Option<f64>,
}

fn read_fit_inputs(path: &Path) -> Result<Vec<FitInput>, ReportError> {
    let bad = |msg: String| ReportError::Input(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| bad("empty file".into()))?;
    let probe: serde_json::Value =
        serde_json::from_str(first).map_err(|e| bad(format!("line 1: {e}")))?;

    if probe.get("budget").is_some() {
        let trace =
            RunTrace::read_from(BufReader::new(text.as_bytes())).map_err(|e| bad(e.to_string()))?;
        let hist = trace::first_solve_histogram(&trace);
        let n = trace.n_problems as u64;
        let raw = metrics::effectiveness_series(&hist, n, trace.budget - 1)?;
        return Ok(vec![FitInput {
            model_id: trace.model_id.clone(),
            series: metrics::normalize_series(&raw).unwrap_or(raw),
            e0: Some(metrics::initial_effectiveness(&hist, n)?),
            a0: Some(metrics::final_accuracy(&hist, trace.budget, n)?),
        }]);
    }

    let mut inputs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: SeriesInput =
            serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        let mut ts: Vec<u32> = s.points.iter().map(|p| p.0).collect();
        ts.sort_unstable();
        if ts.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad(format!("line {}: duplicate attempt index", i + 1)));
        }
        if s.points.iter().any(|p| !(p.1.is_finite() && p.1 >= 0.0)) {
            return Err(bad(format!(
                "line {}: values must be finite and non-negative",
                i + 1
            )));
        }
        let raw = EffectivenessSeries::new(s.points.iter().copied(), s.normalized);
        let (e0, a0) = if s.normalized {
            (s.e0, s.final_accuracy)
        } else {
            (
                s.e0.or_else(|| Some(raw.value_at(0).unwrap_or(0.0))),
                s.final_accuracy
                    .or_else(|| Some(raw.points().iter().map(|p| p.value).sum())),
            )
        };
        let series = if s.normalized {
            raw
        } else {
            metrics::normalize_series(&raw).unwrap_or(raw)
        };
        inputs.push(FitInput {
            model_id: s.model_id,
            series,
            e0,
            a0,
        });
    }
    Ok(inputs)
}

fn file_stem_for(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub rows: Vec<DdiTableRow>,
    pub table: String,
    pub files: Vec<PathBuf>,
}

/// Fits every model found in `inputs` (trace files or series files) and
/// writes the decay index table plus one curve-data file per model.
pub fn cmd_fit(
    inputs: &[PathBuf],
    thetas: &[Theta],
    out_dir: &Path,
) -> Result<FitSummary, ReportError> {
    if inputs.is_empty() {
        return Err(ReportError::Validation("no input files".into()));
    }
    if thetas.is_empty() {
        return Err(ReportError::Validation("no thetas".into()));
    }
    let mut models = Vec::new();
    for path in inputs {
        models.extend(read_fit_inputs(path)?);
    }
    fs::create_dir_all(out_dir)?;

    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut used_stems = std::collections::HashSet::new();
    for m in &models {
        let result = decayfit::ddi(&m.series, thetas, m.e0.unwrap_or(0.0), m.a0.unwrap_or(0.0))?;
        rows.push(DdiTableRow::with_measures(&m.model_id, &result, m.e0, m.a0));

        let mut stem = file_stem_for(&m.model_id);
        let mut k = 2;
        while !used_stems.insert(stem.clone()) {
            stem = format!("{}-{k}", file_stem_for(&m.model_id));
            k += 1;
        }
        let curve = curve_data(&m.model_id, &m.series, &result);
        let path = out_dir.join(format!("curve_{stem}.json"));
        fs::write(
            &path,
            serde_json::to_string_pretty(&curve).expect("curve serializes") + "\n",
        )?;
        files.push(path);
    }

    let table = render_ddi_table(&rows);
    let tsv = out_dir.join(DDI_TABLE_TSV);
    let jsonl = out_dir.join(DDI_TABLE_JSONL);
    fs::write(&tsv, &table)?;
    fs::write(&jsonl, render_jsonl(&rows))?;
    files.insert(0, jsonl);
    files.insert(0, tsv);
    Ok(FitSummary { rows, table, files })
}

/// `k\tpass@k` rows for each requested `k`.
pub fn cmd_passk(n: u64, c: u64, ks: &[u64]) -> Result<String, ReportError> {
    if ks.is_empty() {
        return Err(ReportError::Validation("no k values".into()));
    }
    let mut out = format!("# n={n} c={c}\nk\tpass@k\n");
    for &k in ks {
        let v = metrics::pass_at_k(n, c, k).map_err(|e| ReportError::Validation(e.to_string()))?;
        let _ = writeln!(out, "{k}\t{v:.6}");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonColumn {
    pub label: String,
    pub policy: String,
    pub accuracy_percent: String,
    pub delta_points: String,
    pub improved: bool,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_id: String,
    pub dataset_id: String,
    pub n_problems: u32,
    pub baseline_percent: String,
    pub baseline_tokens_in: u64,
    pub baseline_tokens_out: u64,
    pub columns: Vec<ComparisonColumn>,
}

fn descriptor_value<'a>(descriptor: &'a str, key: &str) -> Option<&'a str> {
    descriptor
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
}

fn column_label(trace: &RunTrace, path: &Path) -> String {
    let d = &trace.policy_descriptor;
    if descriptor_value(d, "degraded_from").is_none() {
        if let Some(theta) = descriptor_value(d, "theta") {
            return format!("A{theta}");
        }
        if let Some(t) = descriptor_value(d, "t") {
            return format!("A_t{t}");
        }
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    format!("A_{}", stem.unwrap_or_else(|| "run".into()))
}

fn accuracy(trace: &RunTrace) -> Result<f64, ReportError> {
    let hist = trace::first_solve_histogram(trace);
    Ok(metrics::final_accuracy(
        &hist,
        trace.budget,
        trace.n_problems as u64,
    )?)
}

pub fn compare_traces(
    baseline: &RunTrace,
    interventions: &[(PathBuf, RunTrace)],
) -> Result<Comparison, ReportError> {
    let a0 = accuracy(baseline)?;
    let (b_in, b_out) = trace::token_totals(baseline);
    let mut columns: Vec<ComparisonColumn> = Vec::new();
    for (path, t) in interventions {
        if t.dataset_id != baseline.dataset_id || t.n_problems != baseline.n_problems {
            return Err(ReportError::Input(format!(
                "{} covers dataset `{}` ({} problems), baseline covers `{}` ({} problems)",
                path.display(),
                t.dataset_id,
                t.n_problems,
                baseline.dataset_id,
                baseline.n_problems
            )));
        }
        let acc = accuracy(t)?;
        let (t_in, t_out) = trace::token_totals(t);
        let mut label = column_label(t, path);
        if columns.iter().any(|c| c.label == label) {
            label = format!("{label}#{}", columns.len() + 1);
        }
        columns.push(ComparisonColumn {
            label,
            policy: t.policy_descriptor.clone(),
            accuracy_percent: format_percent(acc),
            delta_points: format!("{:+.4}", (acc - a0) * 100.0),
            improved: acc > a0,
            tokens_in: t_in,
            tokens_out: t_out,
        });
    }
    Ok(Comparison {
        model_id: baseline.model_id.clone(),
        dataset_id: baseline.dataset_id.clone(),
        n_problems: baseline.n_problems,
        baseline_percent: format_percent(a0),
        baseline_tokens_in: b_in,
        baseline_tokens_out: b_out,
        columns,
    })
}

/// Improved accuracies are marked with a trailing `*`.
pub fn render_comparison(c: &Comparison) -> String {
    let mut header = String::from("model\tA0");
    let mut row = format!("{}\t{}", c.model_id, c.baseline_percent);
    for col in &c.columns {
        let _ = write!(header, "\t{0}\tdelta_{0}", col.label);
        let mark = if col.improved { "*" } else { "" };
        let _ = write!(
            row,
            "\t{}{mark}\t{}",
            col.accuracy_percent, col.delta_points
        );
    }
    header.push_str("\ttokens_A0");
    let _ = write!(row, "\t{}/{}", c.baseline_tokens_in, c.baseline_tokens_out);
    for col in &c.columns {
        let _ = write!(header, "\ttokens_{}", col.label);
        let _ = write!(row, "\t{}/{}", col.tokens_in, col.tokens_out);
    }
    format!("{header}\n{row}\n")
}

/// Table comparing a baseline trace with intervention traces.
pub fn cmd_compare(
    baseline: &Path,
    interventions: &[PathBuf],
    out_dir: Option<&Path>,
) -> Result<String, ReportError> {
    if interventions.is_empty() {
        return Err(ReportError::Validation("no intervention traces".into()));
    }
    let load =
        |p: &Path| load_trace(p).map_err(|e| ReportError::Input(format!("{}: {e}", p.display())));
    let base = load(baseline)?;
    let others = interventions
        .iter()
        .map(|p| Ok((p.clone(), load(p)?)))
        .collect::<Result<Vec<_>, ReportError>>()?;
    let comparison = compare_traces(&base, &others)?;
    let text = render_comparison(&comparison);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(COMPARE_TSV), &text)?;
        fs::write(dir.join(COMPARE_JSONL), render_jsonl(&[&comparison]))?;
    }
    Ok(text)
}

/// Fresh-start policy requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyChoice {
    None,
    Fixed(u32),
    /// Calibrate `t_θ` from a baseline run, or use a known decay constant.
    Ddi {
        theta: Theta,
        lambda: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub model_id: String,
    pub dataset_id: String,
    pub policy: PolicyChoice,
    pub repeat: bool,
    pub budget: u32,
    pub parallelism: usize,
    pub feedback_cap: usize,
    pub thetas: Vec<Theta>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            model_id: "model".into(),
            dataset_id: "dataset".into(),
            policy: PolicyChoice::None,
            repeat: true,
            budget: harness::DEFAULT_BUDGET,
            parallelism: 1,
            feedback_cap: harness::DEFAULT_FEEDBACK_CAP,
            thetas: Theta::defaults(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub traces: Vec<PathBuf>,
    pub table: String,
    pub comparison: Option<String>,
    pub warnings: Vec<String>,
}

fn trace_file_name(policy: &FreshStartPolicy) -> String {
    match policy.mode {
        PolicyMode::None => "trace_baseline.jsonl".into(),
        PolicyMode::FixedT(t) => format!("trace_fixed_t{t}.jsonl"),
        PolicyMode::DdiCalibrated { theta } => format!("trace_theta{theta}.jsonl"),
    }
}

/// Runs one policy with live appends to the trace file, then rewrites the
/// file in canonical problem order.
fn run_live(
    problems: &[ProblemRecord],
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<(RunTrace, PathBuf, Vec<String>), ReportError> {
    let interval = config.policy.resolve_interval(config.calibration_lambda)?;
    schedule_kinds(&config.policy, interval, config.budget)?;
    let path = out_dir.join(trace_file_name(&config.policy));
    let mut header = RunTrace::new(
        &config.model_id,
        &config.dataset_id,
        config.budget,
        harness::policy_descriptor(&config.policy, interval, config.feedback_cap, solver),
        problems.len() as u32,
    )
    .header();
    header.policy.push_str(" partial=true");
    let writer = Mutex::new(TraceWriter::create(&path, &header)?);
    let write_error = Mutex::new(None);
    let sink = |records: &[trace::AttemptRecord]| {
        if let Err(e) = writer
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .append(records)
        {
            write_error
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .get_or_insert(e);
        }
    };
    let outcome = run_benchmark(problems, solver, evaluator, config, Some(&sink))?;
    drop(writer);
    if let Some(e) = write_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e.into());
    }
    outcome.trace.save(&path)?;
    Ok((outcome.trace, path, outcome.report.warnings))
}

/// Runs a benchmark campaign with the given solver and writes traces, the
/// decay index table and, for calibrated runs, the comparison table.
pub fn cmd_run_with(
    problems: &[ProblemRecord],
    solver: &dyn Solver,
    evaluator: &dyn Evaluator,
    options: &RunOptions,
    out_dir: &Path,
) -> Result<RunSummary, ReportError> {
    if problems.is_empty() {
        return Err(ReportError::Validation("dataset has no problems".into()));
    }
    if options.budget == 0 {
        return Err(ReportError::Validation("budget must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let base = RunConfig {
        model_id: options.model_id.clone(),
        dataset_id: options.dataset_id.clone(),
        policy: FreshStartPolicy::none(),
        budget: options.budget,
        parallelism: options.parallelism,
        feedback_cap: options.feedback_cap,
        calibration_lambda: None,
    };
    let policy_with = |mode| FreshStartPolicy {
        mode,
        repeat: options.repeat,
    };

    let mut warnings = Vec::new();
    let (baseline, intervention, calibration) = match options.policy {
        PolicyChoice::None => {
            let (t, p, w) = run_live(problems, solver, evaluator, &base, out_dir)?;
            warnings.extend(w);
            ((t, p), None, None)
        }
        PolicyChoice::Fixed(t_fixed) => {
            let cfg = RunConfig {
                policy: policy_with(PolicyMode::FixedT(t_fixed)),
                ..base.clone()
            };
            let (t, p, w) = run_live(problems, solver, evaluator, &cfg, out_dir)?;
            warnings.extend(w);
            ((t, p), None, None)
        }
        PolicyChoice::Ddi {
            theta,
            lambda: Some(lambda),
        } => {
            let cfg = RunConfig {
                policy: policy_with(PolicyMode::DdiCalibrated { theta }),
                calibration_lambda: Some(lambda),
                ..base.clone()
            };
            let (t, p, w) = run_live(problems, solver, evaluator, &cfg, out_dir)?;
            warnings.extend(w);
            ((t, p), None, None)
        }
        PolicyChoice::Ddi {
            theta,
            lambda: None,
        } => {
            let cfg = RunConfig {
                policy: policy_with(PolicyMode::DdiCalibrated { theta }),
                ..base.clone()
            };
            let outcome = calibrate_and_run(problems, solver, evaluator, theta, &cfg)?;
            warnings.extend(outcome.report.warnings);
            let base_path = out_dir.join("trace_baseline.jsonl");
            outcome.baseline.save(&base_path)?;
            let int_path = out_dir.join(format!("trace_theta{theta}.jsonl"));
            outcome.intervention.save(&int_path)?;
            (
                (outcome.baseline, base_path),
                Some((outcome.intervention, int_path)),
                Some(outcome.calibration),
            )
        }
    };

    let mut thetas = options.thetas.clone();
    if let PolicyChoice::Ddi { theta, .. } = options.policy {
        if !thetas.contains(&theta) {
            thetas.push(theta);
        }
    }
    let result = match calibration {
        Some(c) => c,
        None => decayfit::ddi_from_trace(&baseline.0, &thetas)?,
    };
    let rows = vec![DdiTableRow::from_result(&options.model_id, &result)];
    let table = render_ddi_table(&rows);
    fs::write(out_dir.join(DDI_TABLE_TSV), &table)?;
    fs::write(out_dir.join(DDI_TABLE_JSONL), render_jsonl(&rows))?;

    let mut traces = vec![baseline.1.clone()];
    let comparison = match intervention {
        Some((trace, path)) => {
            let c = compare_traces(&baseline.0, &[(path.clone(), trace)])?;
            let text = render_comparison(&c);
            fs::write(out_dir.join(COMPARE_TSV), &text)?;
            fs::write(out_dir.join(COMPARE_JSONL), render_jsonl(&[&c]))?;
            traces.push(path);
            Some(text)
        }
        None => None,
    };
    Ok(RunSummary {
        traces,
        table,
        comparison,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub spec: SyntheticModelSpec,
    pub n_problems: usize,
    pub budget: u32,
    pub policy: PolicyChoice,
    pub repeat: bool,
    pub parallelism: usize,
    pub thetas: Vec<Theta>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            spec: SyntheticModelSpec::default(),
            n_problems: 1_000,
            budget: harness::DEFAULT_BUDGET,
            policy: PolicyChoice::Ddi {
                theta: Theta::new(50.0).expect("valid theta"),
                lambda: None,
            },
            repeat: true,
            parallelism: 1,
            thetas: Theta::defaults(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRow {
    pub t: u32,
    pub baseline_kind: AttemptKind,
    pub baseline_expected: f64,
    pub baseline_empirical: f64,
    pub intervention_kind: AttemptKind,
    pub intervention_expected: f64,
    pub intervention_empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub spec: SyntheticModelSpec,
    pub n_problems: usize,
    pub budget: u32,
    pub intervention_policy: String,
    pub calibration_lambda: Option<f64>,
    pub baseline_expected_accuracy: f64,
    pub baseline_empirical_accuracy: f64,
    pub intervention_expected_accuracy: f64,
    pub intervention_empirical_accuracy: f64,
    pub rows: Vec<SimulateRow>,
    pub warnings: Vec<String>,
}

fn empirical_mass(trace: &RunTrace) -> Vec<f64> {
    let hist = trace::first_solve_histogram(trace);
    (0..trace.budget)
        .map(|t| hist.get(t) as f64 / trace.n_problems as f64)
        .collect()
}

pub fn render_simulate(s: &SimulateSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}", s.spec.descriptor());
    let _ = writeln!(out, "# n_problems={} budget={}", s.n_problems, s.budget);
    let _ = writeln!(out, "# intervention: {}", s.intervention_policy);
    let _ = writeln!(
        out,
        "# calibration lambda: {}",
        format_lambda(s.calibration_lambda)
    );
    out.push_str("t\tbaseline_kind\tbaseline_expected\tbaseline_empirical\tintervention_kind\tintervention_expected\tintervention_empirical\n");
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.t,
            r.baseline_kind,
            format_percent(r.baseline_expected),
            format_percent(r.baseline_empirical),
            r.intervention_kind,
            format_percent(r.intervention_expected),
            format_percent(r.intervention_empirical),
        );
    }
    let _ = writeln!(
        out,
        "accuracy\tbaseline\t{}\t{}\tintervention\t{}\t{}",
        format_percent(s.baseline_expected_accuracy),
        format_percent(s.baseline_empirical_accuracy),
        format_percent(s.intervention_expected_accuracy),
        format_percent(s.intervention_empirical_accuracy),
    );
    for w in &s.warnings {
        let _ = writeln!(out, "# warning: {w}");
    }
    out
}

/// Monte Carlo baseline and intervention campaigns with the synthetic
/// solver, reported next to the analytic first-solve oracle.
pub fn cmd_simulate(
    options: &SimulateOptions,
    out_dir: &Path,
) -> Result<SimulateSummary, ReportError> {
    if options.n_problems == 0 {
        return Err(ReportError::Validation("n must be at least 1".into()));
    }
    if options.budget == 0 {
        return Err(ReportError::Validation("budget must be at least 1".into()));
    }
    let solver = simbench::synthetic_solver(options.spec)?;
    let problems = simbench::synthetic_problems(options.n_problems);
    let run_options = RunOptions {
        model_id: "synthetic".into(),
        dataset_id: "synthetic".into(),
        policy: options.policy,
        repeat: options.repeat,
        budget: options.budget,
        parallelism: options.parallelism,
        feedback_cap: harness::DEFAULT_FEEDBACK_CAP,
        thetas: options.thetas.clone(),
    };
    fs::create_dir_all(out_dir)?;

    let base_cfg = RunConfig {
        model_id: run_options.model_id.clone(),
        dataset_id: run_options.dataset_id.clone(),
        budget: options.budget,
        parallelism: options.parallelism,
        ..RunConfig::default()
    };
    let evaluator = harness::VerdictEvaluator;
    let mut warnings = Vec::new();
    let (baseline, intervention, lambda, policy) = match options.policy {
        PolicyChoice::Ddi {
            theta,
            lambda: None,
        } => {
            let cfg = RunConfig {
                policy: FreshStartPolicy {
                    mode: PolicyMode::DdiCalibrated { theta },
                    repeat: options.repeat,
                },
                ..base_cfg.clone()
            };
            let out = calibrate_and_run(&problems, &solver, &evaluator, theta, &cfg)?;
            warnings.extend(out.report.warnings);
            let lambda = out.calibration.lambda().filter(|l| *l > 0.0);
            let policy = match lambda {
                Some(_) => cfg.policy,
                None => FreshStartPolicy::none(),
            };
            (out.baseline, out.intervention, lambda, policy)
        }
        choice => {
            let (mode, lambda) = match choice {
                PolicyChoice::None => (PolicyMode::None, None),
                PolicyChoice::Fixed(t) => (PolicyMode::FixedT(t), None),
                PolicyChoice::Ddi { theta, lambda } => {
                    (PolicyMode::DdiCalibrated { theta }, lambda)
                }
            };
            let policy = FreshStartPolicy {
                mode,
                repeat: options.repeat,
            };
            let baseline = run_benchmark(&problems, &solver, &evaluator, &base_cfg, None)?;
            let cfg = RunConfig {
                policy,
                calibration_lambda: lambda,
                ..base_cfg.clone()
            };
            let intervention = run_benchmark(&problems, &solver, &evaluator, &cfg, None)?;
            warnings.extend(baseline.report.warnings);
            warnings.extend(intervention.report.warnings);
            (baseline.trace, intervention.trace, lambda, policy)
        }
    };

    let baseline_schedule = schedule_kinds(&FreshStartPolicy::none(), None, options.budget)?;
    let interval = policy.resolve_interval(lambda)?;
    let intervention_schedule = schedule_kinds(&policy, interval, options.budget)?;
    let base_expected = simbench::expected_first_solve_mass(&options.spec, &baseline_schedule);
    let int_expected = simbench::expected_first_solve_mass(&options.spec, &intervention_schedule);
    let base_emp = empirical_mass(&baseline);
    let int_emp = empirical_mass(&intervention);

    let rows = (0..options.budget as usize)
        .map(|t| SimulateRow {
            t: t as u32,
            baseline_kind: baseline_schedule[t],
            baseline_expected: base_expected[t],
            baseline_empirical: base_emp[t],
            intervention_kind: intervention_schedule[t],
            intervention_expected: int_expected[t],
            intervention_empirical: int_emp[t],
        })
        .collect();
    let mut policy_text = policy.to_string();
    if let Some(t) = interval {
        policy_text.push_str(&format!(" t_theta={t}"));
    }
    let summary = SimulateSummary {
        spec: options.spec,
        n_problems: options.n_problems,
        budget: options.budget,
        intervention_policy: policy_text,
        calibration_lambda: lambda,
        baseline_expected_accuracy: base_expected.iter().sum(),
        baseline_empirical_accuracy: base_emp.iter().sum(),
        intervention_expected_accuracy: int_expected.iter().sum(),
        intervention_empirical_accuracy: int_emp.iter().sum(),
        rows,
        warnings,
    };

    baseline.save(out_dir.join("sim_trace_baseline.jsonl"))?;
    intervention.save(out_dir.join("sim_trace_intervention.jsonl"))?;
    fs::write(
        out_dir.join("simulate_report.tsv"),
        render_simulate(&summary),
    )?;
    fs::write(
        out_dir.join("simulate_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(summary)
}

/// Reads a comma-separated theta list such as `50,80,90,95,99`.
pub fn parse_thetas(text: &str) -> Result<Vec<Theta>, ReportError> {
    let mut thetas = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: f64 = part
            .parse()
            .map_err(|_| ReportError::Validation(format!("theta `{part}` is not a number")))?;
        thetas.push(Theta::new(v).map_err(|e| ReportError::Validation(e.to_string()))?);
    }
    if thetas.is_empty() {
        return Err(ReportError::Validation("empty theta list".into()));
    }
    Ok(thetas)
}

/// Reads a dataset file whose lines hold `problem_id`, `statement` and
/// `test_suite_id`.
pub fn read_dataset(path: &Path, dataset_id: &str) -> Result<Vec<ProblemRecord>, ReportError> {
    let problems = trace::load_problems(path, dataset_id)
        .map_err(|e| ReportError::Input(format!("{}: {e}", path.display())))?;
    if problems.is_empty() {
        return Err(ReportError::Input(format!(
            "{}: no problems",
            path.display()
        )));
    }
    Ok(problems)
}

/// Reads series input lines from any reader; used by tests and tools.
pub fn read_series_lines<R: BufRead>(reader: R) -> Result<Vec<SeriesInput>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ReportError::Input(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decayfit::DecayFit;
    use crate::harness::scripted::ScriptedSolver;
    use crate::harness::VerdictEvaluator;
    use crate::trace::AttemptRecord;

    fn table1_result(lambda: Option<f64>, r2: f64) -> DdiResult {
        let fit = lambda.map(|l| DecayFit {
            amplitude: 1.0,
            lambda: l,
            r_squared: r2,
            n_points_used: 6,
        });
        DdiResult {
            e0: 0.737_81,
            fit,
            t_theta: Theta::defaults()
                .into_iter()
                .map(|th| (th, lambda.and_then(|l| decayfit::t_theta(l, th))))
                .collect(),
            r2_class: decayfit::classify_fit(fit.map(|f| f.r_squared)),
            final_accuracy: 0.823_17,
            diagnostic: None,
        }
    }

    #[test]
    fn row_formatting() {
        let row = DdiTableRow::from_result("gpt-3.5-turbo", &table1_result(Some(1.3297), 0.95));
        assert_eq!(row.t_theta_list(), "[1, 2, 2, 3, 4]");
        assert_eq!(row.lambda, "1.3297");
        assert_eq!(row.e0_percent.as_deref(), Some("73.7810"));
        assert_eq!(row.r2_class, FitQuality::Excellent);
        assert!(row.note.is_none());

        let none = DdiTableRow::from_result("claude", &table1_result(None, 0.0));
        assert_eq!(none.t_theta_list(), "[]");
        assert_eq!(none.lambda, "None");
        assert_eq!(none.r2_class.to_string(), "None");

        let poor = DdiTableRow::from_result("llama2:7b", &table1_result(Some(0.1185), 0.5));
        assert_eq!(poor.t_theta_list(), "[6, 14, 20, 26, 39]");
        assert_eq!(poor.note.as_deref(), Some(POOR_FIT_NOTE));
        let table = render_ddi_table(&[row, poor]);
        assert!(table.starts_with("model\tE0\tlambda\tA0\tt_theta[50,80,90,95,99]"));
        assert!(table.contains("llama2:7b\t73.7810\t0.1185\t82.3170\t[6, 14, 20, 26, 39]\tPoor"));
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(109.0 / 164.0), "66.4634");
        assert_eq!(format!("{:+.4}", 100.0 / 164.0), "+0.6098");
    }

    #[test]
    fn curve_data_shape() {
        let series = EffectivenessSeries::new((0..4).map(|t| (t, (-0.7 * t as f64).exp())), true);
        let r = decayfit::ddi(&series, &Theta::defaults(), 0.5, 0.8).unwrap();
        let c = curve_data("m", &series, &r);
        let fitted = c.fitted.unwrap();
        assert_eq!(fitted.len(), 31);
        assert_eq!(fitted[30].0, 3.0);
        assert_eq!(c.thresholds.len(), 5);
        assert!((c.thresholds[0].level - 0.5 * c.amplitude.unwrap()).abs() < 1e-12);

        let flat = EffectivenessSeries::raw([(0, 1.0), (1, 0.0)]);
        let r = decayfit::ddi(&flat, &Theta::defaults(), 1.0, 1.0).unwrap();
        let c = curve_data("m", &flat, &r);
        assert!(c.fitted.is_none());
        assert!(c.thresholds.is_empty());
    }

    #[test]
    fn passk_table() {
        let t = cmd_passk(10, 10, &[1, 5, 10]).unwrap();
        assert_eq!(
            t.lines()
                .skip(2)
                .filter(|l| l.ends_with("\t1.000000"))
                .count(),
            3
        );
        let t = cmd_passk(10, 0, &[1, 5, 10]).unwrap();
        assert_eq!(
            t.lines()
                .skip(2)
                .filter(|l| l.ends_with("\t0.000000"))
                .count(),
            3
        );
        assert!(cmd_passk(5, 2, &[2]).unwrap().contains("2\t0.700000"));
        let err = cmd_passk(5, 2, &[6]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    fn trace_solving(extra: u32, n: u32, policy: &str) -> RunTrace {
        let mut t = RunTrace::new("m", "humaneval", 6, policy, n);
        for i in 0..(100 + extra) {
            t.records.push(AttemptRecord {
                problem_id: format!("HumanEval/{i}"),
                global_attempt_index: 0,
                attempt_kind: AttemptKind::Generation,
                attempts_since_generation: 0,
                passed: true,
                feedback: String::new(),
                tokens_in: 3,
                tokens_out: 2,
                model_id: "m".into(),
                candidate: None,
            });
        }
        t
    }

    #[test]
    fn comparison_delta_and_markers() {
        let base = trace_solving(0, 164, "mode=none");
        let same = compare_traces(&base, &[("x.jsonl".into(), base.clone())]).unwrap();
        assert!(!same.columns[0].improved);
        assert!(!render_comparison(&same).contains('*'));

        let better = trace_solving(1, 164, "mode=ddi_calibrated theta=50 repeat=true t_theta=2");
        let c = compare_traces(&base, &[("y.jsonl".into(), better)]).unwrap();
        assert_eq!(c.columns[0].label, "A50");
        assert_eq!(c.columns[0].delta_points, "+0.6098");
        assert!(c.columns[0].improved);
        assert!(render_comparison(&c).contains("61.5854*"));

        let other = trace_solving(0, 100, "mode=none");
        assert!(compare_traces(&base, &[("z.jsonl".into(), other)]).is_err());
    }

    #[test]
    fn theta_parsing() {
        assert_eq!(parse_thetas("50,80").unwrap().len(), 2);
        assert!(parse_thetas("50,abc").is_err());
        assert!(parse_thetas("100").is_err());
        assert!(parse_thetas("").is_err());
    }

    #[test]
    fn run_with_scripted_solver_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let problems: Vec<ProblemRecord> = (0..8)
            .map(|i| ProblemRecord {
                problem_id: format!("P{i}"),
                statement: format!("problem {i}"),
                test_suite_id: format!("t{i}"),
                dataset_id: "toy".into(),
            })
            .collect();
        let solver = ScriptedSolver::passing_at(&[0]);
        let opts = RunOptions {
            budget: 1,
            ..RunOptions::default()
        };
        let s = cmd_run_with(&problems, &solver, &VerdictEvaluator, &opts, dir.path()).unwrap();
        let trace = load_trace(&s.traces[0]).unwrap();
        assert_eq!(trace.records.len(), 8);
        assert!(!trace.policy_descriptor.contains("partial"));
        // a generation-only run has E0 = A0
        let row = s.table.lines().nth(1).unwrap();
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[1], cols[3]);
    }

    #[test]
    fn series_lines_parse() {
        let text = "{\"model_id\":\"a\",\"points\":[[0,0.5],[1,0.2]]}\n\n";
        let s = read_series_lines(text.as_bytes()).unwrap();
        assert_eq!(s[0].points, vec![(0, 0.5), (1, 0.2)]);
        assert!(read_series_lines("{".as_bytes()).is_err());
    }
}
