//! `ddi`: decay fitting, benchmark runs, simulation and reporting.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ddi_core::decayfit::Theta;
use ddi_core::harness::{self, CommandEvaluator, Evaluator, Solver, VerdictEvaluator};
use ddi_core::report::{self, PolicyChoice, ReportError, RunOptions, SimulateOptions};
use ddi_core::simbench::{self, SyntheticModelSpec};
use ddi_llm::{ChatSolver, ClientError, EndpointConfig, PromptTemplates};

#[derive(Debug, Parser)]
#[command(
    name = "ddi",
    version,
    about = "Debugging decay analysis for iterative code repair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit decay curves to trace or series files and write the DDI table.
    Fit(FitArgs),
    /// Run a benchmark campaign against a solver.
    Run(RunArgs),
    /// Monte Carlo run against the synthetic solver with analytic oracle columns.
    Simulate(SimulateArgs),
    /// Unbiased pass@k table.
    Passk(PasskArgs),
    /// Compare a baseline trace with intervention traces.
    Compare(CompareArgs),
    /// Write the default prompt templates for editing.
    Templates(TemplatesArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Comma-separated effectiveness thresholds in percent.
    #[arg(long, default_value = "50,80,90,95,99")]
    thetas: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Trace (.jsonl with a header line) or series files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    None,
    Fixed,
    Ddi,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "none")]
    policy: PolicyArg,
    /// Threshold for `--policy ddi`.
    #[arg(long, default_value_t = 50.0)]
    theta: f64,
    /// Interval for `--policy fixed`.
    #[arg(long)]
    fixed_t: Option<u32>,
    /// Known decay constant for `--policy ddi`; skips the calibration run.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fresh-start only once instead of every interval.
    #[arg(long)]
    no_repeat: bool,
    #[arg(long, default_value_t = harness::DEFAULT_BUDGET)]
    budget: u32,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

impl PolicyArgs {
    fn choice(&self) -> Result<PolicyChoice> {
        Ok(match self.policy {
            PolicyArg::None => PolicyChoice::None,
            PolicyArg::Fixed => match self.fixed_t {
                Some(t) if t >= 1 => PolicyChoice::Fixed(t),
                _ => return Err(invalid("--policy fixed requires --fixed-t >= 1")),
            },
            PolicyArg::Ddi => {
                if let Some(l) = self.lambda {
                    if !(l.is_finite() && l > 0.0) {
                        return Err(invalid(format!("--lambda must be positive, got {l}")));
                    }
                }
                PolicyChoice::Ddi {
                    theta: theta(self.theta)?,
                    lambda: self.lambda,
                }
            }
        })
    }

    fn check(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("--budget must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(invalid("--parallelism must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Chat,
    Synthetic,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Problems as JSON lines with problem_id, statement and test_suite_id.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset identifier; defaults to the dataset file stem.
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long, value_enum, default_value = "chat")]
    solver: SolverArg,
    /// Chat-completions base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 2048)]
    max_tokens: u32,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Environment variable holding the API key; empty for none.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Directory with system.txt, generation.txt and repair.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Evaluator command, run as `<cmd...> <candidate-file> <test-suite-id>`.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    test_command: Option<Vec<String>>,
    /// Evaluator timeout in seconds.
    #[arg(long, default_value_t = 10.0)]
    eval_timeout: f64,
    #[arg(long, default_value_t = harness::DEFAULT_FEEDBACK_CAP)]
    feedback_cap: usize,
    /// Seed for the synthetic solver.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0.5)]
    p0: f64,
    #[arg(long, default_value_t = 0.3)]
    q0: f64,
    #[arg(long, default_value_t = 1.2)]
    lambda_star: f64,
    /// Whether fresh starts redraw with the generation success rate.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    fresh_redraw: bool,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "ddi")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 50.0)]
    theta: f64,
    #[arg(long)]
    fixed_t: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    no_repeat: bool,
    #[arg(long, default_value_t = harness::DEFAULT_BUDGET)]
    budget: u32,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PasskArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    c: u64,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    k: Vec<u64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    baseline: PathBuf,
    #[arg(required = true)]
    interventions: Vec<PathBuf>,
    /// Also write compare.tsv and compare.jsonl here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TemplatesArgs {
    #[arg(long, default_value = "templates")]
    out_dir: PathBuf,
}

fn invalid(message: impl Into<String>) -> anyhow::Error {
    ReportError::Validation(message.into()).into()
}

fn theta(percent: f64) -> Result<Theta> {
    Theta::new(percent).map_err(|e| invalid(e.to_string()))
}

fn seconds(value: f64, flag: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| invalid(format!("{flag} must be a positive number of seconds")))
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let thetas = report::parse_thetas(&args.common.thetas)?;
    let summary = report::cmd_fit(&args.inputs, &thetas, &args.common.out_dir)?;
    print!("{}", summary.table);
    Ok(())
}

fn chat_solver(args: &RunArgs) -> Result<ChatSolver> {
    let (Some(endpoint), Some(model)) = (&args.endpoint, &args.model) else {
        return Err(invalid("--solver chat requires --endpoint and --model"));
    };
    let templates = match &args.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let config = EndpointConfig {
        base_url: endpoint.clone(),
        model_name: model.clone(),
        api_key_env: args.api_key_env.clone(),
        temperature: args.temperature,
        max_output_tokens: args.max_tokens,
        request_timeout: seconds(args.timeout, "--timeout")?,
        max_retries: args.retries,
        max_in_flight: args.policy.parallelism,
        ..EndpointConfig::default()
    };
    Ok(ChatSolver::new(config, templates)?)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    args.policy.check()?;
    let thetas = report::parse_thetas(&args.common.thetas)?;
    let policy = args.policy.choice()?;
    let dataset_id = match &args.dataset_id {
        Some(id) => id.clone(),
        None => args
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    };
    let problems = report::read_dataset(&args.dataset, &dataset_id)?;

    let evaluator: Box<dyn Evaluator> = match &args.test_command {
        Some(cmd) => {
            let (program, rest) = cmd.split_first().expect("clap requires one value");
            let mut e = CommandEvaluator::new(program, rest.to_vec());
            e.timeout = seconds(args.eval_timeout, "--eval-timeout")?;
            Box::new(e)
        }
        None => match args.solver {
            SolverArg::Synthetic => Box::new(VerdictEvaluator),
            SolverArg::Chat => return Err(invalid("--solver chat requires --test-command")),
        },
    };
    let (solver, model_id): (Box<dyn Solver>, String) = match args.solver {
        SolverArg::Chat => {
            let s = chat_solver(args)?;
            let id = s.config().model_name.clone();
            (Box::new(s), id)
        }
        SolverArg::Synthetic => {
            let spec = SyntheticModelSpec {
                seed: args.seed,
                ..SyntheticModelSpec::default()
            };
            (
                Box::new(simbench::synthetic_solver(spec)?),
                "synthetic".into(),
            )
        }
    };

    let options = RunOptions {
        model_id: args.model.clone().unwrap_or(model_id),
        dataset_id,
        policy,
        repeat: !args.policy.no_repeat,
        budget: args.policy.budget,
        parallelism: args.policy.parallelism,
        feedback_cap: args.feedback_cap,
        thetas,
    };
    let summary = report::cmd_run_with(
        &problems,
        solver.as_ref(),
        evaluator.as_ref(),
        &options,
        &args.common.out_dir,
    )?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", summary.table);
    if let Some(c) = &summary.comparison {
        print!("\n{c}");
    }
    for t in &summary.traces {
        eprintln!("trace: {}", t.display());
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let policy_args = PolicyArgs {
        policy: args.policy,
        theta: args.theta,
        fixed_t: args.fixed_t,
        lambda: args.lambda,
        no_repeat: args.no_repeat,
        budget: args.budget,
        parallelism: args.parallelism,
    };
    policy_args.check()?;
    if args.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let options = SimulateOptions {
        spec: SyntheticModelSpec {
            p0: args.p0,
            q0: args.q0,
            lambda_star: args.lambda_star,
            fresh_redraw: args.fresh_redraw,
            seed: args.seed,
        },
        n_problems: args.n,
        budget: args.budget,
        policy: policy_args.choice()?,
        repeat: !args.no_repeat,
        parallelism: args.parallelism,
        thetas: report::parse_thetas(&args.common.thetas)?,
    };
    let summary = report::cmd_simulate(&options, &args.common.out_dir)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report::render_simulate(&summary));
    Ok(())
}

fn cmd_passk(args: &PasskArgs) -> Result<()> {
    if args.k.is_empty() {
        bail!(invalid("--k needs at least one value"));
    }
    print!("{}", report::cmd_passk(args.n, args.c, &args.k)?);
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let text = report::cmd_compare(&args.baseline, &args.interventions, args.out_dir.as_deref())?;
    print!("{text}");
    Ok(())
}

fn cmd_templates(args: &TemplatesArgs) -> Result<()> {
    PromptTemplates::default()
        .write_dir(&args.out_dir)
        .with_context(|| format!("writing templates to {}", args.out_dir.display()))?;
    println!("{}", Path::new(&args.out_dir).display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<ReportError>() {
        return e.exit_code() as u8;
    }
    match err.downcast_ref::<ClientError>() {
        Some(ClientError::Http(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Run(a) => cmd_run(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Passk(a) => cmd_passk(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Templates(a) => cmd_templates(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
