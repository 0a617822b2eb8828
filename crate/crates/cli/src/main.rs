//! `capture-el` command line.
//!
//! Worker threads for `simulate` and `qq` follow `RAYON_NUM_THREADS`.

mod app;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use app::{Command, RunConfig};
use capture_el::model::Family;
use capture_el::simulation::Scenario;

#[derive(Parser)]
#[command(name = "capture-el", version, about = "Abundance estimation for capture-recapture data with missing covariates")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Fit the model and report the estimate with EL-ratio intervals.
    Fit(DataArgs),
    /// Fit, then test one capture coefficient against zero.
    Test(TestArgs),
    /// Run a Monte Carlo study for one of the built-in scenarios.
    Simulate(SimArgs),
    /// Export QQ points of R'(nu0) against chi-square(1).
    Qq(QqArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Base,
    Extended,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "C")]
    C,
    #[value(name = "D")]
    D,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::A => Scenario::A,
            ScenarioArg::B => Scenario::B,
            ScenarioArg::C => Scenario::C,
            ScenarioArg::D => Scenario::D,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Confidence level; repeat for several.
    #[arg(long = "level", default_value = "0.95")]
    levels: Vec<f64>,
    /// JSON output path (default: JSON on stdout, summary on stderr).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the human-readable summary.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Capture CSV (`d` or `occ1..occK` columns; NA, empty or `.` is missing).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "base")]
    model: ModelArg,
    /// Number of capture occasions (required with the `d` column).
    #[arg(long)]
    k: Option<usize>,
    /// Binary covariate observed for every individual.
    #[arg(long = "always-observed", value_name = "COL")]
    always_observed: Option<String>,
    /// Covariate columns to use (comma separated; default: all others).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Add the complete-case fit for comparison.
    #[arg(long = "complete-case")]
    complete_case: bool,
    /// Add a Wald interval on the log scale from the estimated variance.
    #[arg(long)]
    wald: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Coefficient to test (name or index; default: the always-observed covariate).
    #[arg(long)]
    coef: Option<String>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, value_enum, ignore_case = true)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 200)]
    nu0: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// QQ points CSV path.
    #[arg(long = "qq-out")]
    qq_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Also fit the complete-case estimator.
    #[arg(long = "complete-case")]
    complete_case: bool,
    /// Also compare the empirical variance with the estimated asymptotic variance.
    #[arg(long)]
    wald: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct QqArgs {
    /// Report written by `simulate`; otherwise a study is run.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, ignore_case = true)]
    scenario: Option<ScenarioArg>,
    #[arg(long, default_value_t = 200)]
    nu0: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// QQ points CSV path (default: stdout)
    #[arg(long = "qq-out")]
    qq_out: Option<PathBuf>,
    /// Same as --qq-out
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the human-readable summary
    #[arg(short, long)]
    quiet: bool,
}

fn blank(command: Command) -> RunConfig {
    RunConfig {
        command,
        data: None,
        family: Family::Base,
        occasions: None,
        levels: vec![0.95],
        always_observed: None,
        covariates: None,
        coef: None,
        scenario: None,
        nu0: 200,
        reps: 1000,
        seed: 1,
        out: None,
        qq_out: None,
        complete_case: false,
        wald: false,
        quiet: false,
    }
}

fn from_data(command: Command, a: DataArgs) -> RunConfig {
    RunConfig {
        data: Some(a.data),
        family: match a.model {
            ModelArg::Base => Family::Base,
            ModelArg::Extended => Family::Extended,
        },
        occasions: a.k,
        levels: a.common.levels,
        always_observed: a.always_observed,
        covariates: a.covariates,
        out: a.common.out,
        complete_case: a.complete_case,
        wald: a.wald,
        quiet: a.common.quiet,
        ..blank(command)
    }
}

fn config(cli: Cli) -> RunConfig {
    match cli.command {
        Sub::Fit(a) => from_data(Command::Fit, a),
        Sub::Test(t) => RunConfig { coef: t.coef, ..from_data(Command::Test, t.data) },
        Sub::Simulate(s) => RunConfig {
            scenario: Some(s.study.scenario.into()),
            nu0: s.study.nu0,
            reps: s.study.reps,
            seed: s.study.seed,
            qq_out: s.study.qq_out,
            levels: s.common.levels,
            out: s.common.out,
            quiet: s.common.quiet,
            complete_case: s.complete_case,
            wald: s.wald,
            ..blank(Command::Simulate)
        },
        Sub::Qq(q) => RunConfig {
            data: q.data,
            scenario: q.scenario.map(Into::into),
            nu0: q.nu0,
            reps: q.reps,
            seed: q.seed,
            qq_out: q.qq_out,
            out: q.out,
            quiet: q.quiet,
            ..blank(Command::Qq)
        },
    }
}

fn main() -> ExitCode {
    let cfg = config(Cli::parse());
    match app::run(&cfg) {
        Ok(outcome) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(outcome.stdout.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(2);
            }
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
