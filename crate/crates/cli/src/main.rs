use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridse::estimators::{estimate_linear, estimate_nonlinear, AlphaRule, EstimatorConfig, EstimatorError, Model};
use gridse::harness::{read_rows, run_experiment, summarize, write_rows, write_summary, ExperimentSpec, HarnessError, THREADS_ENV};
use gridse::meas::{default_plan, pmu_matrix, Family, MeasurementPlan, StateVector};
use gridse::netmodel::{import_cdf, load_case, NetworkModel};
use gridse::scenario::{generate, true_state, MeasurementSet, ScenarioConfig};
use gridse::solvers::ResidualForm;

#[derive(Parser)]
#[command(name = "gridse", version, about = "Robust power-system state estimation under bad data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an IEEE common-format case to the JSON case format.
    Convert {
        input: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one measurement realization and write it as JSON.
    Simulate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one estimator on one realization and print the outcome.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Model,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        /// Replay a realization written by `simulate` instead of generating one.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Monte Carlo sweep over models, λ and bad-data rates; writes CSV.
    Sweep(SweepArgs),
    /// Aggregate a results CSV into one row per model and grid point.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Case JSON file, or the name of a bundled case such as `ieee30`.
    #[arg(long)]
    case: String,
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 0.06)]
    bad_rate: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Multiplies every σ; 0 gives noiseless readings.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_enum)]
    residual_form: Option<FormArg>,
    #[arg(long, value_enum)]
    alpha_rule: Option<RuleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    L2,
    L2Squared,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Nonzero,
    All,
}

impl SolverArgs {
    fn apply(&self, cfg: &mut EstimatorConfig) {
        if let Some(form) = self.residual_form {
            cfg.solver.residual_form = match form {
                FormArg::L2 => ResidualForm::L2,
                FormArg::L2Squared => ResidualForm::L2Squared,
            };
        }
        if let Some(rule) = self.alpha_rule {
            cfg.alpha_rule = match rule {
                RuleArg::Nonzero => AlphaRule::NonzeroComponents,
                RuleArg::All => AlphaRule::AllComponents,
            };
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// JSON experiment spec; the flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<Model>>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    bad_rate: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
}

/// Process exit status with its message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }
    fn data(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        match &err {
            HarnessError::Spec(_) => Failure::usage(err),
            _ => Failure::data(err),
        }
    }
}

impl From<EstimatorError> for Failure {
    fn from(err: EstimatorError) -> Self {
        if err.is_convergence_failure() {
            Failure { code: 3, message: err.to_string() }
        } else if let EstimatorError::Config(_) = err {
            Failure::usage(err)
        } else {
            Failure::data(err)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gridse: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Convert { input, out } => {
            let net = import_cdf(&input).map_err(Failure::data)?;
            let text = serde_json::to_string_pretty(&net.to_case_file()).map_err(Failure::data)?;
            emit(out.as_deref(), |w| writeln!(w, "{text}"))
        }
        Command::Simulate { data, out } => {
            let (net, plan, x_true) = setup(&data)?;
            let set = generate(&net, &plan, &x_true, &scenario_config(&data), data.trial).map_err(Failure::usage)?;
            let text = serde_json::to_string_pretty(&set).map_err(Failure::data)?;
            emit(out.as_deref(), |w| writeln!(w, "{text}"))
        }
        Command::Estimate { data, model, lambda, scenario, solver } => {
            let (net, plan, x_true) = setup(&data)?;
            let set = match scenario {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
                    let set: MeasurementSet =
                        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
                    if set.plan != plan {
                        return Err(Failure::data("scenario was generated for a different case or family"));
                    }
                    set
                }
                None => generate(&net, &plan, &x_true, &scenario_config(&data), data.trial).map_err(Failure::usage)?,
            };
            let mut cfg = EstimatorConfig::new(model, lambda);
            solver.apply(&mut cfg);
            let result = match data.family {
                Family::Pmu => estimate_linear(&pmu_matrix(&net, &plan), &set.y, &cfg)?,
                Family::Scada => estimate_nonlinear(&net, &plan, &set.y, &StateVector::flat(&net, Family::Scada), &cfg)?,
            }
            .with_truth(&x_true);
            let mut out = io::stdout().lock();
            let bad = set.bad_indices().len();
            let lines = [
                format!("case        {}", net.name),
                format!("family      {}", data.family),
                format!("model       {model}"),
                format!("lambda      {lambda}"),
                format!("trial       {} (seed {}, {bad} bad channels of {})", set.trial, set.seed, set.y.len()),
                format!("error       {:.6e}", result.error_vs_truth.unwrap_or(f64::NAN)),
                format!("objective   {:.6e}", result.objective),
                format!("gn_iters    {}", result.gn_iterations),
                format!("stages      {}", result.stages),
                format!("time_ms     {:.3}", result.wall_time * 1e3),
            ];
            for line in lines {
                writeln!(out, "{line}").map_err(Failure::data)?;
            }
            Ok(())
        }
        Command::Sweep(args) => sweep(args),
        Command::Report { input, out } => {
            let file = File::open(&input).map_err(|e| Failure::data(format!("{}: {e}", input.display())))?;
            let rows = read_rows(file).map_err(Failure::data)?;
            let summary = summarize(&rows).map_err(Failure::data)?;
            emit(out.as_deref(), |w| write_summary(w, &summary).map_err(io::Error::other))
        }
    }
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut spec = match &args.spec {
        Some(path) => ExperimentSpec::from_json_file(path)?,
        None => {
            let (Some(case), Some(family)) = (&args.case, args.family) else {
                return Err(Failure::usage("sweep needs --spec or both --case and --family"));
            };
            ExperimentSpec::new(resolve_case(case), family)
        }
    };
    if let Some(case) = &args.case {
        spec.case_path = resolve_case(case);
    }
    if let Some(family) = args.family {
        spec.family = family;
    }
    if let Some(models) = args.models {
        spec.models = models;
    }
    if let Some(grid) = args.lambda {
        spec.lambda_grid = grid;
    }
    if let Some(grid) = args.bad_rate {
        spec.bad_rate_grid = grid;
    }
    if let Some(trials) = args.trials {
        spec.scenario.trials = trials;
    }
    if let Some(seed) = args.seed {
        spec.scenario.seed = seed;
    }
    if let Some(out) = args.out {
        spec.output_path = Some(out);
    }
    args.solver.apply(&mut spec.estimator);
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        std::env::set_var(THREADS_ENV, threads.to_string());
    }
    spec.validate()?;
    let rows = run_experiment(&spec)?;
    emit(spec.output_path.as_deref(), |w| write_rows(w, &rows).map_err(io::Error::other))?;
    let failed = rows.iter().filter(|r| !r.converged).count();
    if failed > 0 {
        eprintln!("gridse: {failed} of {} runs did not converge", rows.len());
    }
    Ok(())
}

/// Bundled case names resolve against the data directory when no such file exists.
fn resolve_case(case: &str) -> PathBuf {
    let path = PathBuf::from(case);
    if path.exists() {
        return path;
    }
    let data = std::env::var_os("GRIDSE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let file = if path.extension().is_some() { path.clone() } else { path.with_extension("json") };
    let bundled = data.join(file);
    if bundled.exists() {
        bundled
    } else {
        path
    }
}

fn setup(data: &DataArgs) -> Result<(NetworkModel, MeasurementPlan, StateVector), Failure> {
    let net = load_case(resolve_case(&data.case)).map_err(Failure::data)?;
    let plan = default_plan(&net, data.family);
    plan.validate(&net).map_err(Failure::data)?;
    let x_true = true_state(&net, data.family);
    Ok((net, plan, x_true))
}

fn scenario_config(data: &DataArgs) -> ScenarioConfig {
    ScenarioConfig {
        bad_rate: data.bad_rate,
        seed: data.seed,
        noise_scale: data.noise_scale,
        trials: data.trial as usize + 1,
        ..ScenarioConfig::default()
    }
}

fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Failure> {
    let result = match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            write(&mut w).and_then(|_| w.flush())
        }
        None => {
            let mut w = io::stdout().lock();
            write(&mut w).and_then(|_| w.flush())
        }
    };
    result.map_err(Failure::data)
}
