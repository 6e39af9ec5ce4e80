use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use pmglmm::data::GlmmData;
use pmglmm::inference::{nested_tests, Restriction};
use pmglmm::io::{
    load_dataset, load_sim_config, read_fit, to_json, write_study, write_text, DatasetSchema,
    FitReport, OracleCheckReport, RunConfig, TestReport,
};
use pmglmm::linalg::max_abs;
use pmglmm::oracle::{marginal_score, QuadratureRule};
use pmglmm::simulate::run_study;
use pmglmm::solver::{multistart_fit, FitResult};
use pmglmm::{GlmmError, Result};

#[derive(Parser)]
#[command(name = "pmglmm", version, about = "Fit binomial and Poisson GLMMs and test nested models")]
struct Cli {
    /// Worker threads for multi-start fits and simulation studies.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a JSON report.
    Fit(FitArgs),
    /// Likelihood-ratio, score and generalized Wald tests for a nested pair of fits.
    Test(TestArgs),
    /// Run a replication study and write JSON and CSV summaries.
    Simulate(SimArgs),
    /// Exact marginal score at a fitted solution by adaptive quadrature.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Column mapping; overrides the `[data]` table of the config.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Hold the Matérn smoothness fixed (`true`, the default) or estimate it (`false`).
    #[arg(long, value_name = "BOOL")]
    fix_omega3: Option<bool>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `default` for the covariance model's grid, or `w1,w2,..;w1,w2,..`.
    #[arg(long)]
    starts: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    reduced: PathBuf,
    /// Headerless CSV restriction matrix.
    #[arg(long = "B", alias = "b", value_name = "CSV")]
    restriction: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    /// Base seed; replication r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report; the CSV table goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Fit report to check; fits from scratch when absent.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    oracle_nodes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Model {
    data: GlmmData,
    config: RunConfig,
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(fix) = args.fix_omega3 {
        if config.covariance.kind != "matern" {
            return Err(GlmmError::Config {
                key: "fix-omega3".into(),
                message: format!("only applies to matern, not {}", config.covariance.kind),
            });
        }
        let mut mask = config.covariance.fixed.clone().unwrap_or_else(|| vec![false, false, true]);
        mask[2] = fix;
        config.covariance.fixed = Some(mask);
    }
    let schema = match (&args.schema, &config.data) {
        (Some(p), _) => DatasetSchema::load(p)?,
        (None, Some(s)) => s.clone(),
        (None, None) => {
            return Err(GlmmError::Config {
                key: "data".into(),
                message: "no column mapping; pass --schema or add a [data] table".into(),
            })
        }
    };
    let data = load_dataset(&args.data, &schema)?;
    Ok(Model { data, config })
}

fn parse_starts(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|v| {
            v.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|_| GlmmError::Config {
                        key: "starts".into(),
                        message: format!("`{x}` is not a number"),
                    })
                })
                .collect()
        })
        .collect()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_fit(args: &FitArgs) -> Result<ExitCode> {
    let Model { data, mut config } = load_model(&args.model)?;
    match args.starts.as_deref() {
        Some("default") => config.multistart = true,
        Some(list) => config.solver.starts = parse_starts(list)?,
        None => {}
    }
    config.validate()?;
    let family = config.family()?;
    let cov = config.covariance_spec(&data)?;
    let solver = config.solver_for(&cov);
    let fit = multistart_fit(&data, family.as_ref(), &cov, &solver)?;
    let out = args.out.clone().or_else(|| config.output.clone().map(PathBuf::from));
    emit(&to_json(&FitReport::from(&fit))?, out.as_deref())?;
    if fit.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("fit did not converge: {}", fit.warnings.join("; "));
        Ok(ExitCode::from(2))
    }
}

fn run_test(args: &TestArgs) -> Result<ExitCode> {
    let Model { data, config } = load_model(&args.model)?;
    let family = config.family()?;
    let cov = config.covariance_spec(&data)?;
    let full = read_fit(&args.full)?;
    let reduced = read_fit(&args.reduced)?;
    let r = Restriction::from_csv(&args.restriction)?;
    let tests = nested_tests(&data, family.as_ref(), &cov, &full, &reduced, &r, &config.solver)?;
    for t in &tests {
        eprintln!("{:<6} {:>12.6} df={} p={:.4}", format!("{:?}", t.kind).to_lowercase(), t.value, t.df, t.p);
    }
    emit(&to_json(&TestReport { tests })?, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn run_simulate(args: &SimArgs) -> Result<ExitCode> {
    let mut cfg = load_sim_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let study = run_study(&cfg)?;
    eprint!("{}", study.to_table());
    match &args.out {
        Some(p) => write_study(&study, p)?,
        None => print!("{}", study.to_csv()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_oracle(args: &OracleArgs) -> Result<ExitCode> {
    let Model { data, config } = load_model(&args.model)?;
    let family = config.family()?;
    let cov = config.covariance_spec(&data)?;
    let fit: FitResult = match &args.fit {
        Some(p) => read_fit(p)?,
        None => multistart_fit(&data, family.as_ref(), &cov, &config.solver_for(&cov))?,
    };
    if fit.data_digest != data.digest() {
        return Err(GlmmError::Invalid("the fit was computed on different data".into()));
    }
    let rule = QuadratureRule::with_nodes(args.oracle_nodes);
    let ev = marginal_score(&data, family.as_ref(), &cov, &DVector::from_vec(fit.beta.clone()), &fit.omega, &rule)?;
    let report = OracleCheckReport {
        loglik: ev.loglik,
        score_max_norm: max_abs(&ev.score),
        score: ev.score.iter().copied().collect(),
        nodes_per_dim: args.oracle_nodes,
        warnings: ev.warnings,
    };
    eprintln!("score max-norm: {:.3e}", report.score_max_norm);
    emit(&to_json(&report)?, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Test(a) => run_test(a),
        Command::Simulate(a) => run_simulate(a),
        Command::OracleCheck(a) => run_oracle(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
