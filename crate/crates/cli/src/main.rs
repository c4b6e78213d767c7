//! `fedkd`: run simulations, score result tables and run the numerical verifiers.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedkd_core::data::Regime;
use fedkd_core::federation::{run_experiment, ExperimentConfig, ExperimentResult, Method};
use fedkd_core::metrics::{
    emit_report, read_method_csv, score_table, write_scored_csv, MethodSummary, ReportFormat,
};
use fedkd_core::nn::random_gradcheck;
use fedkd_core::server::lemmas::{
    random_drift_trials, single_jump_deviation, verify_aggregation_variance,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fedkd", version, about = "Federated distillation simulator")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run all four methods on one config and score them against each other.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Composite scores for a CSV of `method,distribution,arch,acc,loss,cpu,mem,comm`.
    Score {
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the EMA drift identity and bound, and the aggregation variance law.
    VerifyLemmas {
        /// Random target sequences per smoothing factor.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Monte-Carlo draws per client count.
        #[arg(long, default_value_t = 2000)]
        mc_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of CE, KD and hybrid gradients on random models.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// iid, dirichlet:<alpha> or shards:<s>
    #[arg(long)]
    distribution: Option<Regime>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    clients: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Per-round output: json (rounds.jsonl) or csv (rounds.csv).
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

enum Failure {
    Core(fedkd_core::Error),
    Check(String),
    Io(PathBuf, io::Error),
}

impl From<fedkd_core::Error> for Failure {
    fn from(e: fedkd_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

const MAX_RELATIVE_GRAD_ERROR: f64 = 1e-4;

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.distribution {
            cfg.distribution = d;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(k) = self.clients {
            cfg.clients = k;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

fn simulate(run: &RunArgs, method: Option<Method>) -> Outcome {
    let mut cfg = run.config()?;
    if let Some(m) = method {
        cfg.method = m;
    }
    let result = run_experiment(&cfg)?;
    emit_report(std::slice::from_ref(&result), &run.out, run.format)?;
    write_file(&run.out.join("config.toml"), &cfg.to_toml_string())?;
    print_json(&json!(result.summary));
    Ok(())
}

fn compare(run: &RunArgs) -> Outcome {
    let cfg = run.config()?;
    let results = Method::ALL
        .into_iter()
        .map(|m| {
            log::info!("running {m}");
            run_experiment(&cfg.with_method(m))
        })
        .collect::<Result<Vec<ExperimentResult>, _>>()?;
    emit_report(&results, &run.out, run.format)?;
    write_file(&run.out.join("config.toml"), &cfg.to_toml_string())?;
    let rows: Vec<MethodSummary> = results.iter().map(|r| (&r.summary).into()).collect();
    write_scored_csv(io::stdout().lock(), &score_table(&rows)?)?;
    Ok(())
}

fn score(input: &Path, out: Option<&Path>) -> Outcome {
    let scored = score_table(&read_method_csv(input)?)?;
    match out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Failure::Io(path.to_path_buf(), e))?;
            write_scored_csv(io::BufWriter::new(file), &scored)?;
        }
        None => write_scored_csv(io::stdout().lock(), &scored)?,
    }
    Ok(())
}

fn verify_lemmas(trials: usize, mc_trials: usize, seed: u64, out: Option<&Path>) -> Outcome {
    const TOL: f64 = 1e-10;
    const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
    const KAPPA: f64 = 2.0;
    let drift = random_drift_trials(trials, &GAMMAS, 20, 20, 5, seed, TOL)?;
    let jump = GAMMAS
        .iter()
        .map(|&g| single_jump_deviation(g, 30, 20, 5, seed))
        .collect::<Result<Vec<f64>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let ks: Vec<usize> = (1..=32).collect();
    let unbiased = verify_aggregation_variance(&ks, mc_trials, 1.0, 0.0, 20, 5, seed)?;
    let biased = verify_aggregation_variance(&ks, mc_trials, 1.0, KAPPA, 20, 5, seed)?;
    let intercept_error = (biased.b - biased.expected_b).abs() / biased.expected_b;

    let mut failures = Vec::new();
    if drift.violations > 0 {
        failures.push(format!(
            "{} drift rounds violate the identity or the bound",
            drift.violations
        ));
    }
    if jump > TOL {
        failures.push(format!("single-jump decay deviates by {jump:e}"));
    }
    if (unbiased.log_log_slope + 1.0).abs() > 0.05 {
        failures.push(format!(
            "log-log slope {:.4} is not -1 +- 0.05",
            unbiased.log_log_slope
        ));
    }
    if intercept_error > 0.1 {
        failures.push(format!(
            "intercept {:.4} vs {:.4}",
            biased.b, biased.expected_b
        ));
    }
    let report = json!({
        "drift": drift,
        "single_jump_max_deviation": jump,
        "aggregation_unbiased": unbiased,
        "aggregation_biased": biased,
        "intercept_relative_error": intercept_error,
        "violations": failures,
    });
    print_json(&report);
    if let Some(path) = out {
        write_file(
            path,
            &serde_json::to_string_pretty(&report).expect("json value"),
        )?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join("; ")))
    }
}

fn gradcheck(models: usize, seed: u64, eps: f64) -> Outcome {
    let summary = random_gradcheck(models, seed, eps)?;
    print_json(&json!(summary));
    if summary.worst() < MAX_RELATIVE_GRAD_ERROR {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} >= {MAX_RELATIVE_GRAD_ERROR:e}",
            summary.worst()
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let outcome = match &cli.command {
        Command::Simulate { run, method } => simulate(run, *method),
        Command::Compare { run } => compare(run),
        Command::Score { input, out } => score(input, out.as_deref()),
        Command::VerifyLemmas {
            trials,
            mc_trials,
            seed,
            out,
        } => verify_lemmas(*trials, *mc_trials, *seed, out.as_deref()),
        Command::Gradcheck { models, seed, eps } => gradcheck(*models, *seed, *eps),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Io(path, e) => eprintln!("error: {}: {e}", path.display()),
            }
            let _ = io::stderr().flush();
            ExitCode::from(f.exit_code())
        }
    }
}
