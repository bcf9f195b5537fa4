//! `huscf`: plan cuts, train, evaluate and regenerate plot data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use huscf_core::data::Scenario;
use huscf_core::run::{self, parse_flags, RunConfig, Stage, StageError};
use huscf_core::Error;

const OK: u8 = 0;
const USAGE: u8 = 2;
const CONFIG: u8 = 3;
const SCENARIO: u8 = 4;
const STAGE: u8 = 5;
const NO_RUN_DIR: u8 = 6;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown option, subcommand or --flags entry)
  3  configuration error (unreadable or invalid config, fleet or architecture)
  4  invalid scenario
  5  pipeline stage failure (diagnostic is tagged with the stage)
  6  run directory missing or incomplete (eval, report)

Precedence: --seed and --flags override the config file, which overrides
built-in defaults. --flags replaces the config's flag list.

Output directory: --out, else $HUSCF_OUT_DIR/<scenario>-seed<N>, else
runs/<scenario>-seed<N>.";

#[derive(Parser)]
#[command(name = "huscf", version, about = "Latency-aware split GAN planner and federated simulator", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search cut points for the fleet and print the plan with its latency breakdown.
    Plan(Common),
    /// Train and evaluate, writing a run directory.
    Train(Common),
    /// Re-evaluate the stored model of a finished run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Train and store frozen scoring classifiers that are missing.
        #[arg(long)]
        train_classifiers: bool,
    },
    /// Rebuild plot-data files from a run directory's CSVs.
    Report(Common),
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated feature flags: no-clustering, no-kld, kld-labels, no-batchnorm, saturating.
    #[arg(long, value_name = "LIST")]
    flags: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let code = match (&e.stage, &e.source) {
            (_, Error::Scenario(_)) => SCENARIO,
            (Stage::Config, _) => CONFIG,
            _ => STAGE,
        };
        Self::new(code, e.to_string())
    }
}

fn config(common: &Common) -> Result<RunConfig, Failure> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::new(CONFIG, format!("[config] {e}")))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    if let Some(list) = &common.flags {
        c.flags = parse_flags(list).map_err(|e| Failure::new(USAGE, e.to_string()))?;
    }
    c.validate().map_err(|e| Failure::new(CONFIG, format!("[config] {e}")))?;
    Ok(c)
}

fn check_scenario(c: &RunConfig) -> Result<Scenario, Failure> {
    Scenario::load(&c.scenario).map_err(|e| Failure::new(SCENARIO, format!("[config] {e}")))
}

fn out_dir(common: &Common, c: &RunConfig) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    let root = std::env::var_os("HUSCF_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stem = Path::new(&c.scenario)
        .file_stem()
        .map_or_else(|| c.scenario.clone(), |s| s.to_string_lossy().into_owned());
    root.join(format!("{stem}-seed{}", c.seed))
}

fn run_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = out_dir(common, &config(common)?);
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::new(
            NO_RUN_DIR,
            format!("{} is not a finished run directory (no manifest.json)", dir.display()),
        ));
    }
    Ok(dir)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Plan(common) => {
            let c = config(&common)?;
            let doc = run::plan(&c)?;
            let text = serde_json::to_string_pretty(&doc).expect("plan serializes");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)
                    .and_then(|_| std::fs::write(out.join("plan.json"), &text))
                    .map_err(|e| Failure::new(STAGE, format!("[persist] {}: {e}", out.display())))?;
            }
            println!("{text}");
        }
        Command::Train(common) => {
            let c = config(&common)?;
            check_scenario(&c)?;
            let dir = out_dir(&common, &c);
            let summary = run::run(&c, &dir)?;
            println!("run directory: {}", dir.display());
            println!(
                "{} rounds, {} steps, {:.6} s/iteration",
                summary.rounds, summary.steps, summary.latency_seconds
            );
            for d in &summary.report.domains {
                let score = d.generation_score.map_or(String::new(), |g| format!(" generation score {g:.3}"));
                println!("domain {}: accuracy {:.4} f1 {:.4}{score}", d.domain, d.metrics.accuracy, d.metrics.f1);
            }
        }
        Command::Eval {
            common,
            train_classifiers,
        } => {
            let dir = run_dir(&common)?;
            let reports = run::evaluate_dir(&dir, train_classifiers)?;
            println!("{}", serde_json::to_string_pretty(&reports).expect("report serializes"));
        }
        Command::Report(common) => {
            let dir = run_dir(&common)?;
            let written = run::regenerate_plots(&dir).map_err(|e| Failure::new(STAGE, format!("[persist] {e}")))?;
            for w in written {
                println!("{}", dir.join(w).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(OK),
        Err(f) => {
            eprintln!("huscf: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
