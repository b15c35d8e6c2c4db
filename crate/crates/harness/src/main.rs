use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use auxdistill_harness::audit::audit_run;
use auxdistill_harness::config::{ExperimentConfig, MethodChoice, Overrides};
use auxdistill_harness::density::{score_density_report, write_density_csv, ToySpec};
use auxdistill_harness::run::run_experiment;
use auxdistill_harness::{HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "auxdistill",
    version,
    about = "Federated distillation simulator with auxiliary data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics (JSONL), checkpoints and, for FedAUX, scores.
    Run(RunFlags),
    /// Nearest-neighbor audit of a finished FedAUX run.
    Audit {
        #[command(flatten)]
        flags: RunFlags,
        /// Local neighbors reported per top-scored sample.
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Compare normalized scores with true density ratios on a Gaussian toy.
    DensityReport {
        /// TOML toy spec; the built-in three-client spec when omitted.
        #[arg(long)]
        toy: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg, fedprox, feddf or fedaux; append +P for pre-trained init.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train only the classification head on clients.
    #[arg(long)]
    linear_eval: bool,
    /// One round with every client.
    #[arg(long)]
    one_shot: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            method: self.method.as_deref().map(str::parse::<MethodChoice>).transpose()?,
            alpha: self.alpha,
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            epsilon: self.epsilon,
            delta: self.delta,
            lambda: self.lambda,
            seed: self.seed,
            linear_eval: self.linear_eval,
            one_shot: self.one_shot,
            out: self.out.clone(),
        };
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(flags) => {
            let cfg = flags.resolve()?;
            let artifacts = run_experiment(&cfg)?;
            if let Some(last) = artifacts.records.last() {
                println!("{} round {} accuracy {:.4}", last.method, last.round, last.accuracy);
            }
            println!("metrics: {}", artifacts.metrics.display());
        }
        Command::Audit { flags, k } => {
            let cfg = flags.resolve()?;
            let (entries, path) = audit_run(&cfg, k)?;
            println!("{} audit rows written to {}", entries.len(), path.display());
        }
        Command::DensityReport { toy, out } => {
            let spec = match toy {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
                    toml::from_str::<ToySpec>(&text)?
                }
                None => ToySpec::default(),
            };
            let report = score_density_report(&spec)?;
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            let path = out.join("density_report.csv");
            write_density_csv(&report, File::create(&path).map_err(|e| HarnessError::io(&path, e))?)?;
            for (i, r) in report.correlations.iter().enumerate() {
                match r {
                    Some(r) => println!("client {i}: pearson r = {r:.4}"),
                    None => println!("client {i}: pearson r undefined (constant field)"),
                }
            }
            println!("table: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
