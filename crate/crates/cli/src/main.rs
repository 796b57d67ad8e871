use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpdtsm::inference::checkpoint;
use gpdtsm_cli::pipeline::{self, Checkpoint, RunPaths};
use gpdtsm_cli::{output, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "gpdtsm", about = "Term-structure models with a GP macro effect, estimated by IBIS")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model id: M0, M1, GP_ijk or LM_ijk.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Choose the GP signal scales on the training window.
    Tune,
    /// Tune, then run IBIS over the training window.
    Train,
    /// Out-of-sample loop from a training (or loop) checkpoint.
    Forecast,
    /// Evaluation tables from the ledger in the output directory.
    Evaluate,
    /// Write a synthetic panel from the reference parameters.
    Simulate,
    /// The whole pipeline.
    Run,
    /// Decomposition and scatter files from a checkpoint.
    Decompose,
}

fn config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.ibis.seed = s;
    }
    if let Some(m) = &cli.model {
        cfg.model = gpdtsm::ModelSpec::parse(m).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resume_or_train(cli: &Cli, p: &pipeline::Prepared, paths: &RunPaths) -> Result<Checkpoint, CliError> {
    match &cli.resume {
        Some(path) => pipeline::load_checkpoint(path, &p.cfg),
        None => pipeline::tune_and_train(p, paths),
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = config(cli)?;
    if let Verb::Simulate = cli.verb {
        return pipeline::write_simulation(&cfg.out_dir, &cfg);
    }
    if let Verb::Run = cli.verb {
        return pipeline::run_pipeline(&cfg, cli.resume.as_deref()).map(|_| ());
    }
    let p = pipeline::prepare(&cfg).map_err(|e| e.in_stage("load", None))?;
    let paths = RunPaths::new(&cfg.out_dir)?;
    match cli.verb {
        Verb::Tune => {
            let t = pipeline::tune(&p).map_err(|e| e.in_stage("tune", None))?;
            checkpoint::write(&paths.tuning(), &t)?;
        }
        Verb::Train => {
            pipeline::tune_and_train(&p, &paths)?;
        }
        Verb::Forecast => {
            let ck = resume_or_train(cli, &p, &paths)?;
            pipeline::finish(&p, &paths, ck)?;
        }
        Verb::Evaluate => {
            let ledger = output::read_ledger(&paths.ledger())?;
            pipeline::run_evaluate(&p, &paths, &ledger)?;
        }
        Verb::Decompose => {
            let path = cli.resume.clone().unwrap_or_else(|| paths.oos_ckpt());
            let ck = pipeline::load_checkpoint(&path, &cfg)?;
            pipeline::run_decompose(&p, &paths, &ck)?;
        }
        Verb::Simulate | Verb::Run => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
