use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consult_core::eval_harness::Policy;

use consult_cli::commands::{self, Ctx};
use consult_cli::config::PipelineConfig;
use consult_cli::error::CliResult;

#[derive(Parser)]
#[command(
    name = "consult",
    version,
    about = "Multi-domain consult routing pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every command; flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Synthetic cohort size.
    #[arg(long, global = true)]
    total: Option<usize>,
    /// Synthetic signal strength in [0, 1].
    #[arg(long, global = true)]
    signal: Option<f64>,
    /// Life-threat recall constraint for threshold tuning.
    #[arg(long, global = true)]
    constraint: Option<f64>,
    /// Prefix horizon K.
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or ingest) the episode cohort.
    Synth,
    /// Split, build the vocabulary, encode sequences and expand prefixes.
    Tokenize,
    /// Fit TF-IDF and SVD on train prefixes and project every split.
    Featurize,
    /// Train per-domain heads and calibrators.
    TrainRouter,
    /// Grid-search routing thresholds on dev.
    Tune,
    /// Train one sequence specialist per domain.
    TrainSpecialist,
    /// Score the test split and write reports.
    Eval {
        #[arg(long, default_value = "router")]
        policy: Policy,
    },
    /// Route one episode JSON and append an audit record.
    Route {
        /// Episode JSON file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Fixed timestamp for the audit record.
        #[arg(long)]
        timestamp: Option<String>,
        /// Audit log path (default `<workdir>/audit.jsonl`).
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Anytime curves and the threshold frontier.
    Report,
    /// Run every batch stage in order.
    Pipeline {
        #[arg(long)]
        skip_specialists: bool,
    },
}

fn build_config(c: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &c.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.total {
        cfg.cohort.total = t;
    }
    if let Some(s) = c.signal {
        cfg.cohort.signal_strength = Some(s);
    }
    if let Some(v) = c.constraint {
        cfg.policy.constraint = v;
    }
    if let Some(k) = c.k {
        cfg.router.k = k;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(build_config(&cli.common)?)?;
    match cli.cmd {
        Cmd::Synth => commands::cmd_synth(&ctx),
        Cmd::Tokenize => commands::cmd_tokenize(&ctx),
        Cmd::Featurize => commands::cmd_featurize(&ctx),
        Cmd::TrainRouter => commands::cmd_train_router(&ctx),
        Cmd::Tune => commands::cmd_tune(&ctx),
        Cmd::TrainSpecialist => commands::cmd_train_specialist(&ctx),
        Cmd::Eval { policy } => commands::cmd_eval(&ctx, policy),
        Cmd::Route {
            input,
            timestamp,
            audit,
        } => {
            let out = commands::cmd_route(&ctx, &input, timestamp, audit)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Cmd::Report => commands::cmd_report(&ctx),
        Cmd::Pipeline { skip_specialists } => commands::cmd_pipeline(&ctx, !skip_specialists),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
