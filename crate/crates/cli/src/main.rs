//! `stk`: runs the pipeline stage by stage with artifacts in `runs/<name>/`.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use stk_core::pipeline::PipelineConfig;
use stk_core::Error;

/// Temporal knowledge-graph extrapolation with mixture-of-experts adapters.
///
/// Any config field can be overridden with `--section.key value`.
#[derive(Parser, Debug)]
#[command(name = "stk", version)]
struct Cli {
    /// TOML config file; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run name; artifacts go to `<runs-dir>/<run>/`.
    #[arg(long, global = true, default_value = "default")]
    run: String,

    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,

    /// Use the data-parallel code paths.
    #[arg(long, global = true)]
    parallel: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct AblationArgs {
    #[arg(long)]
    disable_st_moe: bool,
    #[arg(long)]
    disable_ea_moe: bool,
    #[arg(long)]
    disable_cma_moe: bool,
    #[arg(long)]
    disable_hybrid_score: bool,
    #[arg(long)]
    single_adapter_mode: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    ablation: AblationArgs,
    /// Weight of the encoder's score in the hybrid ranking.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Hide gold facts of earlier test timestamps.
    #[arg(long)]
    no_gold_append: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load train/valid/test quadruple files into a dataset bundle.
    Ingest,
    /// Pretrain and freeze the graph encoder.
    PretrainEncoder,
    /// Mine temporal logic rules from the training split.
    MineRules,
    /// Retrieve event chains and write training instructions.
    BuildInstructions,
    /// Pretrain the backbone, then fine-tune the adapters.
    Train(AblationArgs),
    /// Beam-decode and rank the test queries.
    Eval(EvalArgs),
    /// Export expert activation ratios over the test queries.
    RoutingStats(AblationArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::PretrainEncoder => "pretrain-encoder",
            Command::MineRules => "mine-rules",
            Command::BuildInstructions => "build-instructions",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::RoutingStats(_) => "routing-stats",
        }
    }
}

fn apply_ablation(cfg: &mut PipelineConfig, a: &AblationArgs) {
    let ab = &mut cfg.ablation;
    ab.disable_st_moe |= a.disable_st_moe;
    ab.disable_ea_moe |= a.disable_ea_moe;
    ab.disable_cma_moe |= a.disable_cma_moe;
    ab.disable_hybrid_score |= a.disable_hybrid_score;
    ab.single_adapter_mode |= a.single_adapter_mode;
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<String> {
    let mut cfg = config::load(cli.config.as_deref(), overrides)?;
    cfg.parallel |= cli.parallel;
    match &cli.command {
        Command::Train(a) | Command::RoutingStats(a) => apply_ablation(&mut cfg, a),
        Command::Eval(e) => {
            apply_ablation(&mut cfg, &e.ablation);
            if let Some(l) = e.lambda {
                cfg.inference.lambda = l;
            }
            if let Some(b) = e.beam_width {
                cfg.inference.beam_width = b;
            }
            cfg.inference.gold_append &= !e.no_gold_append;
        }
        _ => {}
    }
    cfg.validate()?;
    let run = run::RunDir::open(&cli.runs_dir, &cli.run)?;
    let name = cli.command.name();
    run.write(&format!("{name}.config.toml"), |w| {
        use std::io::Write;
        Ok(w.write_all(config::to_toml(&cfg)?.as_bytes())?)
    })?;
    log::info!("{name}: run directory {}", run.path("").display());
    match cli.command {
        Command::Ingest => commands::ingest(&run, &cfg),
        Command::PretrainEncoder => commands::pretrain_encoder(&run, &cfg),
        Command::MineRules => commands::mine_rules(&run, &cfg),
        Command::BuildInstructions => commands::build_instructions(&run, &cfg),
        Command::Train(_) => commands::train(&run, &cfg),
        Command::Eval(_) => commands::eval(&run, &cfg),
        Command::RoutingStats(_) => commands::routing(&run, &cfg),
    }
}

/// 2 config, 3 missing artifact, 4 numerical failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::Config(_)) => return 2,
            Some(Error::MissingArtifact(_)) => return 3,
            Some(Error::Numerical(_)) => return 4,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match config::extract_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli, &overrides) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
