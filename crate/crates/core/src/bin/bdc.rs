//! `bdc` command-line driver: one verb per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bdc::pipeline::{self, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "bdc", version, about = "Collect reasoning trees, cluster them and train gated LoRA experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a self-contained demo experiment.
    Init {
        #[arg(long, default_value = "bdc.toml")]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the tree search on every problem and extract trajectories.
    Collect(StageArgs),
    /// Embed and cluster the extracted trajectories.
    Cluster(StageArgs),
    /// Train the base model and one expert per cluster.
    TrainExperts(StageArgs),
    /// Train the gating hypernetwork with everything else frozen.
    TrainHypernet(StageArgs),
    /// Report per-cluster accuracy of every model variant.
    Eval {
        #[command(flatten)]
        stage: StageArgs,
        /// Evaluate on this sample file instead of the training corpus.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long, default_value = "bdc.toml")]
    config: PathBuf,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &StageArgs, stage: Stage) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(stage, seed);
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), (&'static str, PipelineError)> {
    match command {
        Command::Init { config, seed } => {
            pipeline::cmd_init(&config, seed).map_err(|e| ("init", e))?;
            println!("wrote demo experiment to {}", config.display());
        }
        Command::Collect(args) => {
            let s = load(&args, Stage::Collect)
                .and_then(|cfg| pipeline::cmd_collect(&cfg))
                .map_err(|e| ("collect", e))?;
            println!(
                "collected {} problems: PR {:.1} AC {:.1}; {} records ({} thought-to-solution)",
                s.problems.len(),
                s.pr,
                s.ac,
                s.records,
                s.thought_to_solution
            );
        }
        Command::Cluster(args) => {
            let s = load(&args, Stage::Cluster)
                .and_then(|cfg| pipeline::cmd_cluster(&cfg))
                .map_err(|e| ("cluster", e))?;
            println!(
                "clustered {} of {} records into {} clusters {:?}: objective {:.6} after {} iterations",
                s.pooled, s.records, s.k, s.sizes, s.objective, s.iterations
            );
        }
        Command::TrainExperts(args) => {
            let m = load(&args, Stage::TrainExperts)
                .and_then(|cfg| pipeline::cmd_train_experts(&cfg))
                .map_err(|e| ("train-experts", e))?;
            for e in &m.experts {
                println!(
                    "expert {} (cluster {}, {} samples): loss {:.4} -> {:.4}",
                    e.id, e.source_cluster, e.members, e.initial_loss, e.final_loss
                );
            }
            if !m.skipped_clusters.is_empty() {
                println!("skipped empty clusters {:?}; K = {}", m.skipped_clusters, m.k);
            }
        }
        Command::TrainHypernet(args) => {
            let m = load(&args, Stage::TrainHypernet)
                .and_then(|cfg| pipeline::cmd_train_hypernet(&cfg))
                .map_err(|e| ("train-hypernet", e))?;
            let h = m.hypernet.expect("set by train-hypernet");
            println!("hypernetwork: loss {:.4} -> {:.4}", h.initial_loss, h.final_loss);
        }
        Command::Eval { stage, dataset } => {
            let s = load(&stage, Stage::Eval)
                .and_then(|cfg| pipeline::cmd_eval(&cfg, dataset.as_deref()))
                .map_err(|e| ("eval", e))?;
            print!("{}", s.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("bdc {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
