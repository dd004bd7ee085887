use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapent::eval::TaskKind;
use mapent::pipeline::{
    run_pipeline, stage_ablate, stage_build_graph, stage_evaluate, stage_export, stage_pretrain, stage_synth, Layout, PipelineConfig,
};
use mapent::Error;

#[derive(Parser)]
#[command(name = "mapent", version, about = "Road segment and land parcel representation learning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every stage, replacing the per-section seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; stages read and write fixed subdirectories under it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `train.encoder.dim=32`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city bundle into <out>/bundle.
    Synth,
    /// Build the entity graph from a bundle into <out>/graph.
    BuildGraph {
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Pretrain the encoder into <out>/pretrain.
    Pretrain {
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Continue from a checkpoint up to train.epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write evaluation-mode embeddings to <out>/embeddings.csv.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Run downstream probes into <out>/eval.
    Evaluate {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Comma-separated task names; replaces eval.tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Pretrain and evaluate the full model and each ablation into <out>/ablation.
    Ablate {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// synth, build-graph, pretrain, export and evaluate in sequence.
    Pipeline,
}

fn load_config(common: &Common) -> mapent::Result<PipelineConfig> {
    let base = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> mapent::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let l = Layout::new(&cfg.out_dir);
    let or = |p: Option<PathBuf>, d: PathBuf| p.unwrap_or(d);
    match cli.command {
        Command::Synth => {
            let b = stage_synth(&cfg, &l.bundle())?;
            println!("wrote {} segments, {} parcels to {}", b.segments.len(), b.parcels.len(), l.bundle().display());
        }
        Command::BuildGraph { bundle } => {
            let g = stage_build_graph(&cfg, &or(bundle, l.bundle()), &l.graph())?;
            println!("wrote graph {} to {}", g.content_hash(), l.graph().display());
        }
        Command::Pretrain { graph, resume } => {
            let c = stage_pretrain(&cfg, &or(graph, l.graph()), &l.pretrain(), resume.as_deref())?;
            let last = c.history.last().map_or(f64::NAN, |h| h.losses.total);
            println!("trained {} epochs, final loss {last:.6}; wrote {}", c.epoch, l.pretrain().display());
        }
        Command::Export { checkpoint, graph } => {
            let t = stage_export(&or(checkpoint, l.checkpoint()), &or(graph, l.graph()), &l.embeddings())?;
            println!("wrote {}x{} embeddings to {}", t.segments.nrows() + t.parcels.nrows(), t.dim(), l.embeddings().display());
        }
        Command::Evaluate { embeddings, bundle, tasks } => {
            if !tasks.is_empty() {
                cfg.eval.tasks = tasks.iter().map(|t| t.parse::<TaskKind>()).collect::<mapent::Result<_>>()?;
                cfg.validate()?;
            }
            let r = stage_evaluate(&cfg, &or(embeddings, l.embeddings()), &or(bundle, l.bundle()), &l.eval())?;
            print!("{}", r.to_table());
        }
        Command::Ablate { graph, bundle } => {
            let r = stage_ablate(&cfg, &or(graph, l.graph()), &or(bundle, l.bundle()), &l.ablation())?;
            print!("{}", r.to_table());
        }
        Command::Pipeline => {
            let r = run_pipeline(&cfg)?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
