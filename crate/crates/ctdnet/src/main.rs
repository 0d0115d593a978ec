use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ctdnet::config::RunConfig;
use ctdnet::run;

#[derive(Parser)]
#[command(name = "ctdnet", version, about = "Desk-scale small-logo detection harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::parse("")?,
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the configured scenes and their ground truth.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write the loss log and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured scenes, or a detection file
    /// against a ground-truth file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["gt", "detections"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "detections")]
        gt: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        detections: Option<PathBuf>,
    },
    /// Write pyramid-level heatmaps of one scene as PGM files.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Pyramid level; every level when omitted.
        #[arg(long)]
        level: Option<usize>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = ctdnet_core::suite::SUITE_SEEDS)]
        seeds: usize,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { common } => {
            let s = run::gen(&common.load()?)?;
            println!("wrote {} scenes and {}", s.images.len(), s.ground_truth.display());
            if s.regenerations > 0 {
                println!("placement regenerations: {}", s.regenerations);
            }
        }
        Cmd::Train { common, resume } => {
            let s = run::train(&common.load()?, resume.as_deref())?;
            if let (Some(a), Some(b)) = (s.first_total, s.last_total) {
                println!("steps {} loss {:.6} -> {:.6}", s.steps, a, b);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Cmd::Eval {
            common,
            checkpoint,
            gt,
            detections,
        } => {
            let report = match (checkpoint, gt, detections) {
                (Some(ck), _, _) => run::evaluate_checkpoint(&common.load()?, &ck)?,
                (None, Some(g), Some(d)) => run::evaluate_files(&g, &d)?,
                _ => anyhow::bail!("eval needs --checkpoint, or --gt with --detections"),
            };
            print!("{}", run::format_report(&report));
        }
        Cmd::Heatmap {
            common,
            checkpoint,
            scene,
            level,
        } => {
            for p in run::dump_heatmap(&common.load()?, &checkpoint, scene, level)? {
                println!("{}", p.display());
            }
        }
        Cmd::Gradcheck { seeds } => {
            let reports = run::gradcheck(seeds, |r| println!("{}", run::format_case(r)))?;
            println!("{} cases passed", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
