use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use icare::app::{self, RunConfig};
use icare::evaluation::Annotator;
use icare::fusion::AblationMode;
use icare::Exec;

/// Road-user importance estimation on synthetic intersection scenes.
#[derive(Parser)]
#[command(name = "icare", version)]
struct Cli {
    /// key = value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run every batch loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataOut {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump every raster.
        #[arg(long)]
        rasters: bool,
    },
    /// Train one stage.
    Train {
        #[command(subcommand)]
        stage: Stage,
    },
    /// Evaluate a fusion checkpoint on the test split.
    Eval {
        #[command(flatten)]
        io: DataOut,
        #[arg(long)]
        fusion: PathBuf,
        #[arg(long)]
        proposer: PathBuf,
        #[arg(long)]
        pathnet: Option<PathBuf>,
        #[arg(long, default_value = "main")]
        annotator: String,
    },
    /// Train and evaluate every (mode, seed) arm.
    Ablate {
        #[command(flatten)]
        io: DataOut,
        #[arg(long)]
        proposer: PathBuf,
        #[arg(long)]
        pathnet: Option<PathBuf>,
        /// Comma-separated modes, e.g. A,B,C,D.
        #[arg(long)]
        modes: Option<String>,
        /// Number of seeds, starting at 0.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Render PR curves of an ablation run to SVG.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: gen, both stage-one networks, ablation, reports.
    Run {
        #[command(flatten)]
        io: DataOut,
    },
    /// Check a run directory against its recorded digests.
    Verify {
        #[arg(long)]
        dir: PathBuf,
        /// Re-run the pipeline into this scratch directory and compare.
        #[arg(long)]
        rederive: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Stage {
    Path {
        #[command(flatten)]
        io: DataOut,
    },
    Proposer {
        #[command(flatten)]
        io: DataOut,
    },
    Fusion {
        #[command(flatten)]
        io: DataOut,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        proposer: PathBuf,
        #[arg(long)]
        pathnet: Option<PathBuf>,
    },
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| icare::Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, io: &DataOut) {
    if let Some(d) = &io.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &io.out {
        cfg.out_dir = o.clone();
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(n) = std::env::var("ICARE_THREADS") {
        let n: usize = n.parse().map_err(|_| {
            icare::Error::Usage(format!(
                "ICARE_THREADS must be a positive integer, got {n:?}"
            ))
        })?;
        icare::exec::init_threads(n)?;
    }
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Gen {
            scenes,
            seed,
            out,
            rasters,
        } => {
            if let Some(n) = scenes {
                cfg.scenes = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.data_dir = o;
            }
            let stats = app::cmd_gen(&cfg, rasters, exec)?;
            println!(
                "{} scenes ({} annotated), {} users, positive rate {:.3}, test disagreement {:.3}",
                stats.scenes,
                stats.annotated_scenes,
                stats.users,
                stats.positive_rate,
                stats.test_disagreement_rate
            );
            println!(
                "split: train {} / val {} / test {}",
                stats.train, stats.val, stats.test
            );
        }
        Command::Train { stage } => match stage {
            Stage::Path { io } => {
                apply(&mut cfg, &io);
                let (_, trace) = app::cmd_train_path(&cfg, exec)?;
                println!(
                    "best epoch {} val mse {:.5}",
                    trace.best_epoch + 1,
                    trace.val_mse[trace.best_epoch]
                );
            }
            Stage::Proposer { io } => {
                apply(&mut cfg, &io);
                let (_, trace) = app::cmd_train_proposer(&cfg, exec)?;
                println!(
                    "best epoch {} val recall {:.3}",
                    trace.best_epoch + 1,
                    trace.val_recall[trace.best_epoch]
                );
            }
            Stage::Fusion {
                io,
                mode,
                seed,
                proposer,
                pathnet,
            } => {
                apply(&mut cfg, &io);
                let mode = AblationMode::parse(&mode)?;
                let (_, trace) =
                    app::cmd_train_fusion(&cfg, mode, seed, &proposer, pathnet.as_deref(), exec)?;
                println!(
                    "mode {} best epoch {} val F1 {:.4}",
                    mode.tag(),
                    trace.best_epoch + 1,
                    trace.val_f1[trace.best_epoch]
                );
            }
        },
        Command::Eval {
            io,
            fusion,
            proposer,
            pathnet,
            annotator,
        } => {
            apply(&mut cfg, &io);
            let annotator = Annotator::parse(&annotator)?;
            for r in app::cmd_eval(
                &cfg,
                &fusion,
                &proposer,
                pathnet.as_deref(),
                annotator,
                exec,
            )? {
                println!(
                    "{} {}: F1max {:.4} F1@0.5 {:.4} AP {:.4} ({} positives)",
                    r.annotator.tag(),
                    r.subset.tag(),
                    r.f1_max,
                    r.f1_at_half,
                    r.average_precision,
                    r.positives
                );
            }
        }
        Command::Ablate {
            io,
            proposer,
            pathnet,
            modes,
            seeds,
        } => {
            apply(&mut cfg, &io);
            if let Some(m) = modes {
                cfg.set("ablation.modes", &m)?;
            }
            if let Some(n) = seeds {
                cfg.ablation_seeds = (0..n).collect();
            }
            cfg.validate()?;
            let (table, cross) = app::cmd_ablate(&cfg, &proposer, pathnet.as_deref(), exec)?;
            for s in &table.summary {
                println!(
                    "mode {} {} {}: F1max {:.4} ± {:.4} over {} runs",
                    s.mode.tag(),
                    s.annotator.tag(),
                    s.subset.tag(),
                    s.f1_max_mean,
                    s.f1_max_std,
                    s.runs
                );
            }
            for r in &cross.rows {
                println!(
                    "cross-annotator mode {}: same {:.4} alt {:.4}",
                    r.mode.tag(),
                    r.same_f1,
                    r.cross_f1
                );
            }
        }
        Command::Report { input, out } => {
            for p in app::cmd_report(&input, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Run { io } => {
            apply(&mut cfg, &io);
            let r = app::run_reference(&cfg, exec)?;
            println!(
                "path spearman {:.3}, mse {:.3} vs baseline {:.3}",
                r.path.spearman, r.path.test_mse_deg2, r.path.baseline_mse_deg2
            );
            println!("proposer recall {:.3}", r.proposer.recall);
            for m in &cfg.modes {
                if let Some(f) = r.ablation.mean_f1(*m, Annotator::Main) {
                    println!("mode {} mean F1max {f:.4}", m.tag());
                }
            }
        }
        Command::Verify { dir, rederive } => {
            let r = app::verify(&dir, rederive.as_deref(), exec)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if !r.ok() {
                anyhow::bail!("verification failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<icare::Error>().map_or(1, app::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
