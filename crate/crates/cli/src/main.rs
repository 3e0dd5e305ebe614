use std::path::PathBuf;
use std::process::ExitCode;

use agent_detr::bench::artifacts::write_run;
use agent_detr::bench::scene::generate_split;
use agent_detr::bench::sweep::sweep;
use agent_detr::bench::{checkpoint, evaluate, train_with, visualize, RunConfig};
use agent_detr::box_agent::RefMode;
use agent_detr::{selftest, Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agent-detr", version, about = "Box-agent decoder toy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle and invariant checks.
    Selftest {
        /// Print results as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train one model and write its curve, checkpoint and statistics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<RefMode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Record measured seconds in the curve (curves stop being reproducible).
        #[arg(long)]
        wall_clock: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the eval scenes of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write attention maps of one generated scene.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every mode/seed combination.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<RefMode>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Selftest { json } => {
            let checks = selftest::run();
            if json {
                println!("{}", serde_json::to_string_pretty(&checks)?);
            } else {
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} self-test check(s) failed")));
            }
        }
        Command::Train { config, seed, mode, out, epochs, wall_clock, quiet } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(m) = mode {
                config.decoder.ref_mode = m;
            }
            if let Some(o) = out {
                config.out_dir = o;
            }
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.wall_clock_in_curve |= wall_clock;
            config.validate()?;
            let result = train_with(&config, |p| {
                if !quiet {
                    eprintln!("epoch {:>3}  loss {:.4}  mean_iou {:.4}  acc50 {:.4}", p.epoch, p.loss, p.mean_iou, p.acc50);
                }
            })?;
            let files = write_run(&config.out_dir, &result)?;
            let eval = &result.final_eval;
            println!("mean_iou {:.4}  acc50 {:.4}  ({} targets)", eval.mean_iou, eval.acc50, eval.targets);
            let stages: Vec<String> = eval.stage_mean_iou.iter().map(|v| format!("{v:.4}")).collect();
            println!("stage mean_iou {}", stages.join(" "));
            if let Some(w) = &eval.walker {
                for (stage, s) in &w.stages {
                    println!("stage {stage} walker in [-1,1]: {:.4} (x {:.4}, y {:.4})", s.fraction_in_range, s.fraction_in_range_x, s.fraction_in_range_y);
                }
            }
            eprintln!("wrote {}", config.out_dir.display());
            if let Some(w) = files.walker_stats {
                eprintln!("walker statistics in {}", w.display());
            }
        }
        Command::Eval { checkpoint: path, config } => {
            let config = RunConfig::load(&config)?;
            let model = checkpoint::load(&path, Some(&config))?;
            let scenes = generate_split(&config.scene, config.scene_seed, 1, config.eval_scenes)?;
            println!("{}", serde_json::to_string_pretty(&evaluate(&model, &scenes)?)?);
        }
        Command::Viz { checkpoint: path, scene_seed, out } => {
            let model = checkpoint::load(&path, None)?;
            let index = visualize(&model, scene_seed, &out)?;
            eprintln!("wrote {} attention maps to {}", index.maps.len(), out.display());
        }
        Command::Sweep { config, modes, seeds, out, epochs, quiet } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let summary = sweep(&config, &modes, &seeds, Some(&out), |mode, seed, p| {
                if !quiet {
                    eprintln!("{mode} seed {seed} epoch {:>3}  loss {:.4}  mean_iou {:.4}", p.epoch, p.loss, p.mean_iou);
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
