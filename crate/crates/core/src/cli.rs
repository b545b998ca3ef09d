//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::generate_dataset;
use crate::error::{Error, Result};
use crate::pipeline::{self, EvalReport};
use crate::trainer::{latest_checkpoint, train_loop, RunDir};

#[derive(Debug, Parser)]
#[command(name = "facdiff", version, about = "Factorized diffusion: train, segment, generate, evaluate")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Single-threaded kernels for bit-reproducible runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Dotted-key override, e.g. `--set train.lr=2e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; resumes from the newest checkpoint in the output directory.
    Train {
        /// Dataset directory (default: `data.source`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// One-step segmentation of a directory of PNG images.
    Segment {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Sample images together with their region masks.
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Also record every N-th reverse step (overrides `io.record_every`).
        #[arg(long, value_name = "N")]
        record_every: Option<usize>,
    },
    /// Score held-out segmentation, optionally generation consistency.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also train the reference segmenter and score generated masks.
        #[arg(long)]
        consistency: bool,
    },
    /// Train and compare the four decoding schemes under one seed and budget.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Render the synthetic corpus to disk.
    MakeData {
        #[arg(long)]
        num_images: Option<usize>,
    },
}

/// Effective configuration: file, overrides, then flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    if let Some(p) = &common.config {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
            ));
        }
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))))
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable")
}

/// Run one parsed command. Inputs are validated before anything is written.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if cfg.deterministic {
        // Read by the tensor kernels when they size their thread pools.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let out = cfg.out.clone();
    match cli.command {
        Command::Train { data } => {
            if let Some(d) = &data {
                require_dir(d, "dataset directory")?;
            }
            let ds = pipeline::load_dataset(&cfg, data.as_deref())?;
            let (train, _) = ds.split(cfg.data.held_out);
            pipeline::write_config_echo(&out, &cfg)?;
            let outcome = train_loop(
                &cfg.arch(),
                cfg.model.variant,
                &cfg.train_config(),
                &train,
                &cfg.schedule()?,
                &RunDir::new(&out),
            )?;
            let last = outcome.losses.last().map(|l| l.1);
            let ckpt = latest_checkpoint(&out.join("checkpoints"))?;
            println!(
                "trained to step {} (last loss {}), checkpoint {}",
                outcome.state.step,
                last.map_or("n/a".into(), |l| format!("{l:.5}")),
                ckpt.map_or("none".into(), |p| p.display().to_string())
            );
        }
        Command::Segment { checkpoint, input } => {
            require_file(&checkpoint, "checkpoint")?;
            require_dir(&input, "input directory")?;
            let inf = pipeline::open_checkpoint(&checkpoint, &cfg)?;
            let ds = crate::data::load_png_dir(&input, inf.state.arch.resolution)?;
            let seg = pipeline::segment_dataset(&inf, &ds, &cfg)?;
            pipeline::write_config_echo(&out, &cfg)?;
            let names: Vec<String> = if ds.sources().len() == ds.len() {
                ds.sources()
                    .iter()
                    .map(|p| p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned()))
                    .collect()
            } else {
                pipeline::index_names(ds.len())
            };
            let rgb = pipeline::dataset_rgb(&ds);
            pipeline::write_masks(&out, Some(&rgb), &seg, &cfg, &names)?;
            let summary = serde_json::json!({
                "checkpoint": checkpoint,
                "checkpoint_step": inf.state.step,
                "t_seg": seg.t_used,
                "images": names,
                "regions": seg.num_regions(),
            });
            pipeline::write_text(&out.join("segmentation.json"), &json(&summary))?;
            println!("segmented {} images at t = {} into {}", ds.len(), seg.t_used, out.display());
        }
        Command::Generate { checkpoint, n, record_every } => {
            require_file(&checkpoint, "checkpoint")?;
            if n == 0 {
                return Err(Error::config("n", "must be >= 1"));
            }
            let inf = pipeline::open_checkpoint(&checkpoint, &cfg)?;
            let every = record_every.unwrap_or(cfg.io.record_every);
            let (gen, snaps) = if every > 0 {
                pipeline::generate_with_trajectory(&inf, n, &cfg, every)?
            } else {
                (pipeline::generate(&inf, n, &cfg)?, Vec::new())
            };
            pipeline::write_config_echo(&out, &cfg)?;
            pipeline::write_generation(&out, &gen, &cfg)?;
            if !snaps.is_empty() {
                pipeline::write_trajectory(&out.join("trajectory.png"), &snaps, 4)?;
            }
            let summary = serde_json::json!({
                "checkpoint": checkpoint,
                "checkpoint_step": inf.state.step,
                "samples": n,
                "steps": gen.steps,
                "trajectory_records": snaps.iter().map(|s| s.t).collect::<Vec<_>>(),
            });
            pipeline::write_text(&out.join("generation.json"), &json(&summary))?;
            println!("generated {n} samples into {}", out.display());
        }
        Command::Eval { checkpoint, data, consistency } => {
            require_file(&checkpoint, "checkpoint")?;
            if let Some(d) = &data {
                require_dir(d, "dataset directory")?;
            }
            let inf = pipeline::open_checkpoint(&checkpoint, &cfg)?;
            let ds = pipeline::load_dataset(&cfg, data.as_deref())?;
            let (train, held) = ds.split(cfg.data.held_out);
            if held.is_empty() {
                return Err(Error::config("data.held_out", "no held-out images to evaluate"));
            }
            let (segmentation, _) = pipeline::evaluate_segmentation(&inf, &held, &cfg)?;
            let consistency = if consistency {
                Some(pipeline::consistency_score(&inf, &train, &cfg)?.0)
            } else {
                None
            };
            let report = EvalReport {
                checkpoint_step: inf.state.step,
                t_seg: cfg.eval.t_seg(&inf.schedule),
                segmentation,
                consistency,
            };
            pipeline::write_config_echo(&out, &cfg)?;
            pipeline::write_text(&out.join("report.json"), &json(&report))?;
            pipeline::write_text(&out.join("report.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Ablate { data } => {
            if let Some(d) = &data {
                require_dir(d, "dataset directory")?;
            }
            let ds = pipeline::load_dataset(&cfg, data.as_deref())?;
            pipeline::write_config_echo(&out, &cfg)?;
            let report = pipeline::ablate(&cfg, &ds, Some(&out))?;
            pipeline::write_text(&out.join("ablation.json"), &json(&report))?;
            pipeline::write_text(&out.join("ablation.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::MakeData { num_images } => {
            let mut scene = cfg.data.scene.clone();
            if let Some(n) = num_images {
                scene.num_images = n;
            }
            let ds = generate_dataset(&scene)?;
            ds.save_dir(&out)?;
            pipeline::write_config_echo(&out, &cfg)?;
            println!("wrote {} images to {} (checksum {})", ds.len(), out.display(), ds.checksum());
        }
    }
    Ok(())
}
