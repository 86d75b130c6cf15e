//! Command-line harness: generate data, train, evaluate, predict, run
//! ablation grids, and print run reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pps::config::RunConfig;
use pps::error::Error;
use pps::harness;
use pps::metrics::SwapMode;
use pps::model::{load_checkpoint, Model};
use pps::raster::read_image;
use pps::render;
use pps::synth::generate_dataset;
use pps::taxonomy::Taxonomy;

#[derive(Parser)]
#[command(name = "pps", about = "Desk-scale panoptic part segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic samples plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train-split sample count (defaults to the config value).
        #[arg(long)]
        train: Option<usize>,
        /// Validation-split sample count (defaults to the config value).
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train a model and write checkpoint plus per-step loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint (config hash must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a generated split, or compare prediction
    /// and ground-truth container directories.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Replace planes with ground truth: panoptic_gt, part_gt, both.
        #[arg(long)]
        swap: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of predicted .ann containers (file-based mode).
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Directory of ground-truth .ann containers (file-based mode).
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// Taxonomy file for file-based mode.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Run inference on image containers and write map containers.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write color PNG renderings.
        #[arg(long)]
        render: bool,
        /// Input .img containers.
        images: Vec<PathBuf>,
    },
    /// Train and evaluate the ablation grid, emitting one table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Print the artifacts of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Output paths resolve against `PPS_OUT_ROOT` when set and relative.
fn resolve_out(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("PPS_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            config,
            out,
            train,
            val,
        } => {
            let (cfg, tax) = RunConfig::load(&config)?;
            let out = resolve_out(&out);
            let n_train = train.unwrap_or(cfg.data.train_samples);
            let n_val = val.unwrap_or(cfg.data.val_samples);
            let manifest = generate_dataset(
                &cfg.generator,
                &tax,
                &[("train", n_train), ("val", n_val)],
                &out,
            )?;
            println!(
                "wrote {} samples under {}",
                manifest.records.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            resume,
        } => {
            let (cfg, tax) = RunConfig::load(&config)?;
            let out = resolve_out(&out);
            let result = harness::train(&cfg, &tax, &out, resume.as_deref())?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                result.steps,
                result.final_loss,
                result.checkpoint.display()
            );
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
            swap,
            out,
            pred_dir,
            gt_dir,
            taxonomy,
        } => {
            let report = match (pred_dir, gt_dir) {
                (Some(pred), Some(gt)) => {
                    let tax = match taxonomy {
                        Some(p) => Taxonomy::load(p)?,
                        None => match &config {
                            Some(c) => RunConfig::load(c)?.1,
                            None => {
                                return Err(Error::Config(
                                    "file-based evaluate needs --taxonomy or --config".into(),
                                ))
                            }
                        },
                    };
                    harness::evaluate_dirs(&pred, &gt, &tax)?
                }
                (None, None) => {
                    let config = config.ok_or_else(|| {
                        Error::Config("evaluate needs --config with --checkpoint".into())
                    })?;
                    let checkpoint = checkpoint.ok_or_else(|| {
                        Error::Config("evaluate needs --checkpoint (or --pred-dir/--gt-dir)".into())
                    })?;
                    let (cfg, tax) = RunConfig::load(&config)?;
                    let swap = swap.map(|s| s.parse::<SwapMode>()).transpose()?;
                    let out = out.map(|p| resolve_out(&p));
                    harness::evaluate_run(&cfg, &tax, &checkpoint, &split, swap, out.as_deref())?
                }
                _ => {
                    return Err(Error::Config(
                        "--pred-dir and --gt-dir must be given together".into(),
                    ))
                }
            };
            print!("{}", harness::render_report_table(&report));
        }
        Command::Predict {
            config,
            checkpoint,
            out,
            render: do_render,
            images,
        } => {
            if images.is_empty() {
                return Err(Error::Config("predict needs at least one image".into()));
            }
            let (cfg, tax) = RunConfig::load(&config)?;
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out)?;
            let mut model = Model::new(&cfg.model, &tax, cfg.seed)?;
            load_checkpoint(&checkpoint, &mut model.store, &cfg.hash(), false)?;
            for path in &images {
                let image = read_image(path)?;
                let (map, scores) = harness::predict_sample(&model, &tax, &cfg.merge, &image)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "pred".into());
                let ann = out.join(format!("{stem}.ann"));
                map.write(&ann)?;
                if do_render {
                    render::save_png(
                        &render::render_map(&map, &tax),
                        out.join(format!("{stem}.png")),
                    )?;
                }
                println!("{} -> {} ({} segments)", path.display(), ann.display(), scores.len());
            }
        }
        Command::Ablate { config, out, steps } => {
            let (cfg, tax) = RunConfig::load(&config)?;
            let out = resolve_out(&out);
            harness::ablate(&cfg, &tax, &out, steps)?;
            print!("{}", std::fs::read_to_string(out.join("ablate.txt"))?);
        }
        Command::Report { run } => {
            print!("{}", harness::collect_report(&run)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
