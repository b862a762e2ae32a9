//! `lanegan` command line.

mod plot;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lanegan::config::{Profile, RunConfig};
use lanegan::datasets::CategoryIndex;
use lanegan::detector::DetectorCheckpoint;
use lanegan::evaluator::evaluate_dataset;
use lanegan::experiments as exp;
use lanegan::transfer::TransferManifest;

#[derive(Parser)]
#[command(name = "lanegan", version, about = "Low-light lane-detection data enhancement with SIM-CycleGAN")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk or full.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Work directory; every command reads and writes below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic bright/dark dataset.
    Synth,
    /// Train SIM-CycleGAN from domain X (well lit) to domain Y (low light).
    TrainGan {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Translate the transfer sources to low light, reusing their annotations.
    Transfer {
        /// Defaults to the checkpoint written by train-gan.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the lane detector, optionally on an augmented list.
    TrainDetector {
        #[arg(long)]
        epochs: Option<usize>,
        /// Add round(N x low-light count) generated images from the manifest.
        #[arg(long)]
        ratio_n: Option<f64>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output subdirectory under `<out>/detector`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Decode and score a detector, or score existing predictions.
    Evaluate {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `.lines.txt` predictions laid out like the test set.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// One detector per ratio N, sharing one GAN and one transfer run.
    AblateRatio {
        /// Comma-separated N values; the profile's list by default.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Reuse this manifest instead of training a GAN.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Baseline against CycleGAN and SIM-CycleGAN augmentation.
    Compare {
        #[arg(long)]
        ratio_n: Option<f64>,
        #[arg(long)]
        no_cyclegan: bool,
    },
    /// Validation curves for real against generated low-light training images.
    Convergence {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Line chart (SVG) of one metric across JSONL logs.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "val_miou")]
        metric: String,
        /// One per input, in order.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let profile = Profile::parse(&g.profile)?;
    let mut cfg = RunConfig::load(profile, g.config.as_deref(), std::env::vars())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.paths.work_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join("run_config.toml");
    std::fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))
}

fn load_manifest(cfg: &RunConfig, path: Option<PathBuf>) -> Result<TransferManifest> {
    let p = path.unwrap_or_else(|| cfg.paths.manifest());
    cfg.check_inputs(&[p.clone()])?;
    Ok(TransferManifest::load(&p)?)
}

fn detector_header(cfg: &RunConfig, images: usize) {
    let t = &cfg.detector_train;
    tracing::info!(
        profile = ?cfg.profile,
        seed = cfg.seed,
        images,
        epochs = t.epochs,
        batch_size = t.batch_size,
        lr = t.lr,
        momentum = t.momentum,
        weight_decay = t.weight_decay,
        lambda_1 = t.loss.lambda_1,
        lambda_2 = t.loss.lambda_2,
        resize = ?t.resize,
        "detector run"
    );
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Plot {
        inputs,
        metric,
        labels,
        output,
    } = &cli.command
    {
        if !labels.is_empty() && labels.len() != inputs.len() {
            bail!("got {} labels for {} inputs", labels.len(), inputs.len());
        }
        let series = inputs
            .iter()
            .enumerate()
            .map(|(i, p)| plot::read_series(p, metric, labels.get(i).cloned()))
            .collect::<Result<Vec<_>>>()?;
        plot::render_svg(&series, metric, output)?;
        println!("{}", output.display());
        return Ok(());
    }
    let mut cfg = load_config(&cli.global)?;
    let work = cfg.paths.work_dir.clone();
    match cli.command {
        Command::Plot { .. } => unreachable!(),
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Synth => {
            let data = cfg.paths.data_dir();
            for (split, n) in exp::synth_data(&cfg.synth, cfg.seed, &data)? {
                println!("{split}\t{n}");
            }
            write_config(&cfg, &data)?;
        }
        Command::TrainGan { epochs } => {
            if let Some(e) = epochs {
                cfg.transfer.epochs = e;
            }
            let dir = cfg.paths.gan_dir();
            write_config(&cfg, &dir)?;
            tracing::info!(
                profile = ?cfg.profile,
                seed = cfg.seed,
                epochs = cfg.transfer.epochs,
                batch_size = cfg.transfer.batch_size,
                lr = cfg.transfer.gan.lr,
                lambda_cyc = cfg.transfer.gan.weights.lambda_cyc,
                resize = ?cfg.transfer.resize,
                "gan run"
            );
            let run = exp::run_train_gan(&cfg, &dir)?;
            println!("{}", run.checkpoint.display());
        }
        Command::Transfer { checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.gan_checkpoint());
            let m = exp::run_transfer(&cfg, &ck, &cfg.paths.transfer_dir(), None)?;
            tracing::info!(records = m.records.len(), skipped = m.skipped.len(), "transfer done");
            println!("{}", cfg.paths.manifest().display());
        }
        Command::TrainDetector {
            epochs,
            ratio_n,
            manifest,
            name,
        } => {
            if let Some(e) = epochs {
                cfg.detector_train.epochs = e;
            }
            let list = match ratio_n {
                Some(n) => {
                    cfg.ratio_n = n;
                    cfg.validate()?;
                    let m = load_manifest(&cfg, manifest)?;
                    exp::augmented_list(&cfg, &m, n)?
                }
                None => exp::real_train_list(&cfg)?,
            };
            let name = name.unwrap_or_else(|| ratio_n.map_or("baseline".into(), exp::ratio_label));
            let dir = work.join("detector").join(name);
            write_config(&cfg, &dir)?;
            detector_header(&cfg, list.len());
            exp::run_train_detector(&cfg, &list, &dir)?;
            println!("{}", dir.join("detector.ckpt").display());
        }
        Command::Evaluate {
            checkpoint,
            predictions,
        } => {
            let report = match predictions {
                Some(pred) => {
                    let (root, idx) = (cfg.paths.test_root(), cfg.paths.test_index());
                    cfg.check_inputs(&[pred.clone(), root.clone(), idx.clone()])?;
                    evaluate_dataset(&pred, &root, &CategoryIndex::load(&idx)?, &cfg.eval)?
                }
                None => {
                    let ck = checkpoint.unwrap_or_else(|| work.join("detector/baseline/detector.ckpt"));
                    cfg.check_inputs(&[ck.clone()])?;
                    let name = ck
                        .parent()
                        .and_then(|p| p.file_name())
                        .map_or("detector".into(), |n| n.to_string_lossy().into_owned());
                    let det = DetectorCheckpoint::load(&ck)?.detector;
                    exp::evaluate_detector(&cfg, &det, &work.join("eval").join(name))?
                }
            };
            print!("{}", report.to_table());
        }
        Command::AblateRatio {
            ratios,
            manifest,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.detector_train.epochs = e;
            }
            let ratios = ratios.unwrap_or_else(|| cfg.ablation_ratios.clone());
            let dir = work.join("ablation");
            write_config(&cfg, &dir)?;
            detector_header(&cfg, 0);
            let grid = match manifest {
                Some(p) => exp::ablate_ratio_with(&cfg, &load_manifest(&cfg, Some(p))?, &ratios, &dir)?,
                None => exp::ablate_ratio(&cfg, &ratios, &dir)?,
            };
            print!("{}", grid.to_table());
        }
        Command::Compare { ratio_n, no_cyclegan } => {
            if let Some(n) = ratio_n {
                cfg.ratio_n = n;
            }
            if no_cyclegan {
                cfg.compare.cyclegan = false;
            }
            cfg.validate()?;
            let dir = work.join("compare");
            write_config(&cfg, &dir)?;
            print!("{}", exp::compare(&cfg, &dir)?.to_table());
        }
        Command::Convergence { manifest } => {
            let m = load_manifest(&cfg, manifest)?;
            let dir = work.join("convergence");
            write_config(&cfg, &dir)?;
            let c = exp::convergence(&cfg, &m, &dir)?;
            let series = [("real", dir.join("real/metrics.jsonl")), ("generated", dir.join("generated/metrics.jsonl"))]
                .iter()
                .map(|(l, p)| plot::read_series(p, "val_miou", Some(l.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let fig = dir.join("convergence.svg");
            plot::render_svg(&series, "val_miou", &fig)?;
            println!("{} images per arm; {}", c.images, fig.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet {
        tracing::Level::WARN
    } else {
        tracing::Level::INFO
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
