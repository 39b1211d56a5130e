//! `defectvit` — generate a synthetic defect corpus, train the detector,
//! evaluate a checkpoint, or annotate a single image.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error or refusal to
//! overwrite. `DEFECTVIT_THREADS` caps data-parallel workers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use defectvit_core::checkpoint::Checkpoint;
use defectvit_core::config::RunConfig;
use defectvit_core::dataset::{load_dataset, splits_on_disk, write_dataset, Dataset};
use defectvit_core::evalrun::{evaluate_records, write_report_files};
use defectvit_core::plot::overlay_svg;
use defectvit_core::synth::{generate_split, preprocess_image, Split};
use defectvit_core::train::train;

#[derive(Parser)]
#[command(name = "defectvit", version, about = "ViT-based metal-surface defect detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train (or resume) on the dataset at the config's data path.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: String,
        /// Config override; defaults to the one embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory (default: <output_dir>/eval_<split>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the detector on one grayscale image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for predictions.json and overlay.svg.
        #[arg(long)]
        out: PathBuf,
        /// Image to annotate (PNG, any size; grayscale conversion applied).
        image: PathBuf,
    },
}

/// Refusal (exit 2) as opposed to a runtime failure (exit 1).
#[derive(Debug)]
struct Refusal(String);

impl std::fmt::Display for Refusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Refusal {}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("DEFECTVIT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<Refusal>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, force, seed } => cmd_generate(&config, force, seed),
        Command::Train {
            config,
            checkpoint,
            seed,
        } => cmd_train(&config, checkpoint.as_deref(), seed),
        Command::Eval {
            checkpoint,
            split,
            config,
            out,
        } => cmd_eval(&checkpoint, &split, config.as_deref(), out),
        Command::Predict { checkpoint, out, image } => cmd_predict(&checkpoint, &image, &out),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_generate(config_path: &Path, force: bool, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config_path, seed)?;
    let root = &cfg.data.path;
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if non_empty {
            if !force {
                bail!(Refusal(format!(
                    "dataset directory {} is not empty; pass --force to overwrite",
                    root.display()
                )));
            }
            std::fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
        }
    }
    let gen = cfg.gen_config();
    let mut records = Vec::new();
    let plan = [
        (Split::Train, cfg.data.generator.train),
        (Split::Val, cfg.data.generator.val),
        (Split::Test, cfg.data.generator.test),
    ];
    for (split, count) in plan {
        records.extend(generate_split(&gen, split, count)?);
    }
    write_dataset(root, &gen.classes, &records)?;
    for (split, count) in plan {
        println!("{}: {} samples", split.name(), count);
    }
    println!("dataset written to {}", root.display());
    Ok(())
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config_path, seed)?;
    let dataset = load_dataset(&cfg.data.path)
        .with_context(|| format!("loading dataset {}", cfg.data.path.display()))?;
    let ckpt = match resume {
        Some(path) => Some(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?),
        None => None,
    };
    let outcome = train(&cfg, &dataset, ckpt.as_ref())?;
    for m in &outcome.history {
        println!(
            "epoch {:>3}  train loss {:>10.5}  val loss {:>10.5}  val acc {}  val mIoU {}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.val_accuracy.map_or("undefined".into(), |v| format!("{v:.4}")),
            m.val_mean_iou.map_or("undefined".into(), |v| format!("{v:.4}")),
        );
    }
    println!("best epoch: {}", outcome.best_epoch);
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("history: {}", outcome.history_csv.display());
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    split_name: &str,
    config_path: Option<&Path>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let cfg = match config_path {
        Some(p) => load_config(p, None)?,
        None => ckpt.config.clone(),
    };
    let split: Split = split_name.parse()?;
    let dataset: Dataset = load_dataset(&cfg.data.path)
        .with_context(|| format!("loading dataset {}", cfg.data.path.display()))?;
    let records = dataset.split(split);
    if records.is_empty() && !splits_on_disk(&cfg.data.path).contains(&split.name()) {
        bail!(
            "split '{}' not present under {}; available: {:?}",
            split_name,
            cfg.data.path.display(),
            splits_on_disk(&cfg.data.path)
        );
    }
    if !dataset.classes.is_empty() {
        cfg.check_dataset(&dataset.classes)?;
    }
    let (detector, grid) = ckpt.build()?;
    let report = evaluate_records(&detector, &grid, &ckpt.scaler, &cfg, &cfg.data.generator.classes, &records)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.join(format!("eval_{}", split.name())));
    let (json_path, csv_path) = write_report_files(&report, &out_dir)?;
    println!(
        "samples {}  accuracy {}  mae {}  mean IoU {}",
        report.samples,
        report.accuracy.map_or("undefined".into(), |v| format!("{v:.4}")),
        report.mae.map_or("undefined".into(), |v| format!("{v:.3}")),
        report.mean_iou.map_or("undefined".into(), |v| format!("{v:.4}")),
    );
    println!("report: {}", json_path.display());
    println!("report: {}", csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class: usize,
    class_name: String,
    score: f64,
}

fn cmd_predict(checkpoint_path: &Path, image_path: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let (detector, grid) = ckpt.build()?;
    let classes = &ckpt.config.data.generator.classes;

    let img = image::open(image_path)
        .with_context(|| format!("reading image {}", image_path.display()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.clone().into_raw();
    let tensor = preprocess_image(&raw, w, h, ckpt.config.model.image_size)?;
    let (boxes, diag) = detector.predict(&tensor, &grid, &ckpt.scaler, &ckpt.config.predict_params())?;

    // predictions are in model coordinates; report in source-image pixels
    let sx = w as f64 / ckpt.config.model.image_size as f64;
    let sy = h as f64 / ckpt.config.model.image_size as f64;
    let out_boxes: Vec<PredictionBox> = boxes
        .iter()
        .map(|b| PredictionBox {
            x1: b.bbox.x1 * sx,
            y1: b.bbox.y1 * sy,
            x2: b.bbox.x2 * sx,
            y2: b.bbox.y2 * sy,
            class: b.class_id,
            class_name: classes.get(b.class_id).cloned().unwrap_or_default(),
            score: b.score,
        })
        .collect();

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let json_path = out_dir.join("predictions.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&out_boxes)?)
        .with_context(|| format!("writing {}", json_path.display()))?;

    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
    let overlay_boxes: Vec<(defectvit_core::anchors::BBox, String)> = out_boxes
        .iter()
        .map(|b| {
            (
                defectvit_core::anchors::BBox::new(b.x1, b.y1, b.x2, b.y2),
                format!("{} {:.2}", b.class_name, b.score),
            )
        })
        .collect();
    let svg_path = out_dir.join("overlay.svg");
    overlay_svg(&png, w, h, &overlay_boxes, &svg_path)?;

    println!(
        "{} detections ({} anchors background, {} low-confidence, {} invalid)",
        out_boxes.len(),
        diag.background_anchors,
        diag.low_confidence,
        diag.invalid_boxes
    );
    println!("predictions: {}", json_path.display());
    println!("overlay: {}", svg_path.display());
    Ok(())
}
