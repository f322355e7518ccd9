use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tinydetr::boxes::BoxXyXy;
use tinydetr::config::RunConfig;
use tinydetr::data::{gen_synthetic, load_dataset, save_dataset, CocoResultRecord, Dataset};
use tinydetr::ensemble::{ensemble, AugmentedPrediction, EnsembleMode};
use tinydetr::error::Error;
use tinydetr::metrics::track_atd;
use tinydetr::train::{evaluate_model, load_model, train};

/// Desk-scale detection transformer with denoising anchor queries.
#[derive(Parser)]
#[command(name = "tinydetr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set lr=0.0003 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {kv}")));
            };
            cfg.set_key(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and metrics.csv.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        /// Where to write predictions JSON (default: alongside checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse per-augmentation predictions one-to-one.
    Ensemble {
        /// Main-augmentation predictions (JSON array of results).
        #[arg(long)]
        main: PathBuf,
        /// Auxiliary predictions as FILE or FILE:WEIGHT (repeatable).
        #[arg(long = "aux")]
        aux: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        /// normalized (convex weights) or literal (count-normalized).
        #[arg(long, default_value = "normalized")]
        mode: String,
        /// Output file for fused predictions.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average top-k distance of matched anchors over a dataset.
    Atd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value = "val")]
        split: String,
    },
}

/// `TINYDETR_OUT_DIR` redirects any relative output path.
fn apply_out_override(path: PathBuf) -> PathBuf {
    match std::env::var_os("TINYDETR_OUT_DIR") {
        Some(base) if path.is_relative() => Path::new(&base).join(path),
        _ => path,
    }
}

fn pick_split<'d>(split: &str, train: &'d Dataset, val: &'d Dataset) -> Result<&'d Dataset, Error> {
    match split {
        "train" => Ok(train),
        "val" => Ok(val),
        other => Err(Error::Config(format!("split must be train or val, got {other}"))),
    }
}

fn read_results(path: &Path) -> Result<Vec<CocoResultRecord>, Error> {
    let raw = std::fs::read(path)?;
    serde_json::from_slice(&raw).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn group_results(records: &[CocoResultRecord], weight: f64) -> BTreeMap<u64, AugmentedPrediction> {
    let mut by_image: BTreeMap<u64, AugmentedPrediction> = BTreeMap::new();
    for r in records {
        let entry = by_image.entry(r.image_id).or_insert_with(|| AugmentedPrediction {
            weight,
            ..AugmentedPrediction::default()
        });
        entry.boxes.push(BoxXyXy::new(
            r.bbox[0],
            r.bbox[1],
            r.bbox[0] + r.bbox[2],
            r.bbox[1] + r.bbox[3],
        ));
        entry.labels.push(r.category_id as usize);
        entry.scores.push(r.score);
    }
    by_image
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let out = apply_out_override(out);
            let (train_ds, val_ds) = gen_synthetic(&cfg.gen_config());
            save_dataset(&out, &train_ds, &val_ds)?;
            println!(
                "wrote {} train / {} val images ({}px, {} classes) to {}",
                train_ds.images.len(),
                val_ds.images.len(),
                cfg.image_size,
                cfg.num_classes,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = config.resolve()?;
            let out = apply_out_override(out);
            let (train_ds, val_ds) = load_dataset(&data)?;
            let result = train(&cfg, &train_ds, &val_ds, &out, resume.as_deref())?;
            if let Some(last) = result.rows.last() {
                println!(
                    "finished epoch {}: loss {:.4}, AP50 {:.2}, AP {:.2}",
                    last.epoch, last.loss, last.ap50, last.ap
                );
            }
            println!("metrics: {}", result.csv_path.display());
            println!("checkpoint: {}", result.final_checkpoint.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let (cfg, model) = load_model(&checkpoint)?;
            let (train_ds, val_ds) = load_dataset(&data)?;
            let ds = pick_split(&split, &train_ds, &val_ds)?;
            let (eval, predictions) = evaluate_model(&model, ds, &cfg)?;
            let out = apply_out_override(out.unwrap_or_else(|| {
                checkpoint.with_file_name(format!("predictions_{split}.json"))
            }));
            std::fs::write(
                &out,
                serde_json::to_vec_pretty(&predictions)
                    .map_err(|e| Error::Data(format!("encode predictions: {e}")))?,
            )?;
            println!(
                "AP {:.2} AP50 {:.2} AP75 {:.2} AP_S {:.2} | ATD100 {:.4} (small {:.4}) | duplicate rate {:.4}",
                eval.ap * 100.0,
                eval.ap50 * 100.0,
                eval.ap75 * 100.0,
                eval.ap_small * 100.0,
                eval.atd100,
                eval.atd100_small,
                eval.duplicate_rate
            );
            println!("predictions: {}", out.display());
            Ok(())
        }
        Command::Ensemble {
            main,
            aux,
            iou_threshold,
            mode,
            out,
        } => {
            let mode = EnsembleMode::parse(&mode)?;
            let main_records = read_results(&main)?;
            let mut aux_groups = Vec::new();
            for spec in &aux {
                let (path, weight) = match spec.rsplit_once(':') {
                    Some((p, w)) if w.parse::<f64>().is_ok() => {
                        (PathBuf::from(p), w.parse::<f64>().unwrap())
                    }
                    _ => (PathBuf::from(spec), 1.0),
                };
                aux_groups.push(group_results(&read_results(&path)?, weight));
            }
            let main_groups = group_results(&main_records, 1.0);
            let mut fused_records = Vec::new();
            for (image_id, main_preds) in &main_groups {
                let others: Vec<AugmentedPrediction> = aux_groups
                    .iter()
                    .filter_map(|g| g.get(image_id).cloned())
                    .collect();
                let fused = ensemble(main_preds, &others, iou_threshold, mode)?;
                for i in 0..fused.len() {
                    let b = fused.boxes[i];
                    fused_records.push(CocoResultRecord {
                        image_id: *image_id,
                        category_id: fused.labels[i] as u64,
                        bbox: [b.x0, b.y0, b.x1 - b.x0, b.y1 - b.y0],
                        score: fused.scores[i],
                    });
                }
            }
            let out = apply_out_override(out);
            std::fs::write(
                &out,
                serde_json::to_vec_pretty(&fused_records)
                    .map_err(|e| Error::Data(format!("encode fused: {e}")))?,
            )?;
            println!("fused {} predictions -> {}", fused_records.len(), out.display());
            Ok(())
        }
        Command::Atd {
            checkpoint,
            data,
            k,
            split,
        } => {
            let (cfg, model) = load_model(&checkpoint)?;
            let (train_ds, val_ds) = load_dataset(&data)?;
            let ds = pick_split(&split, &train_ds, &val_ds)?;
            let images: Vec<(Vec<f64>, Vec<(usize, tinydetr::boxes::BoxCxCyWh)>)> = ds
                .images
                .iter()
                .map(|img| (img.to_floats(), img.boxes()))
                .collect();
            let (all, small) = track_atd(
                &model,
                &images,
                k,
                &cfg.area_ranges(),
                &cfg.cost_config(),
                &cfg.loss_config(),
            )?;
            match small {
                Some(s) => println!("ATD({k}) = {all:.6} (small objects: {s:.6})"),
                None => println!("ATD({k}) = {all:.6} (no small objects in split)"),
            }
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "config" => 2,
        "data" => 3,
        "io" => 4,
        "shape" => 5,
        "metric" => 6,
        "alignment" => 7,
        "checkpoint" => 8,
        "training" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
