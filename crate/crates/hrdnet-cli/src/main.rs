//! `hrdnet` command line: train, eval, infer, profile, gen-data, ablate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hrdnet::config::{FusionStrategy, HrdnetConfig};
use hrdnet::data::{generate_dataset, load_dataset, load_image, save_dataset, SceneSpec};
use hrdnet::model::build_model;
use hrdnet::postprocess::{multi_scale_merge, write_detections};
use hrdnet::training::{evaluate_model, load_checkpoint, train_loop};

#[derive(Parser)]
#[command(name = "hrdnet", about = "Multi-depth pyramid small-object detector")]
struct Cli {
    /// Override the config seed for any command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded for byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: runs/train).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Merge detections over the configured test scales.
        #[arg(long)]
        multi_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference over a directory of PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Output detection dump (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Report parameter count and forward throughput.
    Profile {
        #[arg(long)]
        config: PathBuf,
    },
    /// Materialize a synthetic dataset to disk.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare model variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variants: Variants,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Variants {
    /// The three fusion styles.
    Fusion,
    /// Full model vs per-stream models merged before NMS.
    Ensemble,
}

/// Dataset generation request: the scene recipe plus per-split image counts.
#[derive(Debug, Serialize, Deserialize)]
struct GenSpec {
    scene: SceneSpec,
    #[serde(default)]
    train_images: usize,
    #[serde(default)]
    val_images: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("limiting the thread pool")?;
    }
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
        } => cmd_train(&config, out, resume, cli.seed),
        Command::Eval {
            checkpoint,
            dataset,
            multi_scale,
            out,
        } => cmd_eval(&checkpoint, &dataset, multi_scale, out),
        Command::Infer {
            checkpoint,
            images,
            out,
        } => cmd_infer(&checkpoint, &images, &out),
        Command::Profile { config } => cmd_profile(&config, cli.seed),
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out, cli.seed),
        Command::Ablate {
            config,
            variants,
            out,
        } => cmd_ablate(&config, variants, out, cli.seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<HrdnetConfig> {
    let mut cfg = HrdnetConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_split(cfg: &HrdnetConfig, train: bool) -> Result<Option<hrdnet::data::Dataset>> {
    let (path, name) = if train {
        (&cfg.dataset.train, "train")
    } else {
        (&cfg.dataset.val, "val")
    };
    match path {
        Some(p) => Ok(Some(load_dataset(p, name).with_context(|| {
            format!("loading {name} split from {}", p.display())
        })?)),
        None => Ok(None),
    }
}

fn cmd_train(
    config: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs/train"));
    let train = load_split(&cfg, true)?
        .ok_or_else(|| anyhow::anyhow!("config has no dataset.train path"))?;
    let val = load_split(&cfg, false)?;
    let outcome = match resume {
        Some(ckpt) => hrdnet::training::resume::<f32>(&ckpt, &train, val.as_ref(), &out)?,
        None => train_loop::<f32>(&cfg, &train, val.as_ref(), &out)?,
    };
    for rec in &outcome.history {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:.4} (cls {:.4} reg {:.4})  val ap {}",
            rec.epoch,
            rec.lr,
            rec.loss_total,
            rec.loss_cls,
            rec.loss_reg,
            rec.val_ap.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("checkpoint: {}", outcome.last_checkpoint.display());
    if let Some(best) = &outcome.best_checkpoint {
        println!(
            "best: {} (ap {:.4})",
            best.display(),
            outcome.best_ap.unwrap_or(0.0)
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, multi_scale: bool, out: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = load_dataset(dataset, "val")
        .with_context(|| format!("loading dataset {}", dataset.display()))?;
    let report = evaluate_model(&ckpt.model, &data, multi_scale)?;
    let json = report.to_json();
    println!("{json}");
    let out = out.unwrap_or_else(|| PathBuf::from("runs/eval"));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), ckpt.model.cfg.to_toml())?;
    std::fs::write(out.join("report.json"), &json)?;
    Ok(())
}

fn cmd_infer(checkpoint: &Path, images: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(images)
        .with_context(|| format!("reading {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .png images found in {}", images.display());
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (i, file) in files.iter().enumerate() {
        let image = load_image(file)?;
        let dets = ckpt.model.predict(&image)?;
        let id = i as u64 + 1;
        write_detections(&mut writer, id, &dets)?;
        println!("{id} {} ({} detections)", file.display(), dets.len());
    }
    Ok(())
}

fn cmd_profile(config: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let model = build_model::<f32>(&cfg)?;
    let (h, w) = cfg.resolution;
    let image = synthetic_image(&cfg, 0);
    let _ = model.predict(&image)?; // warm up
    let mut times = Vec::new();
    for i in 0..20 {
        let img = synthetic_image(&cfg, i + 1);
        let t = Instant::now();
        let _ = model.predict(&img)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    println!("config            {}", config.display());
    println!("input resolution  {h}x{w}");
    println!("streams           {}", cfg.n_streams);
    println!("parameters        {}", model.count_parameters());
    println!("items/second      {:.3} (median of {} runs)", 1.0 / median, times.len());
    Ok(())
}

fn synthetic_image(cfg: &HrdnetConfig, index: u64) -> ndarray::Array3<f32> {
    let spec = SceneSpec {
        image_size: cfg.resolution,
        objects_per_image: (2, 6),
        object_size_px: (4, (cfg.resolution.0.min(cfg.resolution.1) / 2).saturating_sub(1).clamp(5, 24)),
        num_classes: cfg.head.num_classes,
        clutter_level: 0.5,
        seed: cfg.seed,
    };
    hrdnet::data::generate_scene(&spec, index)
        .expect("profiling scene")
        .image
}

fn cmd_gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec: GenSpec = toml::from_str(&text).context("parsing generation spec")?;
    if let Some(s) = seed {
        spec.scene.seed = s;
    }
    spec.scene.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("spec.toml"), toml::to_string_pretty(&spec)?)?;
    for (split, count) in [("train", spec.train_images), ("val", spec.val_images)] {
        if count == 0 {
            continue;
        }
        // decorrelate the splits but keep each one reproducible
        let mut scene = spec.scene.clone();
        if split == "val" {
            scene.seed = scene.seed.wrapping_add(0x5EED_u64 << 32);
        }
        let dataset = generate_dataset(&scene, count, split)?;
        let dir = out.join(split);
        save_dataset(&dir, &dataset)?;
        println!("{split}: {count} images -> {}", dir.display());
    }
    Ok(())
}

struct AblateRow {
    name: String,
    ap: Option<f64>,
    ap50: Option<f64>,
    ap75: Option<f64>,
    ap_small: Option<f64>,
}

fn print_table(rows: &[AblateRow]) {
    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>9}",
        "variant", "AP", "AP50", "AP75", "AP_small"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        println!(
            "{:<24} {:>8} {:>8} {:>8} {:>9}",
            r.name,
            fmt(r.ap),
            fmt(r.ap50),
            fmt(r.ap75),
            fmt(r.ap_small)
        );
    }
}

fn cmd_ablate(config: &Path, variants: Variants, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs/ablate"));
    let train = load_split(&cfg, true)?
        .ok_or_else(|| anyhow::anyhow!("config has no dataset.train path"))?;
    let val = load_split(&cfg, false)?
        .ok_or_else(|| anyhow::anyhow!("ablation needs a dataset.val path"))?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;

    let mut rows = Vec::new();
    match variants {
        Variants::Fusion => {
            for strategy in [
                FusionStrategy::SimpleFpn,
                FusionStrategy::AlignedByResolution,
                FusionStrategy::AlignedByDepth,
            ] {
                let mut variant = cfg.clone();
                variant.fusion.strategy = strategy;
                let dir = out.join(strategy.name());
                let outcome = train_loop::<f32>(&variant, &train, None, &dir)?;
                let ckpt = load_checkpoint::<f32>(&outcome.last_checkpoint)?;
                let report = evaluate_model(&ckpt.model, &val, false)?;
                rows.push(AblateRow {
                    name: strategy.name().to_string(),
                    ap: report.ap,
                    ap50: report.ap50,
                    ap75: report.ap75,
                    ap_small: report.ap_small,
                });
            }
        }
        Variants::Ensemble => {
            // full multi-stream model
            let full_dir = out.join("hrdnet");
            let outcome = train_loop::<f32>(&cfg, &train, None, &full_dir)?;
            let full = load_checkpoint::<f32>(&outcome.last_checkpoint)?;
            let report = evaluate_model(&full.model, &val, false)?;
            rows.push(AblateRow {
                name: "hrdnet".into(),
                ap: report.ap,
                ap50: report.ap50,
                ap75: report.ap75,
                ap_small: report.ap_small,
            });
            // one single-stream model per stream, trained at its pyramid
            // resolution, merged pre-NMS for the ensemble row
            let mut members = Vec::new();
            let mut factors = Vec::new();
            for (i, spec) in cfg.stream_specs.iter().enumerate() {
                let factor = cfg.alpha.powi(i as i32);
                let mut single = cfg.clone();
                single.n_streams = 1;
                single.stream_specs = vec![spec.clone()];
                single.resolution = (
                    ((cfg.resolution.0 as f64) * factor).round() as usize,
                    ((cfg.resolution.1 as f64) * factor).round() as usize,
                );
                let dir = out.join(format!("single_{i}"));
                let outcome = train_loop::<f32>(&single, &train, None, &dir)?;
                let ckpt = load_checkpoint::<f32>(&outcome.last_checkpoint)?;
                let report = evaluate_model(&ckpt.model, &val, false)?;
                rows.push(AblateRow {
                    name: format!("single_stream_{i}"),
                    ap: report.ap,
                    ap50: report.ap50,
                    ap75: report.ap75,
                    ap_small: report.ap_small,
                });
                members.push(ckpt.model);
                factors.push(factor);
            }
            // ensemble: pool every member's pre-NMS candidates per image
            let mut merged = Vec::new();
            for sample in &val.samples {
                let mut raw_sets = Vec::new();
                for (model, &f) in members.iter().zip(&factors) {
                    let (_, h, w) = sample.data.image.dim();
                    let sh = ((h as f64) * f).round().max(1.0) as usize;
                    let sw = ((w as f64) * f).round().max(1.0) as usize;
                    let scaled = hrdnet::geometry::resize_bilinear(&sample.data.image, sh, sw);
                    raw_sets.push(model.predict_raw(&scaled)?);
                }
                merged.push((
                    sample.id,
                    multi_scale_merge(&raw_sets, &factors, cfg.nms_iou)?,
                ));
            }
            let report = hrdnet::evaluation::evaluate_dataset(&val, &merged);
            rows.push(AblateRow {
                name: "ensemble".into(),
                ap: report.ap,
                ap50: report.ap50,
                ap75: report.ap75,
                ap_small: report.ap_small,
            });
        }
    }
    print_table(&rows);
    Ok(())
}
