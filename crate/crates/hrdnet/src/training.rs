//! SGD training loop: linear warmup + step-decay schedule, momentum with
//! weight decay, deterministic batching, and binary checkpoints.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{HrdnetConfig, Schedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalReport};
use crate::geometry::{crop_quadrants, AnnotatedImage};
use crate::head::LossBundle;
use crate::model::{build_model, HrdnetModel};
use crate::nn::{GradStore, ParamStore, Real};
use crate::postprocess::DetectionSet;

/// Learning rate at a global iteration / epoch: linear ramp from
/// `base_lr * warmup_ratio` to `base_lr` over the warmup iterations, then
/// `base_lr * decay_factor^(#decay epochs reached)`.
pub fn lr_at(global_iter: u64, epoch: usize, s: &Schedule) -> f64 {
    if (global_iter as usize) < s.warmup_iters {
        let progress = global_iter as f64 / s.warmup_iters as f64;
        s.base_lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) * progress)
    } else {
        let decays = s.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        s.base_lr * s.decay_factor.powi(decays as i32)
    }
}

/// Momentum buffers, one per parameter tensor, plus the global step count.
#[derive(Debug, Clone)]
pub struct SgdState<F> {
    pub velocity: Vec<ArrayD<F>>,
    pub global_iter: u64,
}

impl<F: Real> SgdState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            velocity: params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
            global_iter: 0,
        }
    }

    /// One SGD step: `g += wd * w; v = momentum * v + g; w -= lr * v`.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradStore<F>, lr: f64, s: &Schedule) {
        let wd = F::from_f64(s.weight_decay);
        let momentum = F::from_f64(s.momentum);
        let lr = F::from_f64(lr);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let v = &mut self.velocity[k];
            ndarray::Zip::from(&mut *v)
                .and(g)
                .and(params.value(id))
                .for_each(|v, &g, &w| *v = momentum * *v + g + wd * w);
            let w = params.value_mut(id);
            ndarray::Zip::from(w).and(&*v).for_each(|w, &v| *w = *w - lr * v);
        }
        self.global_iter += 1;
    }
}

/// Mean loss over the batch plus one optimizer step. Per-sample gradients
/// are computed in parallel but merged in batch order, so the update is
/// deterministic for a fixed batch.
pub fn train_step<F: Real>(
    model: &mut HrdnetModel<F>,
    batch: &[AnnotatedImage<F>],
    state: &mut SgdState<F>,
    epoch: usize,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let results: Vec<(LossBundle, GradStore<F>)> = batch
        .par_iter()
        .map(|sample| model.loss_on_sample(sample))
        .collect::<Result<_>>()?;
    let mut grads = GradStore::zeros_like(&model.params);
    let mut bundle = LossBundle {
        classification: 0.0,
        regression: 0.0,
        total: 0.0,
    };
    for (b, g) in &results {
        bundle.classification += b.classification;
        bundle.regression += b.regression;
        bundle.total += b.total;
        grads.merge(g);
    }
    let n = batch.len() as f64;
    bundle.classification /= n;
    bundle.regression /= n;
    bundle.total /= n;
    grads.scale(F::from_f64(1.0 / n));
    if let Some(max_norm) = model.cfg.schedule.grad_clip_norm {
        let norm = grads.global_norm();
        if norm > max_norm {
            grads.scale(F::from_f64(max_norm / norm));
        }
    }
    let lr = lr_at(state.global_iter, epoch, &model.cfg.schedule);
    if !bundle.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {} (lr {lr:.6}): cls {} reg {}",
            state.global_iter, bundle.classification, bundle.regression
        )));
    }
    state.step(&mut model.params, &grads, lr, &model.cfg.schedule);
    Ok(bundle)
}

const CKPT_MAGIC: &[u8; 8] = b"HRDNCKPT";
const CKPT_VERSION: u32 = 1;

/// Serialize model (and optionally optimizer state) to a binary checkpoint.
/// Values are stored as f64 bits, so both f32 and f64 models round-trip
/// bit-exactly.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &HrdnetModel<F>,
    state: Option<&SgdState<F>>,
    epoch: usize,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    let cfg = model.cfg.to_toml();
    w.write_u64::<LittleEndian>(cfg.len() as u64)?;
    w.write_all(cfg.as_bytes())?;
    w.write_u64::<LittleEndian>(epoch as u64)?;
    w.write_u64::<LittleEndian>(state.map_or(0, |s| s.global_iter))?;
    w.write_u64::<LittleEndian>(model.params.len() as u64)?;
    for (name, value) in model.params.iter() {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, value)?;
    }
    match state {
        Some(s) => {
            w.write_u8(1)?;
            for v in &s.velocity {
                write_tensor(&mut w, v)?;
            }
        }
        None => w.write_u8(0)?,
    }
    w.flush()?;
    Ok(())
}

fn write_tensor<F: Real, W: Write>(w: &mut W, value: &ArrayD<F>) -> Result<()> {
    w.write_u64::<LittleEndian>(value.ndim() as u64)?;
    for &d in value.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in value.iter() {
        w.write_f64::<LittleEndian>(x.to_f64())?;
    }
    Ok(())
}

fn read_tensor<F: Real, R: Read>(r: &mut R) -> Result<ArrayD<F>> {
    let ndim = r.read_u64::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(F::from_f64(r.read_f64::<LittleEndian>()?));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
        .map_err(|e| Error::Parse(format!("checkpoint tensor: {e}")))
}

/// A deserialized checkpoint: rebuilt model plus optional optimizer state.
pub struct Checkpoint<F: Real> {
    pub model: HrdnetModel<F>,
    pub state: Option<SgdState<F>>,
    pub epoch: usize,
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.read_u64::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
    let cfg = HrdnetConfig::from_toml(&cfg_text)?;
    let epoch = r.read_u64::<LittleEndian>()? as usize;
    let global_iter = r.read_u64::<LittleEndian>()?;
    let n_params = r.read_u64::<LittleEndian>()? as usize;

    let mut model: HrdnetModel<F> = build_model(&cfg)?;
    if n_params != model.params.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {n_params} tensors, model expects {}",
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Parse(format!("checkpoint tensor name: {e}")))?;
        if name != model.params.name(id) {
            return Err(Error::Parse(format!(
                "checkpoint tensor '{name}' does not match model tensor '{}'",
                model.params.name(id)
            )));
        }
        let value = read_tensor::<F, _>(&mut r)?;
        if value.shape() != model.params.value(id).shape() {
            return Err(Error::Parse(format!("tensor '{name}': shape mismatch")));
        }
        *model.params.value_mut(id) = value;
    }
    let has_state = r.read_u8()? != 0;
    let state = if has_state {
        let mut velocity = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            velocity.push(read_tensor::<F, _>(&mut r)?);
        }
        Some(SgdState {
            velocity,
            global_iter,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        state,
        epoch,
    })
}

/// One metrics-log line, appended per epoch as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub val_ap: Option<f64>,
    pub val_ap_small: Option<f64>,
}

/// Result of a (possibly resumed) training run.
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_ap: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
}

/// Run detections over a whole dataset (single-scale or multi-scale).
pub fn predict_dataset<F: Real>(
    model: &HrdnetModel<F>,
    dataset: &Dataset,
    multi_scale: bool,
) -> Result<Vec<(u64, DetectionSet)>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let image = s.data.image.mapv(|v| F::from_f64(v as f64));
            let dets = if multi_scale {
                model.predict_multi_scale(&image)?
            } else {
                model.predict(&image)?
            };
            Ok((s.id, dets))
        })
        .collect()
}

/// Evaluate a model on a dataset.
pub fn evaluate_model<F: Real>(
    model: &HrdnetModel<F>,
    dataset: &Dataset,
    multi_scale: bool,
) -> Result<EvalReport> {
    let dets = predict_dataset(model, dataset, multi_scale)?;
    Ok(evaluate_dataset(dataset, &dets))
}

fn training_pool<F: Real>(cfg: &HrdnetConfig, train: &Dataset) -> Result<Vec<AnnotatedImage<F>>> {
    let mut pool = Vec::new();
    for sample in &train.samples {
        let converted = AnnotatedImage {
            image: sample.data.image.mapv(|v| F::from_f64(v as f64)),
            boxes: sample.data.boxes.clone(),
            labels: sample.data.labels.clone(),
        };
        if cfg.train_on_patches {
            pool.extend(crop_quadrants(&converted)?);
        } else {
            pool.push(converted);
        }
    }
    Ok(pool)
}

/// Train from scratch. See [`resume`] for continuing a run.
pub fn train_loop<F: Real>(
    cfg: &HrdnetConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let model = build_model::<F>(cfg)?;
    let state = SgdState::new(&model.params);
    run_epochs(model, state, 0, train, val, out_dir)
}

/// Continue training from a checkpoint until the configured epoch count.
pub fn resume<F: Real>(
    checkpoint: &Path,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let ckpt = load_checkpoint::<F>(checkpoint)?;
    let state = ckpt
        .state
        .unwrap_or_else(|| SgdState::new(&ckpt.model.params));
    run_epochs(ckpt.model, state, ckpt.epoch, train, val, out_dir)
}

fn run_epochs<F: Real>(
    mut model: HrdnetModel<F>,
    mut state: SgdState<F>,
    start_epoch: usize,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), model.cfg.to_toml())?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let pool = training_pool::<F>(&model.cfg, train)?;
    let batch_size = model.cfg.batch_size;
    let total_epochs = model.cfg.schedule.total_epochs;
    let mut best_ap: Option<f64> = None;
    let mut best_checkpoint = None;
    let mut history = Vec::new();

    if start_epoch >= total_epochs {
        save_checkpoint(&last_path, &model, Some(&state), start_epoch)?;
    }
    for epoch in start_epoch..total_epochs {
        // deterministic per-epoch shuffle independent of prior epochs, so a
        // resumed run sees the same batches
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut last_lr = lr_at(state.global_iter, epoch, &model.cfg.schedule);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<AnnotatedImage<F>> =
                chunk.iter().map(|&i| pool[i].clone()).collect();
            last_lr = lr_at(state.global_iter, epoch, &model.cfg.schedule);
            let bundle = train_step(&mut model, &batch, &mut state, epoch)?;
            sums.0 += bundle.total;
            sums.1 += bundle.classification;
            sums.2 += bundle.regression;
            batches += 1;
        }
        let report = match val {
            Some(v) if !v.is_empty() => Some(evaluate_model(&model, v, false)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr: last_lr,
            loss_total: sums.0 / batches.max(1) as f64,
            loss_cls: sums.1 / batches.max(1) as f64,
            loss_reg: sums.2 / batches.max(1) as f64,
            val_ap: report.as_ref().and_then(|r| r.ap),
            val_ap_small: report.as_ref().and_then(|r| r.ap_small),
        };
        writeln!(
            metrics,
            "{}",
            serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?
        )?;
        save_checkpoint(&last_path, &model, Some(&state), epoch + 1)?;
        if let Some(ap) = record.val_ap {
            if best_ap.map_or(true, |b| ap > b) {
                best_ap = Some(ap);
                save_checkpoint(&best_path, &model, None, epoch + 1)?;
                best_checkpoint = Some(best_path.clone());
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        epochs_run: total_epochs.saturating_sub(start_epoch),
        best_ap,
        last_checkpoint: last_path,
        best_checkpoint,
        history,
    })
}
