//! Training loop and top-1 evaluation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{DatasetKind, RunConfig, Schedule};
use crate::data::{
    augment_basic, load_cifar_binary_exact, make_synthetic, select_classes, subset, ChannelStats,
    CifarFormat, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor};
use crate::vit::{
    argmax_rows, load_checkpoint, predict_logits, save_checkpoint, vit_forward, ModelState,
    ViTConfig,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.csv";
pub const S_TRAJECTORY_FILE: &str = "s_trajectory.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";

/// Offset between the model seed and the shuffle/augmentation seed.
const ORDER_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr1: f64,
    pub lr2: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ViTConfig,
    pub optimizer: AdamWConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// One row per epoch, one column per layer; empty unless `s` is learnable.
    pub s_trajectory: Vec<Vec<f64>>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub normalization: Option<ChannelStats>,
    pub state: ModelState,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_acc)
    }

    pub fn final_train_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_acc)
    }
}

fn cifar_file(
    dir: &Path,
    name: &str,
    format: &CifarFormat,
    split: Split,
    records: usize,
) -> Result<Dataset> {
    load_cifar_binary_exact(&dir.join(name), format, split, records)
}

/// Loads the configured train and validation splits, applies the class
/// subset, then normalizes both with the configured constants or, when
/// absent, the training split's own statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let spec = &cfg.data;
    let (mut train, mut val) = match spec.kind {
        DatasetKind::Synthetic => {
            let size = spec.synthetic_image_size;
            let train = make_synthetic(
                spec.synthetic_train,
                spec.synthetic_classes,
                size,
                spec.data_seed,
            )?;
            let val = make_synthetic(
                spec.synthetic_val,
                spec.synthetic_classes,
                size,
                spec.data_seed.wrapping_add(1),
            )?;
            (train, val.with_split(Split::Test))
        }
        DatasetKind::Cifar10 => {
            let dir = spec.resolve_dir()?;
            let f = CifarFormat::CIFAR10;
            let mut train = cifar_file(&dir, "data_batch_1.bin", &f, Split::Train, 10_000)?;
            for k in 2..=5 {
                train.extend(cifar_file(
                    &dir,
                    &format!("data_batch_{k}.bin"),
                    &f,
                    Split::Train,
                    10_000,
                )?)?;
            }
            (
                train,
                cifar_file(&dir, "test_batch.bin", &f, Split::Test, 10_000)?,
            )
        }
        DatasetKind::Cifar100 => {
            let dir = spec.resolve_dir()?;
            let f = CifarFormat::CIFAR100;
            (
                cifar_file(&dir, "train.bin", &f, Split::Train, 50_000)?,
                cifar_file(&dir, "test.bin", &f, Split::Test, 10_000)?,
            )
        }
        DatasetKind::TinyImageNet => {
            let dir = spec.resolve_dir()?;
            let f = CifarFormat::TINY_IMAGENET;
            (
                cifar_file(&dir, "train.bin", &f, Split::Train, 100_000)?,
                cifar_file(&dir, "val.bin", &f, Split::Test, 10_000)?,
            )
        }
    };
    if let Some(classes) = &spec.subset_classes {
        train = subset(&train, classes, spec.subset_per_class, spec.data_seed)?;
        val = select_classes(&val, classes)?;
    }
    let stats = cfg
        .normalization
        .clone()
        .unwrap_or_else(|| train.channel_stats());
    train.normalize_with(&stats)?;
    val.normalize_with(&stats)?;
    Ok((train, val))
}

/// Loads the data, trains, and writes outputs.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (train_set, val_set) = load_data(cfg)?;
    train_on(cfg, &train_set, &val_set)
}

fn model_for(cfg: &RunConfig, data: &Dataset) -> Result<ViTConfig> {
    cfg.model_config(data.channels(), data.image_size(), data.class_count())
}

/// Trains on already-loaded data. Outputs are written only when
/// `cfg.out_dir` is set.
pub fn train_on(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let model = model_for(cfg, train_set)?;
    let mut state = ModelState::init(&model, cfg.seed)?;
    let opt_cfg = cfg.optimizer();
    let mut opt = AdamW::new(&state, opt_cfg.clone(), cfg.sata && cfg.clamp_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ORDER_SEED_OFFSET));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let learnable = model.learnable_scale();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    let mut s_trajectory = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let factor = match cfg.schedule {
                Schedule::Constant => 1.0,
                Schedule::Cosine => {
                    0.5 * (1.0 + (PI * opt.steps() as f64 / total_steps as f64).cos())
                }
            };
            opt.set_lr_factor(factor);
            let (images, labels) = if cfg.augment {
                augmented_batch(train_set, chunk, &mut rng)?
            } else {
                train_set.batch(chunk)?
            };
            let (loss, hits) = train_step(&mut state, &model, &mut opt, &images, &labels)
                .inspect_err(|e| {
                    log::error!("epoch {epoch}, step {}: {e}", opt.steps() + 1);
                })?;
            step_losses.push(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let val_acc = evaluate_state(&state, &model, val_set, cfg.batch_size)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            lr1: opt_cfg.lr1,
            lr2: opt_cfg.lr2,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {:.4}",
            metrics.train_loss,
            metrics.train_acc,
            metrics.val_acc
        );
        epochs.push(metrics);
        if learnable {
            s_trajectory.push(state.sata_scales());
        }
    }

    let mut report = TrainReport {
        model,
        optimizer: opt_cfg,
        epochs,
        step_losses,
        s_trajectory,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
        normalization: train_set.normalization().cloned(),
        state,
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(cfg, &mut report, dir)?;
    }
    Ok(report)
}

fn augmented_batch(
    data: &Dataset,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, s) = (data.channels(), data.image_size());
    let mut pixels = Vec::with_capacity(indices.len() * data.image_len());
    for &i in indices {
        pixels.extend(augment_basic(data.image(i), c, s, rng));
    }
    let labels = indices.iter().map(|&i| data.labels()[i]).collect();
    Ok((Tensor::new(vec![indices.len(), c, s, s], pixels)?, labels))
}

/// One forward/backward/update; returns the batch loss and the number of
/// correct predictions.
pub fn train_step(
    state: &mut ModelState,
    model: &ViTConfig,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let params = state.register(&mut tape, true);
    let logits = vit_forward(&mut tape, images, &params, model, None)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let correct = count_correct(tape.value(logits), labels);
    let grads: Vec<Tensor> = params
        .named()
        .into_iter()
        .map(|(name, &v)| {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::NonFiniteGradient { param: name })
            }
        })
        .collect::<Result<_>>()?;
    opt.step(state, &grads)?;
    Ok((tape.value(loss).item()?, correct))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Top-1 accuracy in `[0, 1]` of an in-memory model, without augmentation.
pub fn evaluate_state(
    state: &ModelState,
    model: &ViTConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    check_geometry(model, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (images, labels) = data.batch(chunk)?;
            Ok(count_correct(
                &predict_logits(state, model, &images)?,
                &labels,
            ))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn check_geometry(model: &ViTConfig, data: &Dataset) -> Result<()> {
    if model.channels != data.channels()
        || model.image_size != data.image_size()
        || model.num_classes < data.class_count()
    {
        return Err(Error::Checkpoint(format!(
            "model expects {}×{}×{} images and {} classes, data has {}×{}×{} and {}",
            model.channels,
            model.image_size,
            model.image_size,
            model.num_classes,
            data.channels(),
            data.image_size(),
            data.image_size(),
            data.class_count()
        )));
    }
    Ok(())
}

/// Top-1 accuracy of a saved checkpoint on a (normalized) dataset.
pub fn evaluate(checkpoint: &Path, data: &Dataset) -> Result<f64> {
    let (model, state) = load_checkpoint(checkpoint)?;
    evaluate_state(&state, &model, data, 128)
}

fn write_outputs(cfg: &RunConfig, report: &mut TrainReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &report.model, &report.state)?;

    let mut w = csv::Writer::from_path(dir.join(REPORT_FILE)).map_err(csv_err)?;
    w.write_record([
        "epoch",
        "train_loss",
        "train_acc",
        "val_acc",
        "lr1",
        "lr2",
        "wall_time_secs",
    ])
    .map_err(csv_err)?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_acc.to_string(),
            e.val_acc.to_string(),
            e.lr1.to_string(),
            e.lr2.to_string(),
            e.wall_time_secs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(S_TRAJECTORY_FILE)).map_err(csv_err)?;
    let width = if report.model.learnable_scale() {
        report.model.depth
    } else {
        0
    };
    let header =
        std::iter::once("epoch".to_string()).chain((0..width).map(|l| format!("layer{l}")));
    w.write_record(header).map_err(csv_err)?;
    for (k, row) in report.s_trajectory.iter().enumerate() {
        let fields = std::iter::once((k + 1).to_string()).chain(row.iter().map(f64::to_string));
        w.write_record(fields).map_err(csv_err)?;
    }
    w.flush()?;

    let mut resolved = cfg.clone();
    resolved.normalization = report.normalization.clone();
    resolved.checkpoint = Some(checkpoint.clone());
    fs::write(dir.join(RUN_CONFIG_FILE), resolved.to_config_string())?;
    report.checkpoint = Some(checkpoint);
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}
