//! The training loop, evaluation, and metrics output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use super::config::{DatasetConfig, TrainConfig, DATA_DIR_ENV};
use super::data::{
    augment_batch, load_cifar10, Dataset, Split, Standardization, SyntheticSpec, CROP_PAD,
};
use super::loss::softmax_cross_entropy;
use super::model::Model;
use super::rng::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::monitor::{fmt_f64, probe, CondensationTrace, GateRecord};
use crate::tensor::Tensor4;

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "lr",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    /// Zero-based index of the finished epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Train and test sets ready for the loop.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Constants applied to both splits, when the dataset uses them.
    pub standardization: Option<Standardization>,
    pub augment: bool,
    /// Directory the data was read from.
    pub source: Option<PathBuf>,
}

/// Resolves the CIFAR-10 directory from the config or the environment.
pub fn resolve_data_dir(path: &Option<PathBuf>) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::config(
                    "dataset.path",
                    format!("not set, and {DATA_DIR_ENV} is not set either"),
                )
            }),
    }
}

/// Builds or loads the datasets described by `cfg`, deterministically in
/// `cfg.seed`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            train_size,
            test_size,
            dims,
            offset_scale,
            noise_scale,
            margin,
        } => {
            let spec = SyntheticSpec {
                dims: *dims,
                offset_scale: *offset_scale,
                noise_scale: *noise_scale,
                margin: *margin,
                direction_seed: rng.random(),
            };
            let train = spec.generate(*train_size, rng.random())?;
            let test = spec.generate(*test_size, rng.random())?;
            Ok(PreparedData {
                train,
                test,
                standardization: None,
                augment: false,
                source: None,
            })
        }
        DatasetConfig::Cifar10 {
            path,
            train_subset,
            test_subset,
            augment,
        } => {
            let dir = resolve_data_dir(path)?;
            let mut train = load_cifar10(&dir, Split::Train, *train_subset, rng.random())?;
            let mut test = load_cifar10(&dir, Split::Test, *test_subset, rng.random())?;
            let standardization = Standardization::fit(&train.images)?;
            standardization.apply(&mut train.images)?;
            standardization.apply(&mut test.images)?;
            Ok(PreparedData {
                train,
                test,
                standardization: Some(standardization),
                augment: *augment,
                source: Some(dir),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The loss or a gradient stopped being finite; metrics hold the epochs
    /// finished before it.
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    /// One trace per normalization layer; epoch 0 is the untrained model,
    /// epoch `k` the model after `k` epochs.
    pub traces: Vec<CondensationTrace>,
    /// Cumulative gate counters per layer with running statistics, same
    /// epoch numbering as the traces.
    pub gates: Vec<GateRecord>,
    pub model: Model,
    pub status: RunStatus,
    /// Training-set indices of the probe batch.
    pub probe_indices: Vec<usize>,
}

impl TrainOutcome {
    /// `Err(Error::Divergence)` when the run diverged.
    pub fn check(&self) -> Result<()> {
        match self.status {
            RunStatus::Completed => Ok(()),
            RunStatus::Diverged { epoch, step, loss } => {
                Err(Error::Divergence { epoch, step, loss })
            }
        }
    }
}

/// Mean cross-entropy and top-1 accuracy with stored statistics. Never
/// changes the model.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Dimension("evaluation on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.select(chunk)?;
        let logits = model.infer(&batch.images)?;
        let out = softmax_cross_entropy(logits.data(), &batch.labels, model.classes())?;
        loss += out.loss * chunk.len() as f64;
        correct += out.correct;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Training-set indices of the fixed probe batch for `seed`.
pub fn select_probe_indices(n: usize, probe_size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Probe));
    idx.truncate(probe_size.min(n));
    idx
}

/// Probes the input of every normalization layer on `probe_batch`.
pub fn probe_model(
    model: &Model,
    probe_batch: &Tensor4,
    epoch: usize,
    keep_matrices: bool,
    traces: &mut [CondensationTrace],
) -> Result<()> {
    let (_, taps) = model.infer_with_taps(probe_batch, true)?;
    for ((tap, trace), (_, layer)) in taps.iter().zip(traces.iter_mut()).zip(model.norm_layers()) {
        probe(tap, epoch, layer.state(), keep_matrices, trace)?;
    }
    Ok(())
}

fn gate_records(model: &Model, epoch: usize) -> Vec<GateRecord> {
    model
        .norm_layers()
        .into_iter()
        .filter_map(|(id, layer)| {
            layer.state().map(|s| GateRecord {
                epoch,
                layer: id,
                steps: s.step_count,
                gate_open_steps: s.gate_open_steps,
            })
        })
        .collect()
}

enum StepOutcome {
    Ok { loss: f64, correct: usize },
    Diverged { loss: f64 },
}

fn train_step(
    model: &mut Model,
    cfg: &TrainConfig,
    images: &Tensor4,
    labels: &[usize],
    lr: f64,
) -> Result<StepOutcome> {
    let logits = model.forward_train(images)?;
    let out = softmax_cross_entropy(logits.data(), labels, model.classes())?;
    if !out.loss.is_finite() {
        return Ok(StepOutcome::Diverged { loss: out.loss });
    }
    model.backward(&Tensor4::new(logits.dims(), out.d_logits)?)?;
    model.sgd_step(lr, cfg.momentum, cfg.weight_decay, cfg.decay_norm_params)?;
    Ok(StepOutcome::Ok {
        loss: out.loss,
        correct: out.correct,
    })
}

/// Runs `cfg.epochs` epochs of minibatch SGD on `data`.
///
/// Divergence is not an error here: the outcome carries
/// [`RunStatus::Diverged`] and the metrics of completed epochs. Other
/// failures are returned as errors.
pub fn train(cfg: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let start = Instant::now();
    let sample_dims = data.train.sample_dims();
    let mut model = Model::build(
        &cfg.model,
        sample_dims,
        data.train.classes,
        &cfg.norm,
        &mut stream_rng(cfg.seed, Stream::Init),
    )?;
    let mut data_rng = stream_rng(cfg.seed, Stream::Data);
    let mut augment_rng = stream_rng(cfg.seed, Stream::Augment);

    let probe_indices = select_probe_indices(data.train.len(), cfg.probe_size, cfg.seed);
    let probe_batch = data.train.images.select(&probe_indices)?;

    let mut traces: Vec<CondensationTrace> = model
        .norm_layers()
        .into_iter()
        .map(|(id, _)| CondensationTrace::new(id))
        .collect();
    probe_model(
        &model,
        &probe_batch,
        0,
        cfg.keep_probe_matrices,
        &mut traces,
    )?;
    let mut gates = gate_records(&model, 0);

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut status = RunStatus::Completed;
    let mut order: Vec<usize> = (0..n).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0, cfg.schedule.lr0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cfg.schedule.lr_at(epoch, step, steps_per_epoch);
            let batch = data.train.select(chunk)?;
            let images = if data.augment {
                augment_batch(&batch.images, CROP_PAD, &mut augment_rng)
            } else {
                batch.images
            };
            let outcome = match train_step(&mut model, cfg, &images, &batch.labels, lr) {
                Ok(o) => o,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("epoch {epoch} step {step}: {msg}");
                    StepOutcome::Diverged { loss: f64::NAN }
                }
                Err(e) => return Err(e),
            };
            match outcome {
                StepOutcome::Ok { loss, correct: c } => {
                    loss_sum += loss * chunk.len() as f64;
                    correct += c;
                }
                StepOutcome::Diverged { loss } => {
                    status = RunStatus::Diverged { epoch, step, loss };
                    break 'epochs;
                }
            }
        }
        let (test_loss, test_acc) = evaluate(&model, &data.test, cfg.batch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_loss,
            test_acc,
            lr,
            wall_seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}, lr {:.5}",
            row.train_loss,
            row.train_acc,
            row.test_loss,
            row.test_acc,
            row.lr
        );
        metrics.push(row);
        probe_model(
            &model,
            &probe_batch,
            epoch + 1,
            cfg.keep_probe_matrices,
            &mut traces,
        )?;
        gates.extend(gate_records(&model, epoch + 1));
    }

    Ok(TrainOutcome {
        metrics,
        traces,
        gates,
        model,
        status,
        probe_indices,
    })
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Format {
            offset: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.test_loss),
            fmt_f64(r.test_acc),
            fmt_f64(r.lr),
            fmt_f64(r.wall_seconds),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
