//! Deterministic training loop for the SoftMoE decoder.
//!
//! Everything random is keyed by (seed, purpose): epoch `e` shuffles the
//! sample order with RNG stream `e`, and the internal validation set comes
//! from a seed drawn off a reserved stream. A run is therefore a pure
//! function of (setup, dataset), an interrupted run continued from its last
//! checkpoint replays the remaining epochs bit-exactly, and rerunning a
//! finished training produces byte-identical artifacts. Wall-clock timing is
//! surfaced only through the progress callback, never written to disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Checkpoint, Graph, ModelParams, OptimConfig};
use crate::error::{Error, Result};
use crate::lattice::{PauliError, Syndrome};
use crate::model::{SmoeConfig, SmoeModel};
use crate::noise::{dataset_to_bytes, generate_dataset, record_rng, Dataset};
use crate::wire::sha256_hex;

/// RNG stream reserved for deriving the validation seed; epoch shuffles use
/// streams 0..epochs, far below this.
const VAL_STREAM: u64 = u64::MAX;

/// Syndromes per decode call during validation.
const VAL_CHUNK: usize = 512;

pub const LAST_CHECKPOINT: &str = "checkpoint_last.tsck";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.tsck";
pub const LOG_FILE: &str = "training_log.csv";

const LOG_HEADER: &str = "epoch,ber,ler,os,overall,val_ler,lr";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSetup {
    pub model: SmoeConfig,
    pub epochs: u32,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Seeds parameter init, epoch shuffles, and the validation set.
    pub seed: u64,
    /// Validation samples generated per noise rate in the dataset.
    pub val_per_rate: u64,
}

impl TrainSetup {
    pub fn new(model: SmoeConfig, seed: u64) -> Self {
        TrainSetup {
            model,
            epochs: 30,
            batch: 128,
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed,
            val_per_rate: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("training needs at least one epoch"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite())
            || self.lr_min <= 0.0
            || self.lr_max < self.lr_min
        {
            return Err(Error::config(format!(
                "learning-rate range [{}, {}] must satisfy 0 < min <= max",
                self.lr_min, self.lr_max
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::config(format!("clip norm {} must be > 0", self.clip_norm)));
        }
        if self.val_per_rate == 0 {
            return Err(Error::config("validation needs at least one sample per rate"));
        }
        Ok(())
    }
}

/// What a checkpoint's config field holds: the full training setup plus the
/// digest of the dataset it was trained on, so resuming against different
/// data is refused instead of silently diverging.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    pub setup: TrainSetup,
    pub dataset_sha256: String,
}

/// One completed epoch: sample-weighted mean of each loss term over the
/// epoch's batches, the validation logical error rate afterwards, and the
/// last learning rate used. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub ber: f64,
    pub ler: f64,
    pub os: f64,
    pub overall: f64,
    pub val_ler: f64,
    pub lr: f64,
}

impl EpochLog {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.ber, self.ler, self.os, self.overall, self.val_ler, self.lr
        )
    }
}

pub struct TrainOutcome {
    /// Epochs completed by this invocation (a resume only logs its own).
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose validation LER is the running best; ties keep
    /// the earlier epoch.
    pub best_epoch: u32,
    pub best_val_ler: f64,
    /// Model restored from the best-validation checkpoint.
    pub model: SmoeModel,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_file: PathBuf,
}

/// Trains the full schedule from scratch. `progress` sees each epoch's log
/// row and its wall-clock seconds.
pub fn train(
    setup: &TrainSetup,
    dataset: &Dataset,
    out_dir: &Path,
    progress: impl FnMut(&EpochLog, f64),
) -> Result<TrainOutcome> {
    train_until(setup, dataset, out_dir, setup.epochs, progress)
}

/// Runs only the first `epoch_cap` epochs of the schedule, checkpointing as
/// usual, so long trainings can be split across sessions; finish later with
/// [`resume`]. The learning-rate schedule still spans the full setup.
pub fn train_until(
    setup: &TrainSetup,
    dataset: &Dataset,
    out_dir: &Path,
    epoch_cap: u32,
    progress: impl FnMut(&EpochLog, f64),
) -> Result<TrainOutcome> {
    let record =
        TrainRecord { setup: setup.clone(), dataset_sha256: dataset_hash(dataset) };
    run(record, dataset, out_dir, None, epoch_cap, progress)
}

/// Continues an interrupted training from its last checkpoint, replaying the
/// remaining epochs exactly as the uninterrupted run would have.
pub fn resume(
    checkpoint: &Path,
    dataset: &Dataset,
    out_dir: &Path,
    progress: impl FnMut(&EpochLog, f64),
) -> Result<TrainOutcome> {
    let ck = Checkpoint::read(checkpoint)?;
    let record: TrainRecord = serde_json::from_str(&ck.config_json).map_err(|e| {
        Error::config(format!("{}: checkpoint config is not a training record: {e}", checkpoint.display()))
    })?;
    if record.dataset_sha256 != dataset_hash(dataset) {
        return Err(Error::config(format!(
            "{}: checkpoint was trained on a different dataset (recorded {}, given {})",
            checkpoint.display(),
            record.dataset_sha256,
            dataset_hash(dataset)
        )));
    }
    let cap = record.setup.epochs;
    run(record, dataset, out_dir, Some(ck), cap, progress)
}

fn dataset_hash(dataset: &Dataset) -> String {
    sha256_hex(&dataset_to_bytes(dataset))
}

fn validation_ler(model: &SmoeModel, val: &Dataset) -> Result<f64> {
    let code = model.code();
    let mut failures = 0u64;
    for chunk in val.samples.chunks(VAL_CHUNK) {
        let syndromes: Vec<Syndrome> = chunk.iter().map(|s| s.syndrome.clone()).collect();
        for (verdict, sample) in model.decode_syndromes(&syndromes)?.into_iter().zip(chunk) {
            let clean = match verdict {
                Ok(mut residual) => {
                    residual.xor_assign(&sample.error);
                    code.syndrome_of(&residual).is_trivial()
                        && code.logical_effect(&residual).is_zero()
                }
                Err(_) => false,
            };
            if !clean {
                failures += 1;
            }
        }
    }
    Ok(failures as f64 / val.samples.len() as f64)
}

fn run(
    record: TrainRecord,
    dataset: &Dataset,
    out_dir: &Path,
    resume_from: Option<Checkpoint>,
    epoch_cap: u32,
    mut progress: impl FnMut(&EpochLog, f64),
) -> Result<TrainOutcome> {
    let setup = &record.setup;
    setup.validate()?;
    if dataset.l != setup.model.l {
        return Err(Error::config(format!(
            "dataset is for L={}, the model for L={}",
            dataset.l, setup.model.l
        )));
    }
    if epoch_cap > setup.epochs {
        return Err(Error::config(format!(
            "epoch cap {epoch_cap} exceeds the schedule of {} epochs",
            setup.epochs
        )));
    }
    let record_json = serde_json::to_string(&record)
        .map_err(|e| Error::config(format!("encoding training record: {e}")))?;

    let steps_per_epoch = dataset.samples.len().div_ceil(setup.batch) as u64;
    let total_updates = steps_per_epoch * setup.epochs as u64;
    let optim_cfg = OptimConfig {
        lr_max: setup.lr_max,
        lr_min: setup.lr_min,
        total_steps: total_updates.saturating_sub(1),
        weight_decay: setup.weight_decay,
        clip_norm: Some(setup.clip_norm),
        ..OptimConfig::default()
    };

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0u32;
    let start_epoch;
    let mut model;
    let mut opt;
    match resume_from {
        None => {
            model = SmoeModel::new(setup.model.clone(), setup.seed)?;
            opt = AdamW::new(model.params(), optim_cfg);
            start_epoch = 0;
        }
        Some(ck) => {
            if ck.epoch >= setup.epochs {
                return Err(Error::config(format!(
                    "checkpoint has already completed all {} epochs",
                    setup.epochs
                )));
            }
            if ck.global_step != ck.epoch as u64 * steps_per_epoch {
                return Err(Error::config(format!(
                    "checkpoint step count {} does not match {} completed epochs of {} steps",
                    ck.global_step, ck.epoch, steps_per_epoch
                )));
            }
            let state = ck
                .opt
                .ok_or_else(|| Error::config("checkpoint lacks optimizer state; cannot resume"))?;
            model = SmoeModel::from_params(setup.model.clone(), ck.params)?;
            opt = AdamW::new(model.params(), optim_cfg);
            opt.restore(state, model.params())?;
            start_epoch = ck.epoch;
            best_val = ck.best_val_loss;
        }
    }

    let val_seed = record_rng(setup.seed, VAL_STREAM).random::<u64>();
    let val = generate_dataset(model.code(), &dataset.rates, setup.val_per_rate, val_seed)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}: {e}", out_dir.display())))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(LOG_FILE);
    let mut log_text = if start_epoch == 0 {
        format!("# config: {record_json}\n# dataset_sha256: {}\n{LOG_HEADER}\n", record.dataset_sha256)
    } else {
        std::fs::read_to_string(&log_path)
            .map_err(|e| Error::io(format!("reading {}: {e}", log_path.display())))?
    };

    let mut best_params: Option<ModelParams> = None;
    let mut logs = Vec::new();
    for epoch in start_epoch..epoch_cap {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        order.shuffle(&mut record_rng(setup.seed, epoch as u64));

        let mut sums = [0.0f64; 4];
        let mut last_lr = 0.0;
        for (bi, batch) in order.chunks(setup.batch).enumerate() {
            let errors: Vec<PauliError> =
                batch.iter().map(|&i| dataset.samples[i].error.clone()).collect();
            let mut g = Graph::new();
            let (losses, param_vars) =
                model.loss_parts_batch_with(&mut g, model.params(), &errors)?;
            let vals = losses.values(&g);
            if ![vals.ber, vals.ler, vals.os, vals.overall].iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {}, batch {bi}: ber={} ler={} os={} overall={}",
                    epoch + 1,
                    vals.ber,
                    vals.ler,
                    vals.os,
                    vals.overall
                )));
            }
            g.backward(losses.overall)?;
            let grads: Vec<Array2<f64>> = param_vars
                .iter()
                .map(|&v| {
                    g.grad(v).cloned().unwrap_or_else(|| {
                        let (r, c) = g.shape(v);
                        Array2::zeros((r, c))
                    })
                })
                .collect();
            last_lr = opt.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::numerical(format!("epoch {}, batch {bi}: {msg}", epoch + 1))
                }
                other => other,
            })?;
            let w = errors.len() as f64;
            for (slot, term) in sums.iter_mut().zip([vals.ber, vals.ler, vals.os, vals.overall]) {
                *slot += term * w;
            }
        }

        let n = dataset.samples.len() as f64;
        let val_ler = validation_ler(&model, &val)?;
        let row = EpochLog {
            epoch: epoch + 1,
            ber: sums[0] / n,
            ler: sums[1] / n,
            os: sums[2] / n,
            overall: sums[3] / n,
            val_ler,
            lr: last_lr,
        };

        let improved = val_ler < best_val;
        if improved {
            best_val = val_ler;
            best_epoch = epoch + 1;
            best_params = Some(model.params().clone());
        }
        Checkpoint {
            config_json: record_json.clone(),
            epoch: epoch + 1,
            global_step: opt.steps_taken(),
            master_seed: setup.seed,
            best_val_loss: best_val,
            params: model.params().clone(),
            opt: Some(opt.state()),
        }
        .write(&last_path)?;
        if improved {
            Checkpoint {
                config_json: record_json.clone(),
                epoch: epoch + 1,
                global_step: opt.steps_taken(),
                master_seed: setup.seed,
                best_val_loss: best_val,
                params: model.params().clone(),
                opt: None,
            }
            .write(&best_path)?;
        }
        log_text.push_str(&row.csv_line());
        log_text.push('\n');
        std::fs::write(&log_path, &log_text)
            .map_err(|e| Error::io(format!("writing {}: {e}", log_path.display())))?;

        progress(&row, started.elapsed().as_secs_f64());
        logs.push(row);
    }

    let best_model = match best_params {
        Some(p) => SmoeModel::from_params(setup.model.clone(), p)?,
        None => {
            let best_ck = Checkpoint::read(&best_path).map_err(|e| {
                Error::io(format!(
                    "no epoch of this run improved validation and the prior best checkpoint cannot be read: {e}"
                ))
            })?;
            best_epoch = best_ck.epoch;
            SmoeModel::from_params(setup.model.clone(), best_ck.params)?
        }
    };
    Ok(TrainOutcome {
        log: logs,
        best_epoch,
        best_val_ler: best_val,
        model: best_model,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log_file: log_path,
    })
}
