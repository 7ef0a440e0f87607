//! Optimization: Adam under a step learning-rate schedule, the epoch loop,
//! evaluation and checkpoints.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use crate::autodiff::{BatchStats, Tape, BN_MOMENTUM};
use crate::dataio::{batch_iter, ordered_batches, Batch, DatasetIndex};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelConfig, ModelParams};
use crate::objective::{binarize, macro_f1, weighted_bce_on_tape, ClassWeights, MetricReport, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;

/// Mixed into the seed for the shuffle stream so it does not replay the
/// stream that initialized the weights.
const SHUFFLE_KEY: u64 = 0x5348_5546_464c_4531;

/// File names written into [`TrainConfig::checkpoint_dir`].
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Learning rate from `lr_switch_epoch` on.
    pub post_lr: f64,
    pub lr_switch_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Where to write a checkpoint and the epoch log after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub threshold: f64,
    /// Recompute every batch-norm running statistic over the whole training
    /// set at the end of each epoch (see [`refresh_batch_norm`]).
    pub bn_refresh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            post_lr: 0.0001,
            lr_switch_epoch: 5,
            epochs: 20,
            batch_size: 256,
            seed: 0,
            deterministic: false,
            checkpoint_dir: None,
            eval_every: 1,
            threshold: DEFAULT_THRESHOLD,
            bn_refresh: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.initial_lr) || !positive(self.post_lr) {
            return Err(Error::Config(format!(
                "learning rates must be positive (got {} and {})",
                self.initial_lr, self.post_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} is outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: `initial_lr` before
/// `lr_switch_epoch`, `post_lr` from then on.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_switch_epoch {
        config.initial_lr
    } else {
        config.post_lr
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    /// Validation macro F1, on epochs that were evaluated.
    pub macro_f1: Option<f64>,
}

/// The log as CSV with a header row. Floats use the shortest representation
/// that round-trips, so equal logs give equal text.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss,macro_f1\n");
    for row in log {
        let f1 = row.macro_f1.map(|f| f.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", row.epoch, row.lr, row.loss, f1).expect("writing to a String");
    }
    out
}

pub struct Trainer {
    model_config: ModelConfig,
    config: TrainConfig,
    au_names: Vec<String>,
    params: ModelParams<f32>,
    optimizer: OptimizerState<f32>,
    weights: ClassWeights,
    epoch: usize,
    log: Vec<EpochLog>,
}

impl Trainer {
    /// Fresh weights from `config.seed`; class weights from `train`.
    pub fn new(model_config: ModelConfig, config: TrainConfig, train: &DatasetIndex) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        let params = ModelParams::init(&model_config, config.seed)?;
        let optimizer = OptimizerState::new(params.trainable(), AdamConfig::default());
        Self::assemble(model_config, config, train, params, optimizer, 0, Vec::new())
    }

    /// Continues from a checkpoint. `config` may differ from the stored one
    /// only in how far to train and where to write.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, train: &DatasetIndex) -> Result<Self> {
        config.validate()?;
        let stored = &checkpoint.train_config;
        let comparable = TrainConfig {
            epochs: stored.epochs,
            checkpoint_dir: stored.checkpoint_dir.clone(),
            ..config.clone()
        };
        if comparable != *stored {
            return Err(Error::Config(
                "resume configuration differs from the checkpoint's in more than epochs and output".into(),
            ));
        }
        Self::assemble(
            checkpoint.model_config,
            config,
            train,
            checkpoint.params,
            checkpoint.optimizer,
            checkpoint.epoch,
            checkpoint.log,
        )
    }

    fn assemble(
        model_config: ModelConfig,
        config: TrainConfig,
        train: &DatasetIndex,
        params: ModelParams<f32>,
        optimizer: OptimizerState<f32>,
        epoch: usize,
        log: Vec<EpochLog>,
    ) -> Result<Self> {
        if train.au_names().len() != model_config.num_aus {
            return Err(Error::Config(format!(
                "dataset has {} AUs, model predicts {}",
                train.au_names().len(),
                model_config.num_aus
            )));
        }
        let weights = train.class_weights()?;
        Ok(Trainer {
            model_config,
            config,
            au_names: train.au_names().to_vec(),
            params,
            optimizer,
            weights,
            epoch,
            log,
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.weights
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.optimizer
    }

    /// Forward, weighted BCE, backward, Adam, running-statistics update.
    /// Returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let images = tape.constant(batch.images.clone());
        let out = model::forward(&mut tape, images, &self.params, &vars, &self.model_config, Mode::Train)?;
        let loss_var = weighted_bce_on_tape(&mut tape, out.predictions, &batch.labels, &self.weights)?;
        let loss = f64::from(tape.item(loss_var)?);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: 0,
                lr,
            });
        }
        let grads = tape.backward(loss_var)?;
        let zeros: Vec<Vec<f32>> = self.params.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        let grad_slices: Vec<&[f32]> = vars
            .as_slice()
            .iter()
            .zip(&zeros)
            .map(|(&v, z)| grads.get(v).unwrap_or(z))
            .collect();
        adam_step(&mut self.params.trainable_mut(), &grad_slices, &mut self.optimizer, lr)?;
        self.params.update_running_stats(&out.stats, BN_MOMENTUM)?;
        Ok(loss)
    }

    /// Trains one epoch over shuffled batches of `train`, then validates if
    /// this epoch is due.
    pub fn run_epoch(&mut self, train: &DatasetIndex, val: Option<&DatasetIndex>) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let batches = batch_iter(
            train,
            self.config.batch_size,
            self.model_config.input_size,
            self.config.seed ^ SHUFFLE_KEY,
            epoch as u64,
        )?;
        let mut weighted_loss = 0.0;
        let mut samples = 0usize;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let loss = self.train_step(&batch, lr).map_err(|e| match e {
                Error::NonFiniteLoss { epoch, lr, .. } => Error::NonFiniteLoss { epoch, batch: b, lr },
                other => other,
            })?;
            log::debug!("epoch {epoch} batch {b}: loss {loss:.6}");
            weighted_loss += loss * batch.len() as f64;
            samples += batch.len();
        }
        if self.config.bn_refresh {
            refresh_batch_norm(&mut self.params, &self.model_config, train, self.config.batch_size)?;
        }

        let due = self.config.eval_every > 0 && (epoch + 1).is_multiple_of(self.config.eval_every);
        let macro_f1 = match val {
            Some(val) if due => Some(self.evaluate(val)?.macro_f1),
            _ => None,
        };
        let row = EpochLog {
            epoch,
            lr,
            loss: weighted_loss / samples as f64,
            macro_f1,
        };
        log::info!(
            "epoch {epoch}: lr {lr}, loss {:.6}{}",
            row.loss,
            macro_f1.map(|f| format!(", val macro F1 {f:.4}")).unwrap_or_default()
        );
        self.epoch += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs the remaining epochs up to `config.epochs`, checkpointing after
    /// each one when a checkpoint directory is set.
    pub fn fit(&mut self, train: &DatasetIndex, val: Option<&DatasetIndex>) -> Result<()> {
        if let Some(dir) = &self.config.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(train, val)?;
            self.write_outputs()?;
        }
        Ok(())
    }

    fn write_outputs(&self) -> Result<()> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(());
        };
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.checkpoint())?;
        let path = dir.join(LOG_FILE);
        fs::write(&path, log_csv(&self.log)).map_err(|e| Error::io(&path, e))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model_config.clone(),
            train_config: self.config.clone(),
            au_names: self.au_names.clone(),
            epoch: self.epoch,
            log: self.log.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn evaluate(&self, index: &DatasetIndex) -> Result<MetricReport> {
        evaluate(
            &self.params,
            &self.model_config,
            index,
            self.config.threshold,
            self.config.batch_size,
        )
    }
}

/// Replaces every batch-norm running mean and variance with the exact
/// population statistics of the train-mode activations over `index`, with the
/// weights held fixed.
///
/// With only a handful of steps per epoch, a 0.99-momentum average is still
/// dominated by its initial values and by activations of weights several
/// hundred updates old, and infer-mode outputs drift far from train-mode
/// ones. The refresh pools per-batch moments (each batch mean and biased
/// variance weighted by its sample count). Layers after the first see inputs
/// normalized with their own batch's statistics, exactly as in training, so
/// pass the training batch size. Train-mode passes never read the running
/// statistics, so refreshing twice changes nothing.
pub fn refresh_batch_norm(
    params: &mut ModelParams<f32>,
    config: &ModelConfig,
    index: &DatasetIndex,
    batch_size: usize,
) -> Result<()> {
    if index.is_empty() {
        return Err(Error::Dataset("no frames to refresh batch-norm statistics from".into()));
    }
    // Per layer: sum of n·mean and n·(var + mean²) over batches.
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut total = 0usize;
    for batch in ordered_batches(index, batch_size, config.input_size)? {
        let batch = batch?;
        let len = batch.len();
        let n = len as f64;
        let mut tape = Tape::new();
        let vars = params.register_constant(&mut tape);
        let images = tape.constant(batch.images);
        let out = model::forward(&mut tape, images, params, &vars, config, Mode::Train)?;
        if sums.is_empty() {
            sums = out
                .stats
                .iter()
                .map(|s| (vec![0.0; s.mean.len()], vec![0.0; s.mean.len()]))
                .collect();
        }
        for ((first, second), s) in sums.iter_mut().zip(&out.stats) {
            for (k, (&m, &v)) in s.mean.iter().zip(&s.var).enumerate() {
                first[k] += n * m;
                second[k] += n * (v + m * m);
            }
        }
        total += len;
    }
    let total = total as f64;
    let pooled: Vec<BatchStats> = sums
        .into_iter()
        .map(|(first, second)| {
            let mean: Vec<f64> = first.iter().map(|s| s / total).collect();
            let var = second
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / total - m * m).max(0.0))
                .collect();
            BatchStats { mean, var }
        })
        .collect();
    params.update_running_stats(&pooled, 0.0)
}

/// Infer-mode probabilities `[N, num_aus]` for every entry, in index order.
pub fn predict_index(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    index: &DatasetIndex,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(index.len() * config.num_aus);
    for batch in ordered_batches(index, batch_size, config.input_size)? {
        let preds = model::infer(params, config, batch?.images)?;
        data.extend_from_slice(preds.data());
    }
    Tensor::new(vec![index.len(), config.num_aus], data)
}

/// Per-AU and macro F1 of infer-mode predictions thresholded at `threshold`.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    index: &DatasetIndex,
    threshold: f64,
    batch_size: usize,
) -> Result<MetricReport> {
    if index.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let preds = predict_index(params, config, index, batch_size)?;
    let binary = binarize(preds.data(), threshold)?;
    macro_f1(&binary, &index.labels(), index.au_names())
}
