//! Minibatch SGD over the train split, with checkpoints and a JSONL log.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use transaction_core::data::{ActionSpace, ModalitySample, Split, Task};
use transaction_core::loss::{composite_loss, EqlConfig, HeadLossConfigs, SampleTargets};
use transaction_core::metrics::{mean_topk_recall, top1_accuracy, TaskScores, TOP_K};
use transaction_core::model::ModelParams;
use transaction_core::optim::{sgd_step, OptimizerState, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
use transaction_core::{Real, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::ensemble;
use crate::error::{AppError, Result};
use crate::frequency;

/// Mixed into the seed for the equalization-loss gates so they never share a
/// stream with shuffling.
const GATE_SALT: u64 = 0x6571_6c67_6174_6573;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOG_DIR: &str = "logs";
pub const REPORT_DIR: &str = "reports";
pub const LOG_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.tack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(AppError::Usage(format!("unknown precision `{other}`, expected f32 or f64"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gate probability on every head; `0.0` trains with plain cross-entropy.
    pub gamma: f64,
    /// Relative-frequency threshold for rare classes; `None` uses each head's
    /// bottom-quartile boundary.
    pub lambda: Option<f64>,
    /// Write `epoch-NNNN.tack` every this many epochs; `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Compute train and val metrics every this many epochs; `0` never.
    pub eval_every: usize,
    /// Stop once train top-1 on both verb and noun reaches this percentage.
    pub stop_at_train_accuracy: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 50,
            seed: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            gamma: 0.9,
            lambda: None,
            checkpoint_every: 0,
            eval_every: 1,
            stop_at_train_accuracy: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AppError::Usage("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(AppError::Usage("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AppError::Usage(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(AppError::Usage(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(AppError::Usage(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AppError::Usage(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(t) = self.stop_at_train_accuracy {
            if !(0.0..=100.0).contains(&t) {
                return Err(AppError::Usage(format!("stop_at_train_accuracy is a percentage, got {t}")));
            }
            if self.eval_every == 0 {
                return Err(AppError::Usage(
                    "stop_at_train_accuracy needs eval_every >= 1 to measure train accuracy".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-head loss settings from the train-split counts in `space`.
    pub fn loss_configs(&self, space: &ActionSpace) -> Result<HeadLossConfigs> {
        let head = |task: Task| -> Result<EqlConfig> {
            let counts = space.counts(task);
            let cfg = match self.lambda {
                Some(l) => EqlConfig::from_counts(counts, self.gamma, l),
                None => EqlConfig::bottom_quartile(counts, self.gamma),
            };
            cfg.map_err(|e| AppError::Data(format!("{} loss: {e}", task.name())))
        };
        Ok(HeadLossConfigs {
            verb: head(Task::Verb)?,
            noun: head(Task::Noun)?,
            action: head(Task::Action)?,
        })
    }
}

/// Features in training precision, converted once.
pub struct Prepared<S: Real> {
    pub features: [Tensor<S>; 3],
    pub targets: SampleTargets,
}

pub fn prepare<S: Real>(samples: &[&ModalitySample]) -> Vec<Prepared<S>> {
    samples
        .iter()
        .map(|s| Prepared {
            features: s.features(),
            targets: s.targets(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskValues {
    pub verb: Option<f64>,
    pub noun: Option<f64>,
    pub action: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: &'static str,
    /// Mean batch loss for the train split; evaluation loss is not tracked.
    pub loss: Option<f64>,
    pub k: usize,
    pub recall: Option<TaskValues>,
    pub top1: Option<TaskValues>,
}

pub struct Trainer<S: Real> {
    pub params: ModelParams<S>,
    pub opt: OptimizerState<S>,
    pub losses: HeadLossConfigs,
    pub cfg: TrainConfig,
    pub epochs_completed: usize,
    tape: Tape<S>,
}

impl<S: Real> Trainer<S> {
    pub fn new(params: ModelParams<S>, cfg: TrainConfig, space: &ActionSpace) -> Result<Self> {
        cfg.validate()?;
        check_vocab(&params, space)?;
        let losses = cfg.loss_configs(space)?;
        let opt = OptimizerState::new(&params.store, cfg.learning_rate, cfg.momentum);
        Ok(Trainer {
            params,
            opt,
            losses,
            cfg,
            epochs_completed: 0,
            tape: Tape::new(),
        })
    }

    /// Continues from a saved state; a checkpoint without velocity restarts momentum at zero.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, space: &ActionSpace) -> Result<Self> {
        let mut t = Trainer::new(ckpt.params.cast(), cfg, space)?;
        if let Some(vel) = &ckpt.velocity {
            t.opt.velocity = vel.iter().map(|v| v.iter().map(|&x| S::from_f32(x)).collect()).collect();
        }
        t.epochs_completed = ckpt.epochs_completed;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.cast(),
            epochs_completed: self.epochs_completed,
            velocity: Some(
                self.opt
                    .velocity
                    .iter()
                    .map(|v| v.iter().map(|&x| Real::to_f32(x)).collect())
                    .collect(),
            ),
        }
    }

    /// Sample order for a 1-based epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn gate_rng(&self, epoch: usize, batch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ GATE_SALT);
        rng.set_stream(((epoch as u64) << 32) | batch as u64);
        rng
    }

    /// Forward, loss, backward and one optimizer step on `batch`. Returns the loss.
    pub fn train_step(&mut self, batch: &[&Prepared<S>], epoch: usize, index: usize) -> Result<f64> {
        let mut rng = self.gate_rng(epoch, index);
        self.tape.clear();
        let mut outputs = Vec::with_capacity(batch.len());
        for p in batch {
            let [r, f, o] = &p.features;
            outputs.push(self.params.forward(&mut self.tape, [r, f, o])?);
        }
        let targets: Vec<SampleTargets> = batch.iter().map(|p| p.targets).collect();
        let loss = composite_loss(&mut self.tape, &outputs, &targets, &self.losses, &mut rng)?;
        let value = self.tape.value(loss).data()[0];
        let value = Real::to_f64(value);
        if !value.is_finite() {
            let at = match self.tape.first_non_finite() {
                Some((node, op)) => format!("first non-finite tensor is tape node {node} (`{op}`)"),
                None => "no intermediate tensor was non-finite".into(),
            };
            return Err(AppError::Numeric(format!(
                "loss is {value} at epoch {epoch} batch {index}; {at}"
            )));
        }
        self.tape.backward(loss)?;
        self.params.store.accumulate_grads(&self.tape);
        self.tape.clear();
        sgd_step(&mut self.params.store, &mut self.opt)?;
        if let Some(p) = self.params.store.iter().find(|p| !p.tensor.is_finite()) {
            return Err(AppError::Numeric(format!(
                "parameter `{}` became non-finite after the step at epoch {epoch} batch {index}",
                p.name
            )));
        }
        Ok(value)
    }

    /// Runs the next epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self, train: &[Prepared<S>]) -> Result<f64> {
        if train.is_empty() {
            return Err(AppError::Data("train split is empty".into()));
        }
        let epoch = self.epochs_completed + 1;
        let order = self.epoch_order(train.len(), epoch);
        let mut total = 0.0;
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared<S>> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.train_step(&batch, epoch, b)?;
            n_batches += 1;
        }
        self.epochs_completed = epoch;
        Ok(total / n_batches as f64)
    }
}

pub fn check_vocab<S: Real>(params: &ModelParams<S>, space: &ActionSpace) -> Result<()> {
    let c = &params.config;
    if (c.n_verbs, c.n_nouns, c.n_actions) != (space.n_verbs, space.n_nouns, space.n_actions) {
        return Err(AppError::Data(format!(
            "model predicts {}/{}/{} verb/noun/action classes, dataset has {}/{}/{}",
            c.n_verbs, c.n_nouns, c.n_actions, space.n_verbs, space.n_nouns, space.n_actions
        )));
    }
    Ok(())
}

/// Largest k usable for every head.
pub fn metric_k(space: &ActionSpace) -> usize {
    TOP_K.min(space.n_verbs).min(space.n_nouns).min(space.n_actions)
}

/// Mean top-k recall and top-1 accuracy, both in percent.
pub fn split_metrics(scores: &TaskScores, targets: &[SampleTargets], k: usize) -> Result<(TaskValues, TaskValues)> {
    let mut recall = [None; 3];
    let mut top1 = [None; 3];
    for task in Task::ALL {
        let labels: Vec<usize> = targets
            .iter()
            .map(|t| match task {
                Task::Verb => t.verb,
                Task::Noun => t.noun,
                Task::Action => t.action,
            })
            .collect();
        let s = scores.get(task);
        let all: std::collections::BTreeSet<usize> = (0..s.cols()).collect();
        recall[task.index()] = mean_topk_recall(s, &labels, k, &all, None)?.map(|r| 100.0 * r);
        top1[task.index()] = Some(100.0 * top1_accuracy(s, &labels));
    }
    let pack = |v: [Option<f64>; 3]| TaskValues {
        verb: v[0],
        noun: v[1],
        action: v[2],
    };
    Ok((pack(recall), pack(top1)))
}

pub struct TrainOutcome {
    pub epochs_completed: usize,
    pub final_checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
    pub stopped_early: bool,
}

/// Output directory layout.
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in [CHECKPOINT_DIR, LOG_DIR, REPORT_DIR] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(AppError::io(&p))?;
        }
        Ok(RunDirs { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_DIR).join(LOG_FILE)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORT_DIR)
    }
}

struct Log {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Log {
    /// Opens the log, keeping only records up to `keep_through` when resuming.
    fn open(path: PathBuf, keep_through: usize) -> Result<Self> {
        let mut kept = String::new();
        if keep_through > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines() {
                    let epoch = serde_json::from_str::<serde_json::Value>(line)
                        .ok()
                        .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()));
                    if epoch.is_some_and(|e| e as usize <= keep_through) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        let file = File::create(&path).map_err(AppError::io(&path))?;
        let mut out = BufWriter::new(file);
        out.write_all(kept.as_bytes()).map_err(AppError::io(&path))?;
        Ok(Log { path, out })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(self.out, "{line}").map_err(AppError::io(&self.path))?;
        self.out.flush().map_err(AppError::io(&self.path))
    }
}

/// Trains on the train split of `samples`, writing checkpoints, the metrics log
/// and frequency tables under `dirs`. Val metrics are logged when a val split exists.
pub fn run<S: Real>(
    mut trainer: Trainer<S>,
    samples: &[ModalitySample],
    space: &ActionSpace,
    dirs: &RunDirs,
) -> Result<TrainOutcome> {
    let train: Vec<&ModalitySample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let val: Vec<&ModalitySample> = samples.iter().filter(|s| s.split == Split::Val).collect();
    if train.is_empty() {
        return Err(AppError::Data("train split is empty".into()));
    }
    for task in Task::ALL {
        let path = dirs.reports().join(format!("frequencies_{}.tsv", task.name()));
        frequency::write(&path, space.counts(task))?;
    }
    let train_data: Vec<Prepared<S>> = prepare(&train);
    let val_data: Vec<Prepared<S>> = prepare(&val);
    let k = metric_k(space);
    let mut log = Log::open(dirs.log(), trainer.epochs_completed)?;
    let mut records = Vec::new();
    let mut stopped_early = false;
    let cfg = trainer.cfg.clone();

    while trainer.epochs_completed < cfg.epochs {
        let loss = trainer.run_epoch(&train_data)?;
        let epoch = trainer.epochs_completed;
        let evaluate = cfg.eval_every > 0 && (epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.epochs);
        let mut rec = LogRecord {
            epoch,
            split: Split::Train.name(),
            loss: Some(loss),
            k,
            recall: None,
            top1: None,
        };
        let mut reached = false;
        if evaluate {
            let scores = ensemble::predict(&trainer.params, &train_data)?;
            let targets: Vec<SampleTargets> = train_data.iter().map(|p| p.targets).collect();
            let (recall, top1) = split_metrics(&scores, &targets, k)?;
            rec.recall = Some(recall);
            rec.top1 = Some(top1);
            if let Some(t) = cfg.stop_at_train_accuracy {
                reached = top1.verb.unwrap_or(0.0) >= t && top1.noun.unwrap_or(0.0) >= t;
            }
        }
        log.write(&rec)?;
        records.push(rec);
        if evaluate && !val_data.is_empty() {
            let scores = ensemble::predict(&trainer.params, &val_data)?;
            let targets: Vec<SampleTargets> = val_data.iter().map(|p| p.targets).collect();
            let (recall, top1) = split_metrics(&scores, &targets, k)?;
            let rec = LogRecord {
                epoch,
                split: Split::Val.name(),
                loss: None,
                k,
                recall: Some(recall),
                top1: Some(top1),
            };
            log.write(&rec)?;
            records.push(rec);
        }
        if cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every) {
            trainer
                .checkpoint()
                .write(&dirs.checkpoints().join(format!("epoch-{epoch:04}.tack")))?;
        }
        if reached {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let final_checkpoint = dirs.checkpoints().join(FINAL_CHECKPOINT);
    trainer.checkpoint().write(&final_checkpoint)?;
    Ok(TrainOutcome {
        epochs_completed: trainer.epochs_completed,
        final_checkpoint,
        records,
        stopped_early,
    })
}
