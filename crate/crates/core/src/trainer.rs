//! Mini-batch Adam training with validation-driven backtracking.
//!
//! After every epoch the validation loss is appended to the history. Let `r`
//! be the number of epochs immediately preceding the current one whose
//! losses are all strictly better than the current loss. Once past the
//! warm-up, if `r > β·epoch` the parameters and optimizer state are restored
//! from the best epoch so far and the learning rate is multiplied by `α`.
//! The history itself is never truncated.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelParams, ModelSpec};
use crate::objectives::{batch_loss, task_losses, TaskBatch};
use crate::params::Tensors;
use crate::scalar::Scalar;
use crate::taskgen::{shuffle_entities, task_rng, ClusterTask};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite epochs tolerated before giving up.
pub const MAX_DIVERGENT_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub time_budget_s: Option<u64>,
    /// 32 or 64.
    pub precision: u32,
    pub seed: u64,
    /// Fraction of `max_epochs` after which the learning rate is multiplied
    /// by `lr_drop_factor` once.
    pub lr_drop_at: Option<f64>,
    pub lr_drop_factor: f64,
    /// Reorder the entities of every training task each epoch.
    pub shuffle_entities: bool,
    /// Write elapsed seconds into the metrics file. Off by default so that
    /// repeated runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            lr0: 1e-3,
            alpha: 0.9,
            beta: 0.2,
            warmup_epochs: 5,
            max_epochs: 10,
            time_budget_s: None,
            precision: 32,
            seed: 0,
            lr_drop_at: None,
            lr_drop_factor: 0.1,
            shuffle_entities: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.precision != 32 && self.precision != 64 {
            return bad(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            ));
        }
        if let Some(f) = self.lr_drop_at {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("lr_drop_at must lie in [0, 1], got {f}"));
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration and model spec.
    pub fn hash_with(&self, spec: &ModelSpec) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Adam moments, one per parameter tensor in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Array<F>>,
    pub v: Vec<Array<F>>,
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &impl Tensors<Array<F>>) -> Self {
        let zeros: Vec<Array<F>> = params
            .tensors()
            .iter()
            .map(|a| Array::zeros(a.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `false` (and leaves parameters
/// and moments untouched) when any gradient is non-finite.
pub fn adam_step<F: Scalar>(
    params: &mut impl Tensors<Array<F>>,
    grads: &[Array<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<bool> {
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut i = 0;
    let mut err = None;
    params.visit_mut(&mut |p| {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        i += 1;
        if g.shape() != p.shape() {
            err.get_or_insert(Error::shape("adam_step", p.shape(), g.shape()));
            return;
        }
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            let g = g.f64();
            let mn = ADAM_BETA1 * m.f64() + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * v.f64() + (1.0 - ADAM_BETA2) * g * g;
            *m = F::of(mn);
            *v = F::of(vn);
            *p = F::of(p.f64() - lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS));
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BacktrackDecision {
    Continue,
    Backtrack,
}

/// Length of the run of epochs right before the last one whose losses are
/// all strictly lower than the last loss.
pub fn better_run_length(history: &[f64]) -> usize {
    let Some((&current, earlier)) = history.split_last() else {
        return 0;
    };
    earlier.iter().rev().take_while(|&&l| l < current).count()
}

/// Decide after epoch `epoch` (1-based; `history.len() == epoch`).
pub fn backtrack_check(
    history: &[f64],
    epoch: usize,
    warmup: usize,
    beta: f64,
) -> BacktrackDecision {
    if epoch <= warmup || history.is_empty() {
        return BacktrackDecision::Continue;
    }
    if better_run_length(history) as f64 > beta * epoch as f64 {
        BacktrackDecision::Backtrack
    } else {
        BacktrackDecision::Continue
    }
}

/// Parameters plus optimizer state at some epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<F> {
    pub params: ModelParams<Array<F>>,
    pub adam: AdamState<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestRecord<F> {
    pub epoch: usize,
    pub loss: f64,
    pub snapshot: Snapshot<F>,
    /// Where the checkpoint was written, when training with a run directory.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub lr: f64,
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best: Option<BestRecord<F>>,
    pub backtracks: usize,
    pub consecutive_divergent: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: Model<F>, lr0: f64) -> Self {
        TrainState {
            adam: AdamState::new(&model.params),
            model,
            lr: lr0,
            epoch: 0,
            val_history: Vec::new(),
            best: None,
            backtracks: 0,
            consecutive_divergent: 0,
        }
    }

    pub fn snapshot(&self) -> Snapshot<F> {
        Snapshot {
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn restore(&mut self, s: &Snapshot<F>) {
        self.model.params = s.params.clone();
        self.adam = s.adam.clone();
    }

    /// Record a finished epoch's validation loss, keeping the best snapshot.
    /// Returns whether it is a new best.
    pub fn record_val(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        let loss = if loss.is_finite() {
            loss
        } else {
            f64::INFINITY
        };
        self.val_history.push(loss);
        let improved = loss.is_finite() && self.best.as_ref().is_none_or(|b| loss < b.loss);
        if improved {
            self.best = Some(BestRecord {
                epoch: self.epoch,
                loss,
                snapshot: self.snapshot(),
                path: None,
            });
        }
        improved
    }

    /// Restore the best snapshot (or `fallback` when none exists yet) and
    /// decay the learning rate.
    pub fn apply_backtrack(&mut self, alpha: f64, fallback: Option<&Snapshot<F>>) -> Result<()> {
        let snap = match (&self.best, fallback) {
            (Some(b), _) => b.snapshot.clone(),
            (None, Some(f)) => f.clone(),
            (None, None) => {
                return Err(Error::Contract(
                    "backtracking requires a saved best state".into(),
                ));
            }
        };
        self.restore(&snap);
        self.lr *= alpha;
        self.backtracks += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint<F> {
        Checkpoint {
            spec: self.model.spec.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            lr: self.lr,
            epoch: self.epoch as u64,
            config_hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub backtracked: bool,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,lr,backtracked,wall_s";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.backtracked as u8, r.wall_s
        ));
    }
    s
}

/// Parse a metrics file written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(
            "metrics file lacks the expected header".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad metrics row {l:?}")))
            };
            Ok(EpochMetrics {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                val_loss: num(2)?,
                lr: num(3)?,
                backtracked: num(4)? != 0.0,
                wall_s: num(5)?,
            })
        })
        .collect()
}

/// Per-task losses over `tasks`, evaluated in parallel batches.
pub fn evaluate_tasks<F: Scalar>(
    model: &Model<F>,
    tasks: &[&ClusterTask],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let chunks: Vec<&[&ClusterTask]> = tasks.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|c| task_losses(model, c, batch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub run_dir: Option<PathBuf>,
}

pub struct TrainOutcome<F> {
    pub state: TrainState<F>,
    pub metrics: Vec<EpochMetrics>,
    pub config_hash: u64,
}

/// Initialize a model from the config seed and train it.
pub fn train<F: Scalar>(
    spec: &ModelSpec,
    train_tasks: &[ClusterTask],
    val_tasks: &[ClusterTask],
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>> {
    let model = Model::init(spec, &mut task_rng(config.seed, 0))?;
    train_model(model, train_tasks, val_tasks, config, opts)
}

/// One optimization pass over `tasks` in the given order. Returns the mean
/// per-task training loss, or `None` if the loss or a step diverged.
fn run_epoch<F: Scalar>(
    state: &mut TrainState<F>,
    tasks: &[&ClusterTask],
    batch_size: usize,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for chunk in tasks.chunks(batch_size) {
        let batch = TaskBatch::<F>::from_tasks(chunk)?;
        let mut g = Graph::new();
        let bound = state.model.bind(&mut g, true);
        let (loss, per_task) = match batch_loss(&mut g, &state.model.spec, &bound, &batch) {
            Ok(r) => r,
            Err(Error::Divergence(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        g.backward(loss)?;
        let grads: Vec<Array<F>> = bound
            .tensors()
            .into_iter()
            .map(|&v| g.grad_or_zeros(v))
            .collect();
        if !adam_step(&mut state.model.params, &grads, &mut state.adam, state.lr)? {
            return Ok(None);
        }
        sum += per_task.iter().sum::<f64>();
    }
    Ok(Some(sum / tasks.len().max(1) as f64))
}

pub fn train_model<F: Scalar>(
    model: Model<F>,
    train_tasks: &[ClusterTask],
    val_tasks: &[ClusterTask],
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if F::BITS != config.precision {
        return Err(Error::InvalidArgument(format!(
            "config asks for {}-bit training but the model is {}-bit",
            config.precision,
            F::BITS
        )));
    }
    let config_hash = config.hash_with(&model.spec);
    let start = Instant::now();
    let mut state = TrainState::new(model, config.lr0);
    let initial = state.snapshot();
    let mut metrics = Vec::new();
    let mut order_rng = task_rng(config.seed, 1);
    let mut entity_rng = task_rng(config.seed, 2);
    let val_refs: Vec<&ClusterTask> = val_tasks.iter().collect();
    let drop_epoch = config
        .lr_drop_at
        .map(|f| (f * config.max_epochs as f64).round() as usize);
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics(dir, &metrics)?;
    }

    for epoch in 1..=config.max_epochs {
        if let Some(budget) = config.time_budget_s {
            if start.elapsed().as_secs_f64() >= budget as f64 {
                break;
            }
        }
        if drop_epoch == Some(epoch - 1) {
            state.lr *= config.lr_drop_factor;
        }
        let lr_used = state.lr;
        let train_loss = if train_tasks.is_empty() {
            Some(f64::NAN)
        } else {
            let shuffled: Vec<ClusterTask>;
            let mut refs: Vec<&ClusterTask> = if config.shuffle_entities {
                shuffled = train_tasks
                    .iter()
                    .map(|t| shuffle_entities(t, &mut entity_rng))
                    .collect();
                shuffled.iter().collect()
            } else {
                train_tasks.iter().collect()
            };
            refs.shuffle(&mut order_rng);
            run_epoch(&mut state, &refs, config.batch_size)?
        };
        let val_loss = match train_loss {
            None => f64::INFINITY,
            Some(_) => match evaluate_tasks(&state.model, &val_refs, config.batch_size) {
                Ok(v) => mean(&v),
                Err(Error::Divergence(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            },
        };
        let divergent = !val_loss.is_finite() && !val_refs.is_empty();
        let improved = state.record_val(val_loss);
        if improved {
            if let Some(dir) = &opts.run_dir {
                let path = dir.join("best.ckpt");
                save_checkpoint(&path, &state.to_checkpoint(config_hash))?;
                if let Some(b) = state.best.as_mut() {
                    b.path = Some(path);
                }
            }
        }
        let backtracked = if divergent {
            state.consecutive_divergent += 1;
            if state.consecutive_divergent > MAX_DIVERGENT_EPOCHS {
                return Err(Error::Divergence(format!(
                    "{} consecutive epochs with non-finite loss",
                    state.consecutive_divergent
                )));
            }
            state.apply_backtrack(config.alpha, Some(&initial))?;
            true
        } else {
            state.consecutive_divergent = 0;
            let d = backtrack_check(
                &state.val_history,
                state.epoch,
                config.warmup_epochs,
                config.beta,
            );
            if d == BacktrackDecision::Backtrack {
                state.apply_backtrack(config.alpha, Some(&initial))?;
            }
            d == BacktrackDecision::Backtrack
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: train_loss.unwrap_or(f64::INFINITY),
            val_loss,
            lr: lr_used,
            backtracked,
            wall_s: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if let Some(dir) = &opts.run_dir {
            write_metrics(dir, &metrics)?;
        }
    }
    if let Some(dir) = &opts.run_dir {
        save_checkpoint(&dir.join("last.ckpt"), &state.to_checkpoint(config_hash))?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        config_hash,
    })
}

fn write_metrics(dir: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let path = dir.join("metrics.csv");
    std::fs::write(&path, metrics_csv(rows)).map_err(|e| Error::io(&path, e))
}
