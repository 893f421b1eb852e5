//! SGD over the prompt bank with a constant warm-up followed by a cosine
//! schedule.
//!
//! All randomness inside a run is keyed by epoch (shuffle order here, view
//! resampling in the [`ViewSource`]), so stopping after any epoch and resuming
//! from a checkpoint reproduces the uninterrupted run bit for bit.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::losses::{self, BatchViews, LossBreakdown, LossWeights, ObjectiveContext, TeacherRule};
use crate::promptbank::PromptBank;
use crate::rng;
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Warmup {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for Warmup {
    fn default() -> Self {
        Self { epochs: 1, lr: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub shots: usize,
    pub lr: f64,
    pub warmup: Warmup,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 32,
            shots: 16,
            lr: 2e-3,
            warmup: Warmup::default(),
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("warmup.lr", self.warmup.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }
}

/// Learning rate for optimizer step `step` (0-based) of a run with
/// `steps_per_epoch` steps per epoch.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    let warm = (cfg.warmup.epochs * steps_per_epoch).min(total);
    if step < warm {
        return cfg.warmup.lr;
    }
    let t = (step - warm) as f64;
    let span = (total - warm).max(1) as f64;
    cfg.lr * 0.5 * (1.0 + (PI * t / span).cos())
}

/// Image embeddings of every training sample for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochViews {
    pub original: Tensor,
    pub weak: Tensor,
    pub strong: Tensor,
}

/// Supplies the few-shot training set. Labels are bank-local class indices.
pub trait ViewSource {
    fn labels(&self) -> &[usize];
    fn views(&self, epoch: usize) -> Result<EpochViews>;
}

/// Objective settings shared by every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub selection: SelectionConfig,
    pub weights: LossWeights,
    pub teacher: TeacherRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Resumable optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: usize,
    /// Heavy-ball buffer, flat and class-major; empty without momentum.
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,ce,asa,ler,cmd,total,lr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = r.loss;
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                r.step, l.ce, l.asa, l.ler, l.cmd, l.total, r.lr
            ));
        }
        s
    }

    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((e, s, c)) if *e == r.epoch => {
                    *s += r.loss.total;
                    *c += 1;
                }
                _ => out.push((r.epoch, r.loss.total, 1)),
            }
        }
        out.into_iter().map(|(e, s, c)| (e, s / c as f64)).collect()
    }
}

fn check_shots(labels: &[usize], bank: &PromptBank, shots: usize) -> Result<()> {
    let k = bank.num_classes();
    let mut counts = vec![0usize; k];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Data(format!("training label {y} outside the bank's {k} classes")))? += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        if c < shots {
            return Err(Error::Data(format!(
                "class {} (id {}) has {c} training samples, {shots} shots required",
                i,
                bank.class_ids()[i]
            )));
        }
    }
    Ok(())
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(vec![idx.len(), d], data)
}

/// One optimizer step on a mini-batch; returns the pre-update loss.
pub fn sgd_step(
    bank: &mut PromptBank,
    encoder: Option<&FrozenTextEncoder>,
    batch: &BatchViews<'_>,
    objective: &Objective,
    lr: f64,
    momentum: f64,
    velocity: &mut Vec<f64>,
) -> Result<LossBreakdown> {
    let attributes = bank.attribute_matrix();
    let tape = Tape::new();
    let grid = bank.encode_all(&tape, encoder)?;
    let ctx = ObjectiveContext {
        attributes: &attributes,
        selection: objective.selection,
        weights: objective.weights,
        teacher: objective.teacher,
        frozen_aug: None,
    };
    let (total, breakdown) = losses::total_loss(&tape, &grid, batch, &ctx)?;
    let grads = grid.param_grads(&tape.backward(total)?);
    let steps: Vec<Tensor> = if momentum > 0.0 {
        if velocity.is_empty() {
            *velocity = vec![0.0; bank.trainable_count()];
        }
        let mut off = 0;
        grads
            .iter()
            .map(|g| {
                let v = &mut velocity[off..off + g.len()];
                off += g.len();
                let data = v
                    .iter_mut()
                    .zip(g.data())
                    .map(|(vi, gi)| {
                        *vi = momentum * *vi + gi;
                        -lr * *vi
                    })
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            })
            .collect()
    } else {
        grads
            .iter()
            .map(|g| Tensor::from_parts(g.shape().to_vec(), g.data().iter().map(|v| -lr * v).collect()))
            .collect()
    };
    bank.apply_step(&steps)?;
    Ok(breakdown)
}

/// Trains `bank` in place from `state` until `cfg.epochs` epochs are done, or
/// until `stop_after` epochs when given. Appends rows to `log`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    bank: &mut PromptBank,
    encoder: Option<&FrozenTextEncoder>,
    data: &dyn ViewSource,
    cfg: &TrainConfig,
    objective: &Objective,
    seed: u64,
    state: &mut TrainState,
    log: &mut TrainLog,
    stop_after: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    objective.selection.validate()?;
    objective.weights.validate()?;
    let labels = data.labels().to_vec();
    check_shots(&labels, bank, cfg.shots)?;
    let n = labels.len();
    let spe = cfg.steps_per_epoch(n);
    let last = stop_after.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    while state.epochs_done < last {
        let epoch = state.epochs_done;
        let views = data.views(epoch)?;
        for v in [&views.original, &views.weak, &views.strong] {
            if v.rows() != n {
                return Err(Error::Data(format!("view has {} rows for {n} labels", v.rows())));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch) {
            let lr = lr_at(state.step, spe, cfg);
            let (o, w, s) = (gather(&views.original, chunk), gather(&views.weak, chunk), gather(&views.strong, chunk));
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = BatchViews {
                original: &o,
                weak: &w,
                strong: &s,
                labels: &y,
            };
            let loss = sgd_step(bank, encoder, &batch, objective, lr, cfg.momentum, &mut state.velocity)?;
            log.rows.push(LogRow {
                step: state.step,
                epoch,
                lr,
                loss,
            });
            state.step += 1;
        }
        state.epochs_done += 1;
        if let Some(&(_, mean)) = log.epoch_means().last() {
            log::info!("epoch {}/{} mean loss {mean:.6}", epoch + 1, cfg.epochs);
        }
    }
    Ok(())
}
