//! Minibatch training with validation-driven learning-rate halving.
//!
//! After every epoch the validation accuracy is compared with the best seen so
//! far. If the relative improvement falls below `halving_threshold` the
//! learning rate is halved. Training stops once the rate drops below
//! `stop_ratio · initial_lr` (or at `max_epochs`), and the parameters from the
//! best validation epoch are returned.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::LossOutput;
use crate::math::{Matrix, SeededRng};
use crate::network::{rmsprop_step, ModelParams, RmspropState, RMSPROP_DECAY, RMSPROP_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Minimum relative validation improvement that avoids a halving.
    pub halving_threshold: f64,
    /// Training stops once `lr < stop_ratio · initial_lr`.
    pub stop_ratio: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.004,
            halving_threshold: 0.001,
            stop_ratio: 0.1,
            batch_size: 64,
            max_epochs: 200,
            seed: 0,
            rmsprop_decay: RMSPROP_DECAY,
            rmsprop_epsilon: RMSPROP_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if !(self.halving_threshold.is_finite() && self.halving_threshold >= 0.0) {
            return bad("halving_threshold must be >= 0");
        }
        if !(self.stop_ratio > 0.0 && self.stop_ratio < 1.0) {
            return bad("stop_ratio must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad("rmsprop_decay must be in (0, 1)");
        }
        if !(self.rmsprop_epsilon.is_finite() && self.rmsprop_epsilon > 0.0) {
            return bad("rmsprop_epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalvingEvent {
    /// 1-based epoch whose validation result triggered the halving.
    pub epoch: usize,
    pub from: f64,
    pub to: f64,
}

/// Trace of one training run. Epochs are numbered from 1.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub val_acc: Vec<f64>,
    /// Learning rate used during each epoch.
    pub lr: Vec<f64>,
    pub halvings: Vec<HalvingEvent>,
    pub best_epoch: Option<usize>,
    pub test_acc: Option<f64>,
    pub wall_clock: Duration,
}

// Wall-clock time is excluded: two runs are equal when they trained identically.
impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.val_acc == other.val_acc
            && self.lr == other.lr
            && self.halvings == other.halvings
            && self.best_epoch == other.best_epoch
            && self.test_acc == other.test_acc
    }
}

impl RunResult {
    pub fn epochs(&self) -> usize {
        self.val_acc.len()
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.val_acc[e - 1])
    }

    /// Line-oriented log: a header, one line per epoch, then the summary.
    pub fn to_log(&self, cfg: &TrainConfig) -> String {
        let mut s = String::new();
        s.push_str("# lr halving compares validation accuracy with the best-so-far epoch\n");
        let _ = writeln!(
            s,
            "# initial_lr={} halving_threshold={} stop_ratio={} batch_size={} max_epochs={} seed={}",
            cfg.initial_lr,
            cfg.halving_threshold,
            cfg.stop_ratio,
            cfg.batch_size,
            cfg.max_epochs,
            cfg.seed
        );
        for (i, (lr, acc)) in self.lr.iter().zip(&self.val_acc).enumerate() {
            let _ = writeln!(s, "epoch={} lr={lr} val_acc={acc:.6}", i + 1);
        }
        match self.best_epoch {
            Some(e) => {
                let _ = writeln!(s, "best_epoch={e}");
            }
            None => s.push_str("best_epoch=none\n"),
        }
        match self.test_acc {
            Some(a) => {
                let _ = writeln!(s, "test_acc={a:.6}");
            }
            None => s.push_str("test_acc=none\n"),
        }
        s
    }
}

/// Outcome of feeding one epoch's validation accuracy to [`HalvingSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub halving: Option<HalvingEvent>,
    /// The epoch beat every earlier epoch.
    pub new_best: bool,
}

/// The learning-rate rule on its own, driven by validation accuracies.
#[derive(Debug, Clone)]
pub struct HalvingSchedule {
    lr: f64,
    floor: f64,
    threshold: f64,
    best: Option<f64>,
}

impl HalvingSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.initial_lr,
            floor: cfg.stop_ratio * cfg.initial_lr,
            threshold: cfg.halving_threshold,
            best: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn should_stop(&self) -> bool {
        self.lr < self.floor
    }

    /// The first epoch never halves. Later epochs halve when
    /// `(acc − best)/best < threshold`; a best of zero counts any gain as
    /// improvement.
    pub fn observe(&mut self, epoch: usize, acc: f64) -> ScheduleStep {
        let Some(best) = self.best else {
            self.best = Some(acc);
            return ScheduleStep {
                halving: None,
                new_best: true,
            };
        };
        let improved = if best == 0.0 {
            acc > 0.0 || self.threshold == 0.0
        } else {
            (acc - best) / best >= self.threshold
        };
        let halving = (!improved).then(|| {
            let from = self.lr;
            self.lr = from * 0.5;
            HalvingEvent {
                epoch,
                from,
                to: self.lr,
            }
        });
        let new_best = acc > best;
        if new_best {
            self.best = Some(acc);
        }
        ScheduleStep { halving, new_best }
    }
}

/// A training criterion evaluated on one minibatch.
///
/// `rows` are the minibatch's indices into the training set, for objectives
/// whose targets are precomputed per sample.
pub trait Objective {
    fn loss(&self, logits: &Matrix, labels: &[u32], rows: &[usize]) -> Result<LossOutput>;
}

impl<F> Objective for F
where
    F: Fn(&Matrix, &[u32], &[usize]) -> Result<LossOutput>,
{
    fn loss(&self, logits: &Matrix, labels: &[u32], rows: &[usize]) -> Result<LossOutput> {
        self(logits, labels, rows)
    }
}

/// Fraction of samples whose highest logit is the labelled class.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(data.features())?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(data.labels())
        .filter(|(&p, &l)| p + 1 == l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a copy of `model` and returns the best-validation snapshot.
pub fn train<O: Objective + ?Sized>(
    model: &ModelParams,
    train_data: &LabeledDataset,
    validation: &LabeledDataset,
    objective: &O,
    cfg: &TrainConfig,
) -> Result<(ModelParams, RunResult)> {
    cfg.validate()?;
    if train_data.dim() != model.input_dim() || validation.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} features, model expects {}",
            train_data.dim(),
            model.input_dim()
        )));
    }
    if train_data.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} classes, model outputs {}",
            train_data.num_classes(),
            model.num_classes()
        )));
    }

    let started = Instant::now();
    let mut shuffle_rng = SeededRng::derive(cfg.seed, "shuffle");
    let mut params = model.clone();
    let mut state = RmspropState::with_hyperparameters(
        &params,
        cfg.initial_lr,
        cfg.rmsprop_decay,
        cfg.rmsprop_epsilon,
    );
    let mut result = RunResult {
        val_acc: Vec::new(),
        lr: Vec::new(),
        halvings: Vec::new(),
        best_epoch: None,
        test_acc: None,
        wall_clock: Duration::ZERO,
    };
    let mut schedule = HalvingSchedule::new(cfg);
    let mut best: Option<ModelParams> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        if schedule.should_stop() {
            break;
        }
        state.learning_rate = schedule.lr();
        shuffle_rng.shuffle(&mut order);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_data.features().select_rows(rows);
            let labels: Vec<u32> = rows.iter().map(|&i| train_data.labels()[i]).collect();
            let (logits, cache) = params.forward(&x)?;
            let out = objective.loss(&logits, &labels, rows)?;
            if !out.value.is_finite() || !out.grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            let grads = params.backward(&cache, &out.grad)?;
            rmsprop_step(&mut params, &grads, &mut state)?;
        }

        let acc = evaluate(&params, validation)?;
        result.lr.push(schedule.lr());
        result.val_acc.push(acc);
        let step = schedule.observe(epoch, acc);
        if let Some(h) = step.halving {
            result.halvings.push(h);
        }
        if step.new_best {
            best = Some(params.clone());
            result.best_epoch = Some(epoch);
        }
    }

    result.wall_clock = started.elapsed();
    let trained = best.unwrap_or(params);
    Ok((trained, result))
}
