//! Losses, Adam, the learning-rate schedule, evaluation metrics and the
//! training loop with gate updates and freezing.

mod loss;
mod metrics;
mod optim;

pub use loss::{task_loss, RegressionLoss};
pub use metrics::{
    binary_f1, evaluate, median_baseline_mae, multilabel_report, pearson, regression_report, ClassReport, EvalReport,
    RegressionReport, ZeroLabels,
};
pub use optim::{clip_global_norm, lr_schedule, Adam};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{batch_indices, Dataset, ModalityBatch};
use crate::domain::{Modality, Task};
use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateMode, GateState, RoleAssignment};
use crate::layers::Dropout;
use crate::model::{GateInput, Model};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0-based epoch from which the rate is multiplied by `decay_factor`.
    #[serde(default = "default_decay_epoch")]
    pub decay_epoch: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    /// Global gradient-norm cap; `null` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Multiplier on the rate for the gate logits.
    #[serde(default = "default_one")]
    pub gate_lr_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss: RegressionLoss,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default = "default_zero_labels")]
    pub zero_labels: ZeroLabels,
    /// Shuffle batch order each epoch.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_decay_epoch() -> usize {
    20
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_clip() -> Option<f64> {
    Some(0.8)
}
fn default_one() -> f64 {
    1.0
}
fn default_zero_labels() -> ZeroLabels {
    ZeroLabels::Exclude
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    fn with(lr: f64, batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            lr,
            batch_size,
            epochs,
            decay_epoch: default_decay_epoch(),
            decay_factor: default_decay_factor(),
            clip_norm: default_clip(),
            gate_lr_scale: 1.0,
            seed: 0,
            loss: RegressionLoss::L1,
            gate: GateConfig::default(),
            zero_labels: ZeroLabels::Exclude,
            shuffle: true,
        }
    }

    pub fn mosi() -> Self {
        Self::with(1e-3, 36, 30)
    }

    pub fn mosei() -> Self {
        Self::with(1e-3, 64, 30)
    }

    pub fn iemocap() -> Self {
        Self::with(1e-5, 16, 60)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr, self.decay_epoch, self.decay_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if !(self.decay_factor > 0.0) || !(self.gate_lr_scale >= 0.0) {
            return Err(Error::Config("decay_factor must be positive and gate_lr_scale non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.gate.patience == 0 || !(0.0..=1.0).contains(&self.gate.agreement) {
            return Err(Error::Config("gate patience must be >= 1 and agreement in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val: Option<EvalReport>,
    pub gate_weights: Option<[f64; 3]>,
    pub primary: Option<Modality>,
    pub frozen: bool,
}

/// Gate input for a forward pass given the model's current logits.
pub fn gate_input(model: &Model, gate: Option<&GateState>) -> GateInput {
    match (model.gate_weights(), gate) {
        (Some(w), Some(state)) => GateInput {
            roles: state.roles(&w),
            scale: state.scales_streams(),
        },
        (Some(w), None) => GateInput {
            roles: crate::gating::assign_roles(&w, &Modality::ALL),
            scale: true,
        },
        _ => GateInput::pinned(Modality::Text),
    }
}

/// Row-major `[n × outputs]` predictions in dataset order.
pub fn predict(model: &Model, gate: Option<&GateState>, dataset: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let input = gate_input(model, gate);
    let mut out = Vec::with_capacity(dataset.len() * model.config().task.outputs());
    for idx in batch_indices(dataset.len(), batch_size.max(1), 0, false) {
        let batch = ModalityBatch::from_dataset(dataset, &idx);
        let mut g = Graph::new(model.config().precision);
        let p = model.store().bind_frozen(&mut g)?;
        let o = model.forward(&mut g, &p, &batch, input, &mut Dropout::disabled(), false)?;
        out.extend_from_slice(g.value(o.prediction).data());
    }
    Ok(out)
}

fn labels_f64(dataset: &Dataset) -> Vec<f64> {
    dataset.labels.iter().map(|&v| v as f64).collect()
}

/// Owns a model, its gate bookkeeping and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    /// `None` for the flat baseline.
    pub gate: Option<GateState>,
    pub config: TrainConfig,
    pub logs: Vec<EpochLog>,
    pub warnings: Vec<String>,
    adam: Adam,
    gate_param: Option<usize>,
}

impl Trainer {
    /// `gate` defaults to a learned gate for the hierarchical model and is
    /// ignored for the flat baseline.
    pub fn new(model: Model, gate: Option<GateState>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gate_param = model.as_hct().map(|m| m.gate_logits.index());
        let gate = match &model {
            Model::Hct(_) => Some(gate.unwrap_or_else(|| GateState::learned(config.gate))),
            Model::Flat(_) => None,
        };
        let adam = Adam::new(model.store());
        Ok(Trainer {
            model,
            gate,
            config,
            logs: Vec::new(),
            warnings: Vec::new(),
            adam,
            gate_param,
        })
    }

    /// Pin the primary modality: gating off, roles fixed, logits never updated.
    pub fn pinned(model: Model, primary: Modality, config: TrainConfig) -> Result<Self> {
        let gate = GateState::pinned(config.gate, primary);
        Self::new(model, Some(gate), config)
    }

    pub fn epochs_done(&self) -> usize {
        self.logs.len()
    }

    pub fn roles(&self) -> Option<RoleAssignment> {
        self.model.as_hct().map(|_| gate_input(&self.model, self.gate.as_ref()).roles)
    }

    /// Train until `config.epochs`, evaluating on `val` after every epoch.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        self.check_labels(train);
        while self.epochs_done() < self.config.epochs {
            self.train_epoch(train, val)?;
        }
        Ok(())
    }

    fn check_labels(&mut self, train: &Dataset) {
        if train.task() != Task::Regression {
            return;
        }
        let outside = train.labels.iter().filter(|l| l.abs() > 3.0).count();
        if outside > 0 {
            self.warnings.push(format!("{outside} regression labels fall outside [-3, 3]"));
        }
    }

    /// One pass over `train`; returns the sample-weighted mean batch loss.
    pub fn train_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<f64> {
        let epoch = self.epochs_done();
        let cfg = &self.config;
        let lr = cfg.lr_at(epoch);
        let precision = self.model.config().precision;
        let task = self.model.config().task;
        let batches = batch_indices(train.len(), cfg.batch_size, rng::epoch_seed(cfg.seed, epoch), cfg.shuffle);
        let mut dropout = Dropout::training(
            self.model.config().dropout,
            rng::epoch_stream(cfg.seed, rng::STREAM_DROPOUT, epoch),
        );
        let mut winners = Vec::with_capacity(batches.len());
        let (mut total, mut count) = (0.0, 0usize);

        for (b, idx) in batches.iter().enumerate() {
            let batch = ModalityBatch::from_dataset(train, idx);
            let input = gate_input(&self.model, self.gate.as_ref());
            let weights = self.model.gate_weights();
            if let (Some(state), Some(w)) = (self.gate.as_mut(), weights) {
                if state.trainable() {
                    state.record(epoch, b, w, input.roles.primary);
                    winners.push(input.roles.primary);
                }
            }
            let diagnose = |e: Error| match e {
                Error::NonFinite { .. } | Error::Numeric(_) => {
                    Error::Numeric(format!("epoch {epoch} batch {b}: {e}; gate weights {weights:?}"))
                }
                other => other,
            };
            let mut g = Graph::new(precision);
            let p = self.model.store().bind(&mut g)?;
            let out = self
                .model
                .forward(&mut g, &p, &batch, input, &mut dropout, false)
                .map_err(diagnose)?;
            let loss = task_loss(&mut g, out.prediction, &batch.labels, task, self.config.loss).map_err(diagnose)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diagnose(Error::Numeric(format!("loss is {value}"))));
            }
            g.backward(loss).map_err(diagnose)?;
            let mut grads = p.grads(&g, self.model.store());
            let mut lrs = vec![lr; grads.len()];
            if let (Some(i), Some(state)) = (self.gate_param, self.gate.as_ref()) {
                lrs[i] = if state.trainable() { lr * self.config.gate_lr_scale } else { 0.0 };
            }
            if let Some(max) = self.config.clip_norm {
                let include: Vec<bool> = lrs.iter().map(|&r| r > 0.0).collect();
                clip_global_norm(&mut grads, &include, max);
            }
            self.adam.step(self.model.store_mut(), &grads, &lrs, precision);
            total += value * idx.len() as f64;
            count += idx.len();
        }

        let weights = self.model.gate_weights();
        if let (Some(state), Some(w)) = (self.gate.as_mut(), weights) {
            if state.trainable() {
                state.update_freeze(epoch, &winners, &w);
            }
        }
        let train_loss = total / count as f64;
        let val = match val {
            Some(ds) if !ds.is_empty() => Some(self.evaluate(ds)?),
            _ => None,
        };
        self.logs.push(EpochLog {
            epoch,
            train_loss,
            lr,
            val,
            gate_weights: weights,
            primary: self.roles().map(|r| r.primary),
            frozen: self.gate.as_ref().is_some_and(|s| s.frozen),
        });
        Ok(train_loss)
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        predict(&self.model, self.gate.as_ref(), dataset, self.config.batch_size)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalReport> {
        let preds = self.predict(dataset)?;
        evaluate(&preds, &labels_f64(dataset), dataset.task(), self.config.zero_labels)
    }

    /// Training objective over a whole dataset at the current parameters.
    pub fn loss_on(&self, dataset: &Dataset) -> Result<f64> {
        let preds = self.predict(dataset)?;
        let shape = [dataset.len(), self.model.config().task.outputs()];
        let mut g = Graph::new(crate::autodiff::Precision::Double);
        let p = g.constant(Tensor::new(&shape, preds)?)?;
        let labels = Tensor::new(&shape, labels_f64(dataset))?;
        let l = task_loss(&mut g, p, &labels, dataset.task(), self.config.loss)?;
        Ok(g.value(l).item())
    }

    /// Gate mode for checkpoints and reports.
    pub fn gate_mode(&self) -> Option<GateMode> {
        self.gate.as_ref().map(|s| s.mode)
    }
}

/// CSV training log: epoch, train_loss, lr, validation metrics, gate
/// weights, primary and frozen flag.
pub fn write_train_log(logs: &[EpochLog], task: Task, mut out: impl Write) -> std::io::Result<()> {
    let metric_cols = match task {
        Task::Regression => "val_mae,val_corr,val_acc2,val_acc7,val_f1",
        Task::Multilabel { .. } => "val_mean_acc,val_mean_f1",
    };
    writeln!(out, "epoch,train_loss,lr,{metric_cols},w_T,w_A,w_V,primary,frozen")?;
    for l in logs {
        let metrics = match &l.val {
            Some(EvalReport::Regression(r)) => {
                format!("{:.9},{:.9},{:.9},{:.9},{:.9}", r.mae, r.corr, r.acc2, r.acc7, r.f1)
            }
            Some(EvalReport::Multilabel { mean_acc, mean_f1, .. }) => format!("{mean_acc:.9},{mean_f1:.9}"),
            None => vec![""; metric_cols.split(',').count()].join(","),
        };
        let weights = match l.gate_weights {
            Some(w) => format!("{:.9},{:.9},{:.9}", w[0], w[1], w[2]),
            None => ",,".into(),
        };
        let primary = l.primary.map(|m| m.short().to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{:.9},{:e},{metrics},{weights},{primary},{}",
            l.epoch, l.train_loss, l.lr, l.frozen
        )?;
    }
    Ok(())
}
