//! Optimization of the trainable subset of a ViT (plus adapters) on a [`Dataset`].

mod loss;
mod optim;
mod schedule;

pub use loss::{argmax_rows, cross_entropy};
pub use optim::{adamw_step, OptState};
pub use schedule::cosine_lr;

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::alore::{AloreBank, ExpertMask};
use crate::backbone::{
    loss_and_grads, trainable_parameters_mut, vit_features, vit_forward, Adapters, Regime, ViTModel,
};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{linear, matmul_tn, Matrix, Real, Rng};

/// Hyperparameter sets searched by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lr: vec![0.05, 0.01, 0.005, 0.001],
            weight_decay: vec![0.05, 0.01, 0.005, 0.001, 0.0],
            dropout: vec![0.1, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Adapter dropout; ignored when no adapter bank is trained.
    pub dropout_p: f64,
    /// Taken from the enclosing experiment config.
    #[serde(skip)]
    pub seed: u64,
    /// Taken from the enclosing experiment config.
    #[serde(skip)]
    pub regime: Regime,
    pub grid: GridSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 100,
            warmup_epochs: 10,
            dropout_p: 0.1,
            seed: 0,
            regime: Regime::Alore,
            grid: GridSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need 0 <= warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let rates = [self.lr, self.weight_decay]
            .into_iter()
            .chain(self.grid.lr.iter().copied());
        if let Some(v) = rates
            .chain(self.grid.weight_decay.iter().copied())
            .find(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!(
                "learning rates and weight decays must be finite and >= 0, got {v}"
            )));
        }
        for p in std::iter::once(&self.dropout_p).chain(&self.grid.dropout) {
            if !(0.0..1.0).contains(p) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Percent correct; absent for the training split.
    pub top1: Option<f64>,
}

/// Writes `records` as JSON lines.
pub fn write_metrics<W: Write>(records: &[MetricRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<MetricRecord>,
    pub initial_val_loss: f64,
    pub initial_val_top1: f64,
    /// Epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_val_top1: f64,
    /// Test accuracy of the model as it was after `best_epoch`.
    pub test_top1: f64,
}

impl TrainOutcome {
    pub fn records(&self, epoch: usize, split: Split) -> Option<&MetricRecord> {
        self.history.iter().find(|r| r.epoch == epoch && r.split == split)
    }
}

fn select_rows<T: Real>(images: &Matrix<T>, idx: &[usize]) -> Result<Matrix<T>> {
    let cols = images.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(images.row(i));
    }
    Matrix::from_vec(idx.len(), cols, data)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Eval-mode loss and top-1 accuracy (percent) on `split`.
pub fn evaluate<T: Real>(
    model: &ViTModel<T>,
    adapters: Option<Adapters<'_, T>>,
    dataset: &Dataset,
    split: Split,
) -> Result<(f64, f64)> {
    let (images, labels) = dataset.gather(split)?;
    let logits = vit_forward(model, &images.cast::<T>(), adapters, false, &mut Rng::new(0))?;
    let (loss, _) = cross_entropy(&logits, &labels)?;
    Ok((
        loss.to_f64().unwrap_or(f64::NAN),
        accuracy(&argmax_rows(&logits), &labels),
    ))
}

/// Per-split inputs to the head: raw images, or frozen features for linear probing.
struct SplitData<T> {
    inputs: Matrix<T>,
    labels: Vec<usize>,
}

/// Trains the tensors selected by `config.regime` and reports per-epoch metrics.
///
/// Batches are drawn from a per-epoch shuffle of the training split; the learning
/// rate follows [`cosine_lr`]. Validation and test are evaluated in eval mode after
/// every epoch. Linear probing computes frozen features once and trains only the head.
pub fn train_loop<T: Real>(
    model: &mut ViTModel<T>,
    mut bank: Option<&mut AloreBank<T>>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if dataset.classes != model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            dataset.classes, model.config.classes
        )));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        if dataset.indices(split).is_empty() {
            return Err(Error::Data(format!("{} split is empty", split.name())));
        }
    }
    if let Some(b) = bank.as_deref_mut() {
        if config.regime.trains_bank() {
            b.set_dropout(config.dropout_p)?;
        }
    }
    let mask = bank.as_deref().map(|b| ExpertMask::full(b.config().n));

    let probe = config.regime == Regime::LinearProbe;
    let load = |split: Split, model: &ViTModel<T>, bank: Option<&AloreBank<T>>| -> Result<SplitData<T>> {
        let (images, labels) = dataset.gather(split)?;
        let images = images.cast::<T>();
        let inputs = if probe {
            let adapters = match (bank, mask.as_ref()) {
                (Some(b), Some(m)) => Some(Adapters::new(b, m)?),
                _ => None,
            };
            vit_features(model, &images, adapters, false, &mut Rng::new(0))?
        } else {
            images
        };
        Ok(SplitData { inputs, labels })
    };
    let train = load(Split::Train, model, bank.as_deref())?;
    let val = load(Split::Val, model, bank.as_deref())?;
    let test = load(Split::Test, model, bank.as_deref())?;

    let eval = |model: &ViTModel<T>, bank: Option<&AloreBank<T>>, data: &SplitData<T>| -> Result<(f64, f64)> {
        let logits = if probe {
            linear(&data.inputs, &model.head_w, &model.head_b)?
        } else {
            let adapters = match (bank, mask.as_ref()) {
                (Some(b), Some(m)) => Some(Adapters::new(b, m)?),
                _ => None,
            };
            vit_forward(model, &data.inputs, adapters, false, &mut Rng::new(0))?
        };
        let (loss, _) = cross_entropy(&logits, &data.labels)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFinite("evaluation loss".into()));
        }
        Ok((loss, accuracy(&argmax_rows(&logits), &data.labels)))
    };

    let (initial_val_loss, initial_val_top1) = eval(model, bank.as_deref(), &val)?;
    let root = Rng::new(config.seed);
    let mut state = OptState::<T>::new();
    let mut history = Vec::with_capacity(3 * config.epochs);
    let (mut best_epoch, mut best_val, mut test_at_best) = (0, f64::NEG_INFINITY, 0.0);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        root.fork(2 * epoch as u64).shuffle(&mut order);
        let mut dropout_rng = root.fork(2 * epoch as u64 + 1);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs = select_rows(&train.inputs, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch_loss = if probe {
                let logits = linear(&inputs, &model.head_w, &model.head_b)?;
                let (loss, d_logits) = cross_entropy(&logits, &labels)?;
                let gw = matmul_tn(&inputs, &d_logits)?;
                let gb = d_logits.col_sums();
                let params = vec![
                    ("head.w".to_string(), &mut model.head_w),
                    ("head.b".to_string(), &mut model.head_b),
                ];
                adamw_step(
                    params,
                    &[("head.w".into(), &gw), ("head.b".into(), &gb)],
                    &mut state,
                    lr,
                    config.weight_decay,
                )?;
                loss
            } else {
                let adapters = match (bank.as_deref(), mask.as_ref()) {
                    (Some(b), Some(m)) => Some(Adapters::new(b, m)?),
                    _ => None,
                };
                let (loss, grads) =
                    loss_and_grads(model, adapters, &inputs, &labels, config.regime, true, &mut dropout_rng)?;
                let params = trainable_parameters_mut(model, bank.as_deref_mut(), config.regime);
                adamw_step(
                    params,
                    &grads.trainable(config.regime),
                    &mut state,
                    lr,
                    config.weight_decay,
                )?;
                loss
            };
            let batch_loss = batch_loss.to_f64().unwrap_or(f64::NAN);
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += batch_loss * chunk.len() as f64;
        }
        history.push(MetricRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / order.len() as f64,
            top1: None,
        });
        let (val_loss, val_top1) = eval(model, bank.as_deref(), &val)?;
        let (test_loss, test_top1) = eval(model, bank.as_deref(), &test)?;
        history.push(MetricRecord {
            epoch,
            split: Split::Val,
            loss: val_loss,
            top1: Some(val_top1),
        });
        history.push(MetricRecord {
            epoch,
            split: Split::Test,
            loss: test_loss,
            top1: Some(test_top1),
        });
        if val_top1 > best_val {
            (best_epoch, best_val, test_at_best) = (epoch, val_top1, test_top1);
        }
    }

    Ok(TrainOutcome {
        history,
        initial_val_loss,
        initial_val_top1,
        best_epoch,
        best_val_top1: best_val,
        test_top1: test_at_best,
    })
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub best_val_top1: f64,
    pub test_top1: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome<T> {
    pub best: TrainConfig,
    pub outcome: TrainOutcome,
    pub model: ViTModel<T>,
    pub bank: Option<AloreBank<T>>,
    pub trials: Vec<Trial>,
}

fn sorted_unique(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Trains every `(lr, weight_decay, dropout)` of `config.grid` from the same starting
/// weights and keeps the point with the best validation accuracy.
///
/// Ties go to the lower learning rate, then lower weight decay, then lower dropout.
/// Dropout values are collapsed to zero when no adapter bank is trained.
pub fn grid_search<T: Real>(
    model: &ViTModel<T>,
    bank: Option<&AloreBank<T>>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<GridOutcome<T>> {
    config.validate()?;
    let grid = &config.grid;
    if grid.lr.is_empty() || grid.weight_decay.is_empty() || grid.dropout.is_empty() {
        return Err(Error::Config("grid has an empty axis".into()));
    }
    let dropouts = if bank.is_some() && config.regime.trains_bank() {
        sorted_unique(&grid.dropout)
    } else {
        vec![config.dropout_p]
    };
    let mut best: Option<GridOutcome<T>> = None;
    let mut trials = Vec::new();
    for &lr in &sorted_unique(&grid.lr) {
        for &wd in &sorted_unique(&grid.weight_decay) {
            for &p in &dropouts {
                let point = TrainConfig {
                    lr,
                    weight_decay: wd,
                    dropout_p: p,
                    ..config.clone()
                };
                let mut m = model.clone();
                let mut b = bank.cloned();
                let outcome = train_loop(&mut m, b.as_mut(), dataset, &point)?;
                trials.push(Trial {
                    lr,
                    weight_decay: wd,
                    dropout_p: p,
                    best_val_top1: outcome.best_val_top1,
                    test_top1: outcome.test_top1,
                });
                if best
                    .as_ref()
                    .is_none_or(|g| outcome.best_val_top1 > g.outcome.best_val_top1)
                {
                    best = Some(GridOutcome {
                        best: point,
                        outcome,
                        model: m,
                        bank: b,
                        trials: Vec::new(),
                    });
                }
            }
        }
    }
    let mut best = best.expect("grid is nonempty");
    best.trials = trials;
    Ok(best)
}
