//! Multi-task training: normalization, per-task losses, splits, weight-decay
//! grid search and best-epoch selection.

mod loss;
mod split;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{cross_entropy_loss, mse_loss, soft_targets, task_losses, total_loss};
pub use split::{split, Split};

use crate::error::{config_err, contract_err, Result};
use crate::model::{ModelConfig, Mode, Mtdt, Prediction, Variant};
use crate::norm::{NormalizationSpec, Task};
use crate::sim::topology::IntersectionTopology;
use crate::sim::SimulationRecord;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay_grid: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub split: [f64; 3],
    pub tasks: Vec<Task>,
    /// Train on this intersection only.
    pub intersection: Option<String>,
    pub model: ModelConfig,
    /// Topology file describing the lane layout; the built-in family when absent.
    pub topology: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay_grid: vec![0.0, 1e-4, 1e-3],
            batch_size: 16,
            seed: 0,
            split: [0.75, 0.15, 0.10],
            tasks: Task::ALL.to_vec(),
            intersection: None,
            model: ModelConfig::default(),
            topology: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("learning_rate must be >= 0 and momentum in [0, 1)"));
        }
        if self.weight_decay_grid.is_empty() || self.weight_decay_grid.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(config_err!("weight_decay_grid needs at least one non-negative value"));
        }
        if self.tasks.is_empty() {
            return Err(config_err!("no tasks enabled"));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions must sum to 1"));
        }
        self.model.validate()
    }

    /// Tasks the configured variant can train.
    pub fn active_tasks(&self) -> Vec<Task> {
        self.tasks
            .iter()
            .copied()
            .filter(|t| self.model.variant == Variant::Mtdt || matches!(t, Task::Ql | Task::Tt))
            .collect()
    }
}

/// Mean loss per task and their total over a set of records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub parts: BTreeMap<Task, f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train: TaskLosses,
    pub val: Option<TaskLosses>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPointReport {
    pub weight_decay: f64,
    pub epochs: Vec<EpochLosses>,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub grid: Vec<GridPointReport>,
    pub selected_weight_decay: f64,
    pub best_epoch: usize,
    /// Per-epoch losses of the selected grid point.
    pub epochs: Vec<EpochLosses>,
    pub split_sizes: [usize; 3],
    pub split: Split,
    pub checkpoint_id: String,
}

impl TrainReport {
    /// Loss used for selection at an epoch: validation total, or training
    /// total when there is no validation split.
    pub fn selection_loss(e: &EpochLosses) -> f64 {
        e.val.as_ref().map_or(e.train.total, |v| v.total)
    }
}

struct RecordResult {
    losses: BTreeMap<Task, f64>,
    total: f64,
    grads: Option<Vec<Tensor>>,
}

fn run_record(model: &Mtdt, record: &SimulationRecord, tasks: &[Task], with_grad: bool) -> Result<RecordResult> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, with_grad);
    let out = model.forward(&mut tape, &bound, record, Mode::Training)?;
    let parts = task_losses(&mut tape, model, &out, record, tasks)?;
    let vars: Vec<_> = parts.values().copied().collect();
    let total = total_loss(&mut tape, &vars)?;
    let losses = parts.iter().map(|(&t, &v)| (t, tape.value(v).data()[0])).collect();
    let total_value = tape.value(total).data()[0];
    let grads = if with_grad {
        let g = tape.backward(total)?;
        Some(bound.vars().into_iter().map(|v| g.wrt(v)).collect())
    } else {
        None
    };
    Ok(RecordResult { losses, total: total_value, grads })
}

fn mean_losses(results: &[RecordResult]) -> TaskLosses {
    let n = results.len().max(1) as f64;
    let mut parts: BTreeMap<Task, f64> = BTreeMap::new();
    let mut total = 0.0;
    for r in results {
        for (&t, &v) in &r.losses {
            *parts.entry(t).or_default() += v / n;
        }
        total += r.total / n;
    }
    TaskLosses { parts, total }
}

/// Mean per-task losses of `model` over `records`, teacher-forced.
pub fn evaluate_losses(model: &Mtdt, records: &[&SimulationRecord], tasks: &[Task]) -> Result<TaskLosses> {
    let results: Vec<RecordResult> =
        records.par_iter().map(|r| run_record(model, r, tasks, false)).collect::<Result<_>>()?;
    Ok(mean_losses(&results))
}

/// Predictions for every record, in record order.
pub fn predict_all(model: &Mtdt, records: &[SimulationRecord], mode: Mode) -> Result<Vec<Prediction>> {
    records.par_iter().map(|r| model.predict(r, mode)).collect()
}

fn train_grid_point(
    mut model: Mtdt,
    train: &[&SimulationRecord],
    val: &[&SimulationRecord],
    config: &TrainConfig,
    tasks: &[Task],
    weight_decay: f64,
) -> (GridPointReport, Option<Mtdt>) {
    let mut report =
        GridPointReport { weight_decay, epochs: Vec::new(), best_epoch: None, best_loss: None, failure: None };
    let mut velocity: Vec<Tensor> = model.params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut best: Option<Mtdt> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let results: Result<Vec<RecordResult>> =
                batch.par_iter().map(|&i| run_record(&model, train[i], tasks, true)).collect();
            let results = match results {
                Ok(r) => r,
                Err(e) => {
                    report.failure = Some(format!("epoch {epoch}: {e}"));
                    return (report, best);
                }
            };
            if results.iter().any(|r| !r.total.is_finite()) {
                report.failure = Some(format!("epoch {epoch}: loss diverged"));
                return (report, best);
            }
            let scale = 1.0 / results.len() as f64;
            for (k, (param, vel)) in model.params.tensors_mut().into_iter().zip(&mut velocity).enumerate() {
                let mut grad = vec![0.0; param.len()];
                for r in &results {
                    for (g, x) in grad.iter_mut().zip(r.grads.as_ref().expect("gradients requested")[k].data()) {
                        *g += x;
                    }
                }
                for ((g, v), p) in grad.iter().zip(vel.data_mut()).zip(param.data_mut()) {
                    let g = g * scale + weight_decay * *p;
                    *v = config.momentum * *v + g;
                    *p -= config.learning_rate * *v;
                }
            }
        }
        if !model.params.is_finite() {
            report.failure = Some(format!("epoch {epoch}: parameters diverged"));
            return (report, best);
        }
        let eval = |set: &[&SimulationRecord]| evaluate_losses(&model, set, tasks);
        let train_losses = match eval(train) {
            Ok(l) => l,
            Err(e) => {
                report.failure = Some(format!("epoch {epoch}: {e}"));
                return (report, best);
            }
        };
        let val_losses = if val.is_empty() { None } else { eval(val).ok() };
        let entry = EpochLosses { epoch, train: train_losses, val: val_losses };
        let loss = TrainReport::selection_loss(&entry);
        if !loss.is_finite() {
            report.failure = Some(format!("epoch {epoch}: loss diverged"));
            report.epochs.push(entry);
            return (report, best);
        }
        if report.best_loss.is_none_or(|b| loss < b) {
            report.best_loss = Some(loss);
            report.best_epoch = Some(epoch);
            best = Some(model.clone());
        }
        log::info!("wd={weight_decay} epoch {epoch}: train {:.5} select {loss:.5}", entry.train.total);
        report.epochs.push(entry);
    }
    (report, best)
}

/// Trains on `dataset` and returns the best model over the weight-decay grid
/// and all epochs, selected by validation loss.
pub fn train(
    dataset: &[SimulationRecord],
    config: &TrainConfig,
    topology: &IntersectionTopology,
) -> Result<(Mtdt, TrainReport)> {
    config.validate()?;
    let records: Vec<&SimulationRecord> = match &config.intersection {
        Some(isc) => dataset.iter().filter(|r| &r.isc == isc).collect(),
        None => dataset.iter().collect(),
    };
    if records.len() < 4 {
        return Err(contract_err!("training needs at least 4 records, got {}", records.len()));
    }
    let sp = split(records.len(), config.split, config.seed)?;
    let train_set: Vec<&SimulationRecord> = sp.train.iter().map(|&i| records[i]).collect();
    let val_set: Vec<&SimulationRecord> = sp.val.iter().map(|&i| records[i]).collect();
    let owned: Vec<SimulationRecord> = train_set.iter().map(|r| (*r).clone()).collect();
    let norm = NormalizationSpec::fit(&owned);
    let tasks = config.active_tasks();
    if tasks.is_empty() {
        return Err(config_err!("no enabled task is available for the {:?} variant", config.model.variant));
    }

    let mut grid = Vec::new();
    let mut winner: Option<(f64, usize, Mtdt)> = None;
    for &wd in &config.weight_decay_grid {
        let model = Mtdt::new(config.model.clone(), topology, norm.clone(), config.seed)?;
        let (report, best) = train_grid_point(model, &train_set, &val_set, config, &tasks, wd);
        if let Some(f) = &report.failure {
            log::warn!("weight decay {wd}: {f}");
        }
        if let (Some(loss), Some(model)) = (report.best_loss, best) {
            if winner.as_ref().is_none_or(|(l, _, _)| loss < *l) {
                winner = Some((loss, grid.len(), model));
            }
        }
        grid.push(report);
    }
    let Some((_, idx, model)) = winner else {
        return Err(contract_err!("every grid point failed"));
    };
    let selected = &grid[idx];
    let report = TrainReport {
        selected_weight_decay: selected.weight_decay,
        best_epoch: selected.best_epoch.unwrap_or(0),
        epochs: selected.epochs.clone(),
        split_sizes: [sp.train.len(), sp.val.len(), sp.test.len()],
        split: sp,
        checkpoint_id: model.checkpoint_id(),
        grid,
    };
    Ok((model, report))
}
