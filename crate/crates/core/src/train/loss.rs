use std::collections::BTreeMap;

use crate::error::{contract_err, Result};
use crate::model::{ForwardOutput, Mtdt};
use crate::norm::Task;
use crate::sim::SimulationRecord;
use crate::tensor::{Tape, Tensor, Var};

/// Mean squared error between a prediction and a constant target.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.mse(pred, t)
}

/// Row-wise distributions of histogram counts; empty rows stay zero.
pub fn soft_targets(hist: &[Vec<f64>]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(hist.len());
    for (i, row) in hist.iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(contract_err!("histogram row {i} has a negative or non-finite count"));
        }
        let total: f64 = row.iter().sum();
        rows.push(if total > 0.0 { row.iter().map(|v| v / total).collect() } else { vec![0.0; row.len()] });
    }
    Tensor::from_rows(&rows)
}

/// Soft-target cross-entropy `-Σ p log softmax(logits)` per row, averaged over rows.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let rows = targets.shape()[0];
    let ls = tape.log_softmax(logits, 1)?;
    let p = tape.constant(targets.clone());
    let prod = tape.mul(p, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// Unweighted sum of the task losses.
pub fn total_loss(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Err(contract_err!("total loss needs at least one part"));
    };
    let mut total = first;
    for &p in rest {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

fn normalized(model: &Mtdt, task: Task, rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let t = Tensor::from_rows(&rows)?;
    Tensor::new(t.shape().to_vec(), model.norm.normalize(task, t.data())?)
}

fn as_f64<T: Copy + Into<f64>>(rows: &[Vec<T>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v.into()).collect()).collect()
}

/// Per-task losses of one forward pass against a record's targets. Tasks
/// whose module is absent are skipped.
pub fn task_losses(
    tape: &mut Tape,
    model: &Mtdt,
    out: &ForwardOutput,
    record: &SimulationRecord,
    tasks: &[Task],
) -> Result<BTreeMap<Task, Var>> {
    let mut parts = BTreeMap::new();
    for &task in tasks {
        let loss = match task {
            Task::Ext => match out.ext {
                Some(g) => mse_loss(tape, g.targets, &normalized(model, task, as_f64(&record.ext))?)?,
                None => continue,
            },
            Task::Inf => match out.inf {
                Some(g) => mse_loss(tape, g.targets, &normalized(model, task, as_f64(&record.inf))?)?,
                None => continue,
            },
            Task::Ql => mse_loss(tape, out.ql, &normalized(model, task, as_f64(&record.ql))?)?,
            Task::Tt => {
                let norm = normalized(model, task, as_f64(&record.tt))?;
                cross_entropy_loss(tape, out.tt, &soft_targets(&norm.to_rows())?)?
            }
        };
        parts.insert(task, loss);
    }
    Ok(parts)
}
