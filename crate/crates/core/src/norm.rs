//! Per-task output normalization.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::sim::SimulationRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ext,
    Inf,
    Ql,
    Tt,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ext, Task::Inf, Task::Ql, Task::Tt];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ext => "ext",
            Task::Inf => "inf",
            Task::Ql => "ql",
            Task::Tt => "tt",
        }
    }

    /// Values of this task's target in a record, flattened row-major.
    pub fn values(self, r: &SimulationRecord) -> Vec<f64> {
        match self {
            Task::Ext => r.ext.iter().flatten().map(|&v| v as f64).collect(),
            Task::Inf => r.inf.iter().flatten().map(|&v| v as f64).collect(),
            Task::Ql => r.ql.iter().flatten().map(|&v| v as f64).collect(),
            Task::Tt => r.tt.iter().flatten().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    MinMax,
    /// `log1p` forward, `expm1` back.
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskNorm {
    pub kind: NormKind,
    pub min: f64,
    pub max: f64,
    pub fitted: bool,
}

impl TaskNorm {
    pub fn unfitted(kind: NormKind) -> Self {
        Self { kind, min: 0.0, max: 0.0, fitted: false }
    }

    pub fn fit(kind: NormKind, values: impl IntoIterator<Item = f64>) -> Self {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min > max {
            return Self { kind, min: 0.0, max: 0.0, fitted: true };
        }
        Self { kind, min, max, fitted: true }
    }

    pub fn is_degenerate(&self) -> bool {
        self.kind == NormKind::MinMax && self.max <= self.min
    }

    fn ensure_fitted(&self) -> Result<()> {
        if self.fitted {
            Ok(())
        } else {
            Err(contract_err!("normalization used before it was fitted"))
        }
    }

    pub fn normalize(&self, y: f64) -> Result<f64> {
        self.ensure_fitted()?;
        Ok(match self.kind {
            NormKind::Log => y.ln_1p(),
            NormKind::MinMax if self.is_degenerate() => 0.0,
            NormKind::MinMax => (y - self.min) / (self.max - self.min),
        })
    }

    pub fn denormalize(&self, y: f64) -> Result<f64> {
        self.ensure_fitted()?;
        Ok(match self.kind {
            NormKind::Log => y.exp_m1(),
            NormKind::MinMax if self.is_degenerate() => self.min,
            NormKind::MinMax => y * (self.max - self.min) + self.min,
        })
    }

    pub fn normalize_all(&self, ys: &[f64]) -> Result<Vec<f64>> {
        ys.iter().map(|&y| self.normalize(y)).collect()
    }

    pub fn denormalize_all(&self, ys: &[f64]) -> Result<Vec<f64>> {
        ys.iter().map(|&y| self.denormalize(y)).collect()
    }
}

/// Normalization of all four task targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub ext: TaskNorm,
    pub inf: TaskNorm,
    pub ql: TaskNorm,
    pub tt: TaskNorm,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            ext: TaskNorm::unfitted(NormKind::MinMax),
            inf: TaskNorm::unfitted(NormKind::MinMax),
            ql: TaskNorm::unfitted(NormKind::Log),
            tt: TaskNorm::unfitted(NormKind::MinMax),
        }
    }
}

impl NormalizationSpec {
    /// Fits every task on `train` only.
    pub fn fit(train: &[SimulationRecord]) -> Self {
        let d = Self::default();
        let fit = |t: Task, n: TaskNorm| TaskNorm::fit(n.kind, train.iter().flat_map(|r| t.values(r)));
        Self {
            ext: fit(Task::Ext, d.ext),
            inf: fit(Task::Inf, d.inf),
            ql: fit(Task::Ql, d.ql),
            tt: fit(Task::Tt, d.tt),
        }
    }

    pub fn get(&self, t: Task) -> &TaskNorm {
        match t {
            Task::Ext => &self.ext,
            Task::Inf => &self.inf,
            Task::Ql => &self.ql,
            Task::Tt => &self.tt,
        }
    }

    pub fn normalize(&self, t: Task, y: &[f64]) -> Result<Vec<f64>> {
        self.get(t).normalize_all(y)
    }

    pub fn denormalize(&self, t: Task, y: &[f64]) -> Result<Vec<f64>> {
        self.get(t).denormalize_all(y)
    }
}
