use rand::Rng;
use serde::{Deserialize, Serialize};

use super::topology::{IntersectionTopology, Movement};
use crate::error::{FieldError, Result};

pub const NUM_DRIVING_PARAMS: usize = 9;
pub const DRIVING_PARAM_RANGE: (f64, f64) = (0.0, 30.0);

/// Car-following and lane-changing parameters shared by every driver of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingBehavior {
    pub accel: f64,
    pub decel: f64,
    pub emergency_decel: f64,
    pub min_gap: f64,
    pub headway_tau: f64,
    pub speed_dev_sigma: f64,
    pub lc_cooperative: f64,
    pub lc_speed_gain: f64,
    pub lc_keep_right: f64,
}

pub const DRIVING_PARAM_NAMES: [&str; NUM_DRIVING_PARAMS] = [
    "accel",
    "decel",
    "emergency_decel",
    "min_gap",
    "headway_tau",
    "speed_dev_sigma",
    "lc_cooperative",
    "lc_speed_gain",
    "lc_keep_right",
];

impl Default for DrivingBehavior {
    fn default() -> Self {
        Self {
            accel: 2.6,
            decel: 4.5,
            emergency_decel: 9.0,
            min_gap: 2.5,
            headway_tau: 1.0,
            speed_dev_sigma: 0.1,
            lc_cooperative: 1.0,
            lc_speed_gain: 1.0,
            lc_keep_right: 1.0,
        }
    }
}

impl DrivingBehavior {
    pub fn to_array(&self) -> [f64; NUM_DRIVING_PARAMS] {
        [
            self.accel,
            self.decel,
            self.emergency_decel,
            self.min_gap,
            self.headway_tau,
            self.speed_dev_sigma,
            self.lc_cooperative,
            self.lc_speed_gain,
            self.lc_keep_right,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_DRIVING_PARAMS {
            return Err(crate::Error::Validation(vec![FieldError::new(
                "drv",
                format!("expected {NUM_DRIVING_PARAMS} values, got {}", v.len()),
            )]));
        }
        Ok(Self {
            accel: v[0],
            decel: v[1],
            emergency_decel: v[2],
            min_gap: v[3],
            headway_tau: v[4],
            speed_dev_sigma: v[5],
            lc_cooperative: v[6],
            lc_speed_gain: v[7],
            lc_keep_right: v[8],
        })
    }

    pub fn check(&self) -> Vec<FieldError> {
        let (lo, hi) = DRIVING_PARAM_RANGE;
        self.to_array()
            .iter()
            .zip(DRIVING_PARAM_NAMES)
            .filter(|(v, _)| !(lo..=hi).contains(*v))
            .map(|(v, name)| FieldError::new(format!("drv.{name}"), format!("{v} outside [{lo}, {hi}]")))
            .collect()
    }

    /// Samples each parameter uniformly from its range in `ranges`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, ranges: &BehaviorRanges) -> Self {
        let mut v = [0.0; NUM_DRIVING_PARAMS];
        for (slot, (lo, hi)) in v.iter_mut().zip(ranges.0) {
            *slot = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        Self::from_slice(&v).expect("nine values")
    }
}

/// Sampling range per driving parameter, in [`DRIVING_PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRanges(pub [(f64, f64); NUM_DRIVING_PARAMS]);

impl Default for BehaviorRanges {
    fn default() -> Self {
        Self([
            (1.5, 3.5),
            (3.5, 6.0),
            (7.0, 10.0),
            (1.5, 4.0),
            (0.6, 2.0),
            (0.0, 0.2),
            (0.0, 1.0),
            (0.0, 5.0),
            (0.0, 2.0),
        ])
    }
}

/// Turning-movement ratios: the raw movement-probability matrix and the
/// per-approach (left, through, right) split derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRatios {
    pub raw: Vec<Vec<f64>>,
    /// Indexed by approach direction index (N, E, S, W).
    pub reduced: [[f64; 3]; 4],
}

impl TurnRatios {
    /// Sums each approach row over the column groups of each movement, then
    /// renormalizes the triple. Approaches missing from the topology, or with
    /// an all-zero row, default to all-through.
    pub fn reduce(raw: &[Vec<f64>], topo: &IntersectionTopology) -> [[f64; 3]; 4] {
        let mut reduced = [[0.0, 1.0, 0.0]; 4];
        for a in &topo.approaches {
            let row = &raw[a.tmc_row];
            let mut t = [0.0; 3];
            for m in Movement::ALL {
                t[m.index()] = a.tmc_columns.get(m).iter().map(|&c| row[c]).sum();
            }
            let total: f64 = t.iter().sum();
            if total > 0.0 {
                reduced[a.direction.index()] = t.map(|x| x / total);
            }
        }
        reduced
    }

    pub fn from_raw(raw: Vec<Vec<f64>>, topo: &IntersectionTopology) -> Result<Self> {
        let errs = check_raw(&raw, topo.tmc_size);
        if !errs.is_empty() {
            return Err(crate::Error::Validation(errs));
        }
        let reduced = Self::reduce(&raw, topo);
        Ok(Self { raw, reduced })
    }

    /// Expands per-approach triples into a raw matrix: each triple is split
    /// evenly over its movement's columns; all other rows are uniform.
    pub fn from_reduced(reduced: [[f64; 3]; 4], topo: &IntersectionTopology) -> Result<Self> {
        let errs = check_triples(&reduced);
        if !errs.is_empty() {
            return Err(crate::Error::Validation(errs));
        }
        let n = topo.tmc_size;
        let mut raw = vec![vec![1.0 / n as f64; n]; n];
        for a in &topo.approaches {
            let row = &mut raw[a.tmc_row];
            row.fill(0.0);
            let triple = reduced[a.direction.index()];
            let mut leftover = 0.0;
            for m in Movement::ALL {
                let cols = a.tmc_columns.get(m);
                if cols.is_empty() {
                    leftover += triple[m.index()];
                    continue;
                }
                for &c in cols {
                    row[c] += triple[m.index()] / cols.len() as f64;
                }
            }
            if leftover > 0.0 {
                let through = a.tmc_columns.get(Movement::Through);
                for &c in through {
                    row[c] += leftover / through.len() as f64;
                }
            }
        }
        Ok(Self { reduced: Self::reduce(&raw, topo), raw })
    }

    /// Random split per approach with movement shares drawn from `ranges`;
    /// non-approach rows get random stochastic rows.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, topo: &IntersectionTopology, ranges: &TurnRanges) -> Self {
        let n = topo.tmc_size;
        let mut raw: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();
        for a in &topo.approaches {
            let left = rng.random_range(ranges.left.0..=ranges.left.1);
            let right = rng.random_range(ranges.right.0..=ranges.right.1);
            let shares = [left, 1.0 - left - right, right];
            let row = &mut raw[a.tmc_row];
            row.fill(0.0);
            for m in Movement::ALL {
                let cols = a.tmc_columns.get(m);
                let weights: Vec<f64> = cols.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let ws: f64 = weights.iter().sum();
                for (&c, w) in cols.iter().zip(weights) {
                    row[c] += shares[m.index()] * w / ws;
                }
            }
        }
        let reduced = Self::reduce(&raw, topo);
        Self { raw, reduced }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRanges {
    pub left: (f64, f64),
    pub right: (f64, f64),
}

impl Default for TurnRanges {
    fn default() -> Self {
        Self { left: (0.05, 0.3), right: (0.05, 0.25) }
    }
}

pub fn check_triples(reduced: &[[f64; 3]; 4]) -> Vec<FieldError> {
    let mut errs = Vec::new();
    for (i, t) in reduced.iter().enumerate() {
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            errs.push(FieldError::new(format!("turn_ratios[{i}]"), "entries must lie in [0, 1]"));
        } else if (t.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            errs.push(FieldError::new(format!("turn_ratios[{i}]"), "left/through/right must sum to 1"));
        }
    }
    errs
}

pub fn check_raw(raw: &[Vec<f64>], size: usize) -> Vec<FieldError> {
    let mut errs = Vec::new();
    if raw.len() != size || raw.iter().any(|r| r.len() != size) {
        errs.push(FieldError::new("tmc", format!("expected a {size}x{size} matrix")));
        return errs;
    }
    for (i, row) in raw.iter().enumerate() {
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            errs.push(FieldError::new(format!("tmc[{i}]"), "entries must lie in [0, 1]"));
        } else if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(FieldError::new(format!("tmc[{i}]"), "row must sum to 1"));
        }
    }
    errs
}
