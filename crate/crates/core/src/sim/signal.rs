use rand::Rng;
use serde::{Deserialize, Serialize};

use super::topology::NUM_PHASES;
use super::{BUCKET_SECONDS, WINDOW_BUCKETS};
use crate::error::{contract_err, FieldError, Result};

/// Phase order within each ring and barrier group: lefts lead.
pub const RING_A: [[u8; 2]; 2] = [[1, 2], [3, 4]];
pub const RING_B: [[u8; 2]; 2] = [[5, 6], [7, 8]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalState {
    Green,
    Yellow,
    Red,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub green: u32,
    pub yellow: u32,
    pub red: u32,
    pub min_green: u32,
    pub max_green: u32,
}

impl PhaseTiming {
    pub fn span(&self) -> u32 {
        self.green + self.yellow + self.red
    }
}

/// Ring-and-barrier plan with a common cycle. All times are whole seconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalTimingPlan {
    pub cycle_length: u32,
    pub offset: u32,
    /// Time from cycle start to the barrier between phases {1,2,5,6} and {3,4,7,8}.
    pub barrier_time: u32,
    /// Timing of phases 1 through 8.
    pub phases: [PhaseTiming; NUM_PHASES],
}

/// Ranges used when sampling plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRanges {
    pub cycle_min: u32,
    pub cycle_max: u32,
    /// Share of the cycle given to the major barrier group.
    pub barrier_fraction: (f64, f64),
    pub left_green: (u32, u32),
    pub yellow: u32,
    pub red: u32,
    pub min_green: u32,
    pub max_green: u32,
}

impl Default for PlanRanges {
    fn default() -> Self {
        Self {
            cycle_min: 120,
            cycle_max: 240,
            barrier_fraction: (0.6, 0.98),
            left_green: (5, 25),
            yellow: 4,
            red: 2,
            min_green: 5,
            max_green: 240,
        }
    }
}

pub const CYCLE_RANGE: (u32, u32) = (120, 240);

impl SignalTimingPlan {
    pub fn timing(&self, phase: u8) -> &PhaseTiming {
        &self.phases[phase as usize - 1]
    }

    fn ring_of(phase: u8) -> [[u8; 2]; 2] {
        if phase <= 4 {
            RING_A
        } else {
            RING_B
        }
    }

    /// Start of `phase`'s green interval measured from cycle start.
    pub fn green_start(&self, phase: u8) -> u32 {
        let ring = Self::ring_of(phase);
        let (group, pos) = if ring[0].contains(&phase) { (0, ring[0]) } else { (1, ring[1]) };
        let mut start = if group == 0 { 0 } else { self.barrier_time };
        for p in pos {
            if p == phase {
                break;
            }
            start += self.timing(p).span();
        }
        start
    }

    /// Indication of `phase` during second `t` of the scenario.
    pub fn state(&self, phase: u8, t: u32) -> SignalState {
        let c = self.cycle_length as i64;
        let tau = (t as i64 - self.offset as i64).rem_euclid(c) as u32;
        let timing = self.timing(phase);
        let start = self.green_start(phase);
        if tau >= start && tau < start + timing.green {
            SignalState::Green
        } else if tau >= start + timing.green && tau < start + timing.green + timing.yellow {
            SignalState::Yellow
        } else {
            SignalState::Red
        }
    }

    pub fn is_green(&self, phase: u8, t: u32) -> bool {
        self.state(phase, t) == SignalState::Green
    }

    /// Structural problems with the plan, as field-level messages.
    pub fn check(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.cycle_length == 0 {
            errs.push(FieldError::new("plan.cycle_length", "must be positive"));
            return errs;
        }
        let (lo, hi) = CYCLE_RANGE;
        if !(lo..=hi).contains(&self.cycle_length) {
            errs.push(FieldError::new(
                "plan.cycle_length",
                format!("{} s outside [{lo}, {hi}] s", self.cycle_length),
            ));
            return errs;
        }
        if self.barrier_time > self.cycle_length {
            errs.push(FieldError::new("plan.barrier_time", "must not exceed the cycle length"));
            return errs;
        }
        for (name, ring) in [("A", RING_A), ("B", RING_B)] {
            let g1: u32 = ring[0].iter().map(|&p| self.timing(p).span()).sum();
            let g2: u32 = ring[1].iter().map(|&p| self.timing(p).span()).sum();
            if g1 != self.barrier_time {
                errs.push(FieldError::new(
                    "plan.phases",
                    format!("ring {name}: phases before the barrier span {g1} s, barrier is at {} s", self.barrier_time),
                ));
            }
            if g2 != self.cycle_length - self.barrier_time {
                errs.push(FieldError::new(
                    "plan.phases",
                    format!(
                        "ring {name}: phases after the barrier span {g2} s, expected {} s",
                        self.cycle_length - self.barrier_time
                    ),
                ));
            }
        }
        for (i, t) in self.phases.iter().enumerate() {
            if t.green > 0 && (t.green < t.min_green || t.green > t.max_green) {
                errs.push(FieldError::new(
                    format!("plan.phases[{i}].green"),
                    format!("green {} outside [{}, {}]", t.green, t.min_green, t.max_green),
                ));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.check();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Validation(errs))
        }
    }

    /// Samples a plan: random common cycle, barrier split, left-turn greens and offset.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, ranges: &PlanRanges) -> Self {
        let cycle = rng.random_range(ranges.cycle_min..=ranges.cycle_max);
        let clearance = ranges.yellow + ranges.red;
        // Each barrier group must hold two phases at minimum green.
        let group_min = 2 * (ranges.min_green + clearance);
        let frac = rng.random_range(ranges.barrier_fraction.0..=ranges.barrier_fraction.1);
        let barrier = ((cycle as f64 * frac).round() as u32).clamp(group_min, cycle - group_min);

        let mut phases = [PhaseTiming {
            green: 0,
            yellow: ranges.yellow,
            red: ranges.red,
            min_green: ranges.min_green,
            max_green: ranges.max_green,
        }; NUM_PHASES];
        for ring in [RING_A, RING_B] {
            for (g, [left, through]) in ring.into_iter().enumerate() {
                let length = if g == 0 { barrier } else { cycle - barrier };
                let room = length - 2 * clearance - ranges.min_green;
                let hi = ranges.left_green.1.min(room).max(ranges.left_green.0);
                let lo = ranges.left_green.0.min(hi);
                let left_green = rng.random_range(lo..=hi);
                phases[left as usize - 1].green = left_green;
                phases[through as usize - 1].green = length - 2 * clearance - left_green;
            }
        }
        let offset = rng.random_range(0..cycle);
        Self {
            cycle_length: cycle,
            offset,
            barrier_time: barrier,
            phases,
        }
    }
}

/// Discretizes a plan into the 8×(window/5) binary matrix: a bucket is green
/// for a phase when the phase is green for the majority of its seconds.
pub fn render_signal(plan: &SignalTimingPlan, start: u32, window_seconds: u32) -> Result<Vec<Vec<u8>>> {
    if window_seconds == 0 || !window_seconds.is_multiple_of(BUCKET_SECONDS) {
        return Err(contract_err!(
            "window of {window_seconds} s is not a whole number of {BUCKET_SECONDS}-s buckets"
        ));
    }
    let buckets = (window_seconds / BUCKET_SECONDS) as usize;
    let mut sig = vec![vec![0u8; buckets]; NUM_PHASES];
    for (p, row) in sig.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let t0 = start + b as u32 * BUCKET_SECONDS;
            let green = (t0..t0 + BUCKET_SECONDS)
                .filter(|&t| plan.is_green(p as u8 + 1, t))
                .count() as u32;
            *cell = u8::from(2 * green > BUCKET_SECONDS);
        }
    }
    Ok(sig)
}

/// Renders the standard 80-bucket window.
pub fn render_window(plan: &SignalTimingPlan, start: u32) -> Vec<Vec<u8>> {
    render_signal(plan, start, WINDOW_BUCKETS as u32 * BUCKET_SECONDS)
        .expect("standard window is bucket aligned")
}
