//! Random scenarios and the JSONL dataset built from them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::behavior::{BehaviorRanges, DrivingBehavior, TurnRanges, TurnRatios};
use super::engine::{simulate, Demand, VehicleTrace};
use super::extract::{compute_queue_series, compute_travel_time_hist, extract_waveforms};
use super::signal::{render_window, PlanRanges, SignalTimingPlan};
use super::topology::{IntersectionTopology, MAX_EXIT_LANES, MAX_INFLOW_LANES, MAX_STOP_LANES, NUM_PHASES};
use super::{TT_BINS, WINDOW_BUCKETS, WINDOW_SECONDS};
use crate::error::{config_err, contract_err, Result};

/// One 400-s observation window of one simulated scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub isc: String,
    pub sig: Vec<Vec<u8>>,
    pub tmc: Vec<Vec<f64>>,
    pub drv: Vec<f64>,
    pub stp: Vec<Vec<u8>>,
    pub ext: Vec<Vec<u8>>,
    pub inf: Vec<Vec<u8>>,
    pub ql: Vec<Vec<u32>>,
    pub tt: Vec<Vec<u32>>,
    pub seed: u64,
}

fn check_matrix<T>(name: &str, m: &[Vec<T>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(contract_err!("record field {name} must be {rows}x{cols}"));
    }
    Ok(())
}

impl SimulationRecord {
    pub fn check_shapes(&self, tmc_size: usize) -> Result<()> {
        check_matrix("sig", &self.sig, NUM_PHASES, WINDOW_BUCKETS)?;
        check_matrix("tmc", &self.tmc, tmc_size, tmc_size)?;
        check_matrix("stp", &self.stp, MAX_STOP_LANES, WINDOW_BUCKETS)?;
        check_matrix("ext", &self.ext, MAX_EXIT_LANES, WINDOW_BUCKETS)?;
        check_matrix("inf", &self.inf, MAX_INFLOW_LANES, WINDOW_BUCKETS)?;
        check_matrix("ql", &self.ql, NUM_PHASES, WINDOW_BUCKETS)?;
        check_matrix("tt", &self.tt, NUM_PHASES, TT_BINS)?;
        if self.drv.len() != super::NUM_DRIVING_PARAMS {
            return Err(contract_err!("record field drv must hold {} values", super::NUM_DRIVING_PARAMS));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub topology: IntersectionTopology,
    pub plan: SignalTimingPlan,
    pub drv: DrivingBehavior,
    pub ratios: TurnRatios,
    pub demand: Demand,
    pub seed: u64,
    /// First second of the observation window.
    pub window_start: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub topologies: Vec<IntersectionTopology>,
    pub plan: PlanRanges,
    pub behavior: BehaviorRanges,
    pub turns: TurnRanges,
    /// Range of the mean arrival rate per approach, vehicles/s.
    pub demand: (f64, f64),
    pub scenario_seconds: u32,
    pub warmup_seconds: u32,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            topologies: IntersectionTopology::default_family(),
            plan: PlanRanges::default(),
            behavior: BehaviorRanges::default(),
            turns: TurnRanges::default(),
            demand: (0.03, 0.4),
            scenario_seconds: 2400,
            warmup_seconds: 300,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topologies.is_empty() {
            return Err(config_err!("no topologies"));
        }
        for t in &self.topologies {
            t.validate()?;
        }
        if self.warmup_seconds + WINDOW_SECONDS > self.scenario_seconds {
            return Err(config_err!(
                "scenario of {} s cannot hold a {} s warmup and a {WINDOW_SECONDS} s window",
                self.scenario_seconds,
                self.warmup_seconds
            ));
        }
        if !(self.demand.0 >= 0.0 && self.demand.1 >= self.demand.0) {
            return Err(config_err!("invalid demand range {:?}", self.demand));
        }
        Ok(())
    }

    /// Draws the scenario for one record seed.
    pub fn sample_scenario(&self, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topology = self.topologies[rng.random_range(0..self.topologies.len())].clone();
        let plan = SignalTimingPlan::random(&mut rng, &self.plan);
        let drv = DrivingBehavior::random(&mut rng, &self.behavior);
        let ratios = TurnRatios::random(&mut rng, &topology, &self.turns);
        let base = rng.random_range(self.demand.0..=self.demand.1);
        let mut rates = [0.0; 4];
        for r in &mut rates {
            *r = base * rng.random_range(0.6..=1.2);
        }
        let window_start = rng.random_range(self.warmup_seconds..=self.scenario_seconds - WINDOW_SECONDS);
        Scenario { topology, plan, drv, ratios, demand: Demand(rates), seed: rng.random(), window_start }
    }
}

/// Simulates a scenario up to the end of its window and measures the window.
pub fn run_scenario(s: &Scenario) -> Result<(SimulationRecord, Vec<VehicleTrace>)> {
    let traces = simulate(
        &s.topology,
        &s.plan,
        &s.drv,
        &s.ratios,
        &s.demand,
        s.seed,
        s.window_start + WINDOW_SECONDS,
    );
    let w = extract_waveforms(&traces, s.window_start);
    let ql = compute_queue_series(&traces, &s.topology, s.window_start)?;
    let tt = compute_travel_time_hist(&traces, s.window_start);
    let record = SimulationRecord {
        isc: s.topology.intersection_id.clone(),
        sig: render_window(&s.plan, s.window_start),
        tmc: s.ratios.raw.clone(),
        drv: s.drv.to_array().to_vec(),
        stp: w.stp,
        ext: w.ext,
        inf: w.inf,
        ql,
        tt,
        seed: s.seed,
    };
    Ok((record, traces))
}

/// Record seeds drawn in sequence from the master seed, so record `i` does
/// not depend on how many records are requested.
pub fn record_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn generate_dataset(config: &GenerateConfig, n: usize, master_seed: u64) -> Result<Vec<SimulationRecord>> {
    config.validate()?;
    record_seeds(master_seed, n)
        .into_par_iter()
        .map(|seed| run_scenario(&config.sample_scenario(seed)).map(|(r, _)| r))
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[SimulationRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SimulationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SimulationRecord =
            serde_json::from_str(&line).map_err(|e| contract_err!("line {}: {e}", i + 1))?;
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_prefix_stable() {
        let cfg = GenerateConfig::default();
        let a = generate_dataset(&cfg, 4, 9).unwrap();
        let b = generate_dataset(&cfg, 2, 9).unwrap();
        assert_eq!(&a[..2], &b[..]);
        for r in &a {
            r.check_shapes(35).unwrap();
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = GenerateConfig::default();
        let recs = generate_dataset(&cfg, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["drv", "ext", "inf", "isc", "ql", "seed", "sig", "stp", "tmc", "tt"]);
    }

    #[test]
    fn waveforms_match_trace_counts() {
        let cfg = GenerateConfig::default();
        let s = cfg.sample_scenario(77);
        let (rec, traces) = run_scenario(&s).unwrap();
        let lo = s.window_start;
        let hi = lo + WINDOW_SECONDS;
        let in_window = |t: Option<u32>| t.is_some_and(|t| t >= lo && t < hi);
        for lane in 0..MAX_STOP_LANES {
            for b in 0..WINDOW_BUCKETS {
                let n = traces
                    .iter()
                    .filter(|tr| tr.stop_lane == lane)
                    .filter(|tr| tr.exit_time.is_some_and(|t| t >= lo + 5 * b as u32 && t < lo + 5 * b as u32 + 5))
                    .count();
                assert_eq!(rec.stp[lane][b] as usize, n.min(8));
            }
        }
        let completed = traces.iter().filter(|tr| in_window(tr.exit_time)).count();
        assert_eq!(rec.tt.iter().flatten().sum::<u32>() as usize, completed);
    }
}
