//! Request/response types and handlers behind the CLI `predict` command and
//! the HTTP API.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::model::{Mode, Mtdt};
use crate::norm::NormalizationSpec;
use crate::sim::behavior::{check_raw, check_triples, DrivingBehavior, TurnRatios};
use crate::sim::signal::SignalTimingPlan;
use crate::sim::topology::IntersectionTopology;
use crate::sim::{
    run_scenario, Demand, Scenario, SimulationRecord, MAX_BUCKET_COUNT, MAX_STOP_LANES, WINDOW_BUCKETS,
};

pub const DEFAULT_WINDOW_START: u32 = 300;
pub const MAX_DEMAND: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestMode {
    /// Responds with simulated ground truth.
    Simulate,
    /// Responds with model estimates.
    #[default]
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Intersection id from the topology registry.
    pub topology: String,
    pub plan: SignalTimingPlan,
    pub drv: DrivingBehavior,
    /// Per-approach (left, through, right) shares, indexed N, E, S, W.
    #[serde(default)]
    pub turn_ratios: Option<[[f64; 3]; 4]>,
    /// Full turning-movement matrix; alternative to `turn_ratios`.
    #[serde(default)]
    pub tmc: Option<Vec<Vec<f64>>>,
    /// Observed stop-bar counts, 48×80. Simulated when absent.
    #[serde(default)]
    pub stp: Option<Vec<Vec<u8>>>,
    /// Arrivals per second for each approach, N, E, S, W.
    pub demand: [f64; 4],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub window_start: Option<u32>,
    #[serde(default)]
    pub mode: RequestMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetadata {
    pub checkpoint_id: Option<String>,
    pub intersection: String,
    pub seed: u64,
    pub mode: RequestMode,
    /// Where ext/inf come from: "model" or "simulation".
    pub waveform_source: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub ext: Vec<Vec<f64>>,
    pub inf: Vec<Vec<f64>>,
    pub ql: Vec<Vec<f64>>,
    pub tt: Vec<Vec<f64>>,
    pub ext_phase: Vec<Vec<f64>>,
    pub inf_phase: Vec<Vec<f64>>,
    pub metadata: ResponseMetadata,
}

/// Known intersections, keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyRegistry {
    pub topologies: Vec<IntersectionTopology>,
}

impl Default for TopologyRegistry {
    fn default() -> Self {
        Self { topologies: IntersectionTopology::default_family() }
    }
}

impl TopologyRegistry {
    pub fn get(&self, id: &str) -> Option<&IntersectionTopology> {
        self.topologies.iter().find(|t| t.intersection_id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.topologies.iter().map(|t| t.intersection_id.clone()).collect()
    }
}

impl PredictRequest {
    /// Every problem with the request, as field-level messages.
    pub fn check(&self, registry: &TopologyRegistry) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let topo = registry.get(&self.topology);
        if topo.is_none() {
            errs.push(FieldError::new("topology", format!("unknown intersection {:?}", self.topology)));
        }
        errs.extend(self.plan.check());
        errs.extend(self.drv.check());
        match (&self.turn_ratios, &self.tmc) {
            (Some(t), None) => errs.extend(check_triples(t)),
            (None, Some(raw)) => {
                if let Some(topo) = topo {
                    errs.extend(check_raw(raw, topo.tmc_size));
                }
            }
            _ => errs.push(FieldError::new("turn_ratios", "give exactly one of turn_ratios or tmc")),
        }
        if let Some(stp) = &self.stp {
            if stp.len() != MAX_STOP_LANES || stp.iter().any(|r| r.len() != WINDOW_BUCKETS) {
                errs.push(FieldError::new("stp", format!("expected a {MAX_STOP_LANES}x{WINDOW_BUCKETS} matrix")));
            } else if stp.iter().flatten().any(|&v| v > MAX_BUCKET_COUNT) {
                errs.push(FieldError::new("stp", format!("counts must not exceed {MAX_BUCKET_COUNT}")));
            }
        }
        for (i, d) in self.demand.iter().enumerate() {
            if !(0.0..=MAX_DEMAND).contains(d) {
                errs.push(FieldError::new(format!("demand[{i}]"), format!("{d} outside [0, {MAX_DEMAND}] veh/s")));
            }
        }
        errs
    }

    pub fn validate(&self, registry: &TopologyRegistry) -> Result<()> {
        let errs = self.check(registry);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn scenario(&self, registry: &TopologyRegistry) -> Result<Scenario> {
        self.validate(registry)?;
        let topology = registry.get(&self.topology).expect("validated").clone();
        let ratios = match (&self.turn_ratios, &self.tmc) {
            (Some(t), _) => TurnRatios::from_reduced(*t, &topology)?,
            (_, Some(raw)) => TurnRatios::from_raw(raw.clone(), &topology)?,
            _ => unreachable!("validated"),
        };
        Ok(Scenario {
            topology,
            plan: self.plan.clone(),
            drv: self.drv,
            ratios,
            demand: Demand(self.demand),
            seed: self.seed,
            window_start: self.window_start.unwrap_or(DEFAULT_WINDOW_START),
        })
    }
}

/// Ground-truth record for the request's scenario. A supplied `stp` replaces the simulated one.
pub fn simulate(req: &PredictRequest, registry: &TopologyRegistry) -> Result<SimulationRecord> {
    let (mut record, _) = run_scenario(&req.scenario(registry)?)?;
    if let Some(stp) = &req.stp {
        record.stp = stp.clone();
    }
    Ok(record)
}

fn to_f64<T: Copy + Into<f64>>(rows: &[Vec<T>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v.into()).collect()).collect()
}

fn phase_view(rows: &[Vec<f64>], groups: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let t = crate::tensor::Tensor::from_rows(rows)?;
    Ok(crate::model::aggregate_to_phases(&t, groups)?.to_rows())
}

/// Model estimates (or simulated truth in simulate mode) for the request.
pub fn predict(req: &PredictRequest, model: Option<&Mtdt>, registry: &TopologyRegistry) -> Result<PredictResponse> {
    let start = Instant::now();
    let record = simulate(req, registry)?;
    let topo = registry.get(&req.topology).expect("validated");
    let phase_map = model.map_or(&topo.phase_map, |m| &m.phase_map);

    let (ext, inf, ql, tt, source) = match (req.mode, model) {
        (RequestMode::Simulate, _) => {
            (to_f64(&record.ext), to_f64(&record.inf), to_f64(&record.ql), to_f64(&record.tt), "simulation")
        }
        (RequestMode::Inference, None) => {
            return Err(Error::Contract("no checkpoint loaded".into()));
        }
        (RequestMode::Inference, Some(m)) => {
            if !m.has_gat() && req.stp.is_some() {
                return Err(Error::Validation(vec![FieldError::new(
                    "stp",
                    "this checkpoint reads ground-truth exit and inflow waveforms; omit stp so they can be simulated",
                )]));
            }
            let mode = if m.has_gat() { Mode::Inference } else { Mode::Training };
            let p = m.predict(&record, mode)?;
            match (p.ext, p.inf) {
                (Some(e), Some(i)) => (e, i, p.ql, p.tt, "model"),
                _ => (to_f64(&record.ext), to_f64(&record.inf), p.ql, p.tt, "simulation"),
            }
        }
    };
    let ext_phase = phase_view(&ext, &phase_map.exit)?;
    let inf_phase = phase_view(&inf, &phase_map.inflow)?;
    Ok(PredictResponse {
        ext,
        inf,
        ql,
        tt,
        ext_phase,
        inf_phase,
        metadata: ResponseMetadata {
            checkpoint_id: model.filter(|_| req.mode == RequestMode::Inference).map(|m| m.checkpoint_id()),
            intersection: req.topology.clone(),
            seed: req.seed,
            mode: req.mode,
            waveform_source: source.into(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint_id: String,
    pub variant: crate::model::Variant,
    pub shapes: BTreeMap<String, [usize; 2]>,
    pub num_parameters: usize,
    pub normalization: NormalizationSpec,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn model_info(model: &Mtdt, meta: BTreeMap<String, serde_json::Value>) -> ModelInfo {
    ModelInfo {
        checkpoint_id: model.checkpoint_id(),
        variant: model.config.variant,
        shapes: model.output_shapes().into_iter().collect(),
        num_parameters: model.params.num_scalars(),
        normalization: model.norm.clone(),
        meta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub id: String,
    pub approaches: usize,
    pub stop_lanes: usize,
    pub exit_lanes: usize,
    pub inflow_lanes: usize,
    pub tmc_size: usize,
}

pub fn topology_summaries(registry: &TopologyRegistry) -> Vec<TopologySummary> {
    registry
        .topologies
        .iter()
        .map(|t| TopologySummary {
            id: t.intersection_id.clone(),
            approaches: t.approaches.len(),
            stop_lanes: t.stop_lanes.len(),
            exit_lanes: t.exit_lanes.len(),
            inflow_lanes: t.inflow_lanes.len(),
            tmc_size: t.tmc_size,
        })
        .collect()
}

/// A valid request for `topology` with a fixed mid-range plan and behavior.
pub fn example_request(topology: &str) -> PredictRequest {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    PredictRequest {
        topology: topology.into(),
        plan: SignalTimingPlan::random(&mut rng, &Default::default()),
        drv: DrivingBehavior::random(&mut rng, &Default::default()),
        turn_ratios: Some([[0.2, 0.6, 0.2]; 4]),
        tmc: None,
        stp: None,
        demand: [0.15; 4],
        seed: 7,
        window_start: None,
        mode: RequestMode::Inference,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::{NUM_PHASES, TT_BINS};

    fn registry() -> TopologyRegistry {
        TopologyRegistry::default()
    }

    fn small_model(variant: crate::model::Variant) -> Mtdt {
        let topo = &registry().topologies[0];
        let data = crate::sim::generate_dataset(&Default::default(), 4, 1).unwrap();
        let cfg = ModelConfig { variant, hidden: 8, conv_channels: [4, 4, 4], ..Default::default() };
        Mtdt::new(cfg, topo, NormalizationSpec::fit(&data), 1).unwrap()
    }

    #[test]
    fn example_request_is_valid() {
        assert!(example_request("isc-01").check(&registry()).is_empty());
    }

    #[test]
    fn out_of_range_cycle_is_a_field_error() {
        let mut req = example_request("isc-01");
        req.plan.cycle_length = 500;
        let errs = req.check(&registry());
        assert!(errs.iter().any(|e| e.field == "plan.cycle_length" && e.message.contains("[120, 240]")), "{errs:?}");
    }

    #[test]
    fn field_errors_accumulate() {
        let mut req = example_request("nowhere");
        req.tmc = Some(vec![]);
        req.demand[2] = -1.0;
        req.stp = Some(vec![vec![0; 80]; 3]);
        let fields: Vec<String> = req.check(&registry()).into_iter().map(|e| e.field).collect();
        for f in ["topology", "turn_ratios", "demand[2]", "stp"] {
            assert!(fields.contains(&f.to_string()), "{fields:?}");
        }
    }

    #[test]
    fn zero_demand_simulates_to_zero_waveforms() {
        let mut req = example_request("isc-02");
        req.demand = [0.0; 4];
        req.mode = RequestMode::Simulate;
        let resp = predict(&req, None, &registry()).unwrap();
        assert!(resp.ext.iter().chain(&resp.inf).chain(&resp.ql).flatten().all(|&v| v == 0.0));
        assert_eq!(resp.metadata.checkpoint_id, None);
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let model = small_model(crate::model::Variant::Mtdt);
        let req = example_request("isc-01");
        let a = predict(&req, Some(&model), &registry()).unwrap();
        let b = predict(&req, Some(&model), &registry()).unwrap();
        assert_eq!((a.ext.len(), a.inf.len(), a.ql.len(), a.tt.len()), (16, 12, NUM_PHASES, NUM_PHASES));
        assert!(a.ext.iter().chain(&a.inf).chain(&a.ql).all(|r| r.len() == WINDOW_BUCKETS));
        assert!(a.tt.iter().all(|r| r.len() == TT_BINS));
        assert!(a.ql.iter().flatten().all(|&v| v >= 0.0));
        assert_eq!((a.ext_phase.len(), a.inf_phase.len()), (NUM_PHASES, NUM_PHASES));
        assert_eq!((a.ext, a.ql, a.tt), (b.ext, b.ql, b.tt));
        assert_eq!(a.metadata.checkpoint_id, Some(model.checkpoint_id()));
        assert!(predict(&req, None, &registry()).is_err());
    }

    #[test]
    fn moe_checkpoint_requires_simulated_ground_truth() {
        let model = small_model(crate::model::Variant::Moe);
        let mut req = example_request("isc-01");
        let resp = predict(&req, Some(&model), &registry()).unwrap();
        assert_eq!(resp.metadata.waveform_source, "simulation");
        req.stp = Some(vec![vec![0; 80]; 48]);
        assert!(matches!(predict(&req, Some(&model), &registry()), Err(Error::Validation(_))));
    }

    #[test]
    fn request_json_roundtrip() {
        let req = example_request("isc-03");
        let s = serde_json::to_string(&req).unwrap();
        assert_eq!(serde_json::from_str::<PredictRequest>(&s).unwrap(), req);
    }
}
