//! The MTDT network: two GAT modules imputing exit and inflow waveforms and
//! two CNN modules estimating queue length and travel-time histograms.

mod checkpoint;
mod cnn;
mod gat;
mod params;
mod phase;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_id, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use cnn::{cnn_forward, Head};
pub use gat::{gat_forward, GatOutput};
pub use params::{
    BoundParams, CnnModuleParams, CnnVars, GatModuleParams, GatVars, ModelConfig, ModelParameters, Variant,
    MTS_CHANNELS,
};
pub use phase::{aggregate_stop, aggregate_to_phases, build_mts, lane_phases};

use crate::error::Result;
use crate::graph::{build_exit_graph, build_inflow_graph, edge_feature_len, edge_features, GraphTemplate};
use crate::norm::{NormalizationSpec, Task};
use crate::sim::behavior::DRIVING_PARAM_RANGE;
use crate::sim::topology::{IntersectionTopology, PhaseMap};
use crate::sim::{SimulationRecord, MAX_BUCKET_COUNT, NUM_PHASES, TT_BINS, WINDOW_BUCKETS};
use crate::tensor::{Tape, Tensor, Var};

/// Driving parameters fed to the CNN modules: accel, lc_cooperative, min_gap.
pub const MTS_DRIVING_PARAMS: [usize; 3] = [0, 6, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Secondary modules read ground-truth ext/inf.
    Training,
    /// Secondary modules read the GAT predictions.
    Inference,
}

/// Normalized-space outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub ext: Option<GatOutput>,
    pub inf: Option<GatOutput>,
    /// 8×80, log-normalized.
    pub ql: Var,
    /// 8×200 logits.
    pub tt: Var,
}

/// Outputs in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ext: Option<Vec<Vec<f64>>>,
    pub inf: Option<Vec<Vec<f64>>>,
    pub ext_phase: Option<Vec<Vec<f64>>>,
    pub inf_phase: Option<Vec<Vec<f64>>>,
    pub ql: Vec<Vec<f64>>,
    /// Expected completed vehicles per travel-time bin.
    pub tt: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mtdt {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub norm: NormalizationSpec,
    pub exit_template: GraphTemplate,
    pub inflow_template: GraphTemplate,
    pub phase_map: PhaseMap,
    pub tmc_size: usize,
}

fn tensor_of<T: Copy + Into<f64>>(rows: &[Vec<T>], scale: f64) -> Result<Tensor> {
    let r: Vec<Vec<f64>> = rows.iter().map(|row| row.iter().map(|&v| v.into() / scale).collect()).collect();
    Tensor::from_rows(&r)
}

impl Mtdt {
    /// Fresh model for a topology family whose lane layout `topo` represents.
    pub fn new(config: ModelConfig, topo: &IntersectionTopology, norm: NormalizationSpec, seed: u64) -> Result<Self> {
        topo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParameters::init(&mut rng, &config, edge_feature_len(topo.tmc_size))?;
        Ok(Self {
            config,
            params,
            norm,
            exit_template: GraphTemplate::exit(topo)?,
            inflow_template: GraphTemplate::inflow(topo)?,
            phase_map: topo.phase_map.clone(),
            tmc_size: topo.tmc_size,
        })
    }

    pub fn has_gat(&self) -> bool {
        self.params.gat_ext.is_some()
    }

    /// Edge features with the driving parameters scaled to [0, 1].
    fn scaled_edge_features(record: &SimulationRecord) -> Vec<f64> {
        let mut z = edge_features(record);
        let n = z.len();
        for v in &mut z[n - record.drv.len()..] {
            *v /= DRIVING_PARAM_RANGE.1;
        }
        z
    }

    /// Normalized ground truth of a lane-level task, L×80.
    fn truth(&self, task: Task, rows: &[Vec<u8>]) -> Result<Tensor> {
        let t = tensor_of(rows, 1.0)?;
        let data = self.norm.normalize(task, t.data())?;
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, record: &SimulationRecord, mode: Mode) -> Result<ForwardOutput> {
        record.check_shapes(self.tmc_size)?;
        let stp = tensor_of(&record.stp, MAX_BUCKET_COUNT as f64)?;
        let z = Self::scaled_edge_features(record);

        let mut ext = None;
        let mut inf = None;
        if let (Some(pe), Some(pi)) = (&p.gat_ext, &p.gat_inf) {
            let g = build_exit_graph(record, &self.exit_template)?;
            let x = g.x.map(|v| v / MAX_BUCKET_COUNT as f64);
            ext = Some(gat_forward(tape, &g, &x, &z, pe)?);
            let g = build_inflow_graph(record, &self.inflow_template)?;
            let x = g.x.map(|v| v / MAX_BUCKET_COUNT as f64);
            inf = Some(gat_forward(tape, &g, &x, &z, pi)?);
        }

        let (ext_lanes, inf_lanes) = match (mode, ext, inf) {
            (Mode::Inference, Some(e), Some(i)) => (tape.value(e.targets).clone(), tape.value(i.targets).clone()),
            _ => (self.truth(Task::Ext, &record.ext)?, self.truth(Task::Inf, &record.inf)?),
        };
        let ext_phase = aggregate_to_phases(&ext_lanes, &self.phase_map.exit)?;
        let inf_phase = aggregate_to_phases(&inf_lanes, &self.phase_map.inflow)?;
        let stp_phase = aggregate_stop(&stp, &self.phase_map)?;
        let mut total = vec![0.0; WINDOW_BUCKETS];
        for l in 0..stp.shape()[0] {
            for (t, v) in total.iter_mut().zip(stp.row(l)) {
                *t += v;
            }
        }
        let stp_total = Tensor::new(vec![1, WINDOW_BUCKETS], total)?;
        let sig = tensor_of(&record.sig, 1.0)?;
        let drv = MTS_DRIVING_PARAMS.map(|i| record.drv[i] / DRIVING_PARAM_RANGE.1);

        let v = build_mts(&ext_phase, &stp_phase, &stp_total, &sig, drv)?;
        let v_prime = build_mts(&inf_phase, &stp_phase, &stp_total, &sig, drv)?;
        let ql = cnn_forward(tape, &v, &p.cnn_ql, Head::Ql)?;
        let tt = cnn_forward(tape, &v_prime, &p.cnn_tt, Head::Tt)?;
        Ok(ForwardOutput { ext, inf, ql, tt })
    }

    /// Completed-vehicle count per phase implied by the stop-bar counts.
    pub fn phase_completions(&self, record: &SimulationRecord) -> Result<Vec<f64>> {
        let stp = tensor_of(&record.stp, 1.0)?;
        let agg = aggregate_stop(&stp, &self.phase_map)?;
        Ok((0..NUM_PHASES).map(|p| agg.row(p).iter().sum()).collect())
    }

    fn denorm_rows(&self, task: Task, t: &Tensor) -> Result<Vec<Vec<f64>>> {
        let d = self.norm.denormalize(task, t.data())?;
        Ok(d.chunks(t.shape()[1]).map(|c| c.to_vec()).collect())
    }

    /// Converts normalized-space outputs to original units.
    pub fn denormalize(&self, tape: &Tape, out: &ForwardOutput, record: &SimulationRecord) -> Result<Prediction> {
        let lanes = |task: Task, o: &Option<GatOutput>| -> Result<Option<Vec<Vec<f64>>>> {
            o.map(|g| self.denorm_rows(task, tape.value(g.targets))).transpose()
        };
        let ext = lanes(Task::Ext, &out.ext)?;
        let inf = lanes(Task::Inf, &out.inf)?;
        let phase = |rows: &Option<Vec<Vec<f64>>>, groups: &[Vec<usize>]| -> Result<Option<Vec<Vec<f64>>>> {
            rows.as_ref()
                .map(|r| aggregate_to_phases(&Tensor::from_rows(r)?, groups).map(|t| t.to_rows()))
                .transpose()
        };
        let ext_phase = phase(&ext, &self.phase_map.exit)?;
        let inf_phase = phase(&inf, &self.phase_map.inflow)?;
        let ql = self.denorm_rows(Task::Ql, tape.value(out.ql))?;

        let mut probs = Tape::new();
        let logits = probs.constant(tape.value(out.tt).clone());
        let q = probs.softmax(logits, 1)?;
        let completions = self.phase_completions(record)?;
        let tt = probs
            .value(q)
            .to_rows()
            .into_iter()
            .zip(completions)
            .map(|(row, n)| row.into_iter().map(|p| p * n).collect())
            .collect();
        Ok(Prediction { ext, inf, ext_phase, inf_phase, ql, tt })
    }

    /// Forward pass without gradient tracking, in original units.
    pub fn predict(&self, record: &SimulationRecord, mode: Mode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, record, mode)?;
        self.denormalize(&tape, &out, record)
    }

    /// Shapes of the four outputs for this model.
    pub fn output_shapes(&self) -> [(String, [usize; 2]); 4] {
        [
            ("ext".into(), [self.exit_template.kind.num_targets(), WINDOW_BUCKETS]),
            ("inf".into(), [self.inflow_template.kind.num_targets(), WINDOW_BUCKETS]),
            ("ql".into(), [NUM_PHASES, WINDOW_BUCKETS]),
            ("tt".into(), [NUM_PHASES, TT_BINS]),
        ]
    }
}
