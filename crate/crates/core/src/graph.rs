//! Simulation graphs: directed bipartite graphs from stop-bar nodes to the
//! exit or inflow nodes whose waveforms are imputed.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::sim::topology::{IntersectionTopology, MAX_EXIT_LANES, MAX_INFLOW_LANES, MAX_STOP_LANES, NUM_PHASES};
use crate::sim::{SimulationRecord, NUM_DRIVING_PARAMS, WINDOW_BUCKETS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Exit,
    Inflow,
}

impl GraphKind {
    pub fn num_targets(self) -> usize {
        match self {
            GraphKind::Exit => MAX_EXIT_LANES,
            GraphKind::Inflow => MAX_INFLOW_LANES,
        }
    }

    pub fn num_nodes(self) -> usize {
        MAX_STOP_LANES + self.num_targets()
    }
}

/// Fixed connectivity shared by every record of a topology family. Node
/// indices: stop lanes `0..48`, then target lanes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphTemplate {
    pub kind: GraphKind,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Target lanes present at the intersection; absent ones stay zero.
    pub present: Vec<bool>,
}

impl GraphTemplate {
    /// Builds the template from `[stop lane, target lane]` pairs.
    pub fn new(kind: GraphKind, pairs: &[[usize; 2]], present: Vec<bool>) -> Result<Self> {
        let n_t = kind.num_targets();
        if present.len() != n_t {
            return Err(config_err!("{kind:?} template: expected {n_t} presence flags"));
        }
        let mut sources = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for &[s, t] in pairs {
            if s >= MAX_STOP_LANES || t >= n_t {
                return Err(config_err!("{kind:?} template: edge [{s}, {t}] out of range"));
            }
            if !present[t] {
                return Err(config_err!("{kind:?} template: edge into absent lane {t}"));
            }
            sources.push(s);
            targets.push(MAX_STOP_LANES + t);
        }
        let tpl = Self { kind, sources, targets, present };
        let deg = tpl.in_degree();
        if let Some(t) = (0..n_t).find(|&t| tpl.present[t] && deg[t] == 0) {
            return Err(config_err!("{kind:?} template: lane {t} has no incoming edge"));
        }
        Ok(tpl)
    }

    pub fn exit(topo: &IntersectionTopology) -> Result<Self> {
        let mut present = vec![false; MAX_EXIT_LANES];
        for l in &topo.exit_lanes {
            present[l.index] = true;
        }
        Self::new(GraphKind::Exit, &topo.exit_edges, present)
    }

    pub fn inflow(topo: &IntersectionTopology) -> Result<Self> {
        let mut present = vec![false; MAX_INFLOW_LANES];
        for l in &topo.inflow_lanes {
            present[l.index] = true;
        }
        Self::new(GraphKind::Inflow, &topo.inflow_edges, present)
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    /// In-degree of each target lane.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.kind.num_targets()];
        for &t in &self.targets {
            deg[t - MAX_STOP_LANES] += 1;
        }
        deg
    }

    pub fn sources_rc(&self) -> Rc<[usize]> {
        self.sources.iter().copied().collect()
    }

    pub fn targets_rc(&self) -> Rc<[usize]> {
        self.targets.iter().copied().collect()
    }
}

/// One record's graph: node features, observation mask, edges and the
/// record-wide edge feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationGraph {
    pub kind: GraphKind,
    /// N×80 node features.
    pub x: Tensor,
    pub mask: Vec<bool>,
    /// `[sources, targets]`, node indices.
    pub edges: [Vec<usize>; 2],
    pub z: Vec<f64>,
}

/// Length of the edge feature vector for a `tmc_size`-square TMC matrix.
pub fn edge_feature_len(tmc_size: usize) -> usize {
    NUM_PHASES * WINDOW_BUCKETS + tmc_size * tmc_size + NUM_DRIVING_PARAMS
}

/// Row-major concatenation of sig, tmc and drv.
pub fn edge_features(record: &SimulationRecord) -> Vec<f64> {
    let mut z = Vec::with_capacity(edge_feature_len(record.tmc.len()));
    z.extend(record.sig.iter().flatten().map(|&v| v as f64));
    z.extend(record.tmc.iter().flatten().copied());
    z.extend(record.drv.iter().copied());
    z
}

fn build(record: &SimulationRecord, template: &GraphTemplate, kind: GraphKind) -> Result<SimulationGraph> {
    if template.kind != kind {
        return Err(contract_err!("expected a {kind:?} template, got {:?}", template.kind));
    }
    record.check_shapes(record.tmc.len())?;
    let n = kind.num_nodes();
    let mut x = vec![0.0; n * WINDOW_BUCKETS];
    for (i, row) in record.stp.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            x[i * WINDOW_BUCKETS + b] = v as f64;
        }
    }
    let mut mask = vec![false; n];
    mask[..MAX_STOP_LANES].fill(true);
    Ok(SimulationGraph {
        kind,
        x: Tensor::new(vec![n, WINDOW_BUCKETS], x)?,
        mask,
        edges: [template.sources.clone(), template.targets.clone()],
        z: edge_features(record),
    })
}

pub fn build_exit_graph(record: &SimulationRecord, template: &GraphTemplate) -> Result<SimulationGraph> {
    build(record, template, GraphKind::Exit)
}

pub fn build_inflow_graph(record: &SimulationRecord, template: &GraphTemplate) -> Result<SimulationGraph> {
    build(record, template, GraphKind::Inflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TT_BINS;

    pub(crate) fn zero_record() -> SimulationRecord {
        SimulationRecord {
            isc: "z".into(),
            sig: vec![vec![0; 80]; 8],
            tmc: vec![vec![0.0; 35]; 35],
            drv: vec![0.0; 9],
            stp: vec![vec![0; 80]; 48],
            ext: vec![vec![0; 80]; 16],
            inf: vec![vec![0; 80]; 12],
            ql: vec![vec![0; 80]; 8],
            tt: vec![vec![0; TT_BINS]; 8],
            seed: 0,
        }
    }

    fn topo() -> IntersectionTopology {
        IntersectionTopology::standard_four_way("t", 150.0, 300.0, 13.9)
    }

    #[test]
    fn zero_record_gives_zero_exit_graph() {
        let g = build_exit_graph(&zero_record(), &GraphTemplate::exit(&topo()).unwrap()).unwrap();
        assert_eq!(g.x.shape(), &[64, 80]);
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.mask.iter().filter(|&&m| m).count(), 48);
        assert_eq!(g.edges[0].len(), 22);
        assert_eq!(g.z.len(), 8 * 80 + 35 * 35 + 9);
    }

    #[test]
    fn zero_record_gives_zero_inflow_graph() {
        let g = build_inflow_graph(&zero_record(), &GraphTemplate::inflow(&topo()).unwrap()).unwrap();
        assert_eq!(g.x.shape(), &[60, 80]);
        assert_eq!(g.mask.iter().filter(|&&m| !m).count(), 12);
        assert_eq!(g.edges[1].len(), 72);
    }

    #[test]
    fn bipartite_and_masked_rows_zero() {
        let t = topo();
        let mut rec = zero_record();
        for (i, row) in rec.stp.iter_mut().enumerate() {
            row.fill((i % 8) as u8 + 1);
        }
        for tpl in [GraphTemplate::exit(&t).unwrap(), GraphTemplate::inflow(&t).unwrap()] {
            let g = build(&rec, &tpl, tpl.kind).unwrap();
            for (&s, &d) in g.edges[0].iter().zip(&g.edges[1]) {
                assert!(g.mask[s] && !g.mask[d]);
            }
            for (i, &m) in g.mask.iter().enumerate() {
                if !m {
                    assert!(g.x.row(i).iter().all(|&v| v == 0.0));
                }
            }
            assert_eq!(g.z, edge_features(&rec));
        }
    }

    #[test]
    fn every_present_target_has_an_incoming_edge() {
        for t in IntersectionTopology::default_family() {
            for tpl in [GraphTemplate::exit(&t).unwrap(), GraphTemplate::inflow(&t).unwrap()] {
                let deg = tpl.in_degree();
                assert!(deg.iter().zip(&tpl.present).all(|(&d, &p)| !p || d >= 1));
            }
        }
    }

    #[test]
    fn unreachable_target_is_rejected() {
        let mut t = topo();
        t.exit_edges.retain(|&[_, e]| e != 5);
        assert!(GraphTemplate::exit(&t).is_err());
    }

    #[test]
    fn wrong_template_kind_is_a_contract_error() {
        let tpl = GraphTemplate::inflow(&topo()).unwrap();
        assert!(build_exit_graph(&zero_record(), &tpl).is_err());
    }

    #[test]
    fn permuted_stop_lanes_give_isomorphic_graph() {
        let t = topo();
        let tpl = GraphTemplate::exit(&t).unwrap();
        let mut rec = zero_record();
        for (i, row) in rec.stp.iter_mut().enumerate() {
            row[i] = i as u8 % 9;
        }
        // Reverse the stop-lane order in both the record and the template.
        let perm: Vec<usize> = (0..48).rev().collect();
        let mut rec_p = rec.clone();
        for (i, &p) in perm.iter().enumerate() {
            rec_p.stp[p] = rec.stp[i].clone();
        }
        let pairs: Vec<[usize; 2]> = t.exit_edges.iter().map(|&[s, e]| [perm[s], e]).collect();
        let tpl_p = GraphTemplate::new(GraphKind::Exit, &pairs, tpl.present.clone()).unwrap();
        let g = build_exit_graph(&rec, &tpl).unwrap();
        let gp = build_exit_graph(&rec_p, &tpl_p).unwrap();
        // Canonical form: (source feature row, target) pairs, sorted.
        let canon = |g: &SimulationGraph| {
            let mut e: Vec<(Vec<u64>, usize)> = g.edges[0]
                .iter()
                .zip(&g.edges[1])
                .map(|(&s, &d)| (g.x.row(s).iter().map(|v| v.to_bits()).collect(), d))
                .collect();
            e.sort();
            e
        };
        assert_eq!(canon(&g), canon(&gp));
    }
}
