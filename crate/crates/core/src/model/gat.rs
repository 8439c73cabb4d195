use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::graph::SimulationGraph;
use crate::sim::MAX_STOP_LANES;
use crate::tensor::{Tape, Tensor, Var};

use super::params::GatVars;

/// Tape handles produced by one GAT pass.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    /// Full N×w node matrix: observed rows unchanged, target rows imputed.
    pub x_hat: Var,
    /// Imputed target rows only, T×w.
    pub targets: Var,
    /// Attention weight per edge, in edge order.
    pub alpha: Var,
}

/// Single-layer graph attention over a stop-bar → target bipartite graph.
/// `x` and `z` may be pre-scaled copies of the graph's features; absent
/// targets (no incoming edge) come out as zero rows.
pub fn gat_forward(
    tape: &mut Tape,
    graph: &SimulationGraph,
    x: &Tensor,
    z: &[f64],
    p: &GatVars,
) -> Result<GatOutput> {
    let n = graph.kind.num_nodes();
    let n_t = graph.kind.num_targets();
    if x.shape()[0] != n {
        return Err(shape_err!("GAT input has {} rows, graph has {n} nodes", x.shape()[0]));
    }
    let [sources, targets] = &graph.edges;
    let src: Rc<[usize]> = sources.iter().copied().collect();
    let dst: Rc<[usize]> = targets.iter().copied().collect();
    let local: Rc<[usize]> = targets.iter().map(|&t| t - MAX_STOP_LANES).collect();
    let mut present = vec![0.0; n_t];
    for &t in local.iter() {
        present[t] = 1.0;
    }

    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, p.pre_w)?;
    let h = tape.add_bias(h, p.pre_b, 1)?;
    let h = tape.relu(h);

    // e_ij = ReLU(a_src · h_i + a_dst · h_j)
    let s = tape.matmul(h, p.att_src)?;
    let d = tape.matmul(h, p.att_dst)?;
    let s = tape.gather_rows(s, src.clone())?;
    let d = tape.gather_rows(d, dst)?;
    let e = tape.add(s, d)?;
    let e = tape.relu(e);
    let e = tape.reshape(e, vec![src.len()])?;
    let alpha = tape.segment_softmax(e, local.clone())?;

    let msgs = tape.gather_rows(h, src)?;
    let msgs = tape.scale_rows(msgs, alpha)?;
    let m = tape.scatter_add_rows(msgs, local, n_t)?;

    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let proj = tape.matmul(zv, p.z_w)?;
    let proj = tape.add_bias(proj, p.z_b, 1)?;
    let mask = tape.constant(Tensor::new(vec![n_t, 1], present.clone())?);
    let proj = tape.matmul(mask, proj)?;
    let m = tape.add(m, proj)?;

    let out = tape.matmul(m, p.out_w)?;
    let out = tape.add_bias(out, p.out_b, 1)?;
    let out = tape.relu(out);
    let keep = tape.constant(Tensor::vector(present)?);
    let out = tape.scale_rows(out, keep)?;

    let observed: Rc<[usize]> = (0..MAX_STOP_LANES).collect();
    let obs = tape.gather_rows(xv, observed)?;
    let x_hat = tape.concat(&[obs, out], 0)?;
    Ok(GatOutput { x_hat, targets: out, alpha })
}
