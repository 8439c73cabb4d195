use crate::error::{config_err, shape_err, Result};
use crate::sim::topology::PhaseMap;
use crate::sim::{NUM_PHASES, WINDOW_BUCKETS};
use crate::tensor::Tensor;

use super::params::MTS_CHANNELS;

/// Phase index of every lane, given the lane groups of a phase map.
pub fn lane_phases(groups: &[Vec<usize>], lanes: usize) -> Result<Vec<usize>> {
    let mut phase = vec![usize::MAX; lanes];
    for (p, members) in groups.iter().enumerate() {
        for &l in members {
            if l >= lanes {
                return Err(config_err!("phase group {} names lane {l} of {lanes}", p + 1));
            }
            phase[l] = p;
        }
    }
    if let Some(l) = phase.iter().position(|&p| p == usize::MAX) {
        return Err(config_err!("lane {l} belongs to no phase group"));
    }
    Ok(phase)
}

/// Sums lane rows (L×80) into their phase rows (8×80).
pub fn aggregate_to_phases(lanes: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    let (rows, cols) = lanes.dims2()?;
    let phase = lane_phases(groups, rows)?;
    let mut out = Tensor::zeros(&[NUM_PHASES, cols]);
    let data = out.data_mut();
    for (l, &p) in phase.iter().enumerate() {
        for (o, v) in data[p * cols..(p + 1) * cols].iter_mut().zip(lanes.row(l)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Stop-bar phase sums. Stop lanes outside every group (absent lanes) are skipped.
pub fn aggregate_stop(stp: &Tensor, map: &PhaseMap) -> Result<Tensor> {
    let (_, cols) = stp.dims2()?;
    let mut out = Tensor::zeros(&[NUM_PHASES, cols]);
    let data = out.data_mut();
    for (p, members) in map.stop.iter().enumerate() {
        for &l in members {
            for (o, v) in data[p * cols..(p + 1) * cols].iter_mut().zip(stp.row(l)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

fn check(name: &str, t: &Tensor, rows: usize) -> Result<()> {
    if t.shape() != [rows, WINDOW_BUCKETS] {
        return Err(shape_err!("{name} must be {rows}x{WINDOW_BUCKETS}, got {:?}", t.shape()));
    }
    Ok(())
}

/// Assembles the 8×7×80 series: per phase [primary, stp, sig, drv₀, drv₁,
/// drv₂, intersection-total stp].
pub fn build_mts(primary: &Tensor, stp: &Tensor, stp_total: &Tensor, sig: &Tensor, drv: [f64; 3]) -> Result<Tensor> {
    check("primary", primary, NUM_PHASES)?;
    check("stp", stp, NUM_PHASES)?;
    check("stp_total", stp_total, 1)?;
    check("sig", sig, NUM_PHASES)?;
    let w = WINDOW_BUCKETS;
    let mut data = Vec::with_capacity(NUM_PHASES * MTS_CHANNELS * w);
    for p in 0..NUM_PHASES {
        data.extend_from_slice(primary.row(p));
        data.extend_from_slice(stp.row(p));
        data.extend_from_slice(sig.row(p));
        for d in drv {
            data.extend(std::iter::repeat_n(d, w));
        }
        data.extend_from_slice(stp_total.row(0));
    }
    Tensor::new(vec![NUM_PHASES, MTS_CHANNELS, w], data)
}
