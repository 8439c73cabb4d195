//! Measurements over an 80-bucket window of vehicle traces.

use super::engine::{LaneRef, VehicleTrace, STOP_SPEED_THRESHOLD};
use super::topology::{IntersectionTopology, MAX_EXIT_LANES, MAX_INFLOW_LANES, MAX_STOP_LANES, NUM_PHASES};
use super::{BUCKET_SECONDS, MAX_BUCKET_COUNT, MAX_QUEUE_METERS, TT_BINS, WINDOW_BUCKETS, WINDOW_SECONDS};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Waveforms {
    /// 48×80 stop-bar crossings.
    pub stp: Vec<Vec<u8>>,
    /// 16×80 exit-detector crossings.
    pub ext: Vec<Vec<u8>>,
    /// 12×80 inflow-detector crossings.
    pub inf: Vec<Vec<u8>>,
}

fn bucket_of(t: u32, start: u32) -> Option<usize> {
    (t >= start && t < start + WINDOW_SECONDS).then(|| ((t - start) / BUCKET_SECONDS) as usize)
}

fn bump(cell: &mut u8) {
    *cell = (*cell + 1).min(MAX_BUCKET_COUNT);
}

/// Counts detector crossings per lane and 5-s bucket, saturating at 8.
pub fn extract_waveforms(traces: &[VehicleTrace], window_start: u32) -> Waveforms {
    let mut w = Waveforms {
        stp: vec![vec![0; WINDOW_BUCKETS]; MAX_STOP_LANES],
        ext: vec![vec![0; WINDOW_BUCKETS]; MAX_EXIT_LANES],
        inf: vec![vec![0; WINDOW_BUCKETS]; MAX_INFLOW_LANES],
    };
    for tr in traces {
        if let Some(b) = bucket_of(tr.entry_time, window_start) {
            bump(&mut w.inf[tr.inflow_lane][b]);
        }
        if let Some(b) = tr.exit_time.and_then(|t| bucket_of(t, window_start)) {
            bump(&mut w.stp[tr.stop_lane][b]);
        }
        if let Some(b) = tr.exit_detector_time.and_then(|t| bucket_of(t, window_start)) {
            bump(&mut w.ext[tr.exit_lane][b]);
        }
    }
    w
}

/// Queue length per phase and bucket, meters. A lane's queue at one second
/// reaches the rear of its farthest stopped vehicle; a bucket keeps the
/// largest per-second value. A phase adds its longest 1-hop queue to its
/// longest 2-hop queue.
pub fn compute_queue_series(
    traces: &[VehicleTrace],
    topo: &IntersectionTopology,
    window_start: u32,
) -> Result<Vec<Vec<u32>>> {
    let mut stop_max = vec![[0.0f64; WINDOW_BUCKETS]; MAX_STOP_LANES];
    let mut up_max = vec![[0.0f64; WINDOW_BUCKETS]; MAX_INFLOW_LANES];
    for tr in traces {
        for s in &tr.samples {
            if s.speed >= STOP_SPEED_THRESHOLD {
                continue;
            }
            let Some(b) = bucket_of(s.t, window_start) else { continue };
            let cell = match s.lane {
                LaneRef::Stop(l) => &mut stop_max[l][b],
                LaneRef::Upstream(l) => &mut up_max[l][b],
                LaneRef::Junction(_) => continue,
            };
            *cell = cell.max(s.distance);
        }
    }
    let mut ql = vec![vec![0u32; WINDOW_BUCKETS]; NUM_PHASES];
    for (p, row) in ql.iter_mut().enumerate() {
        let phase = p as u8 + 1;
        let Some(h) = topo.hop_group(phase) else {
            return Err(config_err!("missing hop mapping for phase {phase}"));
        };
        for (b, cell) in row.iter_mut().enumerate() {
            let one = h.one_hop.iter().map(|&l| stop_max[l][b]).fold(0.0, f64::max);
            let two = h.two_hop.iter().map(|&l| up_max[l][b]).fold(0.0, f64::max);
            *cell = ((one + two).round() as u32).min(MAX_QUEUE_METERS);
        }
    }
    Ok(ql)
}

/// Histogram of proximity travel times, per phase, of vehicles whose exit
/// falls inside the window. Bins are 5 s wide; the last bin absorbs the rest.
pub fn compute_travel_time_hist(traces: &[VehicleTrace], window_start: u32) -> Vec<Vec<u32>> {
    let mut tt = vec![vec![0u32; TT_BINS]; NUM_PHASES];
    for tr in traces {
        let Some(exit) = tr.exit_time.filter(|&t| bucket_of(t, window_start).is_some()) else {
            continue;
        };
        let bin = (((exit - tr.entry_time) / BUCKET_SECONDS) as usize).min(TT_BINS - 1);
        tt[tr.phase as usize - 1][bin] += 1;
    }
    tt
}
