//! Per-second mesoscopic traffic model of one intersection.
//!
//! Vehicles enter at the upstream end of a 2-hop lane, continue into a 1-hop
//! lane ending at the stop bar, wait for their phase, then cross the junction
//! onto an exit lane. Following is Newell-style: a vehicle keeps `min_gap`
//! plus `headway_tau` seconds of travel behind its leader, which yields a
//! saturation discharge rate set by those two parameters. Vehicles are updated
//! in order of increasing distance to the stop bar, so every leader already
//! holds its new position when its follower moves.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::behavior::{DrivingBehavior, TurnRatios};
use super::signal::{SignalState, SignalTimingPlan};
use super::topology::{Direction, IntersectionTopology, Movement, MAX_INFLOW_LANES, MAX_STOP_LANES};

pub const VEHICLE_LENGTH: f64 = 5.0;
/// Speed below which a vehicle counts as stopped for queue measurement, m/s.
pub const STOP_SPEED_THRESHOLD: f64 = 0.1;

/// Mean arrivals per second for each approach, indexed N, E, S, W.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demand(pub [f64; 4]);

impl Demand {
    pub fn uniform(rate: f64) -> Self {
        Self([rate; 4])
    }

    pub fn rate(&self, d: Direction) -> f64 {
        self.0[d.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneRef {
    /// 2-hop lane, by inflow-lane index.
    Upstream(usize),
    /// 1-hop lane, by stop-lane index.
    Stop(usize),
    /// Inside the junction after crossing the given stop lane's stop bar.
    Junction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: u32,
    pub lane: LaneRef,
    /// Distance from the downstream end of `lane` to the vehicle's rear, in
    /// meters. Inside the junction: distance travelled past the stop bar.
    pub distance: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrace {
    pub id: u64,
    pub approach: Direction,
    pub movement: Movement,
    pub phase: u8,
    pub inflow_lane: usize,
    pub stop_lane: usize,
    pub exit_lane: usize,
    /// Second the vehicle entered the 2-hop lane (crossing the inflow detector).
    pub entry_time: u32,
    /// Second the vehicle crossed the stop bar and left the proximity.
    pub exit_time: Option<u32>,
    /// Second the vehicle crossed the exit detector.
    pub exit_detector_time: Option<u32>,
    pub samples: Vec<TraceSample>,
}

#[derive(Clone, Copy)]
struct Pending {
    movement: Movement,
    stop_lane: usize,
    speed_factor: f64,
}

struct Active {
    trace: usize,
    front: f64,
    speed: f64,
    max_speed: f64,
    one_hop: f64,
    two_hop: f64,
    junction: f64,
    inflow: usize,
    stop: usize,
    phase: u8,
}

impl Active {
    fn sample(&self, t: u32) -> TraceSample {
        let tail = self.front + VEHICLE_LENGTH;
        let (lane, distance) = if self.front < 0.0 {
            (LaneRef::Junction(self.stop), -self.front)
        } else if tail > self.one_hop {
            (LaneRef::Upstream(self.inflow), (tail - self.one_hop).min(self.two_hop))
        } else {
            (LaneRef::Stop(self.stop), tail)
        };
        TraceSample { t, lane, distance, speed: self.speed }
    }
}

/// Runs `duration` seconds of traffic and returns the trace of every vehicle
/// that entered the intersection's proximity. Deterministic given `seed`.
pub fn simulate(
    topo: &IntersectionTopology,
    plan: &SignalTimingPlan,
    drv: &DrivingBehavior,
    ratios: &TurnRatios,
    demand: &Demand,
    seed: u64,
    duration: u32,
) -> Vec<VehicleTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accel = drv.accel.max(0.1);
    let decel = drv.decel.max(0.1);
    let min_gap = drv.min_gap.max(0.0);
    let tau = drv.headway_tau.max(0.0);
    let cooperative = drv.lc_cooperative.clamp(0.0, 1.0);

    let mut traces: Vec<VehicleTrace> = Vec::new();
    let mut active: Vec<Active> = Vec::new();
    let mut queues: Vec<std::collections::VecDeque<Pending>> = vec![Default::default(); MAX_INFLOW_LANES];
    let mut load = [0usize; MAX_STOP_LANES];
    let mut next_id = 0u64;

    for t in 0..=duration {
        if t > 0 {
            active.sort_by(|a, b| a.front.total_cmp(&b.front).then(a.trace.cmp(&b.trace)));
            let mut last_stop: [Option<f64>; MAX_STOP_LANES] = [None; MAX_STOP_LANES];
            let mut last_up: [Option<f64>; MAX_INFLOW_LANES] = [None; MAX_INFLOW_LANES];
            let mut removed = Vec::new();
            for (k, v) in active.iter_mut().enumerate() {
                let leader = if v.front <= v.one_hop {
                    last_stop[v.stop]
                } else {
                    match (last_up[v.inflow], last_stop[v.stop]) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        (a, b) => a.or(b),
                    }
                };
                let mut speed = (v.speed + accel).min(v.max_speed);
                if let Some(lf) = leader {
                    let space = v.front - (lf + VEHICLE_LENGTH + min_gap);
                    speed = speed.min(space.max(0.0) / (1.0 + tau));
                }
                if v.front >= 0.0 {
                    let must_stop = match plan.state(v.phase, t - 1) {
                        SignalState::Green => false,
                        SignalState::Red => true,
                        SignalState::Yellow => v.front >= v.speed * v.speed / (2.0 * decel),
                    };
                    if must_stop {
                        // Fastest speed from which the rest of the distance still suffices to brake.
                        let limit = (2.0 * v.front / ((1.0 + 2.0 * v.front / decel).sqrt() + 1.0)).min(v.front);
                        speed = speed.min(limit);
                    }
                }
                let speed = speed.max(0.0);
                let front = v.front - speed;
                let trace = &mut traces[v.trace];
                if v.front >= 0.0 && front < 0.0 {
                    trace.exit_time = Some(t);
                    load[v.stop] -= 1;
                }
                if front < -v.junction {
                    trace.exit_detector_time = Some(t);
                    removed.push(k);
                }
                v.front = front;
                v.speed = speed;
                if front <= v.one_hop {
                    last_stop[v.stop] = Some(front);
                } else {
                    last_up[v.inflow] = Some(front);
                }
            }
            for k in removed.into_iter().rev() {
                active.swap_remove(k);
            }
        }

        // Arrivals choose their lanes on arrival and wait at the entry if the lane is full.
        for approach in &topo.approaches {
            let rate = demand.rate(approach.direction);
            if rate <= 0.0 {
                continue;
            }
            let arrivals = Poisson::new(rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..arrivals {
                let triple = ratios.reduced[approach.direction.index()];
                let draw: f64 = rng.random();
                let movement = if draw < triple[0] {
                    Movement::Left
                } else if draw < triple[0] + triple[1] {
                    Movement::Through
                } else {
                    Movement::Right
                };
                let speed_factor = (1.0 + drv.speed_dev_sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.5, 1.5);
                let Some((inflow, stop)) = choose_lanes(topo, approach.direction, movement, &load, cooperative, &mut rng)
                else {
                    continue;
                };
                load[stop] += 1;
                queues[inflow].push_back(Pending { movement, stop_lane: stop, speed_factor });
            }
        }

        for lane in &topo.inflow_lanes {
            let Some(p) = queues[lane.index].front().copied() else { continue };
            let approach = topo.approach(lane.approach).expect("validated topology");
            let entry = approach.one_hop_length + approach.two_hop_length;
            let last = active
                .iter()
                .filter(|v| v.inflow == lane.index && v.front > v.one_hop)
                .map(|v| v.front)
                .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))));
            let max_speed = approach.speed_limit * p.speed_factor;
            let speed = match last {
                None => max_speed,
                Some(lf) => {
                    let space = entry - (lf + VEHICLE_LENGTH + min_gap);
                    if space < 0.0 {
                        continue;
                    }
                    (space / (1.0 + tau)).min(max_speed)
                }
            };
            queues[lane.index].pop_front();
            let stop = topo.stop_lane(p.stop_lane).expect("validated topology");
            traces.push(VehicleTrace {
                id: next_id,
                approach: lane.approach,
                movement: p.movement,
                phase: stop.phase,
                inflow_lane: lane.index,
                stop_lane: stop.index,
                exit_lane: stop.exit_lane,
                entry_time: t,
                exit_time: None,
                exit_detector_time: None,
                samples: Vec::new(),
            });
            next_id += 1;
            active.push(Active {
                trace: traces.len() - 1,
                front: entry,
                speed,
                max_speed,
                one_hop: approach.one_hop_length,
                two_hop: approach.two_hop_length,
                junction: stop.junction_length,
                inflow: lane.index,
                stop: stop.index,
                phase: stop.phase,
            });
        }

        for v in &active {
            traces[v.trace].samples.push(v.sample(t));
        }
    }
    traces
}

/// Picks the upstream lane and stop lane for an arriving vehicle. Returns
/// `None` if the approach has no lane serving the movement or through traffic.
fn choose_lanes(
    topo: &IntersectionTopology,
    approach: Direction,
    movement: Movement,
    load: &[usize; MAX_STOP_LANES],
    cooperative: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    let serves = |s: usize, m: Movement| topo.stop_lane(s).is_some_and(|l| l.movement == m);
    let movement = if topo.stop_lanes.iter().any(|l| l.approach == approach && l.movement == movement) {
        movement
    } else {
        Movement::Through
    };
    let inflows: Vec<usize> = topo
        .inflow_lanes
        .iter()
        .filter(|l| l.approach == approach && l.feeds.iter().any(|&s| serves(s, movement)))
        .map(|l| l.index)
        .collect();
    let inflow = *inflows.choose(rng)?;
    let lane = topo.inflow_lane(inflow)?;
    let stops: Vec<usize> = lane.feeds.iter().copied().filter(|&s| serves(s, movement)).collect();
    let stop = if rng.random::<f64>() < cooperative {
        *stops.iter().min_by_key(|&&s| (load[s], s))?
    } else {
        *stops.choose(rng)?
    };
    Some((inflow, stop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::signal::PhaseTiming;
    use crate::sim::topology::NUM_PHASES;

    /// Plan where only the barrier group holding `phase` ever runs, with
    /// `phase` and its concurrent partner green throughout.
    fn all_green(phase: u8) -> SignalTimingPlan {
        let mut phases = [PhaseTiming { green: 0, yellow: 0, red: 0, min_green: 0, max_green: 10_000 }; NUM_PHASES];
        let partner = if phase <= 4 { phase + 4 } else { phase - 4 };
        phases[phase as usize - 1].green = 200;
        phases[partner as usize - 1].green = 200;
        let major = [1, 2, 5, 6].contains(&phase);
        let plan = SignalTimingPlan { cycle_length: 200, offset: 0, barrier_time: if major { 200 } else { 0 }, phases };
        plan.validate().unwrap();
        plan
    }

    fn setup() -> (IntersectionTopology, DrivingBehavior, TurnRatios) {
        let topo = IntersectionTopology::standard_four_way("t", 150.0, 300.0, 13.9);
        let drv = DrivingBehavior { speed_dev_sigma: 0.0, ..Default::default() };
        let ratios = TurnRatios::from_reduced([[0.0, 1.0, 0.0]; 4], &topo).unwrap();
        (topo, drv, ratios)
    }

    #[test]
    fn zero_demand_gives_no_traces() {
        let (topo, drv, ratios) = setup();
        let traces = simulate(&topo, &all_green(2), &drv, &ratios, &Demand::uniform(0.0), 1, 600);
        assert!(traces.is_empty());
    }

    #[test]
    fn lone_vehicle_travels_at_free_flow() {
        let (topo, drv, ratios) = setup();
        let mut demand = Demand::uniform(0.0);
        demand.0[Direction::West.index()] = 0.002;
        let traces = simulate(&topo, &all_green(2), &drv, &ratios, &demand, 3, 3000);
        let first = traces.iter().find(|t| t.exit_time.is_some()).expect("a vehicle completes");
        let travel = (first.exit_time.unwrap() - first.entry_time) as f64;
        let free_flow = (150.0 + 300.0) / 13.9;
        assert!((travel - free_flow).abs() <= 1.0, "travel {travel} vs {free_flow}");
    }

    #[test]
    fn same_seed_same_traces() {
        let (topo, drv, ratios) = setup();
        let plan = all_green(2);
        let a = simulate(&topo, &plan, &drv, &ratios, &Demand::uniform(0.3), 17, 900);
        let b = simulate(&topo, &plan, &drv, &ratios, &Demand::uniform(0.3), 17, 900);
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn red_phase_builds_a_stationary_queue() {
        let (topo, drv, ratios) = setup();
        // Phase 2 (westbound approach) never green.
        let plan = all_green(4);
        let mut demand = Demand::uniform(0.0);
        demand.0[Direction::West.index()] = 0.2;
        let traces = simulate(&topo, &plan, &drv, &ratios, &demand, 5, 400);
        assert!(traces.iter().all(|t| t.exit_time.is_none()));
        let stopped_near_bar = traces.iter().any(|tr| {
            tr.samples.iter().any(|s| matches!(s.lane, LaneRef::Stop(_)) && s.speed < STOP_SPEED_THRESHOLD && s.distance < 6.0)
        });
        assert!(stopped_near_bar);
        // No overlap between consecutive stopped vehicles on a lane.
        let last_t = 400;
        let mut per_lane: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for tr in &traces {
            if let Some(s) = tr.samples.iter().find(|s| s.t == last_t) {
                if let LaneRef::Stop(l) = s.lane {
                    per_lane.entry(l).or_default().push(s.distance);
                }
            }
        }
        for d in per_lane.values_mut() {
            d.sort_by(f64::total_cmp);
            for w in d.windows(2) {
                assert!(w[1] - w[0] >= VEHICLE_LENGTH - 1e-9, "overlap {w:?}");
            }
        }
    }

    #[test]
    fn samples_are_one_second_apart_and_exit_follows_entry() {
        let (topo, drv, ratios) = setup();
        let traces = simulate(&topo, &all_green(2), &drv, &ratios, &Demand::uniform(0.2), 8, 600);
        for tr in &traces {
            for w in tr.samples.windows(2) {
                assert_eq!(w[1].t, w[0].t + 1);
            }
            assert_eq!(tr.samples[0].t, tr.entry_time);
            if let Some(x) = tr.exit_time {
                assert!(x >= tr.entry_time);
            }
        }
    }
}
