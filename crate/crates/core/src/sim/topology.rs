use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub const MAX_STOP_LANES: usize = 48;
pub const MAX_EXIT_LANES: usize = 16;
pub const MAX_INFLOW_LANES: usize = 12;
pub const NUM_PHASES: usize = 8;
pub const DEFAULT_TMC_SIZE: usize = 35;
pub const DEFAULT_EXIT_EDGES: usize = 22;
pub const DEFAULT_INFLOW_EDGES: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "N")]
    North,
    #[serde(rename = "E")]
    East,
    #[serde(rename = "S")]
    South,
    #[serde(rename = "W")]
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Self::North, Self::East, Self::South, Self::West];

    pub fn index(self) -> usize {
        match self {
            Self::North => 0,
            Self::East => 1,
            Self::South => 2,
            Self::West => 3,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    /// Leg a vehicle arriving from `self` leaves on when making `movement`
    /// (right-hand traffic).
    pub fn outgoing(self, movement: Movement) -> Self {
        let shift = match movement {
            Movement::Left => 1,
            Movement::Through => 2,
            Movement::Right => 3,
        };
        Self::from_index(self.index() + shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Self::Left, Self::Through, Self::Right];

    pub fn index(self) -> usize {
        match self {
            Self::Left => 0,
            Self::Through => 1,
            Self::Right => 2,
        }
    }
}

/// Columns of the raw turning-movement matrix that belong to each movement
/// of one approach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementColumns {
    pub left: Vec<usize>,
    pub through: Vec<usize>,
    pub right: Vec<usize>,
}

impl MovementColumns {
    pub fn get(&self, m: Movement) -> &[usize] {
        match m {
            Movement::Left => &self.left,
            Movement::Through => &self.through,
            Movement::Right => &self.right,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Approach {
    pub direction: Direction,
    /// Length of the lanes ending at the stop bar, meters.
    pub one_hop_length: f64,
    /// Length of the upstream segment feeding the 1-hop lanes, meters.
    pub two_hop_length: f64,
    /// Free-flow speed, m/s.
    pub speed_limit: f64,
    pub through_phase: u8,
    pub left_phase: u8,
    pub tmc_row: usize,
    pub tmc_columns: MovementColumns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopLane {
    pub index: usize,
    pub approach: Direction,
    pub movement: Movement,
    pub phase: u8,
    pub exit_lane: usize,
    /// Distance from the stop bar to the exit detector through the junction.
    pub junction_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitLane {
    pub index: usize,
    pub direction: Direction,
}

/// An upstream (2-hop) lane. Its inflow detector sits at the upstream end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflowLane {
    pub index: usize,
    pub approach: Direction,
    /// Stop lanes a vehicle on this lane can continue into.
    pub feeds: Vec<usize>,
}

/// Lanes whose queues make up the queue length of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopGroup {
    pub phase: u8,
    /// Stop-lane indices (1-hop lanes).
    pub one_hop: Vec<usize>,
    /// Inflow-lane indices (2-hop lanes); for left phases only the left-most one.
    pub two_hop: Vec<usize>,
}

/// Assignment of exit, inflow and stop-bar lanes to the eight phase groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    /// `exit[p]` lists exit-lane indices of phase `p + 1`.
    pub exit: Vec<Vec<usize>>,
    pub inflow: Vec<Vec<usize>>,
    pub stop: Vec<Vec<usize>>,
}

impl PhaseMap {
    pub fn validate(&self) -> Result<()> {
        for (name, groups, n) in [
            ("exit", &self.exit, MAX_EXIT_LANES),
            ("inflow", &self.inflow, MAX_INFLOW_LANES),
        ] {
            if groups.len() != NUM_PHASES {
                return Err(config_err!("phase map {name}: expected {NUM_PHASES} groups"));
            }
            let mut seen = vec![false; n];
            for &lane in groups.iter().flatten() {
                if lane >= n {
                    return Err(config_err!("phase map {name}: lane {lane} out of range"));
                }
                if std::mem::replace(&mut seen[lane], true) {
                    return Err(config_err!("phase map {name}: lane {lane} in two groups"));
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(config_err!("phase map {name}: lane {missing} in no group"));
            }
        }
        if self.stop.len() != NUM_PHASES {
            return Err(config_err!("phase map stop: expected {NUM_PHASES} groups"));
        }
        let mut seen = BTreeSet::new();
        for &lane in self.stop.iter().flatten() {
            if lane >= MAX_STOP_LANES || !seen.insert(lane) {
                return Err(config_err!("phase map stop: lane {lane} out of range or repeated"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionTopology {
    pub intersection_id: String,
    pub approaches: Vec<Approach>,
    pub stop_lanes: Vec<StopLane>,
    pub exit_lanes: Vec<ExitLane>,
    pub inflow_lanes: Vec<InflowLane>,
    pub hop_graph: Vec<HopGroup>,
    pub phase_map: PhaseMap,
    pub tmc_size: usize,
    /// `[stop lane, exit lane]` pairs.
    pub exit_edges: Vec<[usize; 2]>,
    /// `[stop lane, inflow lane]` pairs.
    pub inflow_edges: Vec<[usize; 2]>,
}

/// Lane slot of the `k`-th stop lane of approach `a` in the 48-row stop-bar matrix.
fn stop_slot(a: usize, k: usize) -> usize {
    a * 12 + k
}

fn nema_phases(d: Direction) -> (u8, u8) {
    // (through, left); phases 2/6 serve the east-west corridor.
    match d {
        Direction::West => (2, 5),
        Direction::East => (6, 1),
        Direction::North => (4, 7),
        Direction::South => (8, 3),
    }
}

impl IntersectionTopology {
    /// Standard four-way layout: per approach two left lanes, three through
    /// lanes and one right lane at the stop bar, fed by three upstream lanes,
    /// with four outgoing exit lanes per leg.
    pub fn standard_four_way(
        id: impl Into<String>,
        one_hop_length: f64,
        two_hop_length: f64,
        speed_limit: f64,
    ) -> Self {
        let mut approaches = Vec::new();
        let mut stop_lanes = Vec::new();
        let mut inflow_lanes = Vec::new();
        let mut hop_graph = Vec::new();
        let mut exit_edges = Vec::new();
        let mut inflow_edges = Vec::new();
        let mut phase_map = PhaseMap {
            exit: vec![Vec::new(); NUM_PHASES],
            inflow: vec![Vec::new(); NUM_PHASES],
            stop: vec![Vec::new(); NUM_PHASES],
        };

        for d in Direction::ALL {
            let a = d.index();
            let (through_phase, left_phase) = nema_phases(d);
            let leg = |m: Movement| d.outgoing(m).index() * 4;
            let cols = |m: Movement| {
                let o = d.outgoing(m).index();
                vec![4 + 2 * o, 5 + 2 * o]
            };
            approaches.push(Approach {
                direction: d,
                one_hop_length,
                two_hop_length,
                speed_limit,
                through_phase,
                left_phase,
                tmc_row: a,
                tmc_columns: MovementColumns {
                    left: cols(Movement::Left),
                    through: cols(Movement::Through),
                    right: cols(Movement::Right),
                },
            });

            let lanes = [
                (Movement::Left, left_phase, leg(Movement::Left), 30.0),
                (Movement::Left, left_phase, leg(Movement::Left) + 1, 30.0),
                (Movement::Through, through_phase, leg(Movement::Through) + 1, 25.0),
                (Movement::Through, through_phase, leg(Movement::Through) + 2, 25.0),
                (Movement::Through, through_phase, leg(Movement::Through) + 3, 25.0),
                (Movement::Right, through_phase, leg(Movement::Right) + 3, 12.0),
            ];
            for (k, (movement, phase, exit_lane, junction_length)) in lanes.into_iter().enumerate() {
                let index = stop_slot(a, k);
                stop_lanes.push(StopLane {
                    index,
                    approach: d,
                    movement,
                    phase,
                    exit_lane,
                    junction_length,
                });
                phase_map.stop[phase as usize - 1].push(index);
                // Right turns on the north-south approaches are left out of the
                // exit template to keep its edge count at the common 22.
                let skip = movement == Movement::Right
                    && matches!(d, Direction::North | Direction::South);
                if !skip {
                    exit_edges.push([index, exit_lane]);
                }
            }

            let s = |k| stop_slot(a, k);
            let feeds = [vec![s(0), s(1), s(2)], vec![s(2), s(3)], vec![s(3), s(4), s(5)]];
            for (k, feeds) in feeds.into_iter().enumerate() {
                let index = a * 3 + k;
                inflow_lanes.push(InflowLane { index, approach: d, feeds });
                let phase = if k == 0 { left_phase } else { through_phase };
                phase_map.inflow[phase as usize - 1].push(index);
                for j in 0..6 {
                    inflow_edges.push([s(j), index]);
                }
            }

            hop_graph.push(HopGroup {
                phase: left_phase,
                one_hop: vec![s(0), s(1)],
                two_hop: vec![a * 3],
            });
            hop_graph.push(HopGroup {
                phase: through_phase,
                one_hop: vec![s(2), s(3), s(4), s(5)],
                two_hop: vec![a * 3, a * 3 + 1, a * 3 + 2],
            });
        }

        let mut exit_lanes = Vec::new();
        for leg in Direction::ALL {
            let o = leg.index();
            // Lanes 0-1 of a leg receive left turns, 2-3 through traffic.
            let left_from = Direction::from_index(o + 3);
            let through_from = Direction::from_index(o + 2);
            for k in 0..4 {
                let index = o * 4 + k;
                exit_lanes.push(ExitLane { index, direction: leg });
                let (through, left) = if k < 2 {
                    nema_phases(left_from)
                } else {
                    nema_phases(through_from)
                };
                let phase = if k < 2 { left } else { through };
                phase_map.exit[phase as usize - 1].push(index);
            }
        }
        hop_graph.sort_by_key(|h| h.phase);

        Self {
            intersection_id: id.into(),
            approaches,
            stop_lanes,
            exit_lanes,
            inflow_lanes,
            hop_graph,
            phase_map,
            tmc_size: DEFAULT_TMC_SIZE,
            exit_edges,
            inflow_edges,
        }
    }

    /// A family of eight standard intersections that differ in segment
    /// lengths and speed limits.
    pub fn default_family() -> Vec<Self> {
        let specs = [
            (120.0, 250.0, 13.4),
            (150.0, 300.0, 13.9),
            (180.0, 320.0, 15.6),
            (100.0, 220.0, 12.5),
            (200.0, 400.0, 15.6),
            (140.0, 280.0, 13.9),
            (160.0, 350.0, 17.9),
            (130.0, 260.0, 13.4),
        ];
        specs
            .iter()
            .enumerate()
            .map(|(i, &(l1, l2, v))| Self::standard_four_way(format!("isc-{:02}", i + 1), l1, l2, v))
            .collect()
    }

    pub fn approach(&self, d: Direction) -> Option<&Approach> {
        self.approaches.iter().find(|a| a.direction == d)
    }

    pub fn stop_lane(&self, index: usize) -> Option<&StopLane> {
        self.stop_lanes.iter().find(|l| l.index == index)
    }

    pub fn inflow_lane(&self, index: usize) -> Option<&InflowLane> {
        self.inflow_lanes.iter().find(|l| l.index == index)
    }

    pub fn hop_group(&self, phase: u8) -> Option<&HopGroup> {
        self.hop_graph.iter().find(|h| h.phase == phase)
    }

    pub fn tmc_feature_len(&self) -> usize {
        self.tmc_size * self.tmc_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.approaches.is_empty() || self.approaches.len() > 4 {
            return Err(config_err!("expected 1 to 4 approaches, got {}", self.approaches.len()));
        }
        let dirs: BTreeSet<_> = self.approaches.iter().map(|a| a.direction).collect();
        if dirs.len() != self.approaches.len() {
            return Err(config_err!("duplicate approach direction"));
        }
        for a in &self.approaches {
            let total = a.one_hop_length + a.two_hop_length;
            if a.one_hop_length <= 0.0 || a.two_hop_length <= 0.0 || total > 1200.0 {
                return Err(config_err!(
                    "approach {:?}: hop lengths must be positive and total at most 1200 m",
                    a.direction
                ));
            }
            if a.speed_limit <= 0.0 {
                return Err(config_err!("approach {:?}: speed limit must be positive", a.direction));
            }
            if a.through_phase % 2 != 0 || a.left_phase % 2 != 1 || a.left_phase > 8 || a.through_phase > 8 {
                return Err(config_err!("approach {:?}: through phases are even, left phases odd", a.direction));
            }
            if a.tmc_row >= self.tmc_size
                || Movement::ALL.iter().flat_map(|&m| a.tmc_columns.get(m)).any(|&c| c >= self.tmc_size)
            {
                return Err(config_err!("approach {:?}: tmc index out of range", a.direction));
            }
        }
        if self.stop_lanes.len() > MAX_STOP_LANES
            || self.exit_lanes.len() > MAX_EXIT_LANES
            || self.inflow_lanes.len() > MAX_INFLOW_LANES
        {
            return Err(config_err!("lane counts exceed 48/16/12"));
        }
        let mut seen = BTreeSet::new();
        for l in &self.stop_lanes {
            if l.index >= MAX_STOP_LANES || !seen.insert(l.index) {
                return Err(config_err!("stop lane {} out of range or repeated", l.index));
            }
            let Some(approach) = self.approach(l.approach) else {
                return Err(config_err!("stop lane {} on a missing approach", l.index));
            };
            let want = match l.movement {
                Movement::Left => approach.left_phase,
                _ => approach.through_phase,
            };
            if l.phase != want {
                return Err(config_err!(
                    "stop lane {}: {:?} movement must be served by phase {want}",
                    l.index,
                    l.movement
                ));
            }
            if l.exit_lane >= MAX_EXIT_LANES || l.junction_length <= 0.0 {
                return Err(config_err!("stop lane {}: bad exit lane or junction length", l.index));
            }
        }
        for l in &self.inflow_lanes {
            if l.index >= MAX_INFLOW_LANES || self.approach(l.approach).is_none() {
                return Err(config_err!("inflow lane {} invalid", l.index));
            }
            for f in &l.feeds {
                match self.stop_lane(*f) {
                    Some(s) if s.approach == l.approach => {}
                    _ => return Err(config_err!("inflow lane {} feeds unknown stop lane {f}", l.index)),
                }
            }
        }
        for p in 1..=NUM_PHASES as u8 {
            let Some(h) = self.hop_group(p) else {
                return Err(config_err!("missing hop mapping for phase {p}"));
            };
            if h.one_hop.iter().any(|&s| self.stop_lane(s).is_none())
                || h.two_hop.iter().any(|&u| self.inflow_lane(u).is_none())
            {
                return Err(config_err!("hop mapping for phase {p} names unknown lanes"));
            }
        }
        self.phase_map.validate()?;
        for &[s, e] in &self.exit_edges {
            if s >= MAX_STOP_LANES || e >= MAX_EXIT_LANES {
                return Err(config_err!("exit edge [{s}, {e}] out of range"));
            }
        }
        for &[s, i] in &self.inflow_edges {
            if s >= MAX_STOP_LANES || i >= MAX_INFLOW_LANES {
                return Err(config_err!("inflow edge [{s}, {i}] out of range"));
            }
        }
        Ok(())
    }
}

/// Loads one topology or a JSON array of them.
pub fn load_topologies(path: &Path) -> Result<Vec<IntersectionTopology>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Box<IntersectionTopology>),
        Many(Vec<IntersectionTopology>),
    }
    let text = std::fs::read_to_string(path)?;
    let list = match serde_json::from_str(&text)? {
        OneOrMany::One(t) => vec![*t],
        OneOrMany::Many(v) => v,
    };
    for t in &list {
        t.validate()?;
    }
    Ok(list)
}
