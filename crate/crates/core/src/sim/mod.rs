//! Scenario simulation: intersection layouts, signal plans, driver behavior,
//! the traffic engine and the measurements taken from its vehicle traces.

pub mod behavior;
pub mod dataset;
pub mod engine;
pub mod extract;
pub mod signal;
pub mod topology;

pub use behavior::{BehaviorRanges, DrivingBehavior, TurnRanges, TurnRatios, NUM_DRIVING_PARAMS};
pub use dataset::{generate_dataset, read_jsonl, run_scenario, write_jsonl, GenerateConfig, Scenario, SimulationRecord};
pub use engine::{simulate, Demand, LaneRef, TraceSample, VehicleTrace};
pub use extract::{compute_queue_series, compute_travel_time_hist, extract_waveforms, Waveforms};
pub use signal::{render_signal, render_window, PhaseTiming, PlanRanges, SignalState, SignalTimingPlan};
pub use topology::{
    load_topologies, Direction, IntersectionTopology, Movement, MAX_EXIT_LANES, MAX_INFLOW_LANES, MAX_STOP_LANES,
    NUM_PHASES,
};

pub const BUCKET_SECONDS: u32 = 5;
pub const WINDOW_BUCKETS: usize = 80;
pub const WINDOW_SECONDS: u32 = BUCKET_SECONDS * WINDOW_BUCKETS as u32;
pub const TT_BINS: usize = 200;
/// Waveform counts saturate at this many events per bucket.
pub const MAX_BUCKET_COUNT: u8 = 8;
/// Queue lengths saturate at this many meters.
pub const MAX_QUEUE_METERS: u32 = 1200;
