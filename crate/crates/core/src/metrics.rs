//! Error measures, temporal re-aggregation, travel-time percentile errors and
//! dataset partitions, collected into an [`MoeReport`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::model::{Mode, Mtdt, Prediction, Variant};
use crate::sim::{SimulationRecord, BUCKET_SECONDS, WINDOW_BUCKETS};
use crate::train::predict_all;

pub const CI95_Z: f64 = 1.96;
pub const AGGREGATION_FACTORS: [usize; 4] = [1, 2, 3, 4];
pub const TT_PERCENTILES: [u32; 4] = [60, 75, 85, 90];

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction has {} values, truth has {}", pred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(contract_err!("metrics need at least one value"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64).sqrt())
}

/// RMSE over the range of the true values; `None` when that range is zero.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    let r = rmse(pred, truth)?;
    let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok((hi > lo).then(|| r / (hi - lo)))
}

pub fn ci95(rmse: f64) -> f64 {
    CI95_Z * rmse
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub rmse: f64,
    pub nrmse: Option<f64>,
    pub ci95: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        let r = rmse(pred, truth)?;
        Ok(Self { mae: mae(pred, truth)?, rmse: r, nrmse: nrmse(pred, truth)?, ci95: ci95(r), n: truth.len() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Sum,
    Max,
}

/// Merges `factor` consecutive buckets of every row; a trailing partial bucket is dropped.
pub fn reaggregate(series: &[Vec<f64>], factor: usize, reduce: Reduce) -> Result<Vec<Vec<f64>>> {
    if factor == 0 {
        return Err(contract_err!("aggregation factor must be positive"));
    }
    Ok(series
        .iter()
        .map(|row| {
            row.chunks_exact(factor)
                .map(|c| match reduce {
                    Reduce::Sum => c.iter().sum(),
                    Reduce::Max => c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
                .collect()
        })
        .collect())
}

/// Smallest bin whose cumulative count reaches `q` percent of the total.
pub fn percentile_bin(hist: &[f64], q: u32) -> Option<usize> {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let target = total * q as f64 / 100.0;
    let mut acc = 0.0;
    for (i, v) in hist.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Some(i);
        }
    }
    Some(hist.len() - 1)
}

/// Paired (pred, true) bin counts up to and including each phase's `q`-th
/// percentile bin of the true histogram. Empty phases contribute nothing.
pub fn percentile_values(pred: &[Vec<f64>], truth: &[Vec<f64>], q: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction has {} phases, truth has {}", pred.len(), truth.len()));
    }
    let mut p_out = Vec::new();
    let mut t_out = Vec::new();
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(shape_err!("histogram lengths differ: {} vs {}", p.len(), t.len()));
        }
        if let Some(bin) = percentile_bin(t, q) {
            p_out.extend_from_slice(&p[..=bin]);
            t_out.extend_from_slice(&t[..=bin]);
        }
    }
    Ok((p_out, t_out))
}

/// Errors restricted to bins up to the `q`-th percentile; `None` when every true histogram is empty.
pub fn percentile_errors(pred: &[Vec<f64>], truth: &[Vec<f64>], q: u32) -> Result<Option<ErrorStats>> {
    let (p, t) = percentile_values(pred, truth, q)?;
    if t.is_empty() {
        return Ok(None);
    }
    ErrorStats::compute(&p, &t).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueuePartition {
    L1,
    L2,
    M1,
    M2,
    H1,
    H2,
}

impl QueuePartition {
    pub const ALL: [QueuePartition; 6] = [Self::L1, Self::L2, Self::M1, Self::M2, Self::H1, Self::H2];
    /// Nominal upper edge of H2, used only for the MAE percentage column.
    pub const H2_NOMINAL_UPPER: f64 = 1000.0;

    pub fn of(max_queue: u32) -> Self {
        Self::ALL[((max_queue / 40) as usize).min(5)]
    }

    pub fn label(self) -> &'static str {
        ["L1", "L2", "M1", "M2", "H1", "H2"][self as usize]
    }

    pub fn range(self) -> &'static str {
        ["0-40 m", "40-80 m", "80-120 m", "120-160 m", "160-200 m", "200+ m"][self as usize]
    }

    pub fn upper(self) -> f64 {
        match self {
            Self::H2 => Self::H2_NOMINAL_UPPER,
            p => 40.0 * (p as usize + 1) as f64,
        }
    }
}

pub fn max_queue(record: &SimulationRecord) -> u32 {
    record.ql.iter().flatten().copied().max().unwrap_or(0)
}

/// Record indices grouped by the record's maximum queue length. Every group is present.
pub fn partition_by_max_queue(records: &[SimulationRecord]) -> BTreeMap<QueuePartition, Vec<usize>> {
    let mut groups: BTreeMap<_, Vec<usize>> = QueuePartition::ALL.iter().map(|&p| (p, Vec::new())).collect();
    for (i, r) in records.iter().enumerate() {
        groups.get_mut(&QueuePartition::of(max_queue(r))).expect("all groups").push(i);
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GreenPartition {
    Low,
    Medium,
    High,
}

impl GreenPartition {
    pub const ALL: [GreenPartition; 3] = [Self::Low, Self::Medium, Self::High];

    pub fn of(fraction: f64) -> Option<Self> {
        if (0.45..0.60).contains(&fraction) {
            Some(Self::Low)
        } else if (0.60..0.75).contains(&fraction) {
            Some(Self::Medium)
        } else if (0.75..=0.90).contains(&fraction) {
            Some(Self::High)
        } else {
            None
        }
    }

    pub fn label(self) -> &'static str {
        ["Low", "Medium", "High"][self as usize]
    }

    pub fn range(self) -> &'static str {
        ["45-60 %", "60-75 %", "75-90 %"][self as usize]
    }
}

/// Fraction of buckets in which phase 2 or phase 6 is green.
pub fn major_green_fraction(record: &SimulationRecord) -> f64 {
    let (p2, p6) = (&record.sig[1], &record.sig[5]);
    let n = p2.len().min(p6.len());
    if n == 0 {
        return 0.0;
    }
    p2.iter().zip(p6).filter(|(a, b)| **a > 0 || **b > 0).count() as f64 / n as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GreenPartitions {
    pub groups: BTreeMap<GreenPartition, Vec<usize>>,
    pub excluded: Vec<usize>,
}

pub fn partition_by_green_time(records: &[SimulationRecord]) -> GreenPartitions {
    let mut out = GreenPartitions {
        groups: GreenPartition::ALL.iter().map(|&p| (p, Vec::new())).collect(),
        excluded: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        match GreenPartition::of(major_green_fraction(r)) {
            Some(p) => out.groups.get_mut(&p).expect("all groups").push(i),
            None => out.excluded.push(i),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    pub bucket_seconds: u32,
    pub stats: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub percentile: u32,
    pub stats: Option<ErrorStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuePartitionRow {
    pub partition: QueuePartition,
    pub range: String,
    pub records: usize,
    pub ql: Option<ErrorStats>,
    /// MAE as a percentage of the partition's upper edge.
    pub mae_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenPartitionRow {
    pub partition: GreenPartition,
    pub range: String,
    pub records: usize,
    pub tasks: BTreeMap<String, ErrorStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeReport {
    pub variant: Variant,
    pub mode: Mode,
    pub checkpoint_id: String,
    pub records: usize,
    /// Errors at the native 5-second resolution (tt over all bins).
    pub tasks: BTreeMap<String, ErrorStats>,
    pub aggregation: BTreeMap<String, Vec<AggregationRow>>,
    pub tt_percentiles: Vec<PercentileRow>,
    pub queue_partitions: Vec<QueuePartitionRow>,
    pub green_partitions: Vec<GreenPartitionRow>,
    pub green_excluded: usize,
}

/// Per-record truth and prediction rows for one task.
struct TaskRows {
    pred: Vec<Vec<Vec<f64>>>,
    truth: Vec<Vec<Vec<f64>>>,
    reduce: Reduce,
}

impl TaskRows {
    fn flat(&self, idx: &[usize], factor: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for &i in idx {
            p.extend(reaggregate(&self.pred[i], factor, self.reduce)?.into_iter().flatten());
            t.extend(reaggregate(&self.truth[i], factor, self.reduce)?.into_iter().flatten());
        }
        Ok((p, t))
    }

    fn stats(&self, idx: &[usize], factor: usize) -> Result<Option<ErrorStats>> {
        let (p, t) = self.flat(idx, factor)?;
        if t.is_empty() {
            return Ok(None);
        }
        ErrorStats::compute(&p, &t).map(Some)
    }
}

fn as_f64<T: Copy + Into<f64>>(rows: &[Vec<T>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v.into()).collect()).collect()
}

fn select(rows: &[Vec<f64>], mask: &[bool]) -> Vec<Vec<f64>> {
    rows.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r.clone()).collect()
}

/// Lane-presence masks restricting ext/inf errors to lanes that exist.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneMasks {
    pub exit: Vec<bool>,
    pub inflow: Vec<bool>,
}

/// Builds the report from predictions aligned with `records`.
pub fn build_report(
    preds: &[Prediction],
    records: &[SimulationRecord],
    masks: &LaneMasks,
    meta: (Variant, Mode, String),
) -> Result<MoeReport> {
    if preds.len() != records.len() {
        return Err(shape_err!("{} predictions for {} records", preds.len(), records.len()));
    }
    if records.is_empty() {
        return Err(contract_err!("cannot report on an empty record set"));
    }
    let mut tasks: BTreeMap<&str, TaskRows> = BTreeMap::new();
    if preds.iter().all(|p| p.ext.is_some() && p.inf.is_some()) {
        for (name, mask, reduce) in [("ext", &masks.exit, Reduce::Sum), ("inf", &masks.inflow, Reduce::Sum)] {
            let pred = preds
                .iter()
                .map(|p| select(if name == "ext" { p.ext.as_ref() } else { p.inf.as_ref() }.expect("checked"), mask))
                .collect();
            let truth = records
                .iter()
                .map(|r| select(&as_f64(if name == "ext" { &r.ext } else { &r.inf }), mask))
                .collect();
            tasks.insert(name, TaskRows { pred, truth, reduce });
        }
    }
    tasks.insert(
        "ql",
        TaskRows {
            pred: preds.iter().map(|p| p.ql.clone()).collect(),
            truth: records.iter().map(|r| as_f64(&r.ql)).collect(),
            reduce: Reduce::Max,
        },
    );
    tasks.insert(
        "tt",
        TaskRows {
            pred: preds.iter().map(|p| p.tt.clone()).collect(),
            truth: records.iter().map(|r| as_f64(&r.tt)).collect(),
            reduce: Reduce::Sum,
        },
    );

    let all: Vec<usize> = (0..records.len()).collect();
    let mut overall = BTreeMap::new();
    for (name, rows) in &tasks {
        if let Some(s) = rows.stats(&all, 1)? {
            overall.insert(name.to_string(), s);
        }
    }

    let mut aggregation = BTreeMap::new();
    for name in ["ext", "inf", "ql"] {
        let Some(rows) = tasks.get(name) else { continue };
        let mut out = Vec::new();
        for f in AGGREGATION_FACTORS {
            if let Some(stats) = rows.stats(&all, f)? {
                out.push(AggregationRow { bucket_seconds: f as u32 * BUCKET_SECONDS, stats });
            }
        }
        aggregation.insert(name.to_string(), out);
    }

    let tt = &tasks["tt"];
    let mut tt_percentiles = Vec::new();
    for q in TT_PERCENTILES {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for i in 0..records.len() {
            let (a, b) = percentile_values(&tt.pred[i], &tt.truth[i], q)?;
            p.extend(a);
            t.extend(b);
        }
        let stats = if t.is_empty() { None } else { Some(ErrorStats::compute(&p, &t)?) };
        tt_percentiles.push(PercentileRow { percentile: q, stats });
    }

    let ql = &tasks["ql"];
    let mut queue_partitions = Vec::new();
    for (part, idx) in partition_by_max_queue(records) {
        let stats = ql.stats(&idx, 1)?;
        queue_partitions.push(QueuePartitionRow {
            partition: part,
            range: part.range().into(),
            records: idx.len(),
            ql: stats,
            mae_percent: stats.map(|s| 100.0 * s.mae / part.upper()),
        });
    }

    let green = partition_by_green_time(records);
    let mut green_partitions = Vec::new();
    for (part, idx) in &green.groups {
        let mut per_task = BTreeMap::new();
        for (name, rows) in &tasks {
            if let Some(s) = rows.stats(idx, 1)? {
                per_task.insert(name.to_string(), s);
            }
        }
        green_partitions.push(GreenPartitionRow {
            partition: *part,
            range: part.range().into(),
            records: idx.len(),
            tasks: per_task,
        });
    }

    let (variant, mode, checkpoint_id) = meta;
    Ok(MoeReport {
        variant,
        mode,
        checkpoint_id,
        records: records.len(),
        tasks: overall,
        aggregation,
        tt_percentiles,
        queue_partitions,
        green_partitions,
        green_excluded: green.excluded.len(),
    })
}

/// Runs `model` over `records` and reports its errors. The MOE variant has no
/// GAT outputs, so its ext/inf rows are absent.
pub fn evaluate(model: &Mtdt, records: &[SimulationRecord], mode: Mode) -> Result<MoeReport> {
    let preds = predict_all(model, records, mode)?;
    let masks = LaneMasks { exit: model.exit_template.present.clone(), inflow: model.inflow_template.present.clone() };
    build_report(&preds, records, &masks, (model.config.variant, mode, model.checkpoint_id()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Mtdt => "MTDT",
        Variant::Moe => "MTDT-MOE",
    }
}

/// Aggregation/percentile table, one column group per report.
pub fn table_accuracy_csv(reports: &[&MoeReport]) -> String {
    let mut s = String::from("task,row");
    for r in reports {
        let v = variant_name(r.variant);
        let _ = write!(s, ",{v} MAE,{v} RMSE,{v} NRMSE,{v} CI95");
    }
    s.push('\n');
    let stat_cols = |s: &mut String, st: Option<&ErrorStats>| match st {
        Some(st) => {
            let _ = write!(s, ",{:.4},{:.4},{},{:.4}", st.mae, st.rmse, fmt_opt(st.nrmse), st.ci95);
        }
        None => s.push_str(",-,-,-,-"),
    };
    for task in ["ql", "tt", "ext", "inf"] {
        if task == "tt" {
            for (k, q) in TT_PERCENTILES.iter().enumerate() {
                let _ = write!(s, "tt,{q}th percentile");
                for r in reports {
                    stat_cols(&mut s, r.tt_percentiles.get(k).and_then(|p| p.stats.as_ref()));
                }
                s.push('\n');
            }
            continue;
        }
        for f in AGGREGATION_FACTORS {
            let secs = f as u32 * BUCKET_SECONDS;
            let _ = write!(s, "{task},{secs}-second buckets");
            for r in reports {
                let row = r.aggregation.get(task).and_then(|rows| rows.iter().find(|a| a.bucket_seconds == secs));
                stat_cols(&mut s, row.map(|a| &a.stats));
            }
            s.push('\n');
        }
    }
    s
}

/// Queue-length MAE (and percent of the partition's upper edge) per partition.
pub fn table_queue_partitions_csv(reports: &[&MoeReport]) -> String {
    let mut s = String::from("model");
    for p in QueuePartition::ALL {
        let _ = write!(s, ",{} ({})", p.label(), p.range());
    }
    s.push_str(",records\n");
    for r in reports {
        s.push_str(variant_name(r.variant));
        for row in &r.queue_partitions {
            match row.ql {
                Some(st) => {
                    let _ = write!(s, ",{:.2} ({:.1}%)", st.mae, row.mae_percent.unwrap_or(0.0));
                }
                None => s.push_str(",-"),
            }
        }
        let counts: Vec<String> = r.queue_partitions.iter().map(|p| p.records.to_string()).collect();
        let _ = writeln!(s, ",{}", counts.join("/"));
    }
    s
}

/// Per-task errors in each green-time partition.
pub fn table_green_partitions_csv(reports: &[&MoeReport]) -> String {
    let mut s = String::from("model,task,measure");
    for p in GreenPartition::ALL {
        let _ = write!(s, ",{} ({})", p.label(), p.range());
    }
    s.push('\n');
    for r in reports {
        for task in ["ext", "inf", "ql", "tt"] {
            let second = if task == "ql" { "NRMSE" } else { "RMSE" };
            for measure in ["MAE", second] {
                let _ = write!(s, "{},{task},{measure}", variant_name(r.variant));
                for row in &r.green_partitions {
                    let v = row.tasks.get(task).and_then(|st| match measure {
                        "MAE" => Some(st.mae),
                        "NRMSE" => st.nrmse,
                        _ => Some(st.rmse),
                    });
                    let _ = write!(s, ",{}", fmt_opt(v));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Number of 5-second buckets after merging by `factor`.
pub fn aggregated_len(factor: usize) -> usize {
    WINDOW_BUCKETS / factor
}
