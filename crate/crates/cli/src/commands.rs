use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mtdt_core::metrics::{evaluate, table_accuracy_csv, table_green_partitions_csv, table_queue_partitions_csv};
use mtdt_core::model::{Mode, Mtdt, Variant};
use mtdt_core::service::{self, PredictRequest, TopologyRegistry};
use mtdt_core::sim::topology::{load_topologies, IntersectionTopology};
use mtdt_core::sim::{generate_dataset, read_jsonl, write_jsonl, GenerateConfig, SimulationRecord};
use mtdt_core::train::{split, train, TrainConfig};
use serde::Serialize;

use crate::server::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "mtdt", version, about = "Intersection digital twin: simulate, train, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenarios into a JSONL dataset.
    Generate {
        /// Topology JSON (one object or an array); the built-in family when absent.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generator settings JSON; `--topology` overrides its topologies.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a checkpoint and write `model.ckpt` and `train_report.json` into `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        intersection: Option<String>,
    },
    /// Evaluate a checkpoint and write an MOE report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Inference)]
        mode: ModeArg,
        /// Also write the three CSV tables into this directory.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Answer one PredictRequest JSON file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Write the built-in topology family as JSON.
    Topology {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Mtdt,
    Moe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Training,
    Inference,
}

/// Command failure; bad inputs exit 2, everything else 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mtdt_core::Error> for Failure {
    fn from(e: mtdt_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage<T, E: Into<anyhow::Error>>(r: Result<T, E>, what: &Path) -> CmdResult<T> {
    r.map_err(|e| Failure::Usage(e.into().context(format!("cannot read {}", what.display()))))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = usage(fs::read_to_string(path), path)?;
    usage(serde_json::from_str(&text), path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> CmdResult<(Mtdt, BTreeMap<String, serde_json::Value>)> {
    let (model, header) = usage(Mtdt::load(path), path)?;
    Ok((model, header.meta))
}

fn topologies(path: Option<&Path>) -> CmdResult<Vec<IntersectionTopology>> {
    match path {
        Some(p) => usage(load_topologies(p), p),
        None => Ok(IntersectionTopology::default_family()),
    }
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate { topology, n, seed, out, config } => {
            let mut cfg: GenerateConfig = match &config {
                Some(p) => read_json(p)?,
                None => GenerateConfig::default(),
            };
            if topology.is_some() {
                cfg.topologies = topologies(topology.as_deref())?;
            }
            let records = generate_dataset(&cfg, n, seed)?;
            write_jsonl(&out, &records)?;
            log::info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { data, config, out, epochs, seed, variant, intersection } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.model.variant = if v == VariantArg::Moe { Variant::Moe } else { Variant::Mtdt };
            }
            if intersection.is_some() {
                cfg.intersection = intersection;
            }
            let records = usage(read_jsonl(&data), &data)?;
            let family = topologies(cfg.topology.as_deref())?;
            let topo = family.first().ok_or_else(|| Failure::Usage(anyhow!("topology file lists no intersection")))?;
            let (model, report) = train(&records, &cfg, topo)?;
            fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let mut meta = BTreeMap::new();
            meta.insert("train_config".into(), serde_json::to_value(&cfg).map_err(anyhow::Error::from)?);
            meta.insert("selected_weight_decay".into(), report.selected_weight_decay.into());
            meta.insert("best_epoch".into(), report.best_epoch.into());
            meta.insert("records".into(), records.len().into());
            model.save(&out.join("model.ckpt"), meta)?;
            write_json(&out.join("train_report.json"), &report)?;
            log::info!("checkpoint {} (best epoch {})", report.checkpoint_id, report.best_epoch);
        }
        Command::Eval { data, ckpt, out, split: which, mode, csv_dir } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let records = usage(read_jsonl(&data), &data)?;
            let records = select_split(records, which, &meta)?;
            let mode = if mode == ModeArg::Training { Mode::Training } else { Mode::Inference };
            let mode = if model.has_gat() { mode } else { Mode::Training };
            let report = evaluate(&model, &records, mode)?;
            write_json(&out, &report)?;
            if let Some(dir) = csv_dir {
                fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
                for (name, text) in [
                    ("table_accuracy.csv", table_accuracy_csv(&[&report])),
                    ("table_queue_partitions.csv", table_queue_partitions_csv(&[&report])),
                    ("table_green_partitions.csv", table_green_partitions_csv(&[&report])),
                ] {
                    fs::write(dir.join(name), text).with_context(|| format!("cannot write {name}"))?;
                }
            }
        }
        Command::Predict { ckpt, request, out } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let req: PredictRequest = read_json(&request)?;
            let resp = service::predict(&req, Some(&model), &TopologyRegistry::default())?;
            write_json(&out, &resp)?;
        }
        Command::Serve { ckpt, addr, topology } => {
            let (model, meta) = match &ckpt {
                Some(p) => {
                    let (m, meta) = load_checkpoint(p)?;
                    (Some(m), meta)
                }
                None => (None, BTreeMap::new()),
            };
            let registry = TopologyRegistry { topologies: topologies(topology.as_deref())? };
            let state = Arc::new(AppState { model, meta, registry });
            let rt = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("cannot bind {addr}"))?;
                log::info!("listening on {addr}");
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .context("server error")
            })?;
        }
        Command::Topology { out } => write_json(&out, &IntersectionTopology::default_family())?,
    }
    Ok(())
}

/// Restricts `records` to one partition of the split the checkpoint was trained with.
fn select_split(
    records: Vec<SimulationRecord>,
    which: SplitArg,
    meta: &BTreeMap<String, serde_json::Value>,
) -> CmdResult<Vec<SimulationRecord>> {
    if which == SplitArg::All {
        return Ok(records);
    }
    let cfg: TrainConfig = meta
        .get("train_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Failure::Usage(anyhow!("checkpoint carries no training config; use --split all")))?;
    let filtered: Vec<SimulationRecord> = match &cfg.intersection {
        Some(isc) => records.into_iter().filter(|r| &r.isc == isc).collect(),
        None => records,
    };
    let sp = split(filtered.len(), cfg.split, cfg.seed)?;
    let idx = match which {
        SplitArg::Train => sp.train,
        SplitArg::Val => sp.val,
        SplitArg::Test => sp.test,
        SplitArg::All => unreachable!(),
    };
    if idx.is_empty() {
        return Err(Failure::Usage(anyhow!("the requested split is empty")));
    }
    Ok(idx.into_iter().map(|i| filtered[i].clone()).collect())
}
