//! Drives configured runs end to end and writes their artifacts:
//! `metrics.csv`, `timing.csv`, `summary.json`, `config.toml` and
//! `checkpoint.bin`. Wall-clock times live in `timing.csv` only, so
//! `metrics.csv` is byte-identical across reruns of the same config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetSpec, ModelKind, RunConfig, SweepAxis, COMPONENT_POINTS};
use crate::data::{class_count_table, load_ucihar, make_synthetic, partition, ClientShard, Dataset, Sample};
use crate::error::{Error, Result};
use crate::federation::{derive_seed, Federation, RoundRecord, Strategy};
use crate::metrics::MetricSummary;
use crate::nn::{build_network, write_checkpoint, Architecture, Network};

pub const METRICS_HEADER: [&str; 9] = [
    "round",
    "strategy",
    "accuracy",
    "f1_macro",
    "recall_macro",
    "auc_macro",
    "bytes_up",
    "bytes_down",
    "svd_fallbacks",
];

pub const TIMING_HEADER: [&str; 2] = ["round", "wall_seconds"];

const DATA_STREAM: u64 = 1 << 40;
const PARTITION_STREAM: u64 = DATA_STREAM + 1;
const STUDENT_STREAM: u64 = DATA_STREAM + 2;
const TEACHER_STREAM_BASE: u64 = 1 << 41;

/// Crate version plus the `git describe` of the build.
pub fn version_string() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("FEDKDX_GIT_DESCRIBE"))
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = one per core).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::domain(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn flatten_windows(ds: Dataset) -> Result<Dataset> {
    if ds.channels() == 1 {
        return Ok(ds);
    }
    let classes = ds.num_classes();
    let samples = ds
        .samples()
        .iter()
        .map(|s| {
            Ok(Sample {
                window: s.window.clone().reshape(1, s.window.len())?,
                label: s.label,
                subject_id: s.subject_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, Some(classes))
}

/// The configured dataset, shaped for the configured model.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            num_classes,
            dims,
            samples_per_class,
            separation,
            seed,
            ..
        } => make_synthetic(
            *num_classes,
            *dims,
            *samples_per_class,
            *separation,
            seed.unwrap_or_else(|| derive_seed(cfg.seed, DATA_STREAM)),
        ),
        DatasetSpec::Ucihar { path, model } => {
            let ds = load_ucihar(path)?;
            match model {
                ModelKind::Mlp => flatten_windows(ds),
                ModelKind::Cnn => Ok(ds),
            }
        }
    }
}

pub fn partition_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<ClientShard>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PARTITION_STREAM));
    partition(ds, &cfg.partition, &mut rng)
}

pub fn architecture_for(cfg: &RunConfig, ds: &Dataset) -> Architecture {
    match cfg.dataset.model() {
        ModelKind::Mlp => Architecture::Mlp {
            in_dims: ds.channels() * ds.length(),
            num_classes: ds.num_classes(),
        },
        ModelKind::Cnn => Architecture::CnnHar {
            in_channels: ds.channels(),
            in_length: ds.length(),
            num_classes: ds.num_classes(),
        },
    }
}

/// Dataset, partition, student and one teacher per client.
pub fn build_federation(cfg: &RunConfig) -> Result<Federation> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let shards = partition_dataset(cfg, &ds)?;
    let arch = architecture_for(cfg, &ds);
    let student = build_network(arch, derive_seed(cfg.seed, STUDENT_STREAM))?;
    let teachers = (0..shards.len())
        .map(|k| build_network(arch, derive_seed(cfg.seed, TEACHER_STREAM_BASE + k as u64)))
        .collect::<Result<Vec<Network>>>()?;
    Federation::new(cfg.federation_config(), ds, shards, student, teachers)
}

/// Runs every round in memory.
pub fn simulate(cfg: &RunConfig) -> Result<(Federation, Vec<RoundRecord>)> {
    let mut fed = build_federation(cfg)?;
    let records = (0..cfg.rounds).map(|_| fed.run_round()).collect::<Result<Vec<_>>>()?;
    Ok((fed, records))
}

pub fn csv_row(r: &RoundRecord) -> Vec<String> {
    let m = &r.metrics;
    vec![
        r.round.to_string(),
        r.strategy.to_string(),
        m.accuracy.to_string(),
        m.f1_macro.to_string(),
        m.recall_macro.to_string(),
        m.auc_macro.map(|a| a.to_string()).unwrap_or_default(),
        r.bytes_up.to_string(),
        r.bytes_down.to_string(),
        r.svd_fallbacks.to_string(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub version: String,
    pub strategy: Strategy,
    pub rounds: usize,
    pub final_metrics: MetricSummary,
    pub total_bytes_up: usize,
    pub total_bytes_down: usize,
    pub total_wall_seconds: f64,
    pub svd_fallbacks: usize,
    pub config: RunConfig,
}

/// Runs the experiment, streaming one row per round into `metrics.csv` and
/// `timing.csv` under `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut echoed = cfg.clone();
    echoed.out = None;
    fs::write(out.join("config.toml"), echoed.to_toml_string())?;

    let mut fed = build_federation(cfg)?;
    let mut csv = csv::Writer::from_path(out.join("metrics.csv"))?;
    csv.write_record(METRICS_HEADER)?;
    let mut timing = csv::Writer::from_path(out.join("timing.csv"))?;
    timing.write_record(TIMING_HEADER)?;
    let mut last = None;
    let (mut up, mut down, mut wall, mut fallbacks) = (0, 0, 0.0, 0);
    for _ in 0..cfg.rounds {
        let r = fed.run_round()?;
        csv.write_record(csv_row(&r))?;
        csv.flush()?;
        timing.write_record([r.round.to_string(), format!("{:.6}", r.wall_seconds)])?;
        timing.flush()?;
        up += r.bytes_up;
        down += r.bytes_down;
        wall += r.wall_seconds;
        fallbacks += r.svd_fallbacks;
        last = Some(r.metrics);
    }
    csv.flush()?;

    let mut ckpt = BufWriter::new(File::create(out.join("checkpoint.bin"))?);
    write_checkpoint(fed.student(), &mut ckpt)?;
    ckpt.flush()?;

    let summary = RunSummary {
        version: version_string(),
        strategy: cfg.strategy,
        rounds: cfg.rounds,
        final_metrics: last.expect("at least one round"),
        total_bytes_up: up,
        total_bytes_down: down,
        total_wall_seconds: wall,
        svd_fallbacks: fallbacks,
        config: echoed,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Writes `partition.csv`: one row per client with its train/test sizes and
/// class counts. Returns the table.
pub fn run_partition(cfg: &RunConfig, out: &Path) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let shards = partition_dataset(cfg, &ds)?;
    let table = class_count_table(&ds, &shards);
    fs::create_dir_all(out)?;
    let mut csv = csv::Writer::from_path(out.join("partition.csv"))?;
    let mut header = vec!["client".to_string(), "train".into(), "test".into()];
    header.extend((0..ds.num_classes()).map(|c| format!("class_{c}")));
    csv.write_record(&header)?;
    for (k, (shard, counts)) in shards.iter().zip(&table).enumerate() {
        let mut row = vec![
            k.to_string(),
            shard.train.len().to_string(),
            shard.test.len().to_string(),
        ];
        row.extend(counts.iter().map(usize::to_string));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

fn component_dir(label: &str) -> String {
    label.to_lowercase().replace('+', "_")
}

/// The configurations a sweep visits, with their labels and subdirectories.
pub fn sweep_points(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<(String, String, RunConfig)>> {
    cfg.validate()?;
    Ok(match axis {
        SweepAxis::JoinRatio => cfg
            .sweep
            .join_ratios
            .iter()
            .map(|&r| {
                let mut c = cfg.clone();
                c.join_ratio = r;
                (r.to_string(), format!("join_ratio_{r}"), c)
            })
            .collect(),
        SweepAxis::Components => COMPONENT_POINTS
            .iter()
            .filter(|p| cfg.sweep.components.iter().any(|c| c == p.0))
            .map(|&(label, nkd, ctl)| {
                let mut c = cfg.clone();
                c.strategy = Strategy::FedKdx;
                c.enable_nkd = nkd;
                c.enable_ctl = ctl;
                (label.to_string(), component_dir(label), c)
            })
            .collect(),
    })
}

/// One run per sweep point under `out/<point>/`, plus `sweep_summary.csv`.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, out: &Path) -> Result<Vec<SweepPoint>> {
    let points = sweep_points(cfg, axis)?;
    fs::create_dir_all(out)?;
    let mut results = Vec::with_capacity(points.len());
    for (label, dir, c) in points {
        let path = out.join(&dir);
        let summary = run_experiment(&c, &path)?;
        results.push(SweepPoint {
            label,
            dir: path,
            summary,
        });
    }
    let key = match axis {
        SweepAxis::JoinRatio => "join_ratio",
        SweepAxis::Components => "configuration",
    };
    let mut csv = csv::Writer::from_path(out.join("sweep_summary.csv"))?;
    csv.write_record([
        key,
        "accuracy",
        "auc_macro",
        "f1_macro",
        "recall_macro",
        "bytes_up",
        "bytes_down",
        "wall_seconds",
    ])?;
    for p in &results {
        let m = &p.summary.final_metrics;
        csv.write_record([
            p.label.clone(),
            m.accuracy.to_string(),
            m.auc_macro.map(|a| a.to_string()).unwrap_or_default(),
            m.f1_macro.to_string(),
            m.recall_macro.to_string(),
            p.summary.total_bytes_up.to_string(),
            p.summary.total_bytes_down.to_string(),
            format!("{:.6}", p.summary.total_wall_seconds),
        ])?;
    }
    csv.flush()?;
    Ok(results)
}
