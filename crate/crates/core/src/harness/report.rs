//! Report assembly and CSV / JSON-lines output.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{render_value, CellConfig, DatasetConfig, ExperimentConfig};
use super::CellOutcome;
use crate::attack::OptimizerKind;
use crate::error::{Error, Result};
use crate::fl::RoundLog;
use crate::metrics::CampaignStats;
use crate::model::Architecture;

/// Everything that identifies how a report was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Distinct master seeds across cells, ascending.
    pub seeds: Vec<u64>,
    pub seeds_per_image: Vec<usize>,
    /// Distinct intercepted rounds across cells, ascending.
    pub attack_rounds: Vec<usize>,
    pub sweep_keys: Vec<String>,
    pub code_version: String,
}

/// The complete parameter tuple of a cell, flattened for tabular output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub dataset: String,
    pub resize: String,
    pub architecture: String,
    pub activation: String,
    pub filter_multiplier: usize,
    pub dropout_rate: f64,
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub batch_size: usize,
    pub local_iterations: usize,
    pub client_lr: f64,
    pub global_lr: f64,
    pub update_kind: String,
    pub compression: Option<f64>,
    pub noise_kind: String,
    pub noise_scale: f64,
    pub init: String,
    pub optimizer: String,
    pub distance: String,
    pub alpha: f64,
    pub max_iterations: usize,
    pub loss_threshold: f64,
    pub attack_round: usize,
    pub partition: String,
    pub seed: u64,
    pub images_per_cell: usize,
    pub seeds_per_image: usize,
}

fn architecture_name(a: &Option<Architecture>) -> String {
    match a {
        None => "default".into(),
        Some(Architecture::Mlp { hidden }) => format!("mlp{hidden:?}"),
        Some(Architecture::Cnn { convs, dense }) => {
            let convs: Vec<String> = convs
                .iter()
                .map(|c| format!("{}k{}s{}p{}", c.filters, c.kernel, c.stride, c.padding))
                .collect();
            format!("cnn[{}]dense{dense:?}", convs.join(" "))
        }
    }
}

fn optimizer_name(o: &OptimizerKind) -> String {
    match o {
        OptimizerKind::Lbfgs { history, lr } => format!("lbfgs(lr={lr} history={history})"),
        OptimizerKind::Adam { lr, .. } => format!("adam(lr={lr})"),
        OptimizerKind::Sgd { lr } => format!("sgd(lr={lr})"),
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl CellParams {
    pub fn of(cell: &CellConfig) -> Self {
        let dataset = match &cell.dataset {
            DatasetConfig::Mnist { .. } => "mnist".to_string(),
            DatasetConfig::Synthetic { shape, .. } => format!("synthetic{shape:?}"),
            DatasetConfig::Csv { path, .. } => path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let (f, a, c) = (&cell.federation, &cell.attack, &cell.campaign);
        CellParams {
            dataset,
            resize: cell.dataset.resize().map(|[h, w]| format!("{h}x{w}")).unwrap_or_default(),
            architecture: architecture_name(&cell.model.architecture),
            activation: cell.model.activation.name(),
            filter_multiplier: cell.model.filter_multiplier,
            dropout_rate: cell.model.dropout_rate,
            num_clients: f.num_clients,
            participation_fraction: f.participation_fraction,
            batch_size: f.batch_size,
            local_iterations: f.local_iterations,
            client_lr: f.client_lr,
            global_lr: f.global_lr,
            update_kind: f.update_kind.name().into(),
            compression: f.compression,
            noise_kind: snake(&f.noise.kind),
            noise_scale: f.noise.scale,
            init: a.init.name(),
            optimizer: optimizer_name(&a.optimizer),
            distance: snake(&a.distance),
            alpha: a.alpha,
            max_iterations: a.max_iterations,
            loss_threshold: a.loss_threshold,
            attack_round: c.attack_round,
            partition: snake(&c.partition),
            seed: cell.seed,
            images_per_cell: c.images_per_cell,
            seeds_per_image: c.seeds_per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub cell: usize,
    /// Swept assignments, `key=value` joined by `;`.
    pub label: String,
    pub params: CellParams,
    pub stats: Option<CampaignStats>,
    pub asr_quality: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub provenance: Provenance,
    pub rows: Vec<CellRow>,
    /// `(cell, log)` for every round each cell ran.
    pub round_logs: Vec<(usize, RoundLog)>,
}

fn sorted_unique<T: Ord + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = items.collect();
    v.sort();
    v.dedup();
    v
}

impl ExperimentReport {
    pub(super) fn assemble(cfg: &ExperimentConfig, cells: &[CellConfig], results: Vec<Result<CellOutcome>>) -> Self {
        let mut rows = vec![];
        let mut round_logs = vec![];
        for (i, (cell, result)) in cells.iter().zip(results).enumerate() {
            let label = cfg
                .cell_assignment(i)
                .iter()
                .map(|(k, v)| format!("{k}={}", render_value(v)))
                .collect::<Vec<_>>()
                .join(";");
            let mut row = CellRow {
                cell: i,
                label,
                params: CellParams::of(cell),
                stats: None,
                asr_quality: None,
                error: None,
            };
            match result {
                Ok(o) => {
                    row.stats = Some(o.stats);
                    row.asr_quality = Some(o.asr_quality);
                    round_logs.extend(o.logs.into_iter().map(|l| (i, l)));
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
        ExperimentReport {
            name: cells.first().map(|c| c.name.clone()).unwrap_or_default(),
            provenance: Provenance {
                config_hash: cfg.hash(),
                seeds: sorted_unique(cells.iter().map(|c| c.seed)),
                seeds_per_image: sorted_unique(cells.iter().map(|c| c.campaign.seeds_per_image)),
                attack_rounds: sorted_unique(cells.iter().map(|c| c.campaign.attack_round)),
                sweep_keys: cfg.sweep_keys(),
                code_version: env!("CARGO_PKG_VERSION").into(),
            },
            rows,
            round_logs,
        }
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_none())
    }
}

/// Column order of `report.csv`.
pub const CSV_COLUMNS: &[&str] = &[
    "cell", "label", "status", "dataset", "resize", "architecture", "activation", "filter_multiplier",
    "dropout_rate", "num_clients", "participation_fraction", "batch_size", "local_iterations", "client_lr",
    "global_lr", "update_kind", "compression", "noise_kind", "noise_scale", "init", "optimizer", "distance",
    "alpha", "max_iterations", "loss_threshold", "attack_round", "partition", "seed", "images_per_cell",
    "seeds_per_image", "attacks", "successes", "asr_content", "asr_label", "asr_quality", "mse_mean",
    "ssim_mean", "iter_avg", "iter_min", "iter_max", "iter_median", "iter_variance", "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_record(row: &CellRow) -> Vec<String> {
    let p = &row.params;
    let s = row.stats.as_ref();
    let it = s.and_then(|s| s.iterations);
    vec![
        row.cell.to_string(),
        row.label.clone(),
        if row.error.is_none() { "ok" } else { "error" }.into(),
        p.dataset.clone(),
        p.resize.clone(),
        p.architecture.clone(),
        p.activation.clone(),
        p.filter_multiplier.to_string(),
        p.dropout_rate.to_string(),
        p.num_clients.to_string(),
        p.participation_fraction.to_string(),
        p.batch_size.to_string(),
        p.local_iterations.to_string(),
        p.client_lr.to_string(),
        p.global_lr.to_string(),
        p.update_kind.clone(),
        opt(p.compression),
        p.noise_kind.clone(),
        p.noise_scale.to_string(),
        p.init.clone(),
        p.optimizer.clone(),
        p.distance.clone(),
        p.alpha.to_string(),
        p.max_iterations.to_string(),
        p.loss_threshold.to_string(),
        p.attack_round.to_string(),
        p.partition.clone(),
        p.seed.to_string(),
        p.images_per_cell.to_string(),
        p.seeds_per_image.to_string(),
        opt(s.map(|s| s.attacks)),
        opt(s.map(|s| s.successes)),
        opt(s.map(|s| s.asr_content)),
        opt(s.map(|s| s.asr_label)),
        opt(row.asr_quality),
        opt(s.and_then(|s| s.mse_mean)),
        opt(s.and_then(|s| s.ssim_mean)),
        opt(it.map(|i| i.avg)),
        opt(it.map(|i| i.min)),
        opt(it.map(|i| i.max)),
        opt(it.map(|i| i.median)),
        opt(it.map(|i| i.variance)),
        row.error.clone().unwrap_or_default(),
    ]
}

pub fn csv_bytes(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for row in &report.rows {
        w.write_record(csv_record(row)).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn jsonl_bytes(report: &ExperimentReport) -> Vec<u8> {
    let mut out = vec![];
    for row in &report.rows {
        serde_json::to_writer(&mut out, row).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, its mirror `report.jsonl`, `provenance.json` and
/// `rounds.jsonl` into `dir`, returning the paths written.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rounds = vec![];
    for (cell, log) in &report.round_logs {
        let mut v = serde_json::to_value(log).expect("round logs serialize");
        v["cell"] = (*cell).into();
        serde_json::to_writer(&mut rounds, &v).expect("values serialize");
        rounds.push(b'\n');
    }
    let provenance = serde_json::to_vec_pretty(&report.provenance).expect("provenance serializes");
    let files = [
        ("report.csv", csv_bytes(report)?),
        ("report.jsonl", jsonl_bytes(report)),
        ("provenance.json", provenance),
        ("rounds.jsonl", rounds),
    ];
    let mut written = vec![];
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
