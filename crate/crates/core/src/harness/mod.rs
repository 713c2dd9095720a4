//! Config-driven attack campaigns.
//!
//! Each sweep cell builds a federation, trains up to the attack round,
//! intercepts the target clients' updates as transmitted and attacks each
//! one with several seeds. Cells and attacks run on a bounded worker pool;
//! results are assembled in cell order, so reports do not depend on
//! scheduling.

pub mod config;
pub mod image;
pub mod report;
pub mod theorem;

use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attack::{reconstruct_observed, InitMethod, Observer, ReconstructionResult};
use crate::data::{gen_synthetic, load_csv_onehot, load_mnist_idx, rescale, Dataset, Sample};
use crate::error::{Error, Result};
use crate::fl::{run_round, ClientUpdate, FederationState, RoundLog};
use crate::metrics::{mse, ssim, summarize, AttackOutcome, CampaignStats};
use crate::model::{init_params, Architecture, ModelSpec, ParamSet};
use crate::seed::{self, tag};

pub use config::{CampaignConfig, CellConfig, DatasetConfig, ExperimentConfig, ModelConfig, Partition};
pub use image::{decode_pnm, encode_pnm, export_image};
pub use report::{write_report, CellParams, CellRow, ExperimentReport, Provenance};
pub use theorem::{verify_convergence_bound, ConvergenceReport};

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let ds = match cfg {
        DatasetConfig::Mnist { images, labels, limit, .. } => {
            let mut ds = load_mnist_idx(images, labels)?;
            if let Some(n) = limit {
                ds.samples.truncate(*n);
            }
            ds
        }
        DatasetConfig::Synthetic {
            shape,
            num_classes,
            per_class,
            corpus_seed,
            ..
        } => gen_synthetic(shape, *num_classes, *per_class, *corpus_seed)?,
        DatasetConfig::Csv {
            path,
            label_column,
            schema,
        } => {
            let load = load_csv_onehot(path, label_column, schema)?;
            if load.dropped_rows > 0 {
                log::info!("{}: dropped {} rows with missing values", path.display(), load.dropped_rows);
            }
            load.dataset
        }
    };
    let ds = match cfg.resize() {
        Some([h, w]) => rescale(&ds, h, w)?,
        None => ds,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn build_spec(cfg: &ModelConfig, ds: &Dataset) -> Result<ModelSpec> {
    let architecture = match (&cfg.architecture, ds.input_shape.len()) {
        (Some(a), _) => a.clone(),
        (None, 3) => {
            let s = &ds.input_shape;
            ModelSpec::lenet([s[0], s[1], s[2]], ds.num_classes, cfg.activation).architecture
        }
        (None, _) => Architecture::Mlp { hidden: vec![64] },
    };
    // The MLP sees images as flat feature vectors.
    let input_shape = match architecture {
        Architecture::Mlp { .. } => vec![ds.input_shape.iter().product()],
        Architecture::Cnn { .. } => ds.input_shape.clone(),
    };
    let spec = ModelSpec {
        architecture,
        activation: cfg.activation,
        dropout_rate: cfg.dropout_rate,
        input_shape,
        num_classes: ds.num_classes,
        filter_multiplier: cfg.filter_multiplier,
    };
    spec.validate()?;
    Ok(spec)
}

/// Deals `clients` equal shards of `⌊n / clients⌋` samples each.
pub fn partition(ds: &Dataset, clients: usize, how: Partition, seed_value: u64) -> Result<Vec<Vec<Sample>>> {
    let per = ds.len() / clients.max(1);
    if per == 0 {
        return Err(Error::config(format!("{} samples cannot fill {clients} shards", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    match how {
        Partition::Sequential => {}
        Partition::Iid => order.shuffle(&mut seed::rng(&[seed_value, tag::PARTITION])),
        Partition::NonIid => order.sort_by_key(|&i| ds.samples[i].label),
    }
    Ok(order
        .chunks(per)
        .take(clients)
        .map(|c| c.iter().map(|&i| ds.samples[i].clone()).collect())
        .collect())
}

/// A cell trained up to its attack round, with the intercepted target
/// updates.
pub struct PreparedCell {
    pub cell: CellConfig,
    pub spec: ModelSpec,
    /// Per-sample shape as stored in the dataset.
    pub sample_shape: Vec<usize>,
    /// Global model the intercepted updates were computed against.
    pub weights: ParamSet,
    pub updates: Vec<ClientUpdate>,
    /// Private batch behind each update.
    pub truths: Vec<Vec<Sample>>,
    /// Same-class example from another client, for optimal seeding.
    pub donors: Vec<Option<Vec<f64>>>,
    pub logs: Vec<RoundLog>,
}

pub fn prepare_cell(cell: &CellConfig, targets: &[usize]) -> Result<PreparedCell> {
    let camp = &cell.campaign;
    if camp.attack_round == 0 || camp.seeds_per_image == 0 || targets.is_empty() {
        return Err(Error::config("attack_round, seeds_per_image and images_per_cell must be positive"));
    }
    if !(camp.quality_mse >= 0.0) {
        return Err(Error::config("quality_mse must be non-negative"));
    }
    cell.attack.validate()?;
    let mut fed = cell.federation.clone();
    fed.seed = cell.seed;
    fed.noise.seed = cell.seed;
    fed.noise.validate()?;
    fed.validate()?;
    if let Some(&t) = targets.iter().find(|&&t| t >= fed.num_clients) {
        return Err(Error::config(format!("target client {t} but only {} clients", fed.num_clients)));
    }
    let ds = load_dataset(&cell.dataset)?;
    let spec = build_spec(&cell.model, &ds)?;
    let shards = partition(&ds, fed.num_clients, camp.partition, cell.seed)?;
    if shards[0].len() < fed.batch_size {
        return Err(Error::config(format!(
            "shards of {} samples cannot supply batch size {}",
            shards[0].len(),
            fed.batch_size
        )));
    }
    let mut state = FederationState::new(init_params(&spec, cell.seed)?, shards, &fed)?;
    let mut logs = vec![];
    while state.round < camp.attack_round {
        let (next, log) = run_round(&spec, &state, &fed, None)?;
        state = next;
        logs.push(log);
    }
    let tapped = Mutex::new(vec![]);
    let tap = |u: &ClientUpdate| {
        if targets.contains(&u.client_id) {
            tapped.lock().expect("tap lock").push(u.clone());
        }
    };
    let (_, log) = run_round(&spec, &state, &fed, Some(&tap))?;
    logs.push(log);
    let mut updates = tapped.into_inner().expect("tap lock");
    if updates.is_empty() {
        return Err(Error::config("no target client took part in the attack round"));
    }
    updates.sort_by_key(|u| u.client_id);
    let truths: Vec<Vec<Sample>> = updates
        .iter()
        .map(|u| state.shards[u.client_id][..fed.batch_size].to_vec())
        .collect();
    let donors = updates
        .iter()
        .zip(&truths)
        .map(|(u, t)| {
            let label = t[0].label;
            state
                .shards
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != u.client_id)
                .flat_map(|(_, s)| s.iter())
                .find(|s| s.label == label)
                .map(|s| s.x.clone())
        })
        .collect();
    Ok(PreparedCell {
        cell: cell.clone(),
        spec,
        sample_shape: ds.input_shape,
        weights: state.params,
        updates,
        truths,
        donors,
        logs,
    })
}

fn channels(spec: &ModelSpec) -> usize {
    if spec.input_shape.len() == 3 {
        spec.input_shape[0]
    } else {
        1
    }
}

/// Scores a joint reconstruction against its private batch. Rows are
/// paired greedily by smallest MSE, since the attacker's sample order is
/// arbitrary.
pub fn evaluate(result: &ReconstructionResult, truth: &[Sample], spec: &ModelSpec) -> Result<AttackOutcome> {
    let n = spec.input_len();
    let rec: Vec<&[f64]> = result.x_rec.data().chunks(n).collect();
    if rec.len() != truth.len() {
        return Err(Error::config(format!(
            "reconstructed {} samples for a batch of {}",
            rec.len(),
            truth.len()
        )));
    }
    let mut pairs = vec![];
    for (i, r) in rec.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            pairs.push((mse(&t.x, r)?, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let (mut used_r, mut used_t) = (vec![false; rec.len()], vec![false; truth.len()]);
    let (mut mse_sum, mut ssim_sum) = (0.0, 0.0);
    for (m, i, j) in pairs {
        if !used_r[i] && !used_t[j] {
            used_r[i] = true;
            used_t[j] = true;
            mse_sum += m;
            ssim_sum += ssim(&truth[j].x, rec[i], channels(spec), 1.0)?;
        }
    }
    let mut inferred = result.labels.clone();
    let mut actual: Vec<usize> = truth.iter().map(|s| s.label).collect();
    inferred.sort_unstable();
    actual.sort_unstable();
    Ok(AttackOutcome {
        success: result.success,
        label_correct: inferred == actual,
        iterations: result.iterations_used,
        mse: mse_sum / truth.len() as f64,
        ssim: ssim_sum / truth.len() as f64,
    })
}

impl PreparedCell {
    pub fn attack_seed(&self, target: usize, repeat: usize) -> u64 {
        seed::mix(&[self.cell.seed, tag::ATTACK, self.updates[target].client_id as u64, repeat as u64])
    }

    /// Attack number `repeat` on the `target`-th intercepted update.
    pub fn attack(
        &self,
        target: usize,
        repeat: usize,
        observer: Option<Observer<'_>>,
    ) -> Result<(ReconstructionResult, AttackOutcome)> {
        let mut cfg = self.cell.attack.clone();
        cfg.seed = self.attack_seed(target, repeat);
        if let InitMethod::Optimal { donor } = &mut cfg.init {
            *donor = self.donors[target]
                .clone()
                .ok_or_else(|| Error::config("no same-class donor outside the target client"))?;
        }
        let result = reconstruct_observed(&self.updates[target], &self.weights, &self.spec, &cfg, observer)?;
        let outcome = evaluate(&result, &self.truths[target], &self.spec)?;
        Ok((result, outcome))
    }
}

/// Statistics of one finished cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub stats: CampaignStats,
    /// Fraction of attacks that converged and reached `quality_mse`.
    pub asr_quality: f64,
    pub outcomes: Vec<AttackOutcome>,
    pub logs: Vec<RoundLog>,
}

pub fn run_cell(cell: &CellConfig) -> Result<CellOutcome> {
    let targets: Vec<usize> = (0..cell.campaign.images_per_cell).collect();
    let prepared = prepare_cell(cell, &targets)?;
    let jobs: Vec<(usize, usize)> = (0..prepared.updates.len())
        .flat_map(|t| (0..cell.campaign.seeds_per_image).map(move |s| (t, s)))
        .collect();
    let outcomes: Vec<AttackOutcome> = jobs
        .par_iter()
        .map(|&(t, s)| prepared.attack(t, s, None).map(|(_, o)| o))
        .collect::<Result<_>>()?;
    let stats = summarize(&outcomes)?;
    let good = outcomes
        .iter()
        .filter(|o| o.success && o.mse <= cell.campaign.quality_mse)
        .count();
    Ok(CellOutcome {
        stats,
        asr_quality: good as f64 / outcomes.len() as f64,
        outcomes,
        logs: prepared.logs,
    })
}

/// Runs every cell. A failing cell becomes an error row; only an invalid
/// config or worker-pool failure aborts the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let cells: Vec<CellConfig> = (0..cfg.cell_count()).map(|i| cfg.cell(i)).collect::<Result<_>>()?;
    let workers = cells[0].campaign.workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let results: Vec<Result<CellOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let r = run_cell(c);
                match &r {
                    Ok(o) => log::info!("cell {i}: asr {:.3}", o.stats.asr_content),
                    Err(e) => log::warn!("cell {i} failed: {e}"),
                }
                r
            })
            .collect()
    });
    Ok(ExperimentReport::assemble(cfg, &cells, results))
}
