//! Synchronous federated rounds: client selection, local SGD, optional
//! client-side compression and noise, interception, and server aggregation.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{compress_topk, CompressionState};
use crate::data::{stack, Sample};
use crate::error::{Error, Result};
use crate::mitigation::{add_noise, NoisePolicy};
use crate::model::{loss_and_gradients, Mode, ModelSpec, ParamSet};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Gradient,
    Weight,
    WeightDelta,
}

impl UpdateKind {
    pub fn name(self) -> &'static str {
        match self {
            UpdateKind::Gradient => "gradient",
            UpdateKind::Weight => "weight",
            UpdateKind::WeightDelta => "weight_delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub global_lr: f64,
    pub client_lr: f64,
    pub batch_size: usize,
    pub local_iterations: usize,
    pub update_kind: UpdateKind,
    pub rounds: usize,
    pub seed: u64,
    /// Top-k fraction withheld by each client; `None` sends full vectors.
    pub compression: Option<f64>,
    pub noise: NoisePolicy,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            participation_fraction: 1.0,
            global_lr: 0.1,
            client_lr: 0.1,
            batch_size: 1,
            local_iterations: 1,
            update_kind: UpdateKind::Gradient,
            rounds: 1,
            seed: 0,
            compression: None,
            noise: NoisePolicy::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config("participation_fraction must lie in (0, 1]"));
        }
        if !(self.global_lr > 0.0) {
            return Err(Error::config("global_lr must be positive"));
        }
        // Zero is allowed: it turns local training into a pure probe.
        if !(self.client_lr >= 0.0) {
            return Err(Error::config("client_lr must be non-negative"));
        }
        if self.batch_size == 0 || self.local_iterations == 0 {
            return Err(Error::config("batch_size and local_iterations must be at least 1"));
        }
        if self.client_lr == 0.0 && self.local_iterations > 1 && self.update_kind == UpdateKind::Gradient {
            return Err(Error::config(
                "an accumulated gradient over several local iterations needs client_lr > 0",
            ));
        }
        if let Some(theta) = self.compression {
            CompressionState::new(theta, 0)?;
            if self.update_kind == UpdateKind::Weight {
                return Err(Error::config("compression applies to gradient or weight_delta updates"));
            }
        }
        self.noise.validate()
    }

    pub fn clients_per_round(&self) -> usize {
        ((self.num_clients as f64 * self.participation_fraction).round() as usize).clamp(1, self.num_clients)
    }
}

/// What a client transmits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub kind: UpdateKind,
    pub payload: Vec<f64>,
    pub sample_count: usize,
    pub mask: Option<Vec<bool>>,
    pub local_lr: f64,
    pub round: usize,
}

/// `K_t` distinct client ids, ascending, uniform without replacement.
pub fn select_clients(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let k = cfg.clients_per_round();
    let mut rng = seed::rng(&[cfg.seed, tag::SELECT, round as u64]);
    let mut ids = index::sample(&mut rng, cfg.num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub update: ClientUpdate,
    /// Loss of the first local step, at `w(t)`.
    pub loss: f64,
}

/// Runs `M` SGD steps on a fixed batch (the first `B` samples of the shard)
/// and packages the result according to `cfg.update_kind`.
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamSet,
    shard: &[Sample],
    cfg: &FederationConfig,
    client_id: usize,
    round: usize,
) -> Result<LocalResult> {
    if shard.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "client {client_id} holds {} samples, fewer than batch_size {}",
            shard.len(),
            cfg.batch_size
        )));
    }
    let (x, labels) = stack(&shard[..cfg.batch_size], &spec.input_shape)?;
    let w0 = params.flatten();
    let mut w = w0.clone();
    let mut first = None;
    for step in 0..cfg.local_iterations {
        let mode = Mode::Train {
            dropout_seed: seed::mix(&[cfg.seed, tag::DROPOUT, round as u64, client_id as u64, step as u64]),
        };
        let (loss, g) = loss_and_gradients(spec, &params.unflatten(&w)?, &x, &labels, mode)?;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= cfg.client_lr * gi;
        }
        first.get_or_insert((loss, g));
    }
    let (loss, g0) = first.expect("local_iterations ≥ 1");
    let payload = match cfg.update_kind {
        UpdateKind::Gradient if cfg.local_iterations == 1 => g0,
        UpdateKind::Gradient => w0.iter().zip(&w).map(|(a, b)| (a - b) / cfg.client_lr).collect(),
        UpdateKind::Weight => w,
        UpdateKind::WeightDelta => w.iter().zip(&w0).map(|(a, b)| a - b).collect(),
    };
    Ok(LocalResult {
        update: ClientUpdate {
            client_id,
            kind: cfg.update_kind,
            payload,
            sample_count: cfg.batch_size,
            mask: None,
            local_lr: cfg.client_lr,
            round,
        },
        loss,
    })
}

/// Aggregation weights `n_k / n`.
fn weights(updates: &[ClientUpdate], expected: UpdateKind) -> Result<Vec<f64>> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let dim = first.payload.len();
    for u in updates {
        if u.kind != expected {
            return Err(Error::KindMismatch {
                expected: expected.name(),
                found: u.kind.name(),
            });
        }
        if u.payload.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: vec![dim],
                rhs: vec![u.payload.len()],
            });
        }
    }
    let n: usize = updates.iter().map(|u| u.sample_count).sum();
    if n == 0 {
        return Err(Error::ZeroSamples);
    }
    Ok(updates.iter().map(|u| u.sample_count as f64 / n as f64).collect())
}

fn weighted_sum(updates: &[ClientUpdate], weights: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; updates[0].payload.len()];
    for (u, &p) in updates.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(&u.payload) {
            *a += p * v;
        }
    }
    acc
}

fn check_dim(w: &[f64], updates: &[ClientUpdate]) -> Result<()> {
    match updates.first() {
        Some(u) if u.payload.len() != w.len() => Err(Error::ShapeMismatch {
            op: "aggregate",
            lhs: vec![w.len()],
            rhs: vec![u.payload.len()],
        }),
        _ => Ok(()),
    }
}

/// `w(t+1) = w(t) − η Σ (n_k/n) ∇w_k(t)`.
pub fn aggregate_fedsgd(w: &[f64], updates: &[ClientUpdate], lr: f64) -> Result<Vec<f64>> {
    let p = weights(updates, UpdateKind::Gradient)?;
    check_dim(w, updates)?;
    let g = weighted_sum(updates, &p);
    Ok(w.iter().zip(&g).map(|(a, b)| a - lr * b).collect())
}

/// `w(t+1) = Σ (n_k/n) w_k(t+1)`.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let p = weights(updates, UpdateKind::Weight)?;
    Ok(weighted_sum(updates, &p))
}

/// `w(t+1) = w(t) + Σ (n_k/n) Δw_k(t)`.
pub fn aggregate_delta(w: &[f64], updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let p = weights(updates, UpdateKind::WeightDelta)?;
    check_dim(w, updates)?;
    let d = weighted_sum(updates, &p);
    Ok(w.iter().zip(&d).map(|(a, b)| a + b).collect())
}

pub fn aggregate(w: &[f64], updates: &[ClientUpdate], cfg: &FederationConfig) -> Result<Vec<f64>> {
    match cfg.update_kind {
        UpdateKind::Gradient => aggregate_fedsgd(w, updates, cfg.global_lr),
        UpdateKind::Weight => aggregate_fedavg(updates),
        UpdateKind::WeightDelta => aggregate_delta(w, updates),
    }
}

#[derive(Debug, Clone)]
pub struct FederationState {
    pub params: ParamSet,
    /// Index of the next round to run, starting at 1.
    pub round: usize,
    pub shards: Vec<Vec<Sample>>,
    pub compression: Vec<Option<CompressionState>>,
}

impl FederationState {
    pub fn new(params: ParamSet, shards: Vec<Vec<Sample>>, cfg: &FederationConfig) -> Result<Self> {
        if shards.len() != cfg.num_clients {
            return Err(Error::config(format!(
                "{} shards for {} clients",
                shards.len(),
                cfg.num_clients
            )));
        }
        let dim = params.total_dim();
        let compression = (0..cfg.num_clients)
            .map(|_| cfg.compression.map(|t| CompressionState::new(t, dim)).transpose())
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            round: 1,
            shards,
            compression,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<usize>,
    pub losses: Vec<f64>,
    pub update_norms: Vec<f64>,
}

impl RoundLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("round log serializes") + "\n"
    }
}

/// Receives every outgoing update after client-side mitigation.
pub type Interceptor<'a> = &'a (dyn Fn(&ClientUpdate) + Sync);

/// One synchronous round. Client work runs in parallel; the interceptor
/// observes updates exactly as transmitted.
pub fn run_round(
    spec: &ModelSpec,
    state: &FederationState,
    cfg: &FederationConfig,
    interceptor: Option<Interceptor<'_>>,
) -> Result<(FederationState, RoundLog)> {
    cfg.validate()?;
    let round = state.round;
    let clients = select_clients(cfg, round);
    let outcomes: Vec<(LocalResult, Option<CompressionState>)> = clients
        .par_iter()
        .map(|&k| {
            let mut local = local_train(spec, &state.params, &state.shards[k], cfg, k, round)?;
            let mut residual = None;
            if let Some(comp) = &state.compression[k] {
                let (c, next) = compress_topk(&local.update.payload, comp)?;
                local.update.payload = c.payload;
                local.update.mask = Some(c.mask);
                residual = Some(next);
            }
            local.update = add_noise(&local.update, &cfg.noise);
            if let Some(tap) = interceptor {
                tap(&local.update);
            }
            Ok((local, residual))
        })
        .collect::<Result<_>>()?;

    let mut next = state.clone();
    let mut log = RoundLog {
        round,
        clients: clients.clone(),
        losses: Vec::with_capacity(clients.len()),
        update_norms: Vec::with_capacity(clients.len()),
    };
    let mut updates = Vec::with_capacity(clients.len());
    for (&k, (local, residual)) in clients.iter().zip(outcomes) {
        if residual.is_some() {
            next.compression[k] = residual;
        }
        log.losses.push(local.loss);
        log.update_norms.push(local.update.payload.iter().map(|v| v * v).sum::<f64>().sqrt());
        updates.push(local.update);
    }
    let w = aggregate(&state.params.flatten(), &updates, cfg)?;
    next.params = state.params.unflatten(&w)?;
    next.round += 1;
    Ok((next, log))
}
