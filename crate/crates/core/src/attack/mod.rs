//! Gradient-based reconstruction of a client's private batch from one
//! intercepted update.
//!
//! The attacker fixes labels from the sign of the final-layer bias gradient,
//! then drives a dummy input `x_rec` so that the gradient it induces at the
//! same weights matches the intercepted one.

mod optim;

pub use optim::{optimizer_step, OptimizerKind, OptimizerState, CURVATURE_EPS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comms::{delta_to_gradient, weight_update_to_gradient};
use crate::error::{Error, Result};
use crate::fl::{ClientUpdate, UpdateKind};
use crate::model::{forward_tensors, ModelSpec, Mode, ParamSet};
use crate::seed::{self, tag};
use crate::tensor::{grad, softmax_cross_entropy, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InitMethod {
    Random,
    /// A random tile covering `tile_fraction` of the area (1/4 or 1/16),
    /// repeated over the whole input.
    Patterned { tile_fraction: f64 },
    Dark,
    Light,
    Rgb { channel: usize },
    /// A same-class example; the campaign runner supplies `donor`.
    Optimal {
        #[serde(default, skip_serializing)]
        donor: Vec<f64>,
    },
}

impl InitMethod {
    pub fn name(&self) -> String {
        match self {
            InitMethod::Random => "random".into(),
            InitMethod::Patterned { tile_fraction } => format!("patterned_{tile_fraction}"),
            InitMethod::Dark => "dark".into(),
            InitMethod::Light => "light".into(),
            InitMethod::Rgb { channel } => format!("rgb_{channel}"),
            InitMethod::Optimal { .. } => "optimal".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    L2,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub init: InitMethod,
    pub max_iterations: usize,
    pub loss_threshold: f64,
    pub distance: DistanceKind,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Samples to reconstruct jointly; defaults to the update's sample count.
    pub batch_size_hint: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            init: InitMethod::Patterned { tile_fraction: 0.25 },
            max_iterations: 300,
            loss_threshold: 1e-4,
            distance: DistanceKind::L2,
            alpha: 0.0,
            optimizer: OptimizerKind::default(),
            seed: 0,
            batch_size_hint: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::config("loss_threshold must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        if let InitMethod::Patterned { tile_fraction } = self.init {
            tile_divisor(tile_fraction)?;
        }
        if self.batch_size_hint == Some(0) {
            return Err(Error::config("batch_size_hint must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// `[batch, ...input_shape]`, every entry in `[0, 1]`.
    pub x_rec: Tensor,
    pub labels: Vec<usize>,
    pub success: bool,
    pub iterations_used: usize,
    pub final_distance: f64,
    /// Distance at every evaluated iterate, starting with the seed.
    pub trace: Vec<f64>,
}

/// Linear side divisor of a tile covering `fraction` of a 2-D area.
fn tile_divisor(fraction: f64) -> Result<usize> {
    if fraction == 0.25 {
        Ok(2)
    } else if fraction == 0.0625 {
        Ok(4)
    } else {
        Err(Error::config(format!("tile_fraction must be 1/4 or 1/16, got {fraction}")))
    }
}

/// Attack seed for one sample of `shape`.
pub fn init_seed(method: &InitMethod, shape: &[usize], seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(Error::config("attack seed needs a non-empty shape"));
    }
    let mut rng = seed::rng(&[seed, tag::INIT]);
    let data = match method {
        InitMethod::Random => (0..n).map(|_| rng.random::<f64>()).collect(),
        InitMethod::Dark => vec![0.0; n],
        InitMethod::Light => vec![1.0; n],
        InitMethod::Rgb { channel } => {
            if shape.len() != 3 || shape[0] < 3 || *channel >= shape[0] {
                return Err(Error::config(format!(
                    "rgb init needs a [C≥3, H, W] shape with channel < C, got {shape:?} / {channel}"
                )));
            }
            let plane = shape[1] * shape[2];
            (0..n).map(|i| f64::from(u8::from(i / plane == *channel))).collect()
        }
        InitMethod::Optimal { donor } => {
            if donor.len() != n {
                return Err(Error::config(format!(
                    "optimal init donor has {} values, expected {n}",
                    donor.len()
                )));
            }
            donor.clone()
        }
        InitMethod::Patterned { tile_fraction } => {
            let d = tile_divisor(*tile_fraction)?;
            // Trailing two axes are spatial; a vector is tiled along its length.
            let (planes, h, w, dh) = match shape {
                [len] => (1, 1, *len, 1),
                _ => {
                    let w = shape[shape.len() - 1];
                    let h = shape[shape.len() - 2];
                    (n / (h * w), h, w, d)
                }
            };
            let dw = if shape.len() == 1 { d * d } else { d };
            if h % dh != 0 || w % dw != 0 {
                return Err(Error::config(format!(
                    "shape {shape:?} cannot be tiled at fraction {tile_fraction}"
                )));
            }
            let (th, tw) = (h / dh, w / dw);
            let tile: Vec<f64> = (0..planes * th * tw).map(|_| rng.random::<f64>()).collect();
            (0..n)
                .map(|i| {
                    let (p, r) = (i / (h * w), i % (h * w));
                    let (y, x) = (r / w, r % w);
                    tile[p * th * tw + (y % th) * tw + x % tw]
                })
                .collect()
        }
    };
    Tensor::from_vec(shape, data)
}

/// Class scores from the final layer: bias gradient when present, else the
/// per-class sum of the weight gradient.
fn label_scores(gradient: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    let fl = spec.final_layer()?;
    let dim = spec.total_dim()?;
    if gradient.len() != dim {
        return Err(Error::ShapeMismatch {
            op: "infer_label",
            lhs: vec![gradient.len()],
            rhs: vec![dim],
        });
    }
    Ok(match fl.bias_offset {
        Some(b) => gradient[b..b + fl.classes].to_vec(),
        None => (0..fl.classes)
            .map(|c| (0..fl.fan_in).map(|j| gradient[fl.weight_offset + j * fl.classes + c]).sum())
            .collect(),
    })
}

/// The `count` classes with the most negative scores, most negative first.
pub fn infer_label(gradient: &[f64], spec: &ModelSpec, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > spec.num_classes {
        return Err(Error::config(format!(
            "cannot infer {count} labels from {} classes",
            spec.num_classes
        )));
    }
    let scores = label_scores(gradient, spec)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order)
}

/// Splits a flat vector into constant tensors shaped like `like`.
fn split_like(flat: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut offset = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let part = Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec());
            offset += n;
            part
        })
        .collect()
}

/// Gradient-matching objective between the attacker's per-parameter
/// gradients `att` and the intercepted flat gradient `target`, restricted to
/// `mask`, plus `alpha · ‖softmax(logits) − onehot(labels)‖²`.
pub fn gradient_distance(
    att: &[Tensor],
    target: &[f64],
    kind: DistanceKind,
    mask: Option<&[bool]>,
    alpha: f64,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let dim: usize = att.iter().map(Tensor::numel).sum();
    if target.len() != dim || mask.is_some_and(|m| m.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "gradient_distance",
            lhs: vec![dim],
            rhs: vec![target.len()],
        });
    }
    let masks = match mask {
        Some(m) => {
            if !m.contains(&true) {
                return Err(Error::EmptyMask);
            }
            let m: Vec<f64> = m.iter().map(|&b| f64::from(u8::from(b))).collect();
            Some(split_like(&m, att)?)
        }
        None => None,
    };
    let masked_target: Vec<f64> = match mask {
        Some(m) => target.iter().zip(m).map(|(&v, &b)| if b { v } else { 0.0 }).collect(),
        None => target.to_vec(),
    };
    let targets = split_like(&masked_target, att)?;
    let masked: Vec<Tensor> = match &masks {
        Some(ms) => att.iter().zip(ms).map(|(a, m)| a.mul(m)).collect::<Result<_>>()?,
        None => att.to_vec(),
    };

    let mut d = match kind {
        DistanceKind::L2 => {
            let mut acc = Tensor::scalar(0.0);
            for (a, t) in masked.iter().zip(&targets) {
                acc = acc.add(&a.sub(t)?.square()?.sum()?)?;
            }
            acc
        }
        DistanceKind::Cosine => {
            let nb = masked_target.iter().map(|v| v * v).sum::<f64>().sqrt();
            let na2: f64 = masked.iter().flat_map(|a| a.data().iter()).map(|v| v * v).sum();
            if nb == 0.0 || na2 == 0.0 {
                return Err(Error::ZeroNorm);
            }
            let mut dot = Tensor::scalar(0.0);
            let mut sq = Tensor::scalar(0.0);
            for (a, t) in masked.iter().zip(&targets) {
                dot = dot.add(&a.mul(t)?.sum()?)?;
                sq = sq.add(&a.square()?.sum()?)?;
            }
            dot.div(&sq.sqrt()?.scale(nb)?)?.neg()?.add_scalar(1.0)?
        }
    };
    if alpha > 0.0 {
        let classes = logits.shape().last().copied().unwrap_or(1);
        let mut onehot = vec![0.0; logits.numel()];
        for (row, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            onehot[row * classes + l] = 1.0;
        }
        let y = Tensor::from_vec(logits.shape(), onehot)?;
        let reg = logits.softmax()?.sub(&y)?.square()?.sum()?.scale(alpha)?;
        d = d.add(&reg)?;
    }
    Ok(d)
}

/// The flat gradient an update stands for, plus its mask.
pub fn update_gradient(update: &ClientUpdate, w: &ParamSet) -> Result<Vec<f64>> {
    match update.kind {
        UpdateKind::Gradient => Ok(update.payload.clone()),
        UpdateKind::Weight => weight_update_to_gradient(&update.payload, &w.flatten(), update.local_lr),
        UpdateKind::WeightDelta => delta_to_gradient(&update.payload, update.local_lr),
    }
}

/// Everything fixed for the duration of one reconstruction.
struct Problem<'a> {
    spec: &'a ModelSpec,
    w: &'a ParamSet,
    x_shape: Vec<usize>,
    labels: Vec<usize>,
    target: Vec<f64>,
    mask: Option<&'a [bool]>,
    cfg: &'a AttackConfig,
}

impl Problem<'_> {
    /// Distance at `x` and its gradient with respect to `x`.
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let graph = Graph::new();
        let params = self.w.leaves(&graph);
        let xt = graph.leaf(&Tensor::from_vec(&self.x_shape, x.to_vec())?);
        let logits = forward_tensors(self.spec, &params, &xt, Mode::Eval)?;
        let loss = softmax_cross_entropy(&logits, &self.labels)?;
        let wrt: Vec<&Tensor> = params.iter().collect();
        let att = grad(&loss, &wrt, true)?;
        let cfg = self.cfg;
        let d = gradient_distance(&att, &self.target, cfg.distance, self.mask, cfg.alpha, &logits, &self.labels)?;
        let gx = grad(&d, &[&xt], false)?;
        Ok((d.item(), gx[0].to_vec()))
    }
}

/// Observes `(iteration, distance, x)` at every evaluated iterate.
pub type Observer<'a> = &'a mut dyn FnMut(usize, f64, &[f64]);

/// Reconstructs the batch behind `update`, which was computed at weights `w`.
pub fn reconstruct(update: &ClientUpdate, w: &ParamSet, spec: &ModelSpec, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    reconstruct_observed(update, w, spec, cfg, None)
}

pub fn reconstruct_observed(
    update: &ClientUpdate,
    w: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let target = update_gradient(update, w)?;
    let mask = update.mask.as_deref();
    if mask.is_some_and(|m| !m.contains(&true)) {
        return Err(Error::EmptyMask);
    }
    let batch = cfg.batch_size_hint.unwrap_or(update.sample_count).max(1);
    // Fixed once, before any content optimisation.
    let labels = infer_label(&target, spec, batch)?;

    let mut x_shape = vec![batch];
    x_shape.extend_from_slice(&spec.input_shape);
    let mut x = Vec::with_capacity(batch * spec.input_len());
    for b in 0..batch {
        let s = init_seed(&cfg.init, &spec.input_shape, seed::mix(&[cfg.seed, b as u64]))?;
        x.extend_from_slice(s.data());
    }

    let problem = Problem {
        spec,
        w,
        x_shape,
        labels,
        target,
        mask,
        cfg,
    };
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut trace = Vec::new();
    let mut success = false;
    let mut iterations_used = 0;
    for tau in 0..=cfg.max_iterations {
        let (d, gx) = problem.evaluate(&x)?;
        trace.push(d);
        iterations_used = tau;
        if let Some(obs) = observer.as_mut() {
            obs(tau, d, &x);
        }
        if d <= cfg.loss_threshold {
            success = true;
            break;
        }
        if tau == cfg.max_iterations || !d.is_finite() {
            break;
        }
        x = opt.step(&x, &gx);
        for v in &mut x {
            *v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        }
    }
    Ok(ReconstructionResult {
        x_rec: Tensor::from_vec(&problem.x_shape, x)?,
        labels: problem.labels,
        success,
        iterations_used,
        final_distance: *trace.last().expect("at least one evaluation"),
        trace,
    })
}

#[cfg(test)]
mod tests;
