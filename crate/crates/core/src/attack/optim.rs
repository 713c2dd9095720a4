//! Update rules for the reconstruction variable.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Limited-memory BFGS with a fixed step and no line search.
    Lbfgs {
        #[serde(default = "default_history")]
        history: usize,
        #[serde(default = "default_lbfgs_lr")]
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_history() -> usize {
    10
}
fn default_lbfgs_lr() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Lbfgs {
            history: default_history(),
            lr: default_lbfgs_lr(),
        }
    }
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Lbfgs { .. } => "lbfgs",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }
}

/// Curvature pairs with `⟨s, y⟩` at or below this are not stored.
pub const CURVATURE_EPS: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Mutable optimizer state; one per reconstruction.
pub struct OptimizerState {
    kind: OptimizerKind,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
    pairs: VecDeque<Pair>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            pairs: VecDeque::new(),
            prev: None,
        }
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    /// Next iterate from `x` and the objective gradient `g` at `x`.
    pub fn step(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => x.iter().zip(g).map(|(a, b)| a - lr * b).collect(),
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = vec![0.0; x.len()];
                    self.v = vec![0.0; x.len()];
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                x.iter()
                    .zip(g)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|((&xi, &gi), (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        xi - lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
            OptimizerKind::Lbfgs { history, lr } => {
                if let Some((px, pg)) = self.prev.take() {
                    let s: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > CURVATURE_EPS {
                        self.pairs.push_back(Pair { s, y, rho: 1.0 / sy });
                        while self.pairs.len() > history {
                            self.pairs.pop_front();
                        }
                    }
                }
                let direction = self.two_loop(g);
                self.prev = Some((x.to_vec(), g.to_vec()));
                x.iter().zip(&direction).map(|(a, d)| a - lr * d).collect()
            }
        }
    }

    /// Approximates `H⁻¹ g` from the stored pairs.
    fn two_loop(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for p in self.pairs.iter().rev() {
            let a = p.rho * dot(&p.s, &q);
            for (qi, yi) in q.iter_mut().zip(&p.y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some(last) = self.pairs.back() {
            let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
            for qi in &mut q {
                *qi *= gamma;
            }
        }
        for (p, a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = p.rho * dot(&p.y, &q);
            for (qi, si) in q.iter_mut().zip(&p.s) {
                *qi += (a - b) * si;
            }
        }
        q
    }
}

pub fn optimizer_step(state: &mut OptimizerState, x: &[f64], g: &[f64]) -> Vec<f64> {
    state.step(x, g)
}
