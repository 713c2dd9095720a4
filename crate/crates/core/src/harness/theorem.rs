//! Empirical check of the gradient-descent rate on smooth convex problems:
//! with step `1/L`, `f(x_T) - f* <= 2 L ||x_0 - x*||^2 / T`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dim: usize,
    pub trials: usize,
    pub t_max: usize,
    /// Largest `(f(x_T) - f*) / (2 L ||x_0 - x*||^2 / T)` seen.
    pub max_ratio: f64,
    pub worst_trial: usize,
    pub worst_t: usize,
    pub holds: bool,
}

/// Random symmetric positive definite quadratic `½ (x - x*)ᵀ A (x - x*)`.
struct Quadratic {
    a: Vec<f64>,
    x_star: Vec<f64>,
    lipschitz: f64,
}

impl Quadratic {
    fn random(dim: usize, rng: &mut impl Rng) -> Self {
        // Orthonormal basis by Gram-Schmidt on a gaussian matrix.
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while q.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                q.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let lambda: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..10.0)).collect();
        let mut a = vec![0.0; dim * dim];
        for (l, u) in lambda.iter().zip(&q) {
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] += l * u[i] * u[j];
                }
            }
        }
        let lipschitz = lambda.iter().cloned().fold(0.0, f64::max);
        let x_star = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Quadratic { a, x_star, lipschitz }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let r: Vec<f64> = x.iter().zip(&self.x_star).map(|(a, b)| a - b).collect();
        (0..d).map(|i| (0..d).map(|j| self.a[i * d + j] * r[j]).sum()).collect()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(&self.x_star).map(|(a, b)| a - b).collect();
        0.5 * r.iter().zip(self.gradient(x)).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Runs `T_max` steps of gradient descent on `trials` random quadratics and
/// reports the worst ratio of achieved gap to the bound.
pub fn verify_convergence_bound(dim: usize, trials: usize, t_max: usize, seed_value: u64) -> Result<ConvergenceReport> {
    if dim == 0 || trials == 0 || t_max == 0 {
        return Err(Error::config("dim, trials and t_max must be positive"));
    }
    let mut report = ConvergenceReport {
        dim,
        trials,
        t_max,
        max_ratio: 0.0,
        worst_trial: 0,
        worst_t: 0,
        holds: true,
    };
    for trial in 0..trials {
        let mut rng = seed::rng(&[seed_value, trial as u64]);
        let f = Quadratic::random(dim, &mut rng);
        let mut x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r0: f64 = x.iter().zip(&f.x_star).map(|(a, b)| (a - b) * (a - b)).sum();
        for t in 1..=t_max {
            let g = f.gradient(&x);
            x.iter_mut().zip(&g).for_each(|(a, b)| *a -= b / f.lipschitz);
            let gap = f.value(&x);
            let bound = 2.0 * f.lipschitz * r0 / t as f64;
            let ratio = if gap <= 0.0 { 0.0 } else { gap / bound };
            if ratio > report.max_ratio {
                report.max_ratio = ratio;
                report.worst_trial = trial;
                report.worst_t = t;
            }
        }
    }
    report.holds = report.max_ratio < 1.0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotropic_quadratic_solves_in_one_step() {
        let f = Quadratic {
            a: vec![3.0, 0.0, 0.0, 3.0],
            x_star: vec![0.5, -1.0],
            lipschitz: 3.0,
        };
        let mut x = vec![2.0, 2.0];
        let g = f.gradient(&x);
        x.iter_mut().zip(&g).for_each(|(a, b)| *a -= b / f.lipschitz);
        assert_eq!(x, f.x_star);
        assert_eq!(f.value(&x), 0.0);
    }

    #[test]
    fn scalar_case_has_full_slack() {
        let r = verify_convergence_bound(1, 5, 10, 3).unwrap();
        // In one dimension the step 1/L is exact, so every ratio is zero.
        assert_eq!(r.max_ratio, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn random_quadratics_respect_bound() {
        let r = verify_convergence_bound(20, 100, 200, 0).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.max_ratio > 0.0);
    }

    #[test]
    fn rejects_degenerate_arguments() {
        assert!(verify_convergence_bound(0, 1, 1, 0).is_err());
        assert!(verify_convergence_bound(2, 0, 1, 0).is_err());
    }
}
