//! Client-side defenses: additive noise on the transmitted payload, and
//! gradient squeezing through the number of local iterations.

use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{ClientUpdate, FederationConfig};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian,
    Laplace,
}

/// `scale` is the standard deviation for gaussian noise and the diversity
/// `b` for laplace noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisePolicy {
    pub kind: NoiseKind,
    pub scale: f64,
    pub seed: u64,
}

impl NoisePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config("noise scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.kind != NoiseKind::None && self.scale > 0.0
    }
}

/// Adds i.i.d. zero-mean noise to every transmitted coordinate. The stream
/// depends only on `(policy.seed, client, round)`.
pub fn add_noise(update: &ClientUpdate, policy: &NoisePolicy) -> ClientUpdate {
    let mut out = update.clone();
    if !policy.is_active() {
        return out;
    }
    let mut rng = seed::rng(&[policy.seed, tag::NOISE, update.client_id as u64, update.round as u64]);
    let mut draw: Box<dyn FnMut() -> f64> = match policy.kind {
        NoiseKind::Gaussian => {
            let d = Normal::new(0.0, policy.scale).expect("validated scale");
            Box::new(move || d.sample(&mut rng))
        }
        NoiseKind::Laplace => {
            // The difference of two unit exponentials is standard Laplace.
            let b = policy.scale;
            Box::new(move || {
                let (e1, e2): (f64, f64) = (Exp1.sample(&mut rng), Exp1.sample(&mut rng));
                b * (e1 - e2)
            })
        }
        NoiseKind::None => unreachable!("inactive policy returned early"),
    };
    for (i, v) in out.payload.iter_mut().enumerate() {
        if update.mask.as_ref().is_none_or(|m| m[i]) {
            *v += draw();
        }
    }
    out
}

/// Shares the update only after `m` local iterations.
pub fn squeeze_schedule(cfg: &FederationConfig, m: usize) -> Result<FederationConfig> {
    if m == 0 {
        return Err(Error::config("squeezing needs at least one local iteration"));
    }
    Ok(FederationConfig {
        local_iterations: m,
        ..cfg.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::UpdateKind;

    fn update(dim: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: 3,
            kind: UpdateKind::Gradient,
            payload: (0..dim).map(|i| i as f64).collect(),
            sample_count: 1,
            mask: None,
            local_lr: 0.1,
            round: 1,
        }
    }

    fn policy(kind: NoiseKind, scale: f64) -> NoisePolicy {
        NoisePolicy { kind, scale, seed: 11 }
    }

    #[test]
    fn zero_scale_is_identity() {
        let u = update(5);
        assert_eq!(add_noise(&u, &policy(NoiseKind::Gaussian, 0.0)), u);
        assert_eq!(add_noise(&u, &policy(NoiseKind::None, 1.0)), u);
    }

    #[test]
    fn deterministic_per_client_and_round() {
        let u = update(8);
        let p = policy(NoiseKind::Laplace, 0.1);
        assert_eq!(add_noise(&u, &p), add_noise(&u, &p));
        let other_round = ClientUpdate { round: 2, ..u.clone() };
        assert_ne!(add_noise(&u, &p).payload, add_noise(&other_round, &p).payload);
        let other_client = ClientUpdate { client_id: 4, ..u.clone() };
        assert_ne!(add_noise(&u, &p).payload, add_noise(&other_client, &p).payload);
    }

    #[test]
    fn masked_coordinates_stay_zero() {
        let mut u = update(6);
        let mask = vec![true, false, true, false, false, true];
        for (v, &m) in u.payload.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        u.mask = Some(mask.clone());
        let noisy = add_noise(&u, &policy(NoiseKind::Gaussian, 1.0));
        for i in 0..6 {
            if mask[i] {
                assert_ne!(noisy.payload[i], u.payload[i]);
            } else {
                assert_eq!(noisy.payload[i], 0.0);
            }
        }
    }

    #[test]
    fn noise_moments() {
        let n = 1_000_000;
        let zero = ClientUpdate {
            payload: vec![0.0; n],
            ..update(0)
        };
        for (kind, var) in [(NoiseKind::Gaussian, 0.25), (NoiseKind::Laplace, 2.0 * 0.25)] {
            let noisy = add_noise(&zero, &policy(kind, 0.5));
            let mean = noisy.payload.iter().sum::<f64>() / n as f64;
            let sample_var = noisy.payload.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let stderr = (var / n as f64).sqrt();
            assert!(mean.abs() < 5.0 * stderr, "{kind:?} mean {mean}");
            assert!((sample_var / var - 1.0).abs() < 0.02, "{kind:?} var {sample_var}");
        }
    }

    #[test]
    fn squeeze() {
        let base = FederationConfig::default();
        assert_eq!(squeeze_schedule(&base, 1).unwrap(), base);
        assert_eq!(squeeze_schedule(&base, 5).unwrap().local_iterations, 5);
        assert!(squeeze_schedule(&base, 0).is_err());
    }
}
