//! Reconstruction quality and campaign statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Mean squared error over all features (no square root).
pub fn mse(x: &[f64], x_rec: &[f64]) -> Result<f64> {
    same_len(x, x_rec, "mse")?;
    Ok(x.iter().zip(x_rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Single-window SSIM from whole-image statistics, averaged over
/// `channels` equal planes. Population moments.
pub fn ssim(x: &[f64], y: &[f64], channels: usize, dynamic_range: f64) -> Result<f64> {
    same_len(x, y, "ssim")?;
    if channels == 0 || x.len() % channels != 0 || !(dynamic_range > 0.0) {
        return Err(Error::config("ssim needs a positive dynamic range and equal channel planes"));
    }
    let c1 = (K1 * dynamic_range).powi(2);
    let c2 = (K2 * dynamic_range).powi(2);
    let plane = x.len() / channels;
    let total: f64 = x
        .chunks(plane)
        .zip(y.chunks(plane))
        .map(|(a, b)| {
            let n = plane as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (p, q) in a.iter().zip(b) {
                va += (p - ma) * (p - ma);
                vb += (q - mb) * (q - mb);
                cov += (p - ma) * (q - mb);
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / channels as f64)
}

/// One attacked sample as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    pub label_correct: bool,
    pub iterations: usize,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub avg: f64,
    pub min: usize,
    pub max: usize,
    pub median: f64,
    /// Population variance.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub attacks: usize,
    pub successes: usize,
    pub asr_content: f64,
    pub asr_label: f64,
    /// Over successes only; absent when nothing succeeded.
    pub mse_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub iterations: Option<IterationStats>,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

pub fn summarize(campaign: &[AttackOutcome]) -> Result<CampaignStats> {
    if campaign.is_empty() {
        return Err(Error::config("cannot summarize an empty campaign"));
    }
    let total = campaign.len() as f64;
    let wins: Vec<&AttackOutcome> = campaign.iter().filter(|o| o.success).collect();
    let labels = campaign.iter().filter(|o| o.label_correct).count();
    let mut iters: Vec<usize> = wins.iter().map(|o| o.iterations).collect();
    iters.sort_unstable();
    // Sorted inputs make the floating-point sums order-independent.
    let mean_of = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (mse_mean, ssim_mean, iterations) = if wins.is_empty() {
        (None, None, None)
    } else {
        let avg = iters.iter().sum::<usize>() as f64 / iters.len() as f64;
        let variance = iters.iter().map(|&i| (i as f64 - avg).powi(2)).sum::<f64>() / iters.len() as f64;
        (
            Some(mean_of(wins.iter().map(|o| o.mse).collect())),
            Some(mean_of(wins.iter().map(|o| o.ssim).collect())),
            Some(IterationStats {
                avg,
                min: iters[0],
                max: iters[iters.len() - 1],
                median: median(&iters),
                variance,
            }),
        )
    };
    Ok(CampaignStats {
        attacks: campaign.len(),
        successes: wins.len(),
        asr_content: wins.len() as f64 / total,
        asr_label: labels as f64 / total,
        mse_mean,
        ssim_mean,
        iterations,
    })
}
