//! Aggregated MMD two-sample test with wild-bootstrap thresholds.
//!
//! Each bandwidth of a Gaussian-kernel collection gets its own MMD statistic.
//! Thresholds come from a shared set of Rademacher wild-bootstrap draws, and
//! the per-bandwidth levels are scaled by a common factor found by bisection
//! so that the aggregated test has level `alpha` under a second, independent
//! bootstrap sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{median_heuristic, sq_dist};

/// Smallest sample size accepted per set.
pub const MIN_SAMPLES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthGrid {
    /// `median * 2^i` for each exponent, with the median over the pooled sample.
    MedianScaled { exponents: Vec<i32> },
    Explicit { bandwidths: Vec<f64> },
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        BandwidthGrid::MedianScaled {
            exponents: (-3..=3).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdAggConfig {
    pub alpha: f64,
    pub grid: BandwidthGrid,
    /// Bootstrap draws used for the quantiles.
    pub bootstrap_iters: usize,
    /// Independent bootstrap draws used to calibrate the aggregated level.
    pub level_iters: usize,
    pub bisection_steps: usize,
}

impl Default for MmdAggConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            grid: BandwidthGrid::default(),
            bootstrap_iters: 500,
            level_iters: 500,
            bisection_steps: 50,
        }
    }
}

impl MmdAggConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        match &self.grid {
            BandwidthGrid::MedianScaled { exponents } if exponents.is_empty() => {
                return Err(Error::Config("empty bandwidth grid".into()))
            }
            BandwidthGrid::Explicit { bandwidths }
                if bandwidths.is_empty() || bandwidths.iter().any(|b| !(*b > 0.0 && b.is_finite())) =>
            {
                return Err(Error::Config(format!("degenerate bandwidth grid {bandwidths:?}")))
            }
            _ => {}
        }
        if self.bootstrap_iters == 0 || self.level_iters == 0 {
            return Err(Error::Config("bootstrap iteration counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthStat {
    pub bandwidth: f64,
    pub statistic: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub reject: bool,
    pub level: f64,
    /// Level multiplier found by bisection; bandwidth `l` is tested at `u * alpha / L`.
    pub level_scale: f64,
    pub per_bandwidth: Vec<BandwidthStat>,
}

/// Upper quantile at level `beta` of `sorted` (ascending, original statistic included).
fn upper_quantile(sorted: &[f64], beta: f64) -> f64 {
    let n = sorted.len();
    let idx = ((n as f64) * (1.0 - beta)).ceil() as usize;
    sorted[idx.clamp(1, n) - 1]
}

/// Aggregated test of `H0: P_A = P_B` on equally sized samples.
pub fn mmdagg_test(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    config: &MmdAggConfig,
    rng: &mut impl Rng,
) -> Result<TwoSampleResult> {
    config.validate()?;
    let n = a.rows();
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "samples of width {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    if n < MIN_SAMPLES || b.rows() < MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "two-sample test needs at least {MIN_SAMPLES} points per set, got {n} and {}",
            b.rows()
        )));
    }
    if b.rows() != n {
        return Err(Error::Contract(format!(
            "wild bootstrap needs equal sample sizes, got {n} and {}",
            b.rows()
        )));
    }

    let bandwidths: Vec<f64> = match &config.grid {
        BandwidthGrid::Explicit { bandwidths } => bandwidths.clone(),
        BandwidthGrid::MedianScaled { exponents } => {
            let pooled = Tensor::concat_rows(a, b)?;
            let med = median_heuristic(&pooled)?;
            exponents.iter().map(|&e| med * 2f64.powi(e)).collect()
        }
    };

    let sq = |x: &Tensor<f64>, y: &Tensor<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(sq_dist(x.row(i), y.row(j)));
            }
        }
        out
    };
    let (daa, dbb, dab) = (sq(a, a), sq(b, b), sq(a, b));

    let draw = |rng: &mut dyn rand::RngCore, count: usize| -> Tensor<f64> {
        let mut e = Vec::with_capacity(count * n);
        for _ in 0..count * n {
            e.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        Tensor::matrix(count, n, e).expect("sized")
    };
    let e1 = draw(rng, config.bootstrap_iters);
    let e2 = draw(rng, config.level_iters);
    let norm = (n * (n - 1)) as f64;

    // sorted[l]: bootstrap statistics plus the original; level[l]: second bootstrap
    let mut originals = Vec::with_capacity(bandwidths.len());
    let mut sorted = Vec::with_capacity(bandwidths.len());
    let mut level_stats = Vec::with_capacity(bandwidths.len());
    for &bw in &bandwidths {
        let s = 2.0 * bw * bw;
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    h[i * n + j] = (-daa[i * n + j] / s).exp() + (-dbb[i * n + j] / s).exp()
                        - (-dab[i * n + j] / s).exp()
                        - (-dab[j * n + i] / s).exp();
                }
            }
        }
        let h = Tensor::matrix(n, n, h)?;
        let quad = |e: &Tensor<f64>| -> Result<Vec<f64>> {
            let eh = e.matmul(&h)?;
            Ok((0..e.rows())
                .map(|r| eh.row(r).iter().zip(e.row(r)).map(|(x, y)| x * y).sum::<f64>() / norm)
                .collect())
        };
        let original = h.sum() / norm;
        let mut boot = quad(&e1)?;
        boot.push(original);
        boot.sort_by(f64::total_cmp);
        originals.push(original);
        sorted.push(boot);
        level_stats.push(quad(&e2)?);
    }

    let num_bw = bandwidths.len();
    let weight = 1.0 / num_bw as f64;
    let thresholds = |u: f64| -> Vec<f64> {
        sorted
            .iter()
            .map(|s| upper_quantile(s, u * weight * config.alpha))
            .collect()
    };
    let estimated_level = |u: f64| -> f64 {
        let t = thresholds(u);
        let hits = (0..config.level_iters)
            .filter(|&r| (0..num_bw).any(|l| level_stats[l][r] > t[l]))
            .count();
        hits as f64 / config.level_iters as f64
    };
    let (mut lo, mut hi) = (0.0, num_bw as f64);
    for _ in 0..config.bisection_steps {
        let mid = 0.5 * (lo + hi);
        if estimated_level(mid) <= config.alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = thresholds(lo);
    let per_bandwidth: Vec<BandwidthStat> = bandwidths
        .iter()
        .zip(&originals)
        .zip(&t)
        .map(|((&bandwidth, &statistic), &threshold)| BandwidthStat {
            bandwidth,
            statistic,
            threshold,
        })
        .collect();
    Ok(TwoSampleResult {
        reject: per_bandwidth.iter().any(|s| s.statistic > s.threshold),
        level: config.alpha,
        level_scale: lo,
        per_bandwidth,
    })
}
