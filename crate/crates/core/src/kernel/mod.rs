//! Kernels, MMD estimators and kernel-based two-sample machinery.

pub mod losses;
pub mod mmdagg;
pub mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use losses::{
    conditional_kls_loss, energy_distance_loss, grouped_kls_loss, mmd2_loss, sinkhorn_divergence_loss,
    GroupWeights,
};
pub use mmdagg::{mmdagg_test, MmdAggConfig, TwoSampleResult};
pub use sinkhorn::{sinkhorn, OtCoupling};

/// Default IMQ offset.
pub const DEFAULT_RHO: f64 = 1.0;

/// Radial kernel `k(x, y) = f(||x - y||^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelConfig {
    /// Inverse multiquadric `1 / sqrt(rho + r^2)`.
    Imq { rho: f64 },
    /// Gaussian `exp(-r^2 / (2 h^2))`.
    Rbf { bandwidth: f64 },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Imq { rho: DEFAULT_RHO }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelConfig::Imq { rho } if rho >= 0.0 && rho.is_finite() => Ok(()),
            KernelConfig::Rbf { bandwidth } if bandwidth > 0.0 && bandwidth.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid kernel parameters {other:?}"))),
        }
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn of_sq_dist<T: Scalar>(&self, r2: T) -> T {
        match *self {
            KernelConfig::Imq { rho } => (T::of(rho) + r2).sqrt().recip(),
            KernelConfig::Rbf { bandwidth } => (-r2 / T::of(2.0 * bandwidth * bandwidth)).exp(),
        }
    }

    /// Derivative of the kernel w.r.t. the squared distance.
    #[inline]
    pub fn d_sq_dist<T: Scalar>(&self, r2: T) -> T {
        match *self {
            KernelConfig::Imq { rho } => {
                let s = T::of(rho) + r2;
                -T::of(0.5) / (s * s.sqrt())
            }
            KernelConfig::Rbf { bandwidth } => {
                let h2 = T::of(2.0 * bandwidth * bandwidth);
                -(-r2 / h2).exp() / h2
            }
        }
    }

    pub fn eval<T: Scalar>(&self, x: &[T], y: &[T]) -> T {
        self.of_sq_dist(sq_dist(x, y))
    }
}

#[inline]
pub fn sq_dist<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// `1 / sqrt(rho + ||x - y||^2)`.
pub fn imq<T: Scalar>(x: &[T], y: &[T], rho: T) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "imq on vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if rho < T::zero() {
        return Err(Error::Config(format!("IMQ offset {rho} is negative")));
    }
    let s = rho + sq_dist(x, y);
    if s == T::zero() {
        return Err(Error::Contract(
            "IMQ with rho = 0 evaluated at coincident points divides by zero".into(),
        ));
    }
    Ok(s.sqrt().recip())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Biased,
    Unbiased,
}

/// Sum of `k(a_i, b_j)` over all pairs, optionally skipping `i == j`.
fn gram_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kernel: &KernelConfig, skip_diag: bool) -> T {
    let mut total = T::zero();
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            total += kernel.eval(ai, b.row(j));
        }
    }
    total
}

/// Squared MMD between two sample sets (rows are points).
pub fn mmd2<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kernel: &KernelConfig,
    estimator: Estimator,
) -> Result<T> {
    kernel.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "sample sets of dimension {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let min = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if m < min || n < min {
        return Err(Error::Contract(format!(
            "{estimator:?} MMD needs at least {min} points per set, got {m} and {n}"
        )));
    }
    let (mf, nf) = (T::of(m as f64), T::of(n as f64));
    let cross = gram_sum(a, b, kernel, false) / (mf * nf);
    let (saa, sbb) = match estimator {
        Estimator::Biased => (
            gram_sum(a, a, kernel, false) / (mf * mf),
            gram_sum(b, b, kernel, false) / (nf * nf),
        ),
        Estimator::Unbiased => (
            gram_sum(a, a, kernel, true) / (mf * (mf - T::one())),
            gram_sum(b, b, kernel, true) / (nf * (nf - T::one())),
        ),
    };
    Ok(saa + sbb - T::of(2.0) * cross)
}

/// Median of pairwise Euclidean distances between the rows of `points`.
///
/// Falls back to `1.0` (with a warning) when the median is zero.
pub fn median_heuristic(points: &Tensor<f64>) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::Contract(format!(
            "median heuristic needs at least 2 points, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        *dists.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let upper = *dists.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 && median.is_finite() {
        Ok(median)
    } else {
        log::warn!("median pairwise distance is {median}; falling back to bandwidth 1.0");
        Ok(1.0)
    }
}
