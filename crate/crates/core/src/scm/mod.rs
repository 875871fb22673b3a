//! Analytic source/target SCMs used as ground truth.
//!
//! Source: `Y = [A(x) e^c / 2 ; c*n + x]` with `X ~ U(-1,1)`,
//! `C = 1 - 2 Beta(4,5)`, `N ~ vonMises(0, 4)`.
//! Target: `Y = [c*n^2 + x ; A(x) e^c]` with `X = 1 - 2 CB(0.6)`,
//! `C ~ N(0, I)`, `N ~ N(0, 0.1 I)`.
//! `A(x) = B^T B + 5I` with `B = x (2^x)^T`.
//!
//! The source mechanism is invertible given `(x, y)`; on the target side
//! only the context is recoverable, the noise up to sign.

pub mod dataset;
pub mod priors;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

pub use dataset::{generate_dataset, Dataset, DatasetMeta};

/// Contexts with magnitude below this cannot be used to recover source noise.
pub const DEGENERATE_CONTEXT: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// Dimension `d` of X, C and N; effects have dimension `2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmDims {
    pub d: usize,
}

impl ScmDims {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("dimension d must be at least 1".into()));
        }
        Ok(Self { d })
    }

    pub fn effect(self) -> usize {
        2 * self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub n: Vec<f64>,
    pub domain: Domain,
}

/// A shifted-counterfactual query: a source factual and a target intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfQuery {
    pub x_fact: Vec<f64>,
    pub y_fact: Vec<f64>,
    pub x_intv: Vec<f64>,
}

/// `A = B^T B + 5I` with `B = x (2^x)^T`; row-major `d x d`.
pub fn build_a(x: &[f64]) -> Tensor {
    let d = x.len();
    let p: Vec<f64> = x.iter().map(|&v| 2f64.powf(v)).collect();
    // B[i][j] = x_i p_j, so (B^T B)[j][k] = p_j p_k |x|^2
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let mut a = vec![0.0; d * d];
    for j in 0..d {
        for k in 0..d {
            a[j * d + k] = p[j] * p[k] * x2 + if j == k { 5.0 } else { 0.0 };
        }
    }
    Tensor::matrix(d, d, a).expect("d x d")
}

/// Solve `A z = b` for symmetric positive-definite `A` by Cholesky.
pub fn cholesky_solve(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    if a.rows() != d || a.cols() != d {
        return Err(Error::Dimension(format!(
            "{}x{} system with right-hand side of length {d}",
            a.rows(),
            a.cols()
        )));
    }
    let m = a.data();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let diag = m[i * d + i] - s;
                if diag <= 0.0 {
                    return Err(Error::Contract("matrix is not positive definite".into()));
                }
                l[i * d + i] = diag.sqrt();
            } else {
                l[i * d + j] = (m[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * d + i];
    }
    let mut z = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| l[k * d + i] * z[k]).sum();
        z[i] = (y[i] - s) / l[i * d + i];
    }
    Ok(z)
}

fn mat_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(p, q)| p * q).sum())
        .collect()
}

fn check_len(name: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension(format!(
            "{name} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

/// The pair of ground-truth SCMs for one dimension `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthScm {
    dims: ScmDims,
}

impl GroundTruthScm {
    pub fn new(dims: ScmDims) -> Self {
        Self { dims }
    }

    pub fn dims(&self) -> ScmDims {
        self.dims
    }

    pub fn d(&self) -> usize {
        self.dims.d
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, domain: Domain, rng: &mut R) -> Vec<f64> {
        (0..self.d())
            .map(|_| match domain {
                Domain::Source => priors::sample_uniform(-1.0, 1.0, rng),
                Domain::Target => 1.0 - 2.0 * priors::sample_continuous_bernoulli(0.6, rng),
            })
            .collect()
    }

    pub fn sample_c<R: Rng + ?Sized>(&self, domain: Domain, rng: &mut R) -> Vec<f64> {
        (0..self.d())
            .map(|_| match domain {
                Domain::Source => 1.0 - 2.0 * priors::sample_beta(4.0, 5.0, rng),
                Domain::Target => priors::sample_normal(1.0, rng),
            })
            .collect()
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, domain: Domain, rng: &mut R) -> Vec<f64> {
        (0..self.d())
            .map(|_| match domain {
                Domain::Source => priors::sample_von_mises(0.0, 4.0, rng),
                Domain::Target => priors::sample_normal(0.1, rng),
            })
            .collect()
    }

    /// Draw `(x, c, n)` from the domain's priors, in that order.
    pub fn sample_prior<R: Rng + ?Sized>(&self, domain: Domain, rng: &mut R) -> LatentTriple {
        let x = self.sample_x(domain, rng);
        let c = self.sample_c(domain, rng);
        let n = self.sample_n(domain, rng);
        LatentTriple { x, c, n, domain }
    }

    pub fn mechanism(&self, domain: Domain, x: &[f64], c: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        match domain {
            Domain::Source => self.source_mechanism(x, c, n),
            Domain::Target => self.target_mechanism(x, c, n),
        }
    }

    /// `[A e^c / 2 ; c*n + x]`.
    pub fn source_mechanism(&self, x: &[f64], c: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        let d = self.d();
        check_len("x", x, d)?;
        check_len("c", c, d)?;
        check_len("n", n, d)?;
        let a = build_a(x);
        let ec: Vec<f64> = c.iter().map(|v| v.exp()).collect();
        let mut y: Vec<f64> = mat_vec(&a, &ec).into_iter().map(|v| v / 2.0).collect();
        y.extend((0..d).map(|k| c[k] * n[k] + x[k]));
        Ok(y)
    }

    /// `[c*n^2 + x ; A e^c]`.
    pub fn target_mechanism(&self, x: &[f64], c: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        let d = self.d();
        check_len("x", x, d)?;
        check_len("c", c, d)?;
        check_len("n", n, d)?;
        let a = build_a(x);
        let ec: Vec<f64> = c.iter().map(|v| v.exp()).collect();
        let mut y: Vec<f64> = (0..d).map(|k| c[k] * n[k] * n[k] + x[k]).collect();
        y.extend(mat_vec(&a, &ec));
        Ok(y)
    }

    /// `c = ln(2 A^{-1} y[:d])`, without recovering the noise.
    pub fn abduct_source_context(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let d = self.d();
        check_len("x", x, d)?;
        check_len("y", y, 2 * d)?;
        let z = cholesky_solve(&build_a(x), &y[..d])?;
        log_positive(z.iter().map(|v| 2.0 * v))
    }

    /// Exact inverse of the source mechanism: `(c, n)` with `n = (y[d:] - x) / c`.
    pub fn abduct_source(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.abduct_source_context(x, y)?;
        let d = self.d();
        if let Some((index, &value)) = c
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() < DEGENERATE_CONTEXT)
        {
            return Err(Error::DegenerateContext { index, value });
        }
        let n = (0..d).map(|k| (y[d + k] - x[k]) / c[k]).collect();
        Ok((c, n))
    }

    /// `c = ln(A^{-1} y[d:])`; the target noise itself is not identifiable.
    pub fn abduct_target_context(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let d = self.d();
        check_len("x", x, d)?;
        check_len("y", y, 2 * d)?;
        let z = cholesky_solve(&build_a(x), &y[d..])?;
        log_positive(z.into_iter())
    }

    /// `|n| = sqrt((y[:d] - x) / c)`, the only part of the target noise that is recoverable.
    pub fn target_noise_magnitude(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let c = self.abduct_target_context(x, y)?;
        let d = self.d();
        let mut out = Vec::with_capacity(d);
        for k in 0..d {
            if c[k].abs() < DEGENERATE_CONTEXT {
                return Err(Error::DegenerateContext {
                    index: k,
                    value: c[k],
                });
            }
            let sq = (y[k] - x[k]) / c[k];
            if sq < 0.0 {
                return Err(Error::InfeasibleObservation(format!(
                    "squared noise {sq} is negative at component {k}"
                )));
            }
            out.push(sq.sqrt());
        }
        Ok(out)
    }

    /// One ground-truth shifted counterfactual for an explicit target noise.
    pub fn shifted_counterfactual_with_noise(&self, query: &CfQuery, n_target: &[f64]) -> Result<Vec<f64>> {
        let (c_fact, _) = self.abduct_source(&query.x_fact, &query.y_fact)?;
        self.target_mechanism(&query.x_intv, &c_fact, n_target)
    }

    /// `k` i.i.d. draws from the ground-truth shifted-counterfactual distribution:
    /// abduct `c` on the source side, then push `(x_intv, c, n_T)` with fresh
    /// `n_T ~ N(0, 0.1 I)` through the target mechanism.
    pub fn shifted_counterfactual_oracle<R: Rng + ?Sized>(
        &self,
        query: &CfQuery,
        rng: &mut R,
        k: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let (c_fact, _) = self.abduct_source(&query.x_fact, &query.y_fact)?;
        (0..k)
            .map(|_| {
                let n_t = self.sample_n(Domain::Target, rng);
                self.target_mechanism(&query.x_intv, &c_fact, &n_t)
            })
            .collect()
    }
}

fn log_positive(args: impl Iterator<Item = f64>) -> Result<Vec<f64>> {
    args.enumerate()
        .map(|(k, v)| {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::InfeasibleObservation(format!(
                    "log argument {v} at component {k} is not positive"
                )))
            }
        })
        .collect()
}
