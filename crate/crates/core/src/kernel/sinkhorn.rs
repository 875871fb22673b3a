//! Entropic optimal transport with uniform marginals, solved in the log domain.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sq_dist;

/// Result of a Sinkhorn solve.
#[derive(Clone, Debug, PartialEq)]
pub struct OtCoupling {
    /// `[m x n]` transport plan.
    pub plan: Tensor<f64>,
    /// Dual potentials.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    /// L1 violation of the row marginals (columns are exact after each sweep).
    pub marginal_error: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Dual objective after every sweep.
    pub dual_trace: Vec<f64>,
}

impl OtCoupling {
    /// `<a, f> + <b, g>`, the regularized transport cost at the current iterate.
    pub fn dual_value(&self) -> f64 {
        let (m, n) = (self.f.len() as f64, self.g.len() as f64);
        self.f.iter().sum::<f64>() / m + self.g.iter().sum::<f64>() / n
    }

    /// `sum_ij pi_ij C_ij`.
    pub fn transport_cost(&self, cost: &Tensor<f64>) -> f64 {
        self.plan.data().iter().zip(cost.data()).map(|(p, c)| p * c).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.plan.rows()).map(|i| self.plan.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.plan.cols();
        let mut s = vec![0.0; n];
        for i in 0..self.plan.rows() {
            for (acc, v) in s.iter_mut().zip(self.plan.row(i)) {
                *acc += v;
            }
        }
        s
    }
}

/// `C_ij = ||x_i - y_j||^2`.
pub fn sq_euclidean_cost(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    if x.cols() != y.cols() {
        return Err(Error::Dimension(format!(
            "cost between points of width {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    let mut c = Vec::with_capacity(x.rows() * y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            c.push(sq_dist(x.row(i), y.row(j)));
        }
    }
    Tensor::matrix(x.rows(), y.rows(), c)
}

/// `0.05 * mean(C)`, or `0.05` for an all-zero cost.
pub fn default_epsilon(cost: &Tensor<f64>) -> f64 {
    let mean = cost.sum() / cost.len().max(1) as f64;
    if mean > 0.0 {
        0.05 * mean
    } else {
        0.05
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between uniform measures on the rows and columns of `cost`.
///
/// Alternating exact block maximization of the dual, so the dual trace is
/// nondecreasing. Stops when the row-marginal L1 error drops to `tol`; on
/// running out of iterations the last iterate is returned with
/// `converged = false` and a warning is logged.
pub fn sinkhorn(cost: &Tensor<f64>, epsilon: f64, max_iters: usize, tol: f64) -> Result<OtCoupling> {
    let (m, n) = (cost.rows(), cost.cols());
    if m == 0 || n == 0 {
        return Err(Error::Contract("Sinkhorn on an empty cost matrix".into()));
    }
    if !cost.all_finite() {
        return Err(Error::Contract("Sinkhorn cost has non-finite entries".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("Sinkhorn epsilon must be positive, got {epsilon}")));
    }
    if max_iters == 0 {
        return Err(Error::Config("Sinkhorn needs at least one iteration".into()));
    }
    let (log_a, log_b) = (-(m as f64).ln(), -(n as f64).ln());
    let c = cost.data();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut trace = Vec::new();
    let mut err = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..m {
            let row = &c[i * n..(i + 1) * n];
            f[i] = -epsilon * log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| log_b + (gj - cij) / epsilon));
        }
        for j in 0..n {
            g[j] = -epsilon
                * log_sum_exp((0..m).map(|i| log_a + (f[i] - c[i * n + j]) / epsilon));
        }
        trace.push(f.iter().sum::<f64>() / m as f64 + g.iter().sum::<f64>() / n as f64);
        err = (0..m)
            .map(|i| {
                let row = &c[i * n..(i + 1) * n];
                let s: f64 = row
                    .iter()
                    .zip(&g)
                    .map(|(cij, gj)| ((f[i] + gj - cij) / epsilon + log_a + log_b).exp())
                    .sum();
                (s - 1.0 / m as f64).abs()
            })
            .sum();
        if err <= tol {
            break;
        }
    }
    let converged = err <= tol;
    if !converged {
        log::warn!("Sinkhorn stopped after {iterations} iterations with marginal error {err:.3e}");
    }
    let mut plan = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            plan.push(((f[i] + g[j] - c[i * n + j]) / epsilon + log_a + log_b).exp());
        }
    }
    Ok(OtCoupling {
        plan: Tensor::matrix(m, n, plan)?,
        f,
        g,
        epsilon,
        marginal_error: err,
        iterations,
        converged,
        dual_trace: trace,
    })
}
