//! Differentiable kernel and transport discrepancies as tape operations.

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::sinkhorn::{default_epsilon, sinkhorn, sq_euclidean_cost, OtCoupling};
use super::{sq_dist, KernelConfig};

/// Sparse weights tying groups of generated samples to data points.
///
/// Group `g` contributes `sum_j w_gj * ||Phi(y_j) - mean_l Phi(yhat_gl)||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights {
    groups: Vec<Vec<(usize, f64)>>,
}

impl GroupWeights {
    /// Group `i` matched to data point `i` with weight `w`.
    pub fn diagonal(n: usize, w: f64) -> Self {
        Self {
            groups: (0..n).map(|i| vec![(i, w)]).collect(),
        }
    }

    /// Dense `[groups x data]` weights; exact zeros are dropped.
    pub fn dense(w: &Tensor<f64>) -> Self {
        Self {
            groups: (0..w.rows())
                .map(|g| {
                    w.row(g)
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j, v))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// `[rows x k]` gradient buffer helper: `out[i] += coeff * 2 k'(r2) (x_i - y_j)`.
#[inline]
fn axpy_diff<T: Scalar>(out: &mut [T], coeff: T, x: &[T], y: &[T]) {
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
        *o += coeff * (a - b);
    }
}

/// `sum_{i,j} f(|x_i - y_j|^2)` where `f` returns `(value, d value / d r2)`.
///
/// When given, `gx` / `gy` accumulate `coeff` times the gradient of the sum
/// w.r.t. the rows of `x` / `y`.
fn pair_sum<T: Scalar>(
    x: &[T],
    y: &[T],
    k: usize,
    f: &impl Fn(T) -> (T, T),
    coeff: T,
    mut gx: Option<&mut [T]>,
    mut gy: Option<&mut [T]>,
) -> T {
    let two = T::of(2.0);
    let mut total = T::zero();
    for (i, xi) in x.chunks_exact(k).enumerate() {
        for (j, yj) in y.chunks_exact(k).enumerate() {
            let (v, dv) = f(sq_dist(xi, yj));
            total += v;
            if dv != T::zero() {
                let c = coeff * two * dv;
                if let Some(g) = gx.as_deref_mut() {
                    axpy_diff(&mut g[i * k..(i + 1) * k], c, xi, yj);
                }
                if let Some(g) = gy.as_deref_mut() {
                    axpy_diff(&mut g[j * k..(j + 1) * k], c, yj, xi);
                }
            }
        }
    }
    total
}

fn kernel_fn<T: Scalar>(kernel: KernelConfig) -> impl Fn(T) -> (T, T) {
    move |r2| (kernel.of_sq_dist(r2), kernel.d_sq_dist(r2))
}

struct KmeLoss<T> {
    data: Tensor<T>,
    q: usize,
    weights: GroupWeights,
    kernel: KernelConfig,
}

impl<T: Scalar> KmeLoss<T> {
    fn eval(&self, gen: &Tensor<T>, mut grad: Option<&mut [T]>) -> T {
        let k = gen.cols();
        let f = kernel_fn::<T>(self.kernel);
        let qf = T::of(self.q as f64);
        let self_k = self.kernel.of_sq_dist(T::zero());
        let mut total = T::zero();
        for (g, targets) in self.weights.groups.iter().enumerate() {
            if targets.is_empty() {
                continue;
            }
            let block = &gen.data()[g * self.q * k..(g + 1) * self.q * k];
            let mut gblock = grad.as_deref_mut().map(|gr| &mut gr[g * self.q * k..(g + 1) * self.q * k]);
            let wsum: T = targets.iter().map(|&(_, w)| T::of(w)).sum();
            let c_self = wsum / (qf * qf);
            total += c_self * pair_sum(block, block, k, &f, T::of(2.0) * c_self, gblock.as_deref_mut(), None);
            for &(j, w) in targets {
                let w = T::of(w);
                let c_cross = -T::of(2.0) * w / qf;
                let yj = self.data.row(j);
                total += w * self_k + c_cross * pair_sum(block, yj, k, &f, c_cross, gblock.as_deref_mut(), None);
            }
        }
        total
    }
}

impl<T: Scalar> CustomOp<T> for KmeLoss<T> {
    fn name(&self) -> &'static str {
        "kme_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(self.eval(inputs[0], None)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let gen = inputs[0];
        let mut g = vec![T::zero(); gen.len()];
        self.eval(gen, Some(&mut g));
        let go = grad_output.item();
        g.iter_mut().for_each(|v| *v *= go);
        vec![Some(Tensor::new(gen.shape().to_vec(), g).expect("shape preserved"))]
    }
}

/// Weighted sum over groups of conditional kernel-mean discrepancies.
///
/// `gen` is `[groups * q x k]`, rows `g*q..(g+1)*q` forming group `g`;
/// `data` is `[J x k]`. Only `gen` receives gradient.
pub fn grouped_kls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    gen: Var,
    data: &Tensor<T>,
    q: usize,
    weights: GroupWeights,
    kernel: KernelConfig,
) -> Result<Var> {
    kernel.validate()?;
    let gv = tape.value(gen);
    if q == 0 {
        return Err(Error::Contract("need at least one generated sample per group".into()));
    }
    if gv.cols() != data.cols() {
        return Err(Error::Dimension(format!(
            "generated width {} vs data width {}",
            gv.cols(),
            data.cols()
        )));
    }
    if gv.rows() != weights.num_groups() * q {
        return Err(Error::Dimension(format!(
            "{} generated rows for {} groups of {q}",
            gv.rows(),
            weights.num_groups()
        )));
    }
    if let Some(&(j, _)) = weights.groups.iter().flatten().find(|(j, _)| *j >= data.rows()) {
        return Err(Error::Dimension(format!(
            "weight references data row {j} of {}",
            data.rows()
        )));
    }
    let op = KmeLoss {
        data: data.clone(),
        q,
        weights,
        kernel,
    };
    tape.custom(Box::new(op), &[gen])
}

/// `||Phi(y) - (1/q) sum_j Phi(yhat_j)||^2` for one data point `y` and `gen = [q x k]`.
pub fn conditional_kls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real_y: &[T],
    gen: Var,
    kernel: KernelConfig,
) -> Result<Var> {
    let q = tape.value(gen).rows();
    let data = Tensor::matrix(1, real_y.len(), real_y.to_vec())?;
    grouped_kls_loss(tape, gen, &data, q, GroupWeights::diagonal(1, 1.0), kernel)
}

/// Two-set discrepancy built from pair sums of a radial function.
///
/// Value: `c_xx * S(x,x) + c_yy * S(y,y) + c_xy * S(x,y)`.
struct PairDiscrepancy {
    name: &'static str,
    radial: Radial,
}

#[derive(Clone, Copy)]
enum Radial {
    /// `+k` within sets, `-2k` across (biased MMD^2).
    Kernel(KernelConfig),
    /// `-dist` within sets, `+2 dist` across (energy distance).
    Distance,
}

impl PairDiscrepancy {
    fn eval<T: Scalar>(&self, x: &Tensor<T>, y: &Tensor<T>, gx: Option<&mut [T]>, gy: Option<&mut [T]>) -> T {
        let k = x.cols();
        let (m, n) = (T::of(x.rows() as f64), T::of(y.rows() as f64));
        let (sign, f): (T, Box<dyn Fn(T) -> (T, T)>) = match self.radial {
            Radial::Kernel(kc) => (T::one(), Box::new(kernel_fn::<T>(kc))),
            Radial::Distance => (
                -T::one(),
                Box::new(|r2: T| {
                    let r = r2.sqrt();
                    let d = if r > T::zero() { T::of(0.5) / r } else { T::zero() };
                    (r, d)
                }),
            ),
        };
        let two = T::of(2.0);
        let (cxx, cyy, cxy) = (sign / (m * m), sign / (n * n), -two * sign / (m * n));
        let (mut gx, mut gy) = (gx, gy);
        let sxx = pair_sum(x.data(), x.data(), k, &f, two * cxx, gx.as_deref_mut(), None);
        let syy = pair_sum(y.data(), y.data(), k, &f, two * cyy, gy.as_deref_mut(), None);
        let sxy = pair_sum(x.data(), y.data(), k, &f, cxy, gx, gy);
        cxx * sxx + cyy * syy + cxy * sxy
    }
}

impl<T: Scalar> CustomOp<T> for PairDiscrepancy {
    fn name(&self) -> &'static str {
        self.name
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(self.eval(inputs[0], inputs[1], None, None)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut gy = needs[1].then(|| vec![T::zero(); y.len()]);
        self.eval(x, y, gx.as_deref_mut(), gy.as_deref_mut());
        let go = grad_output.item();
        let wrap = |g: Option<Vec<T>>, like: &Tensor<T>| {
            g.map(|mut v| {
                v.iter_mut().for_each(|e| *e *= go);
                Tensor::new(like.shape().to_vec(), v).expect("shape preserved")
            })
        };
        vec![wrap(gx, x), wrap(gy, y)]
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.cols() != bv.cols() {
        return Err(Error::Dimension(format!(
            "point sets of width {} and {}",
            av.cols(),
            bv.cols()
        )));
    }
    if av.rows() == 0 || bv.rows() == 0 {
        return Err(Error::Contract("empty point set".into()));
    }
    Ok(())
}

/// Biased MMD^2 between the rows of `a` and `b`, differentiable in both.
pub fn mmd2_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, kernel: KernelConfig) -> Result<Var> {
    kernel.validate()?;
    check_pair(tape, a, b)?;
    let op = PairDiscrepancy {
        name: "mmd2",
        radial: Radial::Kernel(kernel),
    };
    tape.custom(Box::new(op), &[a, b])
}

/// V-statistic energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`.
pub fn energy_distance_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b)?;
    let op = PairDiscrepancy {
        name: "energy_distance",
        radial: Radial::Distance,
    };
    tape.custom(Box::new(op), &[a, b])
}

struct SinkhornDivergence {
    epsilon: Option<f64>,
    max_iters: usize,
    tol: f64,
    plans: Option<[OtCoupling; 3]>,
}

/// `sum_ij pi_ij * 2 (x_i - y_j)` into `gx` (and the mirror into `gy`).
fn transport_grad(plan: &Tensor<f64>, x: &Tensor<f64>, y: &Tensor<f64>, coeff: f64, gx: Option<&mut [f64]>, gy: Option<&mut [f64]>) {
    let k = x.cols();
    let (mut gx, mut gy) = (gx, gy);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let w = plan.data()[i * y.rows() + j];
            if w == 0.0 {
                continue;
            }
            let c = 2.0 * coeff * w;
            if let Some(g) = gx.as_deref_mut() {
                axpy_diff(&mut g[i * k..(i + 1) * k], c, x.row(i), y.row(j));
            }
            if let Some(g) = gy.as_deref_mut() {
                axpy_diff(&mut g[j * k..(j + 1) * k], c, y.row(j), x.row(i));
            }
        }
    }
}

impl CustomOp<f64> for SinkhornDivergence {
    fn name(&self) -> &'static str {
        "sinkhorn_divergence"
    }

    fn forward(&mut self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let (x, y) = (inputs[0], inputs[1]);
        let cxy = sq_euclidean_cost(x, y)?;
        let eps = self.epsilon.unwrap_or_else(|| default_epsilon(&cxy));
        let pxy = sinkhorn(&cxy, eps, self.max_iters, self.tol)?;
        let pxx = sinkhorn(&sq_euclidean_cost(x, x)?, eps, self.max_iters, self.tol)?;
        let pyy = sinkhorn(&sq_euclidean_cost(y, y)?, eps, self.max_iters, self.tol)?;
        let value = pxy.dual_value() - 0.5 * pxx.dual_value() - 0.5 * pyy.dual_value();
        self.plans = Some([pxy, pxx, pyy]);
        Ok(Tensor::scalar(value))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad_output: &Tensor<f64>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<f64>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let [pxy, pxx, pyy] = self.plans.as_ref().expect("forward ran");
        let go = grad_output.item();
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gy = needs[1].then(|| vec![0.0; y.len()]);
        transport_grad(&pxy.plan, x, y, go, gx.as_deref_mut(), gy.as_deref_mut());
        // self terms: both arguments move, and each enters with weight -1/2
        if let Some(g) = gx.as_deref_mut() {
            transport_grad(&pxx.plan, x, x, -0.5 * go, Some(&mut *g), None);
            transport_grad(&pxx.plan.transpose(), x, x, -0.5 * go, Some(g), None);
        }
        if let Some(g) = gy.as_deref_mut() {
            transport_grad(&pyy.plan, y, y, -0.5 * go, Some(&mut *g), None);
            transport_grad(&pyy.plan.transpose(), y, y, -0.5 * go, Some(g), None);
        }
        let wrap = |g: Option<Vec<f64>>, like: &Tensor<f64>| g.map(|v| Tensor::new(like.shape().to_vec(), v).expect("shape preserved"));
        vec![wrap(gx, x), wrap(gy, y)]
    }
}

/// Debiased entropic OT `W(a,b) - W(a,a)/2 - W(b,b)/2` under squared Euclidean cost.
///
/// One `epsilon` is shared by the three problems; by default it is derived
/// from the cross cost matrix. Gradients use the envelope theorem.
pub fn sinkhorn_divergence_loss(
    tape: &mut Tape<f64>,
    a: Var,
    b: Var,
    epsilon: Option<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<Var> {
    check_pair(tape, a, b)?;
    if let Some(e) = epsilon {
        if !(e > 0.0) {
            return Err(Error::Config(format!("Sinkhorn epsilon must be positive, got {e}")));
        }
    }
    let op = SinkhornDivergence {
        epsilon,
        max_iters,
        tol,
        plans: None,
    };
    tape.custom(Box::new(op), &[a, b])
}
