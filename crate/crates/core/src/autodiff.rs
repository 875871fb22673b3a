//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Nodes are created in topological order by construction, so no sort is
//! needed. Composite losses with cheap closed-form gradients (kernel
//! statistics, transport costs) plug in through [`CustomOp`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients w.r.t. each input; `needs[i]` is false for inputs that do
    /// not require a gradient, and the op may return `None` there.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    /// `[rows x n] + [1 x n]` broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// PReLU with a single learnable slope (second input, one element).
    Prelu(Var, Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Per-column `(x - shift) * scale` with constant coefficients.
    ColAffine(Var, Vec<T>),
    /// Row-wise sum, `[rows x cols] -> [rows x 1]`.
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::Dimension(format!(
                "bias of length {} added to {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::Dimension("PReLU slope must be a single value".into()));
        }
        let a = self.value(slope).item();
        let out = self.value(x).map(|v| prelu(v, a));
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(out, Op::Prelu(x, slope), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start, end), rg))
    }

    /// Per-column `(x - shift) * scale`; the coefficients are treated as constants.
    pub fn col_affine(&mut self, x: Var, shift: &[T], scale: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if shift.len() != c || scale.len() != c {
            return Err(Error::Dimension(format!(
                "column affine with {} / {} coefficients on {c} columns",
                shift.len(),
                scale.len()
            )));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for k in 0..chunk.len() {
                chunk[k] = (chunk[k] - shift[k]) * scale[k];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ColAffine(x, scale.to_vec()), rg))
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let data: Vec<T> = (0..rows).map(|i| xv.row(i).iter().copied().sum()).collect();
        let out = Tensor::matrix(rows, 1, data).expect("row count matches");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.len().max(1) as f64);
        let out = Tensor::scalar(xv.sum() / n);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), rg))
    }

    /// Populate gradients of a scalar `loss` w.r.t. every node that requires one.
    ///
    /// Calling it a second time without [`Tape::reset_grads`] is an error:
    /// gradients never silently accumulate across passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.vjp(idx, &g)?;
            for (v, cg) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&cg)?,
                    slot @ None => *slot = Some(cg),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass; `None` when unreachable or not tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref().and_then(|g| g[v.0].as_ref())
    }

    /// Gradient or zeros shaped like the node.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, Tensor::matmul_t(g, false, self.value(*b), true)?));
                }
                if self.rg(*b) {
                    v.push((*b, Tensor::matmul_t(self.value(*a), true, g, false)?));
                }
                v
            }
            Op::AddBias(x, b) => {
                let mut v = vec![(*x, g.clone())];
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let c = g.cols();
                    let mut acc = vec![T::zero(); c];
                    for chunk in g.data().chunks(c.max(1)) {
                        for (a, &x) in acc.iter_mut().zip(chunk) {
                            *a += x;
                        }
                    }
                    v.push((*b, Tensor::new(bv.shape().to_vec(), acc)?));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(bv, |x, y| x * y)?),
                    (*b, g.zip_map(av, |x, y| x * y)?),
                ]
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|x| x * s))]
            }
            Op::Prelu(x, slope) => {
                let xv = self.value(*x);
                let a = self.value(*slope).item();
                let gx = g.zip_map(xv, |gi, xi| if xi >= T::zero() { gi } else { gi * a })?;
                let ga: T = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .filter(|(_, &xi)| xi < T::zero())
                    .map(|(&gi, &xi)| gi * xi)
                    .sum();
                let sshape = self.value(*slope).shape().to_vec();
                vec![(*x, gx), (*slope, Tensor::new(sshape, vec![ga])?)]
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                vec![(*x, g.zip_map(xv, |gi, xi| gi * xi * T::of(2.0))?)]
            }
            Op::ConcatCols(parts) => {
                let mut v = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        v.push((p, g.slice_cols(start, start + w)?));
                    }
                    start += w;
                }
                v
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let mut full = Tensor::zeros(xv.shape());
                let c = xv.cols();
                let w = end - start;
                for i in 0..xv.rows() {
                    full.data_mut()[i * c + start..i * c + end]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*x, full)]
            }
            Op::ColAffine(x, scale) => {
                let mut gx = g.clone();
                let c = gx.cols();
                for chunk in gx.data_mut().chunks_mut(c.max(1)) {
                    for (v, &s) in chunk.iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut data = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    data.extend(std::iter::repeat_n(gi, c));
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                vec![(*x, Tensor::full(xv.shape(), g.item()))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = T::of(xv.len().max(1) as f64);
                vec![(*x, Tensor::full(xv.shape(), g.item() / n))]
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let grads = op.backward(&vals, &node.value, g, &needs);
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Parametric ReLU: `x` for `x >= 0`, `a * x` otherwise.
#[inline]
pub fn prelu<T: Scalar>(x: T, a: T) -> T {
    if x >= T::zero() {
        x
    } else {
        a * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn prelu_values() {
        assert_eq!(prelu(2.0, 0.25), 2.0);
        assert_eq!(prelu(0.0, 0.25), 0.0);
        assert_eq!(prelu(-2.0, 0.25), -0.5);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(s(3.0));
        let l = t.square(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 6.0);
    }

    #[test]
    fn prelu_gradient_on_negative_branch() {
        let mut t = Tape::<f64>::new();
        let w = t.param(s(-1.0));
        let a = t.param(s(0.25));
        let l = t.prelu(w, a).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 0.25);
        assert_eq!(t.grad(a).unwrap().item(), -1.0);
    }

    #[test]
    fn prelu_gradient_at_zero_uses_identity_branch() {
        let mut t = Tape::<f64>::new();
        let w = t.param(s(0.0));
        let a = t.param(s(0.25));
        let l = t.prelu(w, a).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 1.0);
        assert_eq!(t.grad(a).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::zeros(&[2, 1]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut t = Tape::<f64>::new();
        let w = t.param(s(2.0));
        let l = t.square(w);
        t.backward(l).unwrap();
        assert!(t.backward(l).is_err());
        t.reset_grads();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(s(2.0));
        let c = t.constant(s(5.0));
        let p = t.mul(w, c).unwrap();
        t.backward(p).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 5.0);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // l = (w + w) * w = 2 w^2, dl/dw = 4w
        let mut t = Tape::<f64>::new();
        let w = t.param(s(1.5));
        let ww = t.add(w, w).unwrap();
        let l = t.mul(ww, w).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 6.0);
    }
}
