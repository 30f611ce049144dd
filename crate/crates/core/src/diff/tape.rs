use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce or stack along rows (result has one row / more rows).
    Rows,
    /// Reduce or stack along columns (result has one column / more columns).
    Cols,
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the upstream gradient (shape of the output) and must
/// return one gradient per input, each with that input's shape.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_output: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    Scale(Var, f64),
    Offset(Var),
    MaxConst(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    Concat(Vec<Var>, Axis),
    Columns(Var, usize),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a reverse sweep is a valid topological backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = shape;
    if a.shape() == shape && b.shape() == shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(rows, cols, data).expect("shape checked");
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            data.push(f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    Tensor::new(rows, cols, data).expect("shape checked")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..grad.rows() {
        let ro = if shape.0 == 1 { 0 } else { r };
        for c in 0..grad.cols() {
            let co = if shape.1 == 1 { 0 } else { c };
            let v = out.get(ro, co) + grad.get(r, c);
            out.set(ro, co, v);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` output with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Tape::grad`] but materializes zeros for unreached nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa,
            rhs: sb,
        })?;
        let value = broadcast_zip(self.value(a), self.value(b), shape, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Elementwise sum; either operand may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the affine-layer product with weights stored `out x in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    /// Elementwise `max(a, k)`; the gradient passes only where `a > k`.
    pub fn max_const(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x.max(k), Op::MaxConst(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum along one axis: `Axis::Rows` collapses to a single row,
    /// `Axis::Cols` collapses to a single column.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let value = match axis {
            Axis::Rows => {
                let mut out = Tensor::zeros(1, t.cols());
                for r in 0..t.rows() {
                    for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                        *o += v;
                    }
                }
                out
            }
            Axis::Cols => Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect()),
        };
        let rg = self.rg(a);
        self.push(value, Op::SumAxis(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat needs at least one operand"))?;
        let (r0, c0) = self.shape(first);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: (r0, c0),
                    rhs: (r, c),
                });
            }
        }
        let value = match axis {
            Axis::Rows => {
                let rows = parts.iter().map(|&p| self.shape(p).0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, c0, data)?
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(r0, cols, data)?
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Column slice `a[:, start..end]`.
    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::dim(format!(
                "column slice {start}..{end} out of range for {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::new(t.rows(), end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Columns(a, start), rg))
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of the scalar `output` with respect to every
    /// node that requires one. Gradients from a previous call are replaced.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    }
                    if rg(*b) {
                        Self::accumulate(&mut grads, *b, reduce_to(g.clone(), val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    }
                    if rg(*b) {
                        Self::accumulate(&mut grads, *b, reduce_to(g.map(|x| -x), val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if rg(*a) {
                        let ga = broadcast_zip(&g, tb, g.shape(), |x, y| x * y);
                        Self::accumulate(&mut grads, *a, reduce_to(ga, ta.shape()));
                    }
                    if rg(*b) {
                        let gb = broadcast_zip(&g, ta, g.shape(), |x, y| x * y);
                        Self::accumulate(&mut grads, *b, reduce_to(gb, tb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if rg(*a) {
                        let ga = broadcast_zip(&g, tb, g.shape(), |x, y| x / y);
                        Self::accumulate(&mut grads, *a, reduce_to(ga, ta.shape()));
                    }
                    if rg(*b) {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let q = broadcast_zip(out, tb, g.shape(), |o, y| -o / y);
                        let gb = broadcast_zip(&g, &q, g.shape(), |x, y| x * y);
                        Self::accumulate(&mut grads, *b, reduce_to(gb, tb.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        let ga = g.matmul_t(val(*b))?;
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let gb = val(*a).t_matmul(&g)?;
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if rg(*a) {
                        let ga = g.matmul(val(*b))?;
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let gb = g.t_matmul(val(*a))?;
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => Self::accumulate(&mut grads, *a, g.transpose()),
                Op::Relu(a) => {
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| if y > 0.0 { x } else { 0.0 });
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| 2.0 * x * y);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = broadcast_zip(&g, out, g.shape(), |x, o| x * o);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| x / y);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = broadcast_zip(&g, out, g.shape(), |x, o| x * 0.5 / o);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| x * sigmoid(y));
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    Self::accumulate(&mut grads, *a, g.map(|x| k * x));
                }
                Op::Offset(a) => Self::accumulate(&mut grads, *a, g),
                Op::MaxConst(a, k) => {
                    let k = *k;
                    let ga = broadcast_zip(&g, val(*a), g.shape(), |x, y| if y > k { x } else { 0.0 });
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    Self::accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c) as f64;
                    Self::accumulate(&mut grads, *a, Tensor::filled(r, c, g.item() / n));
                }
                Op::SumAxis(a) => {
                    // g has a unit dimension along the reduced axis; broadcast it back.
                    let (r, c) = val(*a).shape();
                    let ga = broadcast_zip(&g, &Tensor::zeros(r, c), (r, c), |x, _| x);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        if rg(p) {
                            let gp = match axis {
                                Axis::Rows => {
                                    let cols = g.cols();
                                    Tensor::new(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec())?
                                }
                                Axis::Cols => {
                                    let mut data = Vec::with_capacity(r * c);
                                    for row in 0..r {
                                        data.extend_from_slice(&g.row(row)[offset..offset + c]);
                                    }
                                    Tensor::new(r, c, data)?
                                }
                            };
                            Self::accumulate(&mut grads, p, gp);
                        }
                        offset += match axis {
                            Axis::Rows => r,
                            Axis::Cols => c,
                        };
                    }
                }
                Op::Columns(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Custom(inputs, op) => {
                    let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let gs = op.backward(&g, &tensors, out);
                    debug_assert_eq!(gs.len(), inputs.len(), "custom op `{}` arity", op.name());
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if rg(v) {
                            debug_assert_eq!(gv.shape(), val(v).shape(), "custom op `{}` grad shape", op.name());
                            Self::accumulate(&mut grads, v, gv);
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
