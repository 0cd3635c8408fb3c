//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! context to run its vector-Jacobian product. Because inputs must already
//! exist when an op is recorded, node indices are a topological order and
//! the backward sweep is a single reverse pass over the node list.
//!
//! ```
//! use ndarray::array;
//! use racoln::tape::Tape;
//! use racoln::tensor::Tensor;
//!
//! let x = Tensor::param(array![[3.0_f64]]);
//! let tape = Tape::new();
//! let xv = tape.param(&x);
//! let y = xv.mul(xv).sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(&x).unwrap()[[0, 0]], 6.0);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor::{Float, Parameters, Tensor, TensorId};

enum Op<F: Float> {
    Leaf(Option<TensorId>),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Affine(usize, F),
    Sigmoid(usize),
    Tanh(usize),
    Square(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Vec<usize>),
    Softmax(usize, F),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Array2<F>,
    },
    LayerNorm {
        input: usize,
        centered: Array2<F>,
        std: Vec<F>,
        eps: F,
    },
    SumAll(usize),
}

struct Node<F: Float> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations for one forward pass. Confined to a single thread.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    leaves: RefCell<HashMap<TensorId, usize>>,
    non_finite: Cell<Option<&'static str>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Var<'_, F> {
        if self.non_finite.get().is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Ref<'_, Array2<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Registers a persistent tensor as a leaf. Registering the same tensor
    /// twice returns the same node, so its gradient is summed over all uses.
    pub fn param(&self, t: &Tensor<F>) -> Var<'_, F> {
        if let Some(&id) = self.leaves.borrow().get(&t.id()) {
            return Var { tape: self, id };
        }
        let var = self.push(
            t.value().clone(),
            Op::Leaf(Some(t.id())),
            t.requires_grad(),
            "leaf",
        );
        self.leaves.borrow_mut().insert(t.id(), var.id);
        var
    }

    pub fn constant(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf(None), false, "constant")
    }

    pub fn scalar(&self, x: F) -> Var<'_, F> {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Joins blocks side by side; all inputs must share the row count.
    pub fn concat_cols(&self, parts: &[Var<'_, F>]) -> Var<'_, F> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.nrows();
            let cols: usize = ids.iter().map(|&i| nodes[i].value.ncols()).sum();
            let mut out = Array2::zeros((rows, cols));
            let mut at = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
                out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
                at += v.ncols();
            }
            out
        };
        let rg = self.rg(&ids);
        self.push(value, Op::ConcatCols(ids), rg, "concat_cols")
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&self, table: Var<'_, F>, ids: &[usize]) -> Var<'_, F> {
        let value = {
            let t = self.val(table.id);
            let mut out = Array2::zeros((ids.len(), t.ncols()));
            for (r, &i) in ids.iter().enumerate() {
                assert!(i < t.nrows(), "gather index {i} out of range {}", t.nrows());
                out.row_mut(r).assign(&t.row(i));
            }
            out
        };
        let rg = self.rg(&[table.id]);
        self.push(value, Op::Gather(table.id, ids.to_vec()), rg, "gather")
    }

    /// Row-wise softmax of `logits / tau`, with masked entries held at zero.
    ///
    /// Fails when `tau <= 0` or when any row has every position masked.
    pub fn softmax_temp<'a>(
        &'a self,
        logits: Var<'a, F>,
        tau: F,
        mask: Option<&Array2<bool>>,
    ) -> Result<Var<'a, F>> {
        if !(tau > F::zero()) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let value = {
            let x = self.val(logits.id);
            if let Some(m) = mask {
                if m.dim() != x.dim() {
                    return Err(Error::InvalidArgument(format!(
                        "mask shape {:?} does not match logits {:?}",
                        m.dim(),
                        x.dim()
                    )));
                }
            }
            let mut out = Array2::zeros(x.raw_dim());
            for (r, (xrow, mut orow)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
                let keep = |c: usize| mask.is_none_or(|m| m[[r, c]]);
                let mut max = F::neg_infinity();
                for (c, &v) in xrow.iter().enumerate() {
                    if keep(c) && v / tau > max {
                        max = v / tau;
                    }
                }
                if max == F::neg_infinity() {
                    return Err(Error::DegenerateInput(format!(
                        "softmax row {r} has no unmasked position"
                    )));
                }
                let mut total = F::zero();
                for (c, &v) in xrow.iter().enumerate() {
                    if keep(c) {
                        let e = (v / tau - max).exp();
                        orow[c] = e;
                        total += e;
                    }
                }
                orow.mapv_inplace(|e| e / total);
            }
            out
        };
        let rg = self.rg(&[logits.id]);
        Ok(self.push(value, Op::Softmax(logits.id, tau), rg, "softmax"))
    }

    /// Weighted token cross-entropy, `sum_i w_i * -ln softmax(logits_i)[targets_i]`.
    ///
    /// Rows with zero weight (padding) contribute nothing.
    pub fn cross_entropy<'a>(
        &'a self,
        logits: Var<'a, F>,
        targets: &[usize],
        weights: &[F],
    ) -> Var<'a, F> {
        let (value, probs) = {
            let x = self.val(logits.id);
            assert_eq!(x.nrows(), targets.len(), "cross_entropy target count");
            assert_eq!(x.nrows(), weights.len(), "cross_entropy weight count");
            let mut probs = Array2::zeros(x.raw_dim());
            let mut loss = F::zero();
            for (r, (xrow, mut prow)) in x.outer_iter().zip(probs.outer_iter_mut()).enumerate() {
                let max = xrow.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut total = F::zero();
                for (p, &v) in prow.iter_mut().zip(xrow.iter()) {
                    *p = (v - max).exp();
                    total += *p;
                }
                prow.mapv_inplace(|p| p / total);
                if weights[r] != F::zero() {
                    let lse = max + total.ln();
                    loss += weights[r] * (lse - xrow[targets[r]]);
                }
            }
            (Array2::from_elem((1, 1), loss), probs)
        };
        let rg = self.rg(&[logits.id]);
        self.push(
            value,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Per-row standardization `(x - mean) / (std + eps)` with the
    /// population standard deviation.
    pub fn layer_norm<'a>(&'a self, x: Var<'a, F>, eps: F) -> Var<'a, F> {
        let (value, centered, std) = {
            let v = self.val(x.id);
            let n = F::c(v.ncols() as f64);
            let mut centered = v.to_owned();
            let mut std = Vec::with_capacity(v.nrows());
            for mut row in centered.outer_iter_mut() {
                let mean = row.sum() / n;
                row.mapv_inplace(|a| a - mean);
                let var = row.iter().map(|&d| d * d).sum::<F>() / n;
                std.push(var.sqrt());
            }
            let mut out = centered.clone();
            for (mut row, &sd) in out.outer_iter_mut().zip(&std) {
                row.mapv_inplace(|d| d / (sd + eps));
            }
            (out, centered, std)
        };
        let rg = self.rg(&[x.id]);
        self.push(
            value,
            Op::LayerNorm {
                input: x.id,
                centered,
                std,
                eps,
            },
            rg,
            "layer_norm",
        )
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite.get()
    }

    /// Back-propagates from a scalar `loss` to every gradient-tracking leaf.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if let Some(op) = self.non_finite.get() {
            return Err(Error::NonFinite(op));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.dim() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<F>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Array2::ones((1, 1)));
        let mut out = HashMap::new();

        let acc = |grads: &mut Vec<Option<Array2<F>>>, i: usize, d: Array2<F>| {
            if !nodes[i].requires_grad {
                return;
            }
            match grads[i].as_mut() {
                Some(g) => *g += &d,
                None => grads[i] = Some(d),
            }
        };

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Some(tid)) => {
                    out.insert(*tid, g);
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g.dot(&nodes[*b].value.t()));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, nodes[*a].value.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, &g * &nodes[*b].value);
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, &g * &nodes[*a].value);
                    }
                }
                Op::MulCol(a, c) => {
                    if nodes[*c].requires_grad {
                        let gc = (&g * &nodes[*a].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, &g * &nodes[*c].value);
                    }
                }
                Op::Affine(a, scale) => {
                    let scale = *scale;
                    acc(&mut grads, *a, g.mapv(|v| v * scale));
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (F::one() - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= F::one() - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&nodes[*a].value)
                        .for_each(|d, &x| *d *= F::c(2.0) * x);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(ids) => {
                    let mut at = 0;
                    for &p in ids {
                        let w = nodes[p].value.ncols();
                        if nodes[p].requires_grad {
                            acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(nodes[*a].value.raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::Gather(table, ids) => {
                    let mut d = Array2::zeros(nodes[*table].value.raw_dim());
                    for (r, &row) in ids.iter().enumerate() {
                        let mut dst = d.row_mut(row);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Softmax(a, tau) => {
                    let y = &node.value;
                    let yg = (y * &g).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut d = &g - &yg;
                    d *= y;
                    d.mapv_inplace(|v| v / *tau);
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut d = probs.clone();
                    for (r, mut row) in d.outer_iter_mut().enumerate() {
                        row[targets[r]] -= F::one();
                        let w = weights[r] * upstream;
                        row.mapv_inplace(|v| v * w);
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::LayerNorm {
                    input,
                    centered,
                    std,
                    eps,
                } => {
                    let n = F::c(centered.ncols() as f64);
                    let mut d = Array2::zeros(centered.raw_dim());
                    for (r, mut drow) in d.outer_iter_mut().enumerate() {
                        let grow = g.row(r);
                        let crow = centered.row(r);
                        let sd = std[r];
                        let denom = sd + *eps;
                        let gd_dot: F = grow.iter().zip(crow.iter()).map(|(&a, &b)| a * b).sum();
                        let coef = if sd > F::zero() {
                            gd_dot / (denom * denom * n * sd)
                        } else {
                            F::zero()
                        };
                        for ((dv, &gv), &cv) in drow.iter_mut().zip(grow.iter()).zip(crow.iter()) {
                            *dv = gv / denom - coef * cv;
                        }
                        let mean = drow.sum() / n;
                        drow.mapv_inplace(|v| v - mean);
                    }
                    acc(&mut grads, *input, d);
                }
                Op::SumAll(a) => {
                    let gs = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(nodes[*a].value.raw_dim(), gs));
                }
            }
        }
        for g in out.values() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients { map: out })
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.tape.val(self.id).dim();
        [r, c]
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array2<F> {
        self.tape.val(self.id).clone()
    }

    /// Borrowed view of the forward value; do not hold across new ops.
    pub fn value_ref(&self) -> Ref<'t, Array2<F>> {
        self.tape.val(self.id)
    }

    pub fn scalar(&self) -> F {
        let v = self.tape.val(self.id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(&[self.id])
    }

    fn unary(self, f: impl Fn(F) -> F, op: Op<F>, name: &'static str) -> Var<'t, F> {
        let value = self.tape.val(self.id).mapv(f);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg, name)
    }

    fn same_shape(self, other: Var<'t, F>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = {
            let a = self.tape.val(self.id);
            let b = self.tape.val(other.id);
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
            a.dot(&*b)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, Op::MatMul(self.id, other.id), rg, "matmul")
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(other, "add");
        let value = &*self.tape.val(self.id) + &*self.tape.val(other.id);
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, Op::Add(self.id, other.id), rg, "add")
    }

    /// Adds a `[1, n]` row to every row of `self`.
    pub fn add_row(self, bias: Var<'t, F>) -> Var<'t, F> {
        let value = {
            let a = self.tape.val(self.id);
            let b = self.tape.val(bias.id);
            assert_eq!(b.nrows(), 1, "add_row: bias must be a single row");
            assert_eq!(a.ncols(), b.ncols(), "add_row: width mismatch");
            &*a + &*b
        };
        let rg = self.tape.rg(&[self.id, bias.id]);
        self.tape.push(value, Op::AddRow(self.id, bias.id), rg, "add_row")
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(other, "sub");
        let value = &*self.tape.val(self.id) - &*self.tape.val(other.id);
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, Op::Sub(self.id, other.id), rg, "sub")
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(other, "mul");
        let value = &*self.tape.val(self.id) * &*self.tape.val(other.id);
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, Op::Mul(self.id, other.id), rg, "mul")
    }

    /// Scales row `i` of `self` by `col[i, 0]`.
    pub fn mul_col(self, col: Var<'t, F>) -> Var<'t, F> {
        let value = {
            let a = self.tape.val(self.id);
            let c = self.tape.val(col.id);
            assert_eq!(c.dim(), (a.nrows(), 1), "mul_col: need a [rows, 1] column");
            &*a * &*c
        };
        let rg = self.tape.rg(&[self.id, col.id]);
        self.tape.push(value, Op::MulCol(self.id, col.id), rg, "mul_col")
    }

    /// `scale * self + shift`, elementwise.
    pub fn affine(self, scale: F, shift: F) -> Var<'t, F> {
        self.unary(|v| scale * v + shift, Op::Affine(self.id, scale), "affine")
    }

    pub fn scale(self, scale: F) -> Var<'t, F> {
        self.affine(scale, F::zero())
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t, F> {
        self.affine(-F::one(), F::one())
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(
            |v| {
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(self.id),
            "sigmoid",
        )
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(|v| v.tanh(), Op::Tanh(self.id), "tanh")
    }

    pub fn square(self) -> Var<'t, F> {
        self.unary(|v| v * v, Op::Square(self.id), "square")
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, F> {
        let value = {
            let a = self.tape.val(self.id);
            assert!(start < end && end <= a.ncols(), "slice_cols: bad range");
            a.slice(s![.., start..end]).to_owned()
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::SliceCols(self.id, start), rg, "slice_cols")
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(self) -> Var<'t, F> {
        let value = Array2::from_elem((1, 1), self.tape.val(self.id).sum());
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::SumAll(self.id), rg, "sum")
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }

    /// Plain row-wise softmax at temperature 1.
    pub fn softmax(self) -> Var<'t, F> {
        self.tape
            .softmax_temp(self, F::one(), None)
            .expect("unit-temperature unmasked softmax cannot fail")
    }
}

/// Leaf gradients produced by one backward pass, keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients<F: Float> {
    map: HashMap<TensorId, Array2<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&Array2<F>> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds each gradient into the matching tensor's accumulator.
    pub fn accumulate_into<P: Parameters<F> + ?Sized>(&self, model: &mut P) -> Result<()> {
        for (_, t) in model.named_params_mut() {
            if let Some(g) = self.map.get(&t.id()) {
                t.accumulate(g)?;
            }
        }
        Ok(())
    }
}
