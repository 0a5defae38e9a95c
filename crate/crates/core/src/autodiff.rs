//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. Operations evaluate
//! eagerly and record their inputs, so [`grad`] can walk the expression
//! graph backwards. The backward rules are themselves written in terms of
//! [`Var`] operations, which makes the returned gradients differentiable
//! again. Gradient matching relies on this: the distance between two
//! parameter gradients is differentiated with respect to the generator.
//!
//! Non-smooth points follow fixed conventions: ReLU and clamping pass
//! gradient through a constant 0/1 mask, row selection passes gradient only
//! to the selected rows, and the Euclidean norm has zero gradient at zero.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Dense row-major matrix used for every value in the graph.
pub type Mat = Array2<f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Sqrt(Var),
    // Elementwise product with a constant 0/1 mask; covers ReLU and clamp.
    Masked(Var, Rc<Mat>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    Reshape(Var),
    Norm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// A node in the expression graph.
///
/// Cloning is cheap (reference counted). A `Var` is *tracked* when it is a
/// parameter leaf or depends on one; untracked values are constants and
/// never receive gradient.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("tracked", &self.0.tracked)
            .finish()
    }
}

impl Var {
    fn from_op(value: Mat, op: Op, tracked: bool) -> Self {
        Var(Rc::new(Node { value, op, tracked }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Mat) -> Self {
        Self::from_op(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(value: Mat) -> Self {
        Self::from_op(value, Op::Leaf, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Array2::zeros((rows, cols)))
    }

    pub fn value(&self) -> &Mat {
        &self.0.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.dim()
    }

    pub fn rows(&self) -> usize {
        self.0.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.ncols()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1), "item() on a non-scalar");
        self.0.value[[0, 0]]
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn add(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let v = &self.0.value + &other.0.value;
        Var::from_op(
            v,
            Op::Add(self.clone(), other.clone()),
            self.is_tracked() || other.is_tracked(),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let v = &self.0.value - &other.0.value;
        Var::from_op(
            v,
            Op::Sub(self.clone(), other.clone()),
            self.is_tracked() || other.is_tracked(),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let v = &self.0.value * &other.0.value;
        Var::from_op(
            v,
            Op::Mul(self.clone(), other.clone()),
            self.is_tracked() || other.is_tracked(),
        )
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let v = &self.0.value / &other.0.value;
        Var::from_op(
            v,
            Op::Div(self.clone(), other.clone()),
            self.is_tracked() || other.is_tracked(),
        )
    }

    pub fn matmul(&self, other: &Var) -> Var {
        assert_eq!(self.cols(), other.rows(), "matmul: inner dimension mismatch");
        let v = self.0.value.dot(&other.0.value);
        Var::from_op(
            v,
            Op::MatMul(self.clone(), other.clone()),
            self.is_tracked() || other.is_tracked(),
        )
    }

    pub fn t(&self) -> Var {
        let v = self.0.value.t().to_owned();
        Var::from_op(v, Op::Transpose(self.clone()), self.is_tracked())
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = &self.0.value * c;
        Var::from_op(v, Op::Scale(self.clone(), c), self.is_tracked())
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = &self.0.value + c;
        Var::from_op(v, Op::AddScalar(self.clone()), self.is_tracked())
    }

    /// Elementwise `c - x`.
    pub fn rsub_scalar(&self, c: f64) -> Var {
        self.neg().add_scalar(c)
    }

    pub fn exp(&self) -> Var {
        let v = self.0.value.mapv(f64::exp);
        Var::from_op(v, Op::Exp(self.clone()), self.is_tracked())
    }

    pub fn ln(&self) -> Var {
        let v = self.0.value.mapv(f64::ln);
        Var::from_op(v, Op::Ln(self.clone()), self.is_tracked())
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.0.value.mapv(sigmoid);
        Var::from_op(v, Op::Sigmoid(self.clone()), self.is_tracked())
    }

    pub fn sqrt(&self) -> Var {
        let v = self.0.value.mapv(f64::sqrt);
        Var::from_op(v, Op::Sqrt(self.clone()), self.is_tracked())
    }

    /// Elementwise product with a constant mask.
    pub fn masked(&self, mask: Rc<Mat>) -> Var {
        assert_eq!(self.shape(), mask.dim(), "masked: shape mismatch");
        let v = &self.0.value * mask.as_ref();
        Var::from_op(v, Op::Masked(self.clone(), mask), self.is_tracked())
    }

    pub fn relu(&self) -> Var {
        let mask = self.0.value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.masked(Rc::new(mask))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let mask = self
            .0
            .value
            .mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
        // x·mask + clamp(x)·(1 − mask); the second part is a constant.
        let pinned = self
            .0
            .value
            .mapv(|x| if x < lo { lo } else if x > hi { hi } else { 0.0 });
        self.masked(Rc::new(mask)).add(&Var::constant(pinned))
    }

    pub fn sum(&self) -> Var {
        let v = Array2::from_elem((1, 1), self.0.value.sum());
        Var::from_op(v, Op::SumAll(self.clone()), self.is_tracked())
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&self) -> Var {
        let v = self.0.value.sum_axis(Axis(0)).insert_axis(Axis(0));
        Var::from_op(v, Op::SumRows(self.clone()), self.is_tracked())
    }

    /// Row sums as a `rows × 1` column.
    pub fn sum_cols(&self) -> Var {
        let v = self.0.value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Var::from_op(v, Op::SumCols(self.clone()), self.is_tracked())
    }

    pub fn mean(&self) -> Var {
        let n = self.0.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeat a `1 × c` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Var {
        assert_eq!(self.rows(), 1, "broadcast_rows expects a single row");
        let row = self.0.value.row(0);
        let v = row.broadcast((n, self.cols())).unwrap().to_owned();
        Var::from_op(v, Op::BroadcastRows(self.clone()), self.is_tracked())
    }

    /// Repeat an `r × 1` column `m` times.
    pub fn broadcast_cols(&self, m: usize) -> Var {
        assert_eq!(self.cols(), 1, "broadcast_cols expects a single column");
        let v = self
            .0
            .value
            .broadcast((self.rows(), m))
            .unwrap()
            .to_owned();
        Var::from_op(v, Op::BroadcastCols(self.clone()), self.is_tracked())
    }

    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Var {
        let v = Array2::from_elem((rows, cols), self.item());
        Var::from_op(v, Op::BroadcastScalar(self.clone()), self.is_tracked())
    }

    /// Rows at `idx`, in order; repeated indices are allowed.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var {
        let v = self.0.value.select(Axis(0), &idx);
        Var::from_op(v, Op::GatherRows(self.clone(), idx), self.is_tracked())
    }

    /// Inverse of [`gather_rows`](Self::gather_rows): row `k` is added into
    /// row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&self, idx: Rc<Vec<usize>>, n: usize) -> Var {
        assert_eq!(self.rows(), idx.len(), "scatter_rows: index length mismatch");
        let mut v = Array2::zeros((n, self.cols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut dst = v.row_mut(i);
            dst += &self.0.value.row(k);
        }
        Var::from_op(v, Op::ScatterRows(self.clone(), idx), self.is_tracked())
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        let v = self.0.value.slice(s![.., start..end]).to_owned();
        Var::from_op(v, Op::SliceCols(self.clone(), start), self.is_tracked())
    }

    /// Embed into a zero matrix of width `total`, starting at column `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var {
        let mut v = Array2::zeros((self.rows(), total));
        v.slice_mut(s![.., start..start + self.cols()])
            .assign(&self.0.value);
        Var::from_op(v, Op::PadCols(self.clone(), start), self.is_tracked())
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&self, other: &Var) -> Var {
        let total = self.cols() + other.cols();
        self.pad_cols(0, total).add(&other.pad_cols(self.cols(), total))
    }

    /// Row-major reshape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        assert_eq!(rows * cols, self.0.value.len(), "reshape: size mismatch");
        let flat: Vec<f64> = self.0.value.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).unwrap();
        Var::from_op(v, Op::Reshape(self.clone()), self.is_tracked())
    }

    /// Frobenius norm as a `1 × 1` node.
    pub fn norm(&self) -> Var {
        let n = self.0.value.iter().map(|x| x * x).sum::<f64>().sqrt();
        Var::from_op(
            Array2::from_elem((1, 1), n),
            Op::Norm(self.clone()),
            self.is_tracked(),
        )
    }

    /// Row-wise softmax. Subtracting the row maximum as a constant leaves
    /// the gradient exact because softmax is shift invariant.
    pub fn softmax_rows(&self) -> Var {
        let maxes = self
            .0
            .value
            .map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(1));
        let shift = maxes.broadcast(self.shape()).unwrap().to_owned();
        let e = self.sub(&Var::constant(shift)).exp();
        let z = e.sum_cols().broadcast_cols(self.cols());
        e.div(&z)
    }

    /// Backward rule: given the gradient `g` flowing into this node, returns
    /// the gradient contribution for each input, paired with the input.
    fn backward(&self, g: &Var) -> Vec<(Var, Var)> {
        let out = self;
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
            Op::Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
            Op::Div(a, b) => {
                let mut v = vec![];
                if a.is_tracked() {
                    v.push((a.clone(), g.div(b)));
                }
                if b.is_tracked() {
                    v.push((b.clone(), g.mul(out).div(b).neg()));
                }
                v
            }
            Op::MatMul(a, b) => {
                let mut v = vec![];
                if a.is_tracked() {
                    v.push((a.clone(), g.matmul(&b.t())));
                }
                if b.is_tracked() {
                    v.push((b.clone(), a.t().matmul(g)));
                }
                v
            }
            Op::Transpose(a) => vec![(a.clone(), g.t())],
            Op::Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            Op::AddScalar(a) => vec![(a.clone(), g.clone())],
            Op::Exp(a) => vec![(a.clone(), g.mul(out))],
            Op::Ln(a) => vec![(a.clone(), g.div(a))],
            Op::Sigmoid(a) => vec![(a.clone(), g.mul(&out.mul(&out.rsub_scalar(1.0))))],
            Op::Sqrt(a) => vec![(a.clone(), g.scale(0.5).div(out))],
            Op::Masked(a, m) => vec![(a.clone(), g.masked(m.clone()))],
            Op::SumAll(a) => {
                let (r, c) = a.shape();
                vec![(a.clone(), g.broadcast_scalar(r, c))]
            }
            Op::SumRows(a) => vec![(a.clone(), g.broadcast_rows(a.rows()))],
            Op::SumCols(a) => vec![(a.clone(), g.broadcast_cols(a.cols()))],
            Op::BroadcastRows(a) => vec![(a.clone(), g.sum_rows())],
            Op::BroadcastCols(a) => vec![(a.clone(), g.sum_cols())],
            Op::BroadcastScalar(a) => vec![(a.clone(), g.sum())],
            Op::GatherRows(a, idx) => vec![(a.clone(), g.scatter_rows(idx.clone(), a.rows()))],
            Op::ScatterRows(a, idx) => vec![(a.clone(), g.gather_rows(idx.clone()))],
            Op::SliceCols(a, start) => vec![(a.clone(), g.pad_cols(*start, a.cols()))],
            Op::PadCols(a, start) => vec![(a.clone(), g.slice_cols(*start, *start + a.cols()))],
            Op::Reshape(a) => vec![(a.clone(), g.reshape(a.rows(), a.cols()))],
            Op::Norm(a) => {
                let n = out.item();
                if n == 0.0 {
                    vec![(a.clone(), Var::zeros(a.rows(), a.cols()))]
                } else {
                    let (r, c) = a.shape();
                    vec![(a.clone(), g.div(out).broadcast_scalar(r, c).mul(a))]
                }
            }
        }
    }

    fn inputs(&self) -> Vec<&Var> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Masked(a, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::BroadcastScalar(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _)
            | Op::Reshape(a)
            | Op::Norm(a) => vec![a],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// The returned nodes are part of the same graph, so they can be fed into
/// further computation and differentiated again. Inputs that `output` does
/// not depend on receive a zero matrix.
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    assert_eq!(output.shape(), (1, 1), "grad: output must be a scalar");

    // Post-order DFS over tracked nodes gives a topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    if output.is_tracked() {
        let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if seen.insert(node.id(), ()).is_some() {
                continue;
            }
            stack.push((node.clone(), true));
            for input in node.inputs().into_iter().rev() {
                if input.is_tracked() && !seen.contains_key(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::scalar(1.0));
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        for (input, contrib) in node.backward(&g) {
            if !input.is_tracked() {
                continue;
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&contrib),
                None => contrib,
            };
            grads.insert(input.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::zeros(w.rows(), w.cols()))
        })
        .collect()
}
