use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather/scatter index maps for "no source element" (reads as zero).
pub const NONE: u32 = u32::MAX;

/// Dense row-major matrix value carried by every node.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat::new(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Mat::new(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Div(Node, Node),
    Neg(Node),
    Scale(Node, f64),
    MatMul(Node, Node),
    Transpose(Node),
    AddRow(Node, Node),
    SumRows(Node),
    BroadcastRows(Node),
    SumCols(Node),
    BroadcastCols(Node),
    SumAll(Node),
    BroadcastAll(Node),
    Exp(Node),
    Log(Node),
    Recip(Node),
    Sqrt(Node),
    Gather(Node, Rc<[u32]>),
    Scatter(Node, Rc<[u32]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastAll(..) => "broadcast_all",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
        }
    }

    fn inputs(&self) -> (Option<Node>, Option<Node>) {
        match *self {
            Op::Leaf => (None, None),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b) => {
                (Some(a), Some(b))
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumCols(a)
            | Op::BroadcastCols(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a) => (Some(a), None),
            Op::Gather(a, _) | Op::Scatter(a, _) => (Some(a), None),
        }
    }
}

struct Entry {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Values are computed eagerly as nodes are pushed. [`Graph::grad`] records
/// the backward pass as ordinary nodes, so its results can be differentiated
/// again. The first non-finite value is remembered and reported by
/// [`Graph::check`]; callers check at operation boundaries.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Entry>,
    fault: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: Node) -> &Mat {
        &self.nodes[n.0].value
    }

    pub fn shape(&self, n: Node) -> (usize, usize) {
        self.nodes[n.0].value.shape()
    }

    pub fn scalar(&self, n: Node) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.len(), 1);
        v.data[0]
    }

    pub fn requires_grad(&self, n: Node) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Fails with the first node that produced a NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some((node, op)) => Err(Error::Numerical { node, op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Node {
        let requires_grad = match op.inputs() {
            (None, _) => false,
            (Some(a), None) => self.nodes[a.0].requires_grad,
            (Some(a), Some(b)) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
        };
        self.push_flagged(op, value, requires_grad)
    }

    fn push_flagged(&mut self, op: Op, value: Mat, requires_grad: bool) -> Node {
        let idx = self.nodes.len();
        if self.fault.is_none() && !math::all_finite(&value.data) {
            self.fault = Some((idx, op.name()));
        }
        self.nodes.push(Entry {
            op,
            value,
            requires_grad,
        });
        Node(idx)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Node {
        self.push_flagged(Op::Leaf, value, true)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Mat) -> Node {
        self.push_flagged(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Node {
        self.constant(Mat::scalar(v))
    }

    fn same_shape(&self, a: Node, b: Node, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch between nodes {} and {}",
            a.0,
            b.0
        );
    }

    fn zip(&self, a: Node, b: Node, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (va, vb) = (self.value(a), self.value(b));
        Mat::new(
            va.rows,
            va.cols,
            va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    fn map(&self, a: Node, f: impl Fn(f64) -> f64) -> Mat {
        let va = self.value(a);
        Mat::new(va.rows, va.cols, va.data.iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        self.same_shape(a, b, "add");
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        self.same_shape(a, b, "sub");
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        self.same_shape(a, b, "mul");
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Node, b: Node) -> Node {
        self.same_shape(a, b, "div");
        let v = self.zip(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: Node) -> Node {
        let v = self.map(a, |x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Node {
        let v = self.map(a, |x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Node {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.rows, "matmul: inner dimension mismatch");
        let (n, k, m) = (va.rows, va.cols, vb.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = va.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * m..(p + 1) * m];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += x * bv;
                }
            }
        }
        self.push(Op::MatMul(a, b), Mat::new(n, m, out))
    }

    pub fn transpose(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let (r, c) = va.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Mat::new(c, r, out))
    }

    /// `a (r x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Node, b: Node) -> Node {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(vb.rows == 1 && vb.cols == va.cols, "add_row: bias shape mismatch");
        let c = va.cols;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data[i % c])
            .collect();
        let v = Mat::new(va.rows, c, data);
        self.push(Op::AddRow(a, b), v)
    }

    /// Column sums, `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let mut out = vec![0.0; va.cols];
        for i in 0..va.rows {
            for (o, x) in out.iter_mut().zip(&va.data[i * va.cols..(i + 1) * va.cols]) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), Mat::row(out))
    }

    /// `1 x c -> rows x c`.
    pub fn broadcast_rows(&mut self, a: Node, rows: usize) -> Node {
        let va = self.value(a);
        assert_eq!(va.rows, 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(rows * va.cols);
        for _ in 0..rows {
            data.extend_from_slice(&va.data);
        }
        let v = Mat::new(rows, va.cols, data);
        self.push(Op::BroadcastRows(a), v)
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let c = va.cols;
        let data = (0..va.rows)
            .map(|i| va.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        let v = Mat::new(va.rows, 1, data);
        self.push(Op::SumCols(a), v)
    }

    /// `r x 1 -> r x cols`.
    pub fn broadcast_cols(&mut self, a: Node, cols: usize) -> Node {
        let va = self.value(a);
        assert_eq!(va.cols, 1, "broadcast_cols expects a column vector");
        let data = va
            .data
            .iter()
            .flat_map(|x| core::iter::repeat_n(*x, cols))
            .collect();
        let v = Mat::new(va.rows, cols, data);
        self.push(Op::BroadcastCols(a), v)
    }

    pub fn sum_all(&mut self, a: Node) -> Node {
        let s = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), Mat::scalar(s))
    }

    /// `1 x 1 -> rows x cols`.
    pub fn broadcast_all(&mut self, a: Node, rows: usize, cols: usize) -> Node {
        let s = self.scalar(a);
        self.push(Op::BroadcastAll(a), Mat::new(rows, cols, vec![s; rows * cols]))
    }

    pub fn exp(&mut self, a: Node) -> Node {
        let v = self.map(a, math::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Node) -> Node {
        let v = self.map(a, math::ln);
        self.push(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: Node) -> Node {
        let v = self.map(a, |x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn sqrt(&mut self, a: Node) -> Node {
        let v = self.map(a, math::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// `out[k] = a[index[k]]`, or zero where `index[k] == NONE`.
    pub fn gather(&mut self, a: Node, index: Rc<[u32]>, rows: usize, cols: usize) -> Node {
        assert_eq!(index.len(), rows * cols, "gather: index map size");
        let va = self.value(a);
        let data = index
            .iter()
            .map(|&i| if i == NONE { 0.0 } else { va.data[i as usize] })
            .collect();
        let v = Mat::new(rows, cols, data);
        self.push(Op::Gather(a, index), v)
    }

    /// Adjoint of [`Graph::gather`]: `out[index[k]] += a[k]`.
    pub fn scatter(&mut self, a: Node, index: Rc<[u32]>, rows: usize, cols: usize) -> Node {
        let va = self.value(a);
        assert_eq!(index.len(), va.len(), "scatter: index map size");
        let mut data = vec![0.0; rows * cols];
        for (k, &i) in index.iter().enumerate() {
            if i != NONE {
                data[i as usize] += va.data[k];
            }
        }
        self.push(Op::Scatter(a, index), Mat::new(rows, cols, data))
    }

    // Composite helpers.

    /// Contiguous slice `[offset, offset + rows*cols)` of `a`, reshaped.
    pub fn slice(&mut self, a: Node, offset: usize, rows: usize, cols: usize) -> Node {
        let index: Rc<[u32]> = (offset..offset + rows * cols).map(|i| i as u32).collect();
        self.gather(a, index, rows, cols)
    }

    pub fn dot(&mut self, a: Node, b: Node) -> Node {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    pub fn square(&mut self, a: Node) -> Node {
        self.mul(a, a)
    }

    /// `max(x, 0)`, expressed as a product with a constant mask so that higher
    /// derivatives treat the kink as almost-everywhere flat.
    pub fn relu(&mut self, a: Node) -> Node {
        let mask = self.map(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Row-wise log-softmax with a constant max shift.
    pub fn log_softmax_rows(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let c = va.cols;
        let maxes: Vec<f64> = (0..va.rows)
            .map(|i| {
                va.data[i * c..(i + 1) * c]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let rows = va.rows;
        let m = self.constant(Mat::new(rows, 1, maxes));
        let mb = self.broadcast_cols(m, c);
        let shifted = self.sub(a, mb);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let lse = self.log(s);
        let lse_b = self.broadcast_cols(lse, c);
        self.sub(shifted, lse_b)
    }

    /// Reverse-mode gradient of the scalar `out` with respect to each node in
    /// `wrt`. The backward pass is recorded on this graph, so returned nodes are
    /// themselves differentiable.
    pub fn grad(&mut self, out: Node, wrt: &[Node]) -> Vec<Node> {
        assert_eq!(self.shape(out), (1, 1), "grad: output must be scalar");
        let end = out.0 + 1;
        // Nodes on a path from some `wrt` node; others never receive adjoints.
        let mut reaches = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reaches[w.0] = true;
            }
        }
        for i in 0..end {
            if reaches[i] {
                continue;
            }
            reaches[i] = match self.nodes[i].op.inputs() {
                (Some(a), Some(b)) => reaches[a.0] || reaches[b.0],
                (Some(a), None) => reaches[a.0],
                _ => false,
            };
        }

        let mut adj: Vec<Option<Node>> = vec![None; end];
        if reaches[out.0] {
            adj[out.0] = Some(self.constant_scalar(1.0));
        }
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = Node(i);
            let mut acc = |graph: &mut Graph, target: Node, contrib: Node| {
                if !reaches[target.0] {
                    return;
                }
                adj[target.0] = Some(match adj[target.0] {
                    Some(prev) => graph.add(prev, contrib),
                    None => contrib,
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(self, a, g);
                    acc(self, b, g);
                }
                Op::Sub(a, b) => {
                    acc(self, a, g);
                    if reaches[b.0] {
                        let nb = self.neg(g);
                        acc(self, b, nb);
                    }
                }
                Op::Mul(a, b) => {
                    if reaches[a.0] {
                        let ga = self.mul(g, b);
                        acc(self, a, ga);
                    }
                    if reaches[b.0] {
                        let gb = self.mul(g, a);
                        acc(self, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if reaches[a.0] {
                        let ga = self.div(g, b);
                        acc(self, a, ga);
                    }
                    if reaches[b.0] {
                        let t = self.mul(g, node);
                        let q = self.div(t, b);
                        let gb = self.neg(q);
                        acc(self, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    acc(self, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    acc(self, a, ga);
                }
                Op::MatMul(a, b) => {
                    if reaches[a.0] {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        acc(self, a, ga);
                    }
                    if reaches[b.0] {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        acc(self, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    acc(self, a, ga);
                }
                Op::AddRow(a, b) => {
                    acc(self, a, g);
                    if reaches[b.0] {
                        let gb = self.sum_rows(g);
                        acc(self, b, gb);
                    }
                }
                Op::SumRows(a) => {
                    let r = self.shape(a).0;
                    let ga = self.broadcast_rows(g, r);
                    acc(self, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    acc(self, a, ga);
                }
                Op::SumCols(a) => {
                    let c = self.shape(a).1;
                    let ga = self.broadcast_cols(g, c);
                    acc(self, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    acc(self, a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast_all(g, r, c);
                    acc(self, a, ga);
                }
                Op::BroadcastAll(a) => {
                    let ga = self.sum_all(g);
                    acc(self, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, node);
                    acc(self, a, ga);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    acc(self, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.mul(node, node);
                    let t = self.mul(g, sq);
                    let ga = self.neg(t);
                    acc(self, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(node);
                    let h = self.scale(r, 0.5);
                    let ga = self.mul(g, h);
                    acc(self, a, ga);
                }
                Op::Gather(a, index) => {
                    let (r, c) = self.shape(a);
                    let ga = self.scatter(g, index, r, c);
                    acc(self, a, ga);
                }
                Op::Scatter(a, index) => {
                    let (r, c) = self.shape(a);
                    let ga = self.gather(g, index, r, c);
                    acc(self, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(n) => n,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect()
    }
}
