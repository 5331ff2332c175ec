use super::mat::Mat;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `n x k` plus a `1 x k` bias row.
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var, usize, usize),
    BroadcastCol(Var, usize),
    BroadcastRow(Var, usize),
    /// Contiguous `rows x cols` block read from the flat storage of `src`.
    Slice { src: Var, offset: usize, rows: usize, cols: usize },
    /// Inverse of `Slice`: zeros of shape `rows x cols` with `src` written at `offset`.
    Embed { src: Var, offset: usize, rows: usize, cols: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastCol(..) => "broadcast_col",
            Op::BroadcastRow(..) => "broadcast_row",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
        }
    }

    fn parents(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => [Some(a), Some(b)],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastScalar(a, ..)
            | Op::BroadcastCol(a, _)
            | Op::BroadcastRow(a, _) => [Some(a), None],
            Op::Slice { src, .. } | Op::Embed { src, .. } => [Some(src), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
    /// Depends on at least one differentiable leaf.
    active: bool,
}

/// Computation record: a topologically ordered list of primitive operations
/// with cached forward values.
///
/// Gradients can be taken in two ways. [`Tape::grad`] records the backward
/// pass as new nodes, so the result can itself be differentiated (this is what
/// makes inner-loop adaptation and Hessian-vector products possible).
/// [`Tape::grad_values`] and [`Tape::jvp`] sweep the record numerically and
/// leave it untouched.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
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

    /// Differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// First node whose value was not finite, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFiniteValue { node, op }),
            None => Ok(()),
        }
    }

    fn push_leaf(&mut self, value: Mat, active: bool) -> Var {
        self.push(Op::Leaf, value, active)
    }

    fn push(&mut self, op: Op, value: Mat, active: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node { op, value, active });
        Var(idx)
    }

    fn push_op(&mut self, op: Op, value: Mat) -> Var {
        let active = op.parents().iter().flatten().any(|p| self.nodes[p.0].active);
        self.push(op, value, active)
    }

    // ---- primitives ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push_op(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push_op(Op::Sub(a, b), v)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push_op(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push_op(Op::Scale(a, c), v)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push_op(Op::Offset(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = Mat::matmul(self.value(a), self.value(b), ta, tb);
        self.push_op(Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows, 1);
        assert_eq!(bv.cols, xv.cols);
        let mut out = xv.clone();
        for r in out.data.chunks_mut(xv.cols.max(1)) {
            for (o, b) in r.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push_op(Op::AddRow(x, bias), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(Op::Tanh(a), v)
    }

    /// Rectifier; its derivative is the constant 0/1 mask, so the second
    /// derivative is 0 everywhere (including the kink).
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push_op(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push_op(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push_op(Op::Recip(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_op(Op::Square(a), v)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push_op(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `n x k -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push_op(Op::SumRows(a), v)
    }

    /// `n x k -> 1 x k`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        self.push_op(Op::SumCols(a), v)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Mat::filled(rows, cols, self.scalar(a));
        self.push_op(Op::BroadcastScalar(a, rows, cols), v)
    }

    /// `n x 1 -> n x cols`.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.rows * cols);
        for &x in &src.data {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Mat::new(src.rows, cols, data);
        self.push_op(Op::BroadcastCol(a, cols), v)
    }

    /// `1 x k -> rows x k`.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * src.cols);
        for _ in 0..rows {
            data.extend_from_slice(&src.data);
        }
        let v = Mat::new(rows, src.cols, data);
        self.push_op(Op::BroadcastRow(a, rows), v)
    }

    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let s = self.value(src);
        assert!(offset + rows * cols <= s.len(), "slice out of range");
        let v = Mat::new(rows, cols, s.data[offset..offset + rows * cols].to_vec());
        self.push_op(Op::Slice { src, offset, rows, cols }, v)
    }

    pub fn embed(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let s = self.value(src);
        assert!(offset + s.len() <= rows * cols, "embed out of range");
        let mut v = Mat::zeros(rows, cols);
        v.data[offset..offset + s.len()].copy_from_slice(&s.data);
        self.push_op(Op::Embed { src, offset, rows, cols }, v)
    }

    // ---- differentiation ----

    /// Nodes in `lo..end` that depend on one of `wrt`.
    fn reach(&self, wrt: &[Var], end: usize) -> (usize, Vec<bool>) {
        let lo = wrt.iter().map(|v| v.0).min().unwrap_or(end);
        let mut reach = vec![false; end.saturating_sub(lo)];
        for w in wrt {
            if w.0 < end {
                reach[w.0 - lo] = true;
            }
        }
        for i in lo..end {
            if reach[i - lo] {
                continue;
            }
            reach[i - lo] = self.nodes[i]
                .op
                .parents()
                .iter()
                .flatten()
                .any(|p| p.0 >= lo && reach[p.0 - lo]);
        }
        (lo, reach)
    }

    /// Recorded partial derivatives of the scalar `out` with respect to each
    /// of `wrt`. Every `wrt` node is treated as independent: adjoints do not
    /// flow through it into its own parents.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(out).len(), 1, "grad needs a scalar output");
        let seed = self.constant(Mat::scalar(1.0));
        self.grad_seeded(out, seed, wrt)
    }

    pub fn grad_seeded(&mut self, out: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        let end = out.0 + 1;
        let (lo, reach) = self.reach(wrt, end);
        let mut adj: Vec<Option<Var>> = vec![None; end.saturating_sub(lo)];
        if out.0 >= lo && reach[out.0 - lo] {
            adj[out.0 - lo] = Some(seed);
        }
        for i in (lo..end).rev() {
            if !reach[i - lo] || wrt.iter().any(|w| w.0 == i) {
                continue;
            }
            let Some(g) = adj[i - lo] else { continue };
            let op = self.nodes[i].op;
            let mut emit = |tape: &mut Tape, p: Var, contrib: Var| {
                if p.0 < lo || !reach[p.0 - lo] {
                    return;
                }
                let slot = &mut adj[p.0 - lo];
                *slot = Some(match *slot {
                    Some(prev) => tape.add(prev, contrib),
                    None => contrib,
                });
            };
            let live = |p: Var| p.0 >= lo && reach[p.0 - lo];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    emit(self, a, g);
                    emit(self, b, g);
                }
                Op::Sub(a, b) => {
                    emit(self, a, g);
                    if live(b) {
                        let n = self.scale(g, -1.0);
                        emit(self, b, n);
                    }
                }
                Op::Mul(a, b) => {
                    if live(a) {
                        let c = self.mul(g, b);
                        emit(self, a, c);
                    }
                    if live(b) {
                        let c = self.mul(g, a);
                        emit(self, b, c);
                    }
                }
                Op::Scale(a, c) => {
                    let s = self.scale(g, c);
                    emit(self, a, s);
                }
                Op::Offset(a) => emit(self, a, g),
                Op::MatMul { a, b, ta, tb } => {
                    if live(a) {
                        let da = match (ta, tb) {
                            (false, false) => self.matmul_t(g, b, false, true),
                            (true, false) => self.matmul_t(b, g, false, true),
                            (false, true) => self.matmul_t(g, b, false, false),
                            (true, true) => self.matmul_t(b, g, true, true),
                        };
                        emit(self, a, da);
                    }
                    if live(b) {
                        let db = match (ta, tb) {
                            (false, false) => self.matmul_t(a, g, true, false),
                            (true, false) => self.matmul_t(a, g, false, false),
                            (false, true) => self.matmul_t(g, a, true, false),
                            (true, true) => self.matmul_t(g, a, true, true),
                        };
                        emit(self, b, db);
                    }
                }
                Op::AddRow(x, b) => {
                    emit(self, x, g);
                    if live(b) {
                        let s = self.sum_cols(g);
                        emit(self, b, s);
                    }
                }
                Op::Tanh(a) => {
                    let y = Var(i);
                    let y2 = self.square(y);
                    let neg = self.scale(y2, -1.0);
                    let d = self.offset(neg, 1.0);
                    let c = self.mul(g, d);
                    emit(self, a, c);
                }
                Op::Relu(a) => {
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let c = self.mul(g, m);
                    emit(self, a, c);
                }
                Op::Exp(a) => {
                    let c = self.mul(g, Var(i));
                    emit(self, a, c);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let c = self.mul(g, r);
                    emit(self, a, c);
                }
                Op::Recip(a) => {
                    let y2 = self.square(Var(i));
                    let d = self.scale(y2, -1.0);
                    let c = self.mul(g, d);
                    emit(self, a, c);
                }
                Op::Square(a) => {
                    let d = self.scale(a, 2.0);
                    let c = self.mul(g, d);
                    emit(self, a, c);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    let b = self.broadcast_scalar(g, r, c);
                    emit(self, a, b);
                }
                Op::SumRows(a) => {
                    let c = self.shape(a).1;
                    let b = self.broadcast_col(g, c);
                    emit(self, a, b);
                }
                Op::SumCols(a) => {
                    let r = self.shape(a).0;
                    let b = self.broadcast_row(g, r);
                    emit(self, a, b);
                }
                Op::BroadcastScalar(a, ..) => {
                    let s = self.sum(g);
                    emit(self, a, s);
                }
                Op::BroadcastCol(a, _) => {
                    let s = self.sum_rows(g);
                    emit(self, a, s);
                }
                Op::BroadcastRow(a, _) => {
                    let s = self.sum_cols(g);
                    emit(self, a, s);
                }
                Op::Slice { src, offset, .. } => {
                    let (r, c) = self.shape(src);
                    let e = self.embed(g, offset, r, c);
                    emit(self, src, e);
                }
                Op::Embed { src, offset, .. } => {
                    let (r, c) = self.shape(src);
                    let s = self.slice(g, offset, r, c);
                    emit(self, src, s);
                }
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0.wrapping_sub(lo)).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    /// Numeric vector-Jacobian product: adjoints at `wrt` of `out` seeded with
    /// `seed` (same shape as `out`). Nothing is recorded.
    pub fn grad_values(&self, out: Var, seed: &Mat, wrt: &[Var]) -> Vec<Mat> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape must match output");
        let end = out.0 + 1;
        let (lo, reach) = self.reach(wrt, end);
        let mut adj: Vec<Option<Mat>> = vec![None; end.saturating_sub(lo)];
        if out.0 >= lo && reach[out.0 - lo] {
            adj[out.0 - lo] = Some(seed.clone());
        }
        for i in (lo..end).rev() {
            if !reach[i - lo] || wrt.iter().any(|w| w.0 == i) {
                continue;
            }
            let Some(g) = adj[i - lo].take() else { continue };
            let live = |p: Var| p.0 >= lo && reach[p.0 - lo];
            let mut emit = |p: Var, contrib: Mat| {
                let slot = &mut adj[p.0 - lo];
                match slot {
                    Some(prev) => prev.add_assign(&contrib),
                    None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if live(a) {
                        emit(a, g.clone());
                    }
                    if live(b) {
                        emit(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if live(a) {
                        emit(a, g.clone());
                    }
                    if live(b) {
                        emit(b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if live(a) {
                        emit(a, g.zip(val(b), |x, y| x * y));
                    }
                    if live(b) {
                        emit(b, g.zip(val(a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    if live(a) {
                        emit(a, g.map(|x| x * c));
                    }
                }
                Op::Offset(a) => {
                    if live(a) {
                        emit(a, g);
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(a), val(b));
                    if live(a) {
                        let da = match (ta, tb) {
                            (false, false) => Mat::matmul(&g, bv, false, true),
                            (true, false) => Mat::matmul(bv, &g, false, true),
                            (false, true) => Mat::matmul(&g, bv, false, false),
                            (true, true) => Mat::matmul(bv, &g, true, true),
                        };
                        emit(a, da);
                    }
                    if live(b) {
                        let db = match (ta, tb) {
                            (false, false) => Mat::matmul(av, &g, true, false),
                            (true, false) => Mat::matmul(av, &g, false, false),
                            (false, true) => Mat::matmul(&g, av, true, false),
                            (true, true) => Mat::matmul(&g, av, true, true),
                        };
                        emit(b, db);
                    }
                }
                Op::AddRow(x, b) => {
                    let sc = live(b).then(|| g.sum_cols());
                    if live(x) {
                        emit(x, g);
                    }
                    if let Some(sc) = sc {
                        emit(b, sc);
                    }
                }
                Op::Tanh(a) => {
                    if live(a) {
                        emit(a, g.zip(val(Var(i)), |x, y| x * (1.0 - y * y)));
                    }
                }
                Op::Relu(a) => {
                    if live(a) {
                        emit(a, g.zip(val(a), |x, y| if y > 0.0 { x } else { 0.0 }));
                    }
                }
                Op::Exp(a) => {
                    if live(a) {
                        emit(a, g.zip(val(Var(i)), |x, y| x * y));
                    }
                }
                Op::Log(a) => {
                    if live(a) {
                        emit(a, g.zip(val(a), |x, y| x * (1.0 / y)));
                    }
                }
                Op::Recip(a) => {
                    if live(a) {
                        emit(a, g.zip(val(Var(i)), |x, y| x * -(y * y)));
                    }
                }
                Op::Square(a) => {
                    if live(a) {
                        emit(a, g.zip(val(a), |x, y| x * (y * 2.0)));
                    }
                }
                Op::Sum(a) => {
                    if live(a) {
                        let (r, c) = val(a).shape();
                        emit(a, Mat::filled(r, c, g.data[0]));
                    }
                }
                Op::SumRows(a) => {
                    if live(a) {
                        let c = val(a).cols;
                        let mut data = Vec::with_capacity(g.rows * c);
                        for &x in &g.data {
                            data.extend(std::iter::repeat_n(x, c));
                        }
                        emit(a, Mat::new(g.rows, c, data));
                    }
                }
                Op::SumCols(a) => {
                    if live(a) {
                        let r = val(a).rows;
                        let mut data = Vec::with_capacity(r * g.cols);
                        for _ in 0..r {
                            data.extend_from_slice(&g.data);
                        }
                        emit(a, Mat::new(r, g.cols, data));
                    }
                }
                Op::BroadcastScalar(a, ..) => {
                    if live(a) {
                        emit(a, Mat::scalar(g.sum()));
                    }
                }
                Op::BroadcastCol(a, _) => {
                    if live(a) {
                        emit(a, g.sum_rows());
                    }
                }
                Op::BroadcastRow(a, _) => {
                    if live(a) {
                        emit(a, g.sum_cols());
                    }
                }
                Op::Slice { src, offset, .. } => {
                    if live(src) {
                        let (r, c) = val(src).shape();
                        let mut m = Mat::zeros(r, c);
                        m.data[offset..offset + g.len()].copy_from_slice(&g.data);
                        emit(src, m);
                    }
                }
                Op::Embed { src, offset, .. } => {
                    if live(src) {
                        let (r, c) = val(src).shape();
                        emit(src, Mat::new(r, c, g.data[offset..offset + r * c].to_vec()));
                    }
                }
            }
        }
        wrt.iter()
            .map(|w| {
                adj.get_mut(w.0.wrapping_sub(lo))
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = self.shape(*w);
                        Mat::zeros(r, c)
                    })
            })
            .collect()
    }

    /// Numeric Jacobian-vector product: forward tangent sweep seeded at the
    /// given nodes, returning tangents of `outputs`.
    pub fn jvp(&self, seeds: &[(Var, &Mat)], outputs: &[Var]) -> Vec<Mat> {
        let Some(end) = outputs.iter().map(|v| v.0 + 1).max() else { return Vec::new() };
        let lo = seeds.iter().map(|(v, _)| v.0).min().unwrap_or(end).min(end);
        let mut tan: Vec<Option<Mat>> = vec![None; end - lo];
        for (v, t) in seeds {
            if v.0 < end {
                assert_eq!(t.shape(), self.shape(*v), "tangent shape must match node");
                tan[v.0 - lo] = Some((*t).clone());
            }
        }
        for i in lo..end {
            if tan[i - lo].is_some() {
                continue;
            }
            let op = self.nodes[i].op;
            let t = |p: Var| if p.0 >= lo { tan[p.0 - lo].as_ref() } else { None };
            let val = |v: Var| &self.nodes[v.0].value;
            let out = match op {
                Op::Leaf => None,
                Op::Add(a, b) => lin2(t(a), t(b), |x, y| x + y, |x| x, |y| y),
                Op::Sub(a, b) => lin2(t(a), t(b), |x, y| x - y, |x| x, |y| -y),
                Op::Mul(a, b) => {
                    let ta = t(a).map(|ta| ta.zip(val(b), |x, y| x * y));
                    let tb = t(b).map(|tb| val(a).zip(tb, |x, y| x * y));
                    sum_opt(ta, tb)
                }
                Op::Scale(a, c) => t(a).map(|x| x.map(|v| v * c)),
                Op::Offset(a) => t(a).cloned(),
                Op::MatMul { a, b, ta, tb } => {
                    let l = t(a).map(|da| Mat::matmul(da, val(b), ta, tb));
                    let r = t(b).map(|db| Mat::matmul(val(a), db, ta, tb));
                    sum_opt(l, r)
                }
                Op::AddRow(x, b) => {
                    let mut base = t(x).cloned();
                    if let Some(tb) = t(b) {
                        let (r, c) = val(x).shape();
                        let mut m = base.unwrap_or_else(|| Mat::zeros(r, c));
                        for row in m.data.chunks_mut(c.max(1)) {
                            for (o, v) in row.iter_mut().zip(&tb.data) {
                                *o += v;
                            }
                        }
                        base = Some(m);
                    }
                    base
                }
                Op::Tanh(a) => t(a).map(|x| x.zip(val(Var(i)), |d, y| d * (1.0 - y * y))),
                Op::Relu(a) => t(a).map(|x| x.zip(val(a), |d, y| if y > 0.0 { d } else { 0.0 })),
                Op::Exp(a) => t(a).map(|x| x.zip(val(Var(i)), |d, y| d * y)),
                Op::Log(a) => t(a).map(|x| x.zip(val(a), |d, y| d * (1.0 / y))),
                Op::Recip(a) => t(a).map(|x| x.zip(val(Var(i)), |d, y| d * -(y * y))),
                Op::Square(a) => t(a).map(|x| x.zip(val(a), |d, y| d * (y * 2.0))),
                Op::Sum(a) => t(a).map(|x| Mat::scalar(x.sum())),
                Op::SumRows(a) => t(a).map(Mat::sum_rows),
                Op::SumCols(a) => t(a).map(Mat::sum_cols),
                Op::BroadcastScalar(a, r, c) => t(a).map(|x| Mat::filled(r, c, x.data[0])),
                Op::BroadcastCol(a, c) => t(a).map(|x| {
                    let mut data = Vec::with_capacity(x.rows * c);
                    for &v in &x.data {
                        data.extend(std::iter::repeat_n(v, c));
                    }
                    Mat::new(x.rows, c, data)
                }),
                Op::BroadcastRow(a, r) => t(a).map(|x| {
                    let mut data = Vec::with_capacity(r * x.cols);
                    for _ in 0..r {
                        data.extend_from_slice(&x.data);
                    }
                    Mat::new(r, x.cols, data)
                }),
                Op::Slice { src, offset, rows, cols } => {
                    t(src).map(|x| Mat::new(rows, cols, x.data[offset..offset + rows * cols].to_vec()))
                }
                Op::Embed { src, offset, rows, cols } => t(src).map(|x| {
                    let mut m = Mat::zeros(rows, cols);
                    m.data[offset..offset + x.len()].copy_from_slice(&x.data);
                    m
                }),
            };
            tan[i - lo] = out;
        }
        outputs
            .iter()
            .map(|o| {
                o.0.checked_sub(lo)
                    .and_then(|k| tan[k].clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.shape(*o);
                        Mat::zeros(r, c)
                    })
            })
            .collect()
    }
}

fn lin2(
    a: Option<&Mat>,
    b: Option<&Mat>,
    both: impl Fn(f64, f64) -> f64,
    only_a: impl Fn(f64) -> f64,
    only_b: impl Fn(f64) -> f64,
) -> Option<Mat> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.zip(b, both)),
        (Some(a), None) => Some(a.map(only_a)),
        (None, Some(b)) => Some(b.map(only_b)),
        (None, None) => None,
    }
}

fn sum_opt(a: Option<Mat>, b: Option<Mat>) -> Option<Mat> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        (a, b) => a.or(b),
    }
}
