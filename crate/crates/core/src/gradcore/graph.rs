//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order. `backward` walks it once in reverse and accumulates
//! gradients in that fixed order, which keeps results bitwise reproducible.

use super::lu::LuFactors;
use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis a reduction collapses. `Rows` folds every row into one (result `1×C`),
/// `Cols` folds every column into one (result `N×1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Square,
    /// `x ↦ max(0, x)`; subgradient 0 at the kink.
    Hinge,
    Sqrt,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Pow(Var, f64),
    Reduce(Reduce, Var, Axis, Vec<usize>),
    SumAll(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    PairwiseSqDist(Var),
    Solve(Var, Var, LuFactors),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-owner; distinct graphs can live on distinct threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is not connected to the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad1(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).checked_matmul(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = if sa == sb {
            Broadcast::None
        } else if sb == (1, 1) {
            Broadcast::RightScalar
        } else if sa == (1, 1) {
            Broadcast::LeftScalar
        } else {
            return Err(Error::dim(
                "elementwise",
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        };
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out = match bc {
            Broadcast::None => va.zip_map(vb, f),
            Broadcast::RightScalar => {
                let s = vb.as_slice()[0];
                va.map(|x| f(x, s))
            }
            Broadcast::LeftScalar => {
                let s = va.as_slice()[0];
                vb.map(|y| f(s, y))
            }
        };
        let g = self.grad2(a, b);
        Ok(self.push(out, Op::Binary(op, a, b, bc), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = match op {
            Unary::Relu | Unary::Hinge => va.map(|x| if x > 0.0 { x } else { 0.0 }),
            Unary::Exp => va.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = va.as_slice().iter().find(|&&x| !(x > 0.0)) {
                    return Err(Error::domain("log", format!("non-positive input {bad}")));
                }
                va.map(f64::ln)
            }
            Unary::Square => va.map(|x| x * x),
            Unary::Sqrt => {
                if let Some(bad) = va.as_slice().iter().find(|&&x| x < 0.0) {
                    return Err(Error::domain("sqrt", format!("negative input {bad}")));
                }
                va.map(f64::sqrt)
            }
            Unary::Neg => va.map(|x| -x),
        };
        let g = self.grad1(a);
        Ok(self.push(out, Op::Unary(op, a), g))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Hinge, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let g = self.grad1(a);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let g = self.grad1(a);
        self.push(out, Op::Offset(a), g)
    }

    /// `x ↦ x^p` for strictly positive inputs.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let va = self.value(a);
        if let Some(bad) = va.as_slice().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("pow", format!("non-positive input {bad}")));
        }
        let out = va.map(|x| x.powf(p));
        let g = self.grad1(a);
        Ok(self.push(out, Op::Pow(a, p), g))
    }

    pub fn reduce(&mut self, op: Reduce, a: Var, axis: Axis) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.shape();
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if extent == 0 {
            return Err(Error::domain("reduce", "reduction over an empty axis"));
        }
        let mut argmax = Vec::new();
        let out = match axis {
            Axis::Rows => {
                let mut out = Matrix::zeros(1, c);
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let o = out.as_mut_slice();
                        for i in 0..r {
                            for (acc, v) in o.iter_mut().zip(va.row(i)) {
                                *acc += v;
                            }
                        }
                        if op == Reduce::Mean {
                            out.scale_assign(1.0 / r as f64);
                        }
                    }
                    Reduce::Max => {
                        argmax = vec![0usize; c];
                        let o = out.as_mut_slice();
                        o.copy_from_slice(va.row(0));
                        for i in 1..r {
                            for (j, &v) in va.row(i).iter().enumerate() {
                                if v > o[j] {
                                    o[j] = v;
                                    argmax[j] = i;
                                }
                            }
                        }
                    }
                }
                out
            }
            Axis::Cols => {
                let mut out = Matrix::zeros(r, 1);
                for i in 0..r {
                    let row = va.row(i);
                    let v = match op {
                        Reduce::Sum => row.iter().sum(),
                        Reduce::Mean => row.iter().sum::<f64>() / c as f64,
                        Reduce::Max => {
                            let mut best = 0;
                            for (j, &v) in row.iter().enumerate() {
                                if v > row[best] {
                                    best = j;
                                }
                            }
                            argmax.push(best);
                            row[best]
                        }
                    };
                    out.set(i, 0, v);
                }
                out
            }
        };
        let g = self.grad1(a);
        Ok(self.push(out, Op::Reduce(op, a, axis, argmax), g))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let g = self.grad1(a);
        self.push(out, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::domain("mean", "mean of an empty matrix"));
        }
        let s = self.sum_all(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows vs {} rows", va.rows(), vb.rows()),
            ));
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Matrix::from_raw(r, ca + cb, data);
        let g = self.grad2(a, b);
        Ok(self.push(out, Op::ConcatCols(a, b), g))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim(
                "concat_rows",
                format!("{} cols vs {} cols", va.cols(), vb.cols()),
            ));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.as_slice());
        data.extend_from_slice(vb.as_slice());
        let out = Matrix::from_raw(va.rows() + vb.rows(), va.cols(), data);
        let g = self.grad2(a, b);
        Ok(self.push(out, Op::ConcatRows(a, b), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, va.cols()),
            ));
        }
        let mut data = Vec::with_capacity(va.rows() * len);
        for i in 0..va.rows() {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let out = Matrix::from_raw(va.rows(), len, data);
        let g = self.grad1(a);
        Ok(self.push(out, Op::SliceCols(a, start), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, va.rows()),
            ));
        }
        let c = va.cols();
        let out = Matrix::from_raw(len, c, va.as_slice()[start * c..(start + len) * c].to_vec());
        let g = self.grad1(a);
        Ok(self.push(out, Op::SliceRows(a, start), g))
    }

    /// Gathers rows by index (repeats allowed); gradients scatter-add back.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::dim(
                "select_rows",
                format!("row {bad} of {}", va.rows()),
            ));
        }
        let out = va.select_rows(idx);
        let g = self.grad1(a);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let g = self.grad1(a);
        self.push(out, Op::Transpose(a), g)
    }

    /// Adds a `1×C` row to every row of an `N×C` matrix (layer bias).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::dim(
                "add_row",
                format!(
                    "bias {}x{} for {}x{}",
                    vb.rows(),
                    vb.cols(),
                    va.rows(),
                    va.cols()
                ),
            ));
        }
        let mut out = va.clone();
        let b = vb.as_slice();
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(b) {
                *x += y;
            }
        }
        let g = self.grad2(a, bias);
        Ok(self.push(out, Op::AddRow(a, bias), g))
    }

    /// Tiles a `1×C` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(Error::dim(
                "repeat_rows",
                format!("expected one row, got {}", va.rows()),
            ));
        }
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.as_slice());
        }
        let out = Matrix::from_raw(n, va.cols(), data);
        let g = self.grad1(a);
        Ok(self.push(out, Op::RepeatRows(a), g))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let g = self.grad1(a);
        self.push(out, Op::RowSoftmax(a), g)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let g = self.grad1(a);
        self.push(out, Op::RowLogSoftmax(a), g)
    }

    /// `out[i][j] = ‖row_i − row_j‖²`, computed pairwise (no cancellation).
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let ri = va.row(i);
            for j in i + 1..n {
                let d: f64 = ri
                    .iter()
                    .zip(va.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        let g = self.grad1(a);
        self.push(out, Op::PairwiseSqDist(a), g)
    }

    /// Solves `A·X = B` by partial-pivot LU; the factors are kept for the adjoint solve.
    pub fn linear_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim(
                "linear_solve",
                format!("A has {} rows, B has {}", va.rows(), vb.rows()),
            ));
        }
        let lu = LuFactors::factor(va)?;
        let x = lu.solve(vb);
        let g = self.grad2(a, b);
        Ok(self.push(x, Op::Solve(a, b, lu), g))
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        // Only leaves survive the sweep; interior gradients were consumed above.
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.grad1(*a) {
                    let da = gemm(g, false, self.value(*b), true);
                    self.accumulate(grads, *a, da);
                }
                if self.grad1(*b) {
                    let db = gemm(self.value(*a), true, g, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary(op, a, b, bc) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // full-shape gradients for each operand before any broadcast reduction
                let (ga, gb) = match op {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => match bc {
                        Broadcast::None => (g.zip_map(vb, |x, y| x * y), g.zip_map(va, |x, y| x * y)),
                        Broadcast::RightScalar => {
                            let s = vb.as_slice()[0];
                            (g.map(|x| x * s), g.zip_map(va, |x, y| x * y))
                        }
                        Broadcast::LeftScalar => {
                            let s = va.as_slice()[0];
                            (g.zip_map(vb, |x, y| x * y), g.map(|x| x * s))
                        }
                    },
                };
                let (ga, gb) = match bc {
                    Broadcast::None => (ga, gb),
                    Broadcast::RightScalar => (ga, Matrix::scalar(gb.sum())),
                    Broadcast::LeftScalar => (Matrix::scalar(ga.sum()), gb),
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary(op, a) => {
                let va = self.value(*a);
                let da = match op {
                    Unary::Relu | Unary::Hinge => {
                        g.zip_map(va, |gi, x| if x > 0.0 { gi } else { 0.0 })
                    }
                    Unary::Exp => g.zip_map(out, |gi, y| gi * y),
                    Unary::Log => g.zip_map(va, |gi, x| gi / x),
                    Unary::Square => g.zip_map(va, |gi, x| 2.0 * gi * x),
                    Unary::Sqrt => g.zip_map(out, |gi, y| if y > 0.0 { 0.5 * gi / y } else { 0.0 }),
                    Unary::Neg => g.map(|x| -x),
                };
                self.accumulate(grads, *a, da);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Pow(a, p) => {
                let p = *p;
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| gi * p * x.powf(p - 1.0)));
            }
            Op::Reduce(op, a, axis, argmax) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                match (op, axis) {
                    (Reduce::Sum | Reduce::Mean, Axis::Rows) => {
                        let k = if *op == Reduce::Mean { 1.0 / r as f64 } else { 1.0 };
                        for i in 0..r {
                            for (d, gi) in da.row_mut(i).iter_mut().zip(g.as_slice()) {
                                *d = gi * k;
                            }
                        }
                    }
                    (Reduce::Sum | Reduce::Mean, Axis::Cols) => {
                        let k = if *op == Reduce::Mean { 1.0 / c as f64 } else { 1.0 };
                        for i in 0..r {
                            let gi = g.as_slice()[i] * k;
                            da.row_mut(i).fill(gi);
                        }
                    }
                    (Reduce::Max, Axis::Rows) => {
                        for (j, &i) in argmax.iter().enumerate() {
                            da.set(i, j, g.as_slice()[j]);
                        }
                    }
                    (Reduce::Max, Axis::Cols) => {
                        for (i, &j) in argmax.iter().enumerate() {
                            da.set(i, j, g.as_slice()[i]);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let r = g.rows();
                if self.grad1(*a) {
                    let mut da = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        da.extend_from_slice(&g.row(i)[..ca]);
                    }
                    self.accumulate(grads, *a, Matrix::from_raw(r, ca, da));
                }
                if self.grad1(*b) {
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        db.extend_from_slice(&g.row(i)[ca..]);
                    }
                    self.accumulate(grads, *b, Matrix::from_raw(r, cb, db));
                }
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = self.shape(*a);
                let rb = self.shape(*b).0;
                let gs = g.as_slice();
                self.accumulate(grads, *a, Matrix::from_raw(ra, c, gs[..ra * c].to_vec()));
                self.accumulate(grads, *b, Matrix::from_raw(rb, c, gs[ra * c..].to_vec()));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                let len = g.cols();
                for i in 0..r {
                    da.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                da.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.accumulate(grads, *a, da);
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, gi) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += gi;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::AddRow(a, bias) => {
                if self.grad1(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    let d = db.as_mut_slice();
                    for i in 0..g.rows() {
                        for (x, y) in d.iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::RepeatRows(a) => {
                let mut da = Matrix::zeros(1, g.cols());
                let d = da.as_mut_slice();
                for i in 0..g.rows() {
                    for (x, y) in d.iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowSoftmax(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (s, gi) = (out.row(i), g.row(i));
                    let dot: f64 = s.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for ((d, &si), &gij) in da.row_mut(i).iter_mut().zip(s).zip(gi) {
                        *d = si * (gij - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowLogSoftmax(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (ls, gi) = (out.row(i), g.row(i));
                    let total: f64 = gi.iter().sum();
                    for ((d, &l), &gij) in da.row_mut(i).iter_mut().zip(ls).zip(gi) {
                        *d = gij - l.exp() * total;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::PairwiseSqDist(a) => {
                // dE = 2·(diag(rowsum H)·E − H·E) with H = G + Gᵀ
                let va = self.value(*a);
                let n = g.rows();
                let mut h = g.clone();
                for i in 0..n {
                    for j in 0..n {
                        h.set(i, j, g.get(i, j) + g.get(j, i));
                    }
                }
                let he = gemm(&h, false, va, false);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for i in 0..n {
                    let rs: f64 = h.row(i).iter().sum();
                    for ((d, &e), &x) in da.row_mut(i).iter_mut().zip(va.row(i)).zip(he.row(i)) {
                        *d = 2.0 * (rs * e - x);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Solve(a, b, lu) => {
                let db = lu.solve_transpose(g);
                if self.grad1(*a) {
                    let mut da = gemm(&db, false, out, true);
                    da.scale_assign(-1.0);
                    self.accumulate(grads, *a, da);
                }
                self.accumulate(grads, *b, db);
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}
