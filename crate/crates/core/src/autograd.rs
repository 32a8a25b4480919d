//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records primitive operations in execution order. Every value on
//! the tape is a 2-D matrix (`rows x cols`); scalars are `1 x 1`. Parameters
//! live outside the tape as [`Tensor`]s and are copied in as leaves, so a tape
//! can be built against a read-only model snapshot and thrown away afterwards.
//!
//! ```
//! use fig_core::autograd::{Tape, Tensor};
//!
//! let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap().requiring_grad();
//! let mut tape = Tape::new();
//! let xv = tape.leaf(&x);
//! let sq = tape.mul(xv, xv).unwrap();
//! let y = tape.sum(sq);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Backward runs once per tape. A second call returns
//! [`Error::AlreadyBackpropagated`] rather than silently accumulating.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// All stored values are finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `rows x cols` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![value])
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Interprets the tensor as a matrix: 2-D as is, 1-D as a single row,
    /// 0-D as `1 x 1`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidTensor(format!(
                "tape values are at most 2-D, got shape {s:?}"
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `n x m` plus a `1 x m` row broadcast down the rows.
    AddRow(usize, usize),
    /// `n x m` minus an `n x 1` column broadcast across the columns.
    SubCol(usize, usize),
    Scale(usize, f64),
    DivScalar(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    /// Row-wise max with the winning column per row.
    MaxRows(usize, Vec<usize>),
    Clip(usize, f64, f64),
    Slice(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::SubCol(..) => "sub_col",
            Op::Scale(..) => "scale",
            Op::DivScalar(..) => "div_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MaxRows(..) => "max_rows",
            Op::Clip(..) => "clip",
            Op::Slice(..) => "slice",
        }
    }

    fn parents(&self) -> (Option<usize>, Option<usize>) {
        match *self {
            Op::Leaf => (None, None),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubCol(a, b) => (Some(a), Some(b)),
            Op::Scale(a, _)
            | Op::DivScalar(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MaxRows(a, _)
            | Op::Clip(a, _, _)
            | Op::Slice(a, _) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Node inputs always precede the
/// node itself, so the reverse of insertion order is a valid topological
/// order for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    non_finite: Option<(usize, &'static str)>,
    consumed: bool,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let requires_grad = match op.parents() {
            (None, _) => false,
            (Some(a), None) => self.nodes[a].requires_grad,
            (Some(a), Some(b)) => self.nodes[a].requires_grad || self.nodes[b].requires_grad,
        };
        let idx = self.nodes.len();
        if self.non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn push_leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        let v = self.push(rows, cols, value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Records a copy of `t`, tracking gradients iff `t.requires_grad()`.
    ///
    /// Panics if `t` has more than two dimensions.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2().expect("tape leaves are at most 2-D");
        self.push_leaf(r, c, t.data.clone(), t.requires_grad)
    }

    /// Records `t` as a constant regardless of its `requires_grad` flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2().expect("tape leaves are at most 2-D");
        self.push_leaf(r, c, t.data.clone(), false)
    }

    /// Records a raw matrix as a leaf.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push_leaf(rows, cols, t.data, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    /// Fails if any recorded operation produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![na.rows, na.cols],
                right: vec![nb.rows, nb.cols],
            });
        }
        Ok((na.rows, na.cols))
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(op.name(), a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(r, c, value, op))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let (r, c) = (n.rows, n.cols);
        let value = n.value.iter().map(|&x| f(x)).collect();
        self.push(r, c, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.cols != nb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![na.rows, na.cols],
                right: vec![nb.rows, nb.cols],
            });
        }
        let (n, k, m) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; n * m];
        matmul_into(&na.value, &nb.value, &mut out, n, k, m);
        Ok(self.push(n, m, out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds a `1 x m` row vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (na, nr) = (&self.nodes[a.0], &self.nodes[row.0]);
        if nr.rows != 1 || nr.cols != na.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![na.rows, na.cols],
                right: vec![nr.rows, nr.cols],
            });
        }
        let (r, c) = (na.rows, na.cols);
        let mut value = na.value.clone();
        for chunk in value.chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(&nr.value).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(r, c, value, Op::AddRow(a.0, row.0)))
    }

    /// Subtracts an `n x 1` column from every column of an `n x m` matrix.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (na, nc) = (&self.nodes[a.0], &self.nodes[col.0]);
        if nc.cols != 1 || nc.rows != na.rows {
            return Err(Error::ShapeMismatch {
                op: "sub_col",
                left: vec![na.rows, na.cols],
                right: vec![nc.rows, nc.cols],
            });
        }
        let (r, c) = (na.rows, na.cols);
        let mut value = na.value.clone();
        for (i, chunk) in value.chunks_mut(c.max(1)).enumerate() {
            let s = nc.value[i];
            chunk.iter_mut().for_each(|v| *v -= s);
        }
        Ok(self.push(r, c, value, Op::SubCol(a.0, col.0)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a.0, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::DivScalar(a.0, s), |x| x / s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a.0), |x| x + s)
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a.0), f64::ln)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push(1, 1, vec![m], Op::Mean(a.0))
    }

    /// Per-row sum: `n x m` to `n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (r, c) = (n.rows, n.cols);
        let value = if c == 0 {
            vec![0.0; r]
        } else {
            n.value.chunks(c).map(|row| row.iter().sum()).collect()
        };
        self.push(r, 1, value, Op::SumRows(a.0))
    }

    /// Per-row maximum: `n x m` to `n x 1`. Gradient flows to the lowest-index
    /// maximizer of each row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (r, c) = (n.rows, n.cols);
        if c == 0 {
            return Err(Error::InvalidTensor("max_rows over zero columns".into()));
        }
        let mut value = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for row in n.value.chunks(c) {
            let (j, m) = argmax(row);
            value.push(m);
            arg.push(j);
        }
        Ok(self.push(r, 1, value, Op::MaxRows(a.0, arg)))
    }

    /// Forward clamp into `[lo, hi]`; gradient passes only where the input
    /// lies strictly inside the interval or on its boundary.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clip(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Contiguous block of `rows * cols` values starting at flat `offset`,
    /// viewed as a `rows x cols` matrix.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        let end = offset + rows * cols;
        if end > n.value.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: vec![n.rows, n.cols],
                right: vec![offset, rows, cols],
            });
        }
        let value = n.value[offset..end].to_vec();
        Ok(self.push(rows, cols, value, Op::Slice(a.0, offset)))
    }

    /// Backpropagates from a scalar `output`, filling gradients for every
    /// node that requires one. Leaves that require gradients but do not
    /// influence `output` receive zeros.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::AlreadyBackpropagated);
        }
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(vec![out.rows, out.cols]));
        }
        self.check_finite()?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let (pa, pb) = node.op.parents();
            for p in [pa, pb].into_iter().flatten() {
                if p >= idx {
                    return Err(Error::Internal(format!(
                        "node {idx} depends on later node {p}"
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        if let Some(i) = grads
            .iter()
            .flatten()
            .position(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                op: "backward",
                node: i,
            });
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |p: usize| self.nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a], &self.nodes[b]);
                let (n, k, m) = (na.rows, na.cols, nb.cols);
                if wants(a) {
                    // dA = dC . B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &nb.value[p * m..(p + 1) * m];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    accumulate(grads, a, &da);
                }
                if wants(b) {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = na.value[i * k + p];
                            if av != 0.0 {
                                let dst = &mut db[p * m..(p + 1) * m];
                                dst.iter_mut().zip(grow).for_each(|(d, &gv)| *d += av * gv);
                            }
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(&self.nodes[a].value).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, &d);
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(row) {
                    let c = node.cols;
                    let mut d = vec![0.0; c];
                    for chunk in g.chunks(c.max(1)) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    accumulate(grads, row, &d);
                }
            }
            &Op::SubCol(a, col) => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(col) {
                    let c = node.cols.max(1);
                    let d: Vec<f64> = g.chunks(c).map(|row| -row.iter().sum::<f64>()).collect();
                    accumulate(grads, col, &d);
                }
            }
            &Op::Scale(a, k) => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(grads, a, &d);
            }
            &Op::DivScalar(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v / s).collect();
                accumulate(grads, a, &d);
            }
            &Op::AddScalar(a) => accumulate(grads, a, g),
            &Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, a, &d);
            }
            &Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y).collect();
                accumulate(grads, a, &d);
            }
            &Op::Log(a) => {
                let d: Vec<f64> = g.iter().zip(&self.nodes[a].value).map(|(gv, x)| gv / x).collect();
                accumulate(grads, a, &d);
            }
            &Op::Sum(a) => {
                let d = vec![g[0]; self.nodes[a].value.len()];
                accumulate(grads, a, &d);
            }
            &Op::Mean(a) => {
                let n = self.nodes[a].value.len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, a, &d);
            }
            &Op::SumRows(a) => {
                let c = self.nodes[a].cols;
                let d: Vec<f64> = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
                accumulate(grads, a, &d);
            }
            Op::MaxRows(a, arg) => {
                let na = &self.nodes[*a];
                let mut d = vec![0.0; na.value.len()];
                for (i, &j) in arg.iter().enumerate() {
                    d[i * na.cols + j] = g[i];
                }
                accumulate(grads, *a, &d);
            }
            &Op::Clip(a, lo, hi) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(gv, &x)| if (lo..=hi).contains(&x) { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, a, &d);
            }
            &Op::Slice(a, offset) => {
                let mut d = vec![0.0; self.nodes[a].value.len()];
                d[offset..offset + g.len()].copy_from_slice(g);
                accumulate(grads, a, &d);
            }
        }
    }

    /// Gradient of the last backward output with respect to `v`, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `t`'s gradient buffer.
    pub fn export_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.grad(v).ok_or(Error::MissingGrad(v.0))?;
        t.accumulate_grad(g)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, d: &[f64]) {
    match &mut grads[idx] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(b, v)| *b += v),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a . b` for row-major `a: n x k`, `b: k x m`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// Lowest-index maximizer and the maximum of a nonempty slice.
pub(crate) fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (j, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Precondition(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let (rows, cols) = x.dims2()?;
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(rows, cols, data, false)?;
        let y = f(&mut tape, xv)?;
        tape.check_finite()?;
        let v = tape.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", node: y.0 });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let xv = tape.input(rows, cols, x.data().to_vec(), true)?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).ok_or(Error::MissingGrad(xv.0))?.to_vec();

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Plain gradient descent: `p <- p - lr * grad(p)`, then clears each
/// gradient buffer. Fails without touching anything if a parameter has no
/// gradient.
pub fn sgd_step<'a, I>(params: I, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(i));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        p.data.iter_mut().zip(&g).for_each(|(v, gv)| *v -= lr * gv);
    }
    Ok(())
}
