//! Eager operation tape for reverse-mode differentiation.
//!
//! Ops compute values immediately and append a record; [`Tape::backward`]
//! walks the records in exact reverse order, accumulating analytic gradients
//! into per-variable buffers. A tape is single-threaded; independent tapes
//! never share state.

use std::cell::RefCell;

use super::{KernelError, Tensor};

/// Handle to a value on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Rec {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Hadamard { a: usize, b: usize, out: usize },
    ScalarMul { a: usize, c: f64, out: usize },
    Scale { a: usize, s: usize, out: usize },
    MatMul { a: usize, b: usize, out: usize },
    Transpose { a: usize, out: usize },
    Concat { a: usize, b: usize, axis: usize, out: usize },
    StackRows { rows: Vec<usize>, out: usize },
    Sigmoid { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    Relu { a: usize, out: usize },
    Softmax { a: usize, out: usize },
    L2Normalize { a: usize, norms: Vec<f64>, out: usize },
    Mean { a: usize, out: usize },
    Sum { a: usize, out: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize, out: usize },
    Reshape { a: usize, out: usize },
    GatherRows { table: usize, indices: Vec<usize>, out: usize },
    Diag { a: usize, out: usize },
    RowMinMasked { a: usize, argmin: Vec<Option<usize>>, out: usize },
    ColMeanMasked { a: usize, rows: Vec<usize>, out: usize },
    ColMaxMasked { a: usize, argmax: Vec<usize>, out: usize },
}

struct Inner {
    vals: Vec<Tensor>,
    recs: Vec<Rec>,
}

pub struct Tape {
    inner: RefCell<Inner>,
}

/// Gradient buffers produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(Inner { vals: Vec::new(), recs: Vec::new() }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().vals[v.0].clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.0].shape().to_vec()
    }

    /// Inserts an input value. Leaves and constants are identical on the
    /// tape; a "constant" is simply a leaf whose gradient is never read.
    pub fn leaf(&self, t: Tensor) -> Result<Var, KernelError> {
        if !t.is_finite() {
            return Err(KernelError::NonFinite { op: "leaf" });
        }
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(t);
        Ok(Var(inner.vals.len() - 1))
    }

    pub fn constant(&self, t: Tensor) -> Result<Var, KernelError> {
        self.leaf(t)
    }

    fn push(&self, op: &'static str, t: Tensor, make: impl FnOnce(usize) -> Rec) -> Result<Var, KernelError> {
        if !t.is_finite() {
            return Err(KernelError::NonFinite { op });
        }
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(t);
        let out = inner.vals.len() - 1;
        let rec = make(out);
        inner.recs.push(rec);
        Ok(Var(out))
    }

    fn with_val<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().vals[v.0])
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize) -> Rec,
    ) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.vals[a.0], &inner.vals[b.0]);
            if ta.shape() != tb.shape() {
                return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: ta.shape().to_vec(), data }
        };
        self.push(op, t, make)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |out| Rec::Add { a: a.0, b: b.0, out })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |out| Rec::Sub { a: a.0, b: b.0, out })
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("hadamard", a, b, |x, y| x * y, |out| Rec::Hadamard { a: a.0, b: b.0, out })
    }

    pub fn scalar_mul(&self, a: Var, c: f64) -> Result<Var, KernelError> {
        let t = self.with_val(a, |ta| Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x * c).collect(),
        });
        self.push("scalar_mul", t, |out| Rec::ScalarMul { a: a.0, c, out })
    }

    /// Multiplies every element of `a` by the single-element variable `s`.
    pub fn scale(&self, a: Var, s: Var) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let (ta, ts) = (&inner.vals[a.0], &inner.vals[s.0]);
            if ts.numel() != 1 {
                return Err(shape_err("scale", format!("scale factor has numel {}", ts.numel())));
            }
            let k = ts.data()[0];
            Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|&x| x * k).collect() }
        };
        self.push("scale", t, |out| Rec::Scale { a: a.0, s: s.0, out })
    }

    /// Matrix product. `a` is m x k; `b` is k x n or a length-k vector.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.vals[a.0], &inner.vals[b.0]);
            if ta.rank() != 2 {
                return Err(shape_err("matmul", format!("lhs rank {}", ta.rank())));
            }
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            match tb.rank() {
                1 => {
                    if tb.shape()[0] != k {
                        return Err(shape_err("matmul", format!("{m}x{k} * {}", tb.shape()[0])));
                    }
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += ta.data()[i * k + p] * tb.data()[p];
                        }
                        out[i] = acc;
                    }
                    Tensor { shape: vec![m], data: out }
                }
                2 => {
                    let (kb, n) = (tb.shape()[0], tb.shape()[1]);
                    if kb != k {
                        return Err(shape_err("matmul", format!("{m}x{k} * {kb}x{n}")));
                    }
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for p in 0..k {
                                acc += ta.data()[i * k + p] * tb.data()[p * n + j];
                            }
                            out[i * n + j] = acc;
                        }
                    }
                    Tensor { shape: vec![m, n], data: out }
                }
                r => return Err(shape_err("matmul", format!("rhs rank {r}"))),
            }
        };
        self.push("matmul", t, |out| Rec::MatMul { a: a.0, b: b.0, out })
    }

    pub fn transpose(&self, a: Var) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            if ta.rank() != 2 {
                return Err(shape_err("transpose", format!("rank {}", ta.rank())));
            }
            let (r, c) = (ta.shape()[0], ta.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ta.data()[i * c + j];
                }
            }
            Tensor { shape: vec![c, r], data }
        };
        self.push("transpose", t, |out| Rec::Transpose { a: a.0, out })
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.vals[a.0], &inner.vals[b.0]);
            match (ta.rank(), tb.rank(), axis) {
                (1, 1, 0) => {
                    let mut data = ta.data().to_vec();
                    data.extend_from_slice(tb.data());
                    Tensor { shape: vec![data.len()], data }
                }
                (2, 2, 0) => {
                    if ta.shape()[1] != tb.shape()[1] {
                        return Err(shape_err("concat", format!("{:?} / {:?}", ta.shape(), tb.shape())));
                    }
                    let mut data = ta.data().to_vec();
                    data.extend_from_slice(tb.data());
                    Tensor { shape: vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1]], data }
                }
                (2, 2, 1) => {
                    if ta.shape()[0] != tb.shape()[0] {
                        return Err(shape_err("concat", format!("{:?} / {:?}", ta.shape(), tb.shape())));
                    }
                    let (r, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut data = Vec::with_capacity(r * (ca + cb));
                    for i in 0..r {
                        data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
                        data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
                    }
                    Tensor { shape: vec![r, ca + cb], data }
                }
                (ra, rb, ax) => {
                    return Err(shape_err("concat", format!("ranks {ra}/{rb} axis {ax}")))
                }
            }
        };
        self.push("concat", t, |out| Rec::Concat { a: a.0, b: b.0, axis, out })
    }

    /// Stacks equal-length vectors into an n x d matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var, KernelError> {
        if rows.is_empty() {
            return Err(shape_err("stack_rows", "no rows".into()));
        }
        let t = {
            let inner = self.inner.borrow();
            let d = inner.vals[rows[0].0].numel();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                let tr = &inner.vals[r.0];
                if tr.rank() != 1 || tr.numel() != d {
                    return Err(shape_err("stack_rows", format!("row shape {:?}", tr.shape())));
                }
                data.extend_from_slice(tr.data());
            }
            Tensor { shape: vec![rows.len(), d], data }
        };
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        self.push("stack_rows", t, |out| Rec::StackRows { rows: ids, out })
    }

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Rec,
    ) -> Result<Var, KernelError> {
        let t = self.with_val(a, |ta| Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        });
        self.push(op, t, make)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, KernelError> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), |out| Rec::Sigmoid { a: a.0, out })
    }

    pub fn tanh(&self, a: Var) -> Result<Var, KernelError> {
        self.unary("tanh", a, f64::tanh, |out| Rec::Tanh { a: a.0, out })
    }

    pub fn relu(&self, a: Var) -> Result<Var, KernelError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, |out| Rec::Relu { a: a.0, out })
    }

    /// Softmax with max-subtraction. Rank 1 with axis 0, or rank 2 with
    /// axis 1 (independent rows).
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            let (rows, cols) = match (ta.rank(), axis) {
                (1, 0) => (1, ta.shape()[0]),
                (2, 1) => (ta.shape()[0], ta.shape()[1]),
                (r, ax) => return Err(shape_err("softmax", format!("rank {r} axis {ax}"))),
            };
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                let row = &ta.data()[i * cols..(i + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..cols {
                    let e = (row[j] - m).exp();
                    data[i * cols + j] = e;
                    z += e;
                }
                for j in 0..cols {
                    data[i * cols + j] /= z;
                }
            }
            Tensor { shape: ta.shape().to_vec(), data }
        };
        self.push("softmax", t, |out| Rec::Softmax { a: a.0, out })
    }

    /// L2 normalization. Rank 1 with axis 0 (whole vector), or rank 2 with
    /// axis 1 (each row). A zero-norm row is a numeric error.
    pub fn l2_normalize(&self, a: Var, axis: usize) -> Result<Var, KernelError> {
        let (t, norms) = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            let (rows, cols) = match (ta.rank(), axis) {
                (1, 0) => (1, ta.shape()[0]),
                (2, 1) => (ta.shape()[0], ta.shape()[1]),
                (r, ax) => return Err(shape_err("l2_normalize", format!("rank {r} axis {ax}"))),
            };
            let mut data = vec![0.0; rows * cols];
            let mut norms = vec![0.0; rows];
            for i in 0..rows {
                let row = &ta.data()[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(KernelError::Numeric {
                        op: "l2_normalize",
                        detail: format!("zero norm at row {i}"),
                    });
                }
                norms[i] = norm;
                for j in 0..cols {
                    data[i * cols + j] = row[j] / norm;
                }
            }
            (Tensor { shape: ta.shape().to_vec(), data }, norms)
        };
        self.push("l2_normalize", t, |out| Rec::L2Normalize { a: a.0, norms, out })
    }

    pub fn mean(&self, a: Var) -> Result<Var, KernelError> {
        let t = self.with_val(a, |ta| {
            Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64)
        });
        self.push("mean", t, |out| Rec::Mean { a: a.0, out })
    }

    pub fn sum(&self, a: Var) -> Result<Var, KernelError> {
        let t = self.with_val(a, |ta| Tensor::scalar(ta.data().iter().sum::<f64>()));
        self.push("sum", t, |out| Rec::Sum { a: a.0, out })
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            match (ta.rank(), axis) {
                (1, 0) => {
                    if start + len > ta.shape()[0] {
                        return Err(shape_err("slice", format!("{start}+{len} > {}", ta.shape()[0])));
                    }
                    Tensor { shape: vec![len], data: ta.data()[start..start + len].to_vec() }
                }
                (2, 0) => {
                    let (r, c) = (ta.shape()[0], ta.shape()[1]);
                    if start + len > r {
                        return Err(shape_err("slice", format!("{start}+{len} > {r} rows")));
                    }
                    Tensor {
                        shape: vec![len, c],
                        data: ta.data()[start * c..(start + len) * c].to_vec(),
                    }
                }
                (2, 1) => {
                    let (r, c) = (ta.shape()[0], ta.shape()[1]);
                    if start + len > c {
                        return Err(shape_err("slice", format!("{start}+{len} > {c} cols")));
                    }
                    let mut data = Vec::with_capacity(r * len);
                    for i in 0..r {
                        data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
                    }
                    Tensor { shape: vec![r, len], data }
                }
                (r, ax) => return Err(shape_err("slice", format!("rank {r} axis {ax}"))),
            }
        };
        self.push("slice", t, |out| Rec::Slice { a: a.0, axis, start, len, out })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            let numel: usize = shape.iter().product();
            if numel != ta.numel() || shape.len() > 3 {
                return Err(shape_err("reshape", format!("{:?} -> {:?}", ta.shape(), shape)));
            }
            Tensor { shape: shape.to_vec(), data: ta.data().to_vec() }
        };
        self.push("reshape", t, |out| Rec::Reshape { a: a.0, out })
    }

    /// Embedding lookup: rows of `table` gathered by index.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let tt = &inner.vals[table.0];
            if tt.rank() != 2 {
                return Err(shape_err("gather_rows", format!("table rank {}", tt.rank())));
            }
            let (v, e) = (tt.shape()[0], tt.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * e);
            for &ix in indices {
                if ix >= v {
                    return Err(KernelError::Numeric {
                        op: "gather_rows",
                        detail: format!("index {ix} out of range (table has {v} rows)"),
                    });
                }
                data.extend_from_slice(&tt.data()[ix * e..(ix + 1) * e]);
            }
            Tensor { shape: vec![indices.len(), e], data }
        };
        let idx = indices.to_vec();
        self.push("gather_rows", t, |out| Rec::GatherRows { table: table.0, indices: idx, out })
    }

    /// Diagonal of a square matrix.
    pub fn diag(&self, a: Var) -> Result<Var, KernelError> {
        let t = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            if ta.rank() != 2 || ta.shape()[0] != ta.shape()[1] {
                return Err(shape_err("diag", format!("shape {:?}", ta.shape())));
            }
            let n = ta.shape()[0];
            let data = (0..n).map(|i| ta.data()[i * n + i]).collect();
            Tensor { shape: vec![n], data }
        };
        self.push("diag", t, |out| Rec::Diag { a: a.0, out })
    }

    /// Per-row minimum over entries where `mask` is true. A row with no
    /// admissible entry yields `row_max + 4.0` and routes no gradient, which
    /// keeps a downstream hinge strictly inactive.
    pub fn rowwise_min_masked(&self, a: Var, mask: &[bool]) -> Result<Var, KernelError> {
        let (t, argmin) = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            if ta.rank() != 2 {
                return Err(shape_err("rowwise_min_masked", format!("rank {}", ta.rank())));
            }
            let (r, c) = (ta.shape()[0], ta.shape()[1]);
            if mask.len() != r * c {
                return Err(shape_err("rowwise_min_masked", format!("mask len {}", mask.len())));
            }
            let mut data = vec![0.0; r];
            let mut argmin = vec![None; r];
            for i in 0..r {
                let row = &ta.data()[i * c..(i + 1) * c];
                let mut best: Option<(usize, f64)> = None;
                for j in 0..c {
                    if mask[i * c + j] {
                        let v = row[j];
                        if best.map_or(true, |(_, bv)| v < bv) {
                            best = Some((j, v));
                        }
                    }
                }
                match best {
                    Some((j, v)) => {
                        data[i] = v;
                        argmin[i] = Some(j);
                    }
                    None => {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        data[i] = mx + 4.0;
                    }
                }
            }
            (Tensor { shape: vec![r], data }, argmin)
        };
        self.push("rowwise_min_masked", t, |out| Rec::RowMinMasked { a: a.0, argmin, out })
    }

    /// Column-wise mean over the rows selected by `row_mask`.
    pub fn colwise_mean_masked(&self, a: Var, row_mask: &[bool]) -> Result<Var, KernelError> {
        let (t, rows) = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            if ta.rank() != 2 || row_mask.len() != ta.shape()[0] {
                return Err(shape_err("colwise_mean_masked", format!("shape {:?}", ta.shape())));
            }
            let (_, c) = (ta.shape()[0], ta.shape()[1]);
            let rows: Vec<usize> =
                row_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            if rows.is_empty() {
                return Err(KernelError::Numeric {
                    op: "colwise_mean_masked",
                    detail: "no unmasked rows".into(),
                });
            }
            let mut data = vec![0.0; c];
            for &i in &rows {
                for j in 0..c {
                    data[j] += ta.data()[i * c + j];
                }
            }
            for v in data.iter_mut() {
                *v /= rows.len() as f64;
            }
            (Tensor { shape: vec![c], data }, rows)
        };
        self.push("colwise_mean_masked", t, |out| Rec::ColMeanMasked { a: a.0, rows, out })
    }

    /// Column-wise max over the rows selected by `row_mask`.
    pub fn colwise_max_masked(&self, a: Var, row_mask: &[bool]) -> Result<Var, KernelError> {
        let (t, argmax) = {
            let inner = self.inner.borrow();
            let ta = &inner.vals[a.0];
            if ta.rank() != 2 || row_mask.len() != ta.shape()[0] {
                return Err(shape_err("colwise_max_masked", format!("shape {:?}", ta.shape())));
            }
            let (_, c) = (ta.shape()[0], ta.shape()[1]);
            let rows: Vec<usize> =
                row_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            if rows.is_empty() {
                return Err(KernelError::Numeric {
                    op: "colwise_max_masked",
                    detail: "no unmasked rows".into(),
                });
            }
            let mut data = vec![f64::NEG_INFINITY; c];
            let mut argmax = vec![0usize; c];
            for &i in &rows {
                for j in 0..c {
                    let v = ta.data()[i * c + j];
                    if v > data[j] {
                        data[j] = v;
                        argmax[j] = i;
                    }
                }
            }
            (Tensor { shape: vec![c], data }, argmax)
        };
        self.push("colwise_max_masked", t, |out| Rec::ColMaxMasked { a: a.0, argmax, out })
    }

    /// Reverse pass from a single-element output. Gradients accumulate in
    /// exact reverse record order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        let inner = self.inner.borrow();
        if inner.vals[loss.0].numel() != 1 {
            return Err(shape_err("backward", "loss must have a single element".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.vals.len()];
        grads[loss.0] = Some(vec![1.0]);

        macro_rules! grab {
            ($g:ident, $id:expr) => {
                match &$g[$id] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
        }
        let ensure = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, numel: usize| {
            if grads[id].is_none() {
                grads[id] = Some(vec![0.0; numel]);
            }
        };

        for rec in inner.recs.iter().rev() {
            match rec {
                Rec::Add { a, b, out } => {
                    let g = grab!(grads, *out);
                    ensure(&mut grads, *a, g.len());
                    ensure(&mut grads, *b, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        grads[*a].as_mut().unwrap()[i] += gi;
                        grads[*b].as_mut().unwrap()[i] += gi;
                    }
                }
                Rec::Sub { a, b, out } => {
                    let g = grab!(grads, *out);
                    ensure(&mut grads, *a, g.len());
                    ensure(&mut grads, *b, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        grads[*a].as_mut().unwrap()[i] += gi;
                        grads[*b].as_mut().unwrap()[i] -= gi;
                    }
                }
                Rec::Hadamard { a, b, out } => {
                    let g = grab!(grads, *out);
                    ensure(&mut grads, *a, g.len());
                    ensure(&mut grads, *b, g.len());
                    let (va, vb) = (inner.vals[*a].data(), inner.vals[*b].data());
                    for i in 0..g.len() {
                        grads[*a].as_mut().unwrap()[i] += g[i] * vb[i];
                        grads[*b].as_mut().unwrap()[i] += g[i] * va[i];
                    }
                }
                Rec::ScalarMul { a, c, out } => {
                    let g = grab!(grads, *out);
                    ensure(&mut grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        grads[*a].as_mut().unwrap()[i] += gi * c;
                    }
                }
                Rec::Scale { a, s, out } => {
                    let g = grab!(grads, *out);
                    let va = inner.vals[*a].data();
                    let k = inner.vals[*s].data()[0];
                    ensure(&mut grads, *a, g.len());
                    ensure(&mut grads, *s, 1);
                    let mut gs = 0.0;
                    for i in 0..g.len() {
                        grads[*a].as_mut().unwrap()[i] += g[i] * k;
                        gs += g[i] * va[i];
                    }
                    grads[*s].as_mut().unwrap()[0] += gs;
                }
                Rec::MatMul { a, b, out } => {
                    let g = grab!(grads, *out);
                    let (ta, tb) = (&inner.vals[*a], &inner.vals[*b]);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    ensure(&mut grads, *a, ta.numel());
                    ensure(&mut grads, *b, tb.numel());
                    if tb.rank() == 1 {
                        for i in 0..m {
                            for p in 0..k {
                                grads[*a].as_mut().unwrap()[i * k + p] += g[i] * tb.data()[p];
                            }
                        }
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ta.data()[i * k + p] * g[i];
                            }
                            grads[*b].as_mut().unwrap()[p] += acc;
                        }
                    } else {
                        let n = tb.shape()[1];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * tb.data()[p * n + j];
                                }
                                grads[*a].as_mut().unwrap()[i * k + p] += acc;
                            }
                        }
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += ta.data()[i * k + p] * g[i * n + j];
                                }
                                grads[*b].as_mut().unwrap()[p * n + j] += acc;
                            }
                        }
                    }
                }
                Rec::Transpose { a, out } => {
                    let g = grab!(grads, *out);
                    let ta = &inner.vals[*a];
                    let (r, c) = (ta.shape()[0], ta.shape()[1]);
                    ensure(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            grads[*a].as_mut().unwrap()[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Rec::Concat { a, b, axis, out } => {
                    let g = grab!(grads, *out);
                    let (ta, tb) = (&inner.vals[*a], &inner.vals[*b]);
                    ensure(&mut grads, *a, ta.numel());
                    ensure(&mut grads, *b, tb.numel());
                    match (ta.rank(), *axis) {
                        (1, 0) | (2, 0) => {
                            let na = ta.numel();
                            for i in 0..na {
                                grads[*a].as_mut().unwrap()[i] += g[i];
                            }
                            for i in 0..tb.numel() {
                                grads[*b].as_mut().unwrap()[i] += g[na + i];
                            }
                        }
                        (2, 1) => {
                            let (r, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                            for i in 0..r {
                                for j in 0..ca {
                                    grads[*a].as_mut().unwrap()[i * ca + j] +=
                                        g[i * (ca + cb) + j];
                                }
                                for j in 0..cb {
                                    grads[*b].as_mut().unwrap()[i * cb + j] +=
                                        g[i * (ca + cb) + ca + j];
                                }
                            }
                        }
                        _ => unreachable!("validated at forward"),
                    }
                }
                Rec::StackRows { rows, out } => {
                    let g = grab!(grads, *out);
                    let d = inner.vals[*out].shape()[1];
                    for (i, &rid) in rows.iter().enumerate() {
                        ensure(&mut grads, rid, d);
                        for j in 0..d {
                            grads[rid].as_mut().unwrap()[j] += g[i * d + j];
                        }
                    }
                }
                Rec::Sigmoid { a, out } => {
                    let g = grab!(grads, *out);
                    let y = inner.vals[*out].data();
                    ensure(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        grads[*a].as_mut().unwrap()[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Rec::Tanh { a, out } => {
                    let g = grab!(grads, *out);
                    let y = inner.vals[*out].data();
                    ensure(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        grads[*a].as_mut().unwrap()[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Rec::Relu { a, out } => {
                    let g = grab!(grads, *out);
                    let x = inner.vals[*a].data();
                    ensure(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            grads[*a].as_mut().unwrap()[i] += g[i];
                        }
                    }
                }
                Rec::Softmax { a, out } => {
                    let g = grab!(grads, *out);
                    let y = inner.vals[*out].data();
                    let shp = inner.vals[*out].shape();
                    let (rows, cols) =
                        if shp.len() == 1 { (1, shp[0]) } else { (shp[0], shp[1]) };
                    ensure(&mut grads, *a, g.len());
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..cols {
                            grads[*a].as_mut().unwrap()[base + j] +=
                                y[base + j] * (g[base + j] - dot);
                        }
                    }
                }
                Rec::L2Normalize { a, norms, out } => {
                    let g = grab!(grads, *out);
                    let y = inner.vals[*out].data();
                    let shp = inner.vals[*out].shape();
                    let (rows, cols) =
                        if shp.len() == 1 { (1, shp[0]) } else { (shp[0], shp[1]) };
                    ensure(&mut grads, *a, g.len());
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..cols {
                            grads[*a].as_mut().unwrap()[base + j] +=
                                (g[base + j] - y[base + j] * dot) / norms[i];
                        }
                    }
                }
                Rec::Mean { a, out } => {
                    let g = grab!(grads, *out);
                    let n = inner.vals[*a].numel();
                    ensure(&mut grads, *a, n);
                    let gi = g[0] / n as f64;
                    for v in grads[*a].as_mut().unwrap().iter_mut() {
                        *v += gi;
                    }
                }
                Rec::Sum { a, out } => {
                    let g = grab!(grads, *out);
                    let n = inner.vals[*a].numel();
                    ensure(&mut grads, *a, n);
                    for v in grads[*a].as_mut().unwrap().iter_mut() {
                        *v += g[0];
                    }
                }
                Rec::Slice { a, axis, start, len, out } => {
                    let g = grab!(grads, *out);
                    let ta = &inner.vals[*a];
                    ensure(&mut grads, *a, ta.numel());
                    match (ta.rank(), *axis) {
                        (1, 0) => {
                            for i in 0..*len {
                                grads[*a].as_mut().unwrap()[start + i] += g[i];
                            }
                        }
                        (2, 0) => {
                            let c = ta.shape()[1];
                            for i in 0..len * c {
                                grads[*a].as_mut().unwrap()[start * c + i] += g[i];
                            }
                        }
                        (2, 1) => {
                            let c = ta.shape()[1];
                            let r = ta.shape()[0];
                            for i in 0..r {
                                for j in 0..*len {
                                    grads[*a].as_mut().unwrap()[i * c + start + j] +=
                                        g[i * len + j];
                                }
                            }
                        }
                        _ => unreachable!("validated at forward"),
                    }
                }
                Rec::Reshape { a, out } => {
                    let g = grab!(grads, *out);
                    ensure(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        grads[*a].as_mut().unwrap()[i] += g[i];
                    }
                }
                Rec::GatherRows { table, indices, out } => {
                    let g = grab!(grads, *out);
                    let tt = &inner.vals[*table];
                    let e = tt.shape()[1];
                    ensure(&mut grads, *table, tt.numel());
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..e {
                            grads[*table].as_mut().unwrap()[ix * e + j] += g[i * e + j];
                        }
                    }
                }
                Rec::Diag { a, out } => {
                    let g = grab!(grads, *out);
                    let n = inner.vals[*out].shape()[0];
                    ensure(&mut grads, *a, n * n);
                    for i in 0..n {
                        grads[*a].as_mut().unwrap()[i * n + i] += g[i];
                    }
                }
                Rec::RowMinMasked { a, argmin, out } => {
                    let g = grab!(grads, *out);
                    let c = inner.vals[*a].shape()[1];
                    ensure(&mut grads, *a, inner.vals[*a].numel());
                    for (i, am) in argmin.iter().enumerate() {
                        if let Some(j) = am {
                            grads[*a].as_mut().unwrap()[i * c + j] += g[i];
                        }
                    }
                }
                Rec::ColMeanMasked { a, rows, out } => {
                    let g = grab!(grads, *out);
                    let c = inner.vals[*a].shape()[1];
                    ensure(&mut grads, *a, inner.vals[*a].numel());
                    let k = rows.len() as f64;
                    for &i in rows {
                        for j in 0..c {
                            grads[*a].as_mut().unwrap()[i * c + j] += g[j] / k;
                        }
                    }
                }
                Rec::ColMaxMasked { a, argmax, out } => {
                    let g = grab!(grads, *out);
                    let c = inner.vals[*a].shape()[1];
                    ensure(&mut grads, *a, inner.vals[*a].numel());
                    for (j, &i) in argmax.iter().enumerate() {
                        grads[*a].as_mut().unwrap()[i * c + j] += g[j];
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor { shape: inner.vals[i].shape().to_vec(), data })
            })
            .collect();
        Ok(Gradients { grads })
    }
}
