use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::diffengine::{DiffError, Tensor};
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Primitive operations the tape can record.
///
/// Binary element-wise ops accept equal shapes or one single-element operand;
/// every other alignment goes through an explicit op (`AddRow`, `Reshape`, ...).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<T> {
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Square,
    Abs,
    Neg,
    /// Sum of all elements into a scalar.
    Sum,
    /// `[n, d] -> [n, 1]`.
    SumRows,
    /// Mean of all elements into a scalar.
    Mean,
    Reshape(Vec<usize>),
    /// Column-wise concatenation of 2-D inputs with equal row counts.
    Concat,
    /// Column range `start..end` of a 2-D input.
    Slice { start: usize, end: usize },
    /// Row-wise log-sum-exp, `[n, d] -> [n, 1]`.
    LogSumExp,
    /// `[n, d] + [1, d]`, the row repeated over all `n` rows.
    AddRow,
    Clamp { lo: T, hi: T },
    Scale(T),
    Shift(T),
}

struct Node<T> {
    op: Option<Primitive<T>>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Record of primitive applications in forward execution order.
///
/// Node ids are indices into the record, so the record is already a
/// topological order. A tape is confined to one thread.
pub struct Tape<T> {
    uid: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Places a tensor on the tape as an input node.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(x))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every record; outstanding `Var`s cannot exist across this call.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.uid = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<(), DiffError> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(())
        } else {
            Err(DiffError::ForeignNode(v.id))
        }
    }

    /// Applies a primitive and records it.
    pub fn apply<'t>(
        &'t self,
        op: Primitive<T>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>, DiffError> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            forward(&op, &vals)?
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Some(op),
            inputs: ids,
            value,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, DiffError> {
        self.check_owner(&loss)?;
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(shape, T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(op) = &node.op {
                let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let input_grads = backward_rule(op, &vals, &node.value, &g);
                for (&input, ig) in node.inputs.iter().zip(input_grads) {
                    accumulate(&mut grads[input], ig);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape_uid: self.uid,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by node id.
pub struct Gradients<T> {
    tape_uid: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Result<Tensor<T>, DiffError> {
        if v.tape.uid != self.tape_uid || v.id >= self.shapes.len() {
            return Err(DiffError::ForeignNode(v.id));
        }
        Ok(match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.id].clone()),
        })
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn op(self, op: Primitive<T>, others: &[Var<'t, T>]) -> Self {
        let mut inputs = Vec::with_capacity(others.len() + 1);
        inputs.push(self);
        inputs.extend_from_slice(others);
        match self.tape.apply(op, &inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn matmul(self, rhs: Self) -> Self {
        self.op(Primitive::MatMul, &[rhs])
    }
    pub fn relu(self) -> Self {
        self.op(Primitive::Relu, &[])
    }
    pub fn softplus(self) -> Self {
        self.op(Primitive::Softplus, &[])
    }
    pub fn sigmoid(self) -> Self {
        self.op(Primitive::Sigmoid, &[])
    }
    pub fn exp(self) -> Self {
        self.op(Primitive::Exp, &[])
    }
    pub fn ln(self) -> Self {
        self.op(Primitive::Log, &[])
    }
    pub fn square(self) -> Self {
        self.op(Primitive::Square, &[])
    }
    pub fn abs(self) -> Self {
        self.op(Primitive::Abs, &[])
    }
    pub fn sum(self) -> Self {
        self.op(Primitive::Sum, &[])
    }
    pub fn sum_rows(self) -> Self {
        self.op(Primitive::SumRows, &[])
    }
    pub fn mean(self) -> Self {
        self.op(Primitive::Mean, &[])
    }
    pub fn reshape(self, shape: Vec<usize>) -> Self {
        self.op(Primitive::Reshape(shape), &[])
    }
    pub fn slice_cols(self, start: usize, end: usize) -> Self {
        self.op(Primitive::Slice { start, end }, &[])
    }
    pub fn logsumexp_rows(self) -> Self {
        self.op(Primitive::LogSumExp, &[])
    }
    pub fn add_row(self, row: Self) -> Self {
        self.op(Primitive::AddRow, &[row])
    }
    pub fn clamp(self, lo: T, hi: T) -> Self {
        self.op(Primitive::Clamp { lo, hi }, &[])
    }
    pub fn scale(self, c: T) -> Self {
        self.op(Primitive::Scale(c), &[])
    }
    pub fn shift(self, c: T) -> Self {
        self.op(Primitive::Shift(c), &[])
    }

    /// Column-wise concatenation.
    pub fn concat(parts: &[Self]) -> Self {
        let (first, rest) = parts.split_first().expect("concat of zero tensors");
        first.op(Primitive::Concat, rest)
    }
}

impl<'t, T: Scalar> ops::Add for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.op(Primitive::Add, &[rhs])
    }
}

impl<'t, T: Scalar> ops::Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.op(Primitive::Sub, &[rhs])
    }
}

impl<'t, T: Scalar> ops::Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.op(Primitive::Mul, &[rhs])
    }
}

impl<'t, T: Scalar> ops::Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.op(Primitive::Neg, &[])
    }
}

fn shape_err(op: &str, shapes: &[&Tensor<impl Scalar>]) -> DiffError {
    DiffError::ShapeMismatch {
        op: op.to_string(),
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn arity<T: Scalar>(op: &Primitive<T>, vals: &[&Tensor<T>], n: usize) -> Result<(), DiffError> {
    if vals.len() == n {
        Ok(())
    } else {
        Err(DiffError::Arity {
            op: format!("{op:?}"),
            expected: n,
            got: vals.len(),
        })
    }
}

fn binary<T: Scalar>(
    name: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, DiffError> {
    if a.shape() == b.shape() {
        Ok(a.zip_map(b, f))
    } else if b.len() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(shape_err(name, &[a, b]))
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn forward<T: Scalar>(op: &Primitive<T>, vals: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
    use Primitive::*;
    let unary = !matches!(op, MatMul | Add | Sub | Mul | AddRow | Concat);
    if unary {
        arity(op, vals, 1)?;
    } else if !matches!(op, Concat) {
        arity(op, vals, 2)?;
    }
    let x = vals[0];
    Ok(match op {
        MatMul => {
            let b = vals[1];
            if !x.is_matrix() || !b.is_matrix() || x.cols() != b.rows() {
                return Err(shape_err("matmul", vals));
            }
            let (m, k, n) = (x.rows(), x.cols(), b.cols());
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, x.data(), false, b.data(), false, T::zero(), &mut c);
            Tensor::matrix(m, n, c)?
        }
        Add => binary("add", x, vals[1], |a, b| a + b)?,
        Sub => binary("sub", x, vals[1], |a, b| a - b)?,
        Mul => binary("mul", x, vals[1], |a, b| a * b)?,
        Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Softplus => x.map(softplus),
        Sigmoid => x.map(sigmoid),
        Exp => {
            if !x.all_finite() {
                return Err(DiffError::Domain("exp of non-finite input"));
            }
            x.map(|v| v.exp())
        }
        Log => {
            if x.data().iter().any(|v| !v.is_finite() || *v <= T::zero()) {
                return Err(DiffError::Domain("log of non-positive or non-finite input"));
            }
            x.map(|v| v.ln())
        }
        Square => x.map(|v| v * v),
        Abs => x.map(|v| v.abs()),
        Neg => x.map(|v| -v),
        Sum => Tensor::scalar(x.data().iter().copied().sum()),
        SumRows => {
            if !x.is_matrix() {
                return Err(shape_err("sum_rows", vals));
            }
            let (r, _) = x.dims2();
            let data = (0..r).map(|i| x.row_slice(i).iter().copied().sum()).collect();
            Tensor::matrix(r, 1, data)?
        }
        Mean => {
            if x.is_empty() {
                return Err(shape_err("mean", vals));
            }
            let s: T = x.data().iter().copied().sum();
            Tensor::scalar(s / T::lit(x.len() as f64))
        }
        Reshape(shape) => x.clone().reshaped(shape.clone())?,
        Concat => {
            if vals.iter().any(|v| !v.is_matrix() || v.rows() != x.rows()) {
                return Err(shape_err("concat", vals));
            }
            let rows = x.rows();
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in vals {
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        }
        Slice { start, end } => {
            if !x.is_matrix() || start > end || *end > x.cols() {
                return Err(shape_err("slice", vals));
            }
            let rows = x.rows();
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&x.row_slice(r)[*start..*end]);
            }
            Tensor::matrix(rows, end - start, data)?
        }
        LogSumExp => {
            if !x.is_matrix() || x.cols() == 0 {
                return Err(shape_err("logsumexp", vals));
            }
            let rows = x.rows();
            let data = (0..rows).map(|r| logsumexp(x.row_slice(r))).collect();
            Tensor::matrix(rows, 1, data)?
        }
        AddRow => {
            let row = vals[1];
            if !x.is_matrix() || row.len() != x.cols() {
                return Err(shape_err("add_row", vals));
            }
            let cols = x.cols();
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(cols.max(1)) {
                for (o, b) in chunk.iter_mut().zip(row.data()) {
                    *o = *o + *b;
                }
            }
            out
        }
        Clamp { lo, hi } => x.map(|v| v.max(*lo).min(*hi)),
        Scale(c) => x.map(|v| v * *c),
        Shift(c) => x.map(|v| v + *c),
    })
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Sums `g` down to `like`'s shape when `like` was broadcast as a scalar.
fn unbroadcast<T: Scalar>(g: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if like.shape() == g.shape() {
        g
    } else {
        Tensor::full(like.shape().to_vec(), g.data().iter().copied().sum())
    }
}

fn backward_rule<T: Scalar>(
    op: &Primitive<T>,
    vals: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Vec<Tensor<T>> {
    use Primitive::*;
    let x = vals[0];
    let elementwise = |d: &dyn Fn(T, T) -> T| -> Vec<Tensor<T>> {
        // d(input, output) is the local derivative.
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * d(xi, yi))
            .collect();
        vec![Tensor::new(x.shape().to_vec(), data).expect("shape preserved")]
    };
    match op {
        MatMul => {
            let b = vals[1];
            let (m, k, n) = (x.rows(), x.cols(), b.cols());
            let mut da = vec![T::zero(); m * k];
            T::gemm(m, n, k, g.data(), false, b.data(), true, T::zero(), &mut da);
            let mut db = vec![T::zero(); k * n];
            T::gemm(k, m, n, x.data(), true, g.data(), false, T::zero(), &mut db);
            vec![
                Tensor::matrix(m, k, da).expect("matmul grad"),
                Tensor::matrix(k, n, db).expect("matmul grad"),
            ]
        }
        Add | Sub => {
            let b = vals[1];
            let ga = unbroadcast(g.clone(), x);
            let gb = if matches!(op, Sub) { g.map(|v| -v) } else { g.clone() };
            vec![ga, unbroadcast(gb, b)]
        }
        Mul => {
            let b = vals[1];
            let ga = binary("mul", g, b, |gi, bi| gi * bi).expect("forward validated shapes");
            let gb = binary("mul", g, x, |gi, ai| gi * ai).expect("forward validated shapes");
            vec![unbroadcast(ga, x), unbroadcast(gb, b)]
        }
        Relu => elementwise(&|xi, _| if xi > T::zero() { T::one() } else { T::zero() }),
        Softplus => elementwise(&|xi, _| sigmoid(xi)),
        Sigmoid => elementwise(&|_, yi| yi * (T::one() - yi)),
        Exp => elementwise(&|_, yi| yi),
        Log => elementwise(&|xi, _| xi.recip()),
        Square => elementwise(&|xi, _| xi + xi),
        Abs => elementwise(&|xi, _| {
            if xi > T::zero() {
                T::one()
            } else if xi < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }),
        Neg => vec![g.map(|v| -v)],
        Sum => vec![Tensor::full(x.shape().to_vec(), g.item())],
        Mean => vec![Tensor::full(x.shape().to_vec(), g.item() / T::lit(x.len() as f64))],
        SumRows => {
            let (r, c) = x.dims2();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                data.extend(std::iter::repeat_n(g.data()[i], c));
            }
            vec![Tensor::matrix(r, c, data).expect("sum_rows grad")]
        }
        Reshape(_) => vec![g.clone().reshaped(x.shape().to_vec()).expect("reshape grad")],
        Concat => {
            let rows = x.rows();
            let total = g.cols();
            let mut offset = 0;
            vals.iter()
                .map(|v| {
                    let c = v.cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    Tensor::matrix(rows, c, data).expect("concat grad")
                })
                .collect()
        }
        Slice { start, end } => {
            let (rows, cols) = x.dims2();
            let w = end - start;
            let mut gx = Tensor::zeros(vec![rows, cols]);
            let d = gx.data_mut();
            for r in 0..rows {
                d[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![gx]
        }
        LogSumExp => {
            let (rows, cols) = x.dims2();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let lse = out.data()[r];
                let gr = g.data()[r];
                data.extend(x.row_slice(r).iter().map(|&v| gr * (v - lse).exp()));
            }
            vec![Tensor::matrix(rows, cols, data).expect("logsumexp grad")]
        }
        AddRow => {
            let row = vals[1];
            let cols = x.cols();
            let mut gr = vec![T::zero(); cols];
            for chunk in g.data().chunks(cols.max(1)) {
                for (acc, v) in gr.iter_mut().zip(chunk) {
                    *acc = *acc + *v;
                }
            }
            vec![g.clone(), Tensor::new(row.shape().to_vec(), gr).expect("add_row grad")]
        }
        Clamp { lo, hi } => elementwise(&|xi, _| {
            if xi >= *lo && xi <= *hi {
                T::one()
            } else {
                T::zero()
            }
        }),
        Scale(c) => vec![g.map(|v| v * *c)],
        Shift(_) => vec![g.clone()],
    }
}
