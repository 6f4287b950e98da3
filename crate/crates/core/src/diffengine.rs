//! Reverse-mode differentiation over dense 2D tensors.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles while the
//! forward pass runs. [`Graph::gradients`] then walks the recorded nodes in
//! reverse and accumulates adjoints into the bound parameters.
//!
//! The primitive set is deliberately small: elementwise add, subtract and
//! multiply, scaling, matrix product, affine map, `tanh`, SiLU, square,
//! square root, reciprocal, sum and mean, plus the index plumbing needed to
//! build finite-difference stencils (row slices, column concatenation and
//! per-row scaling). Everything runs in `f64`.
//!
//! ```
//! use curveflow::diffengine::{evaluate_with_gradients, DiffError, ParameterSet, Tensor};
//!
//! let mut params = ParameterSet::new();
//! params.insert("x", Tensor::scalar(3.0)).unwrap();
//! let (value, grads) = evaluate_with_gradients(
//!     |g, p| -> Result<_, DiffError> { let x = p.get("x")?; Ok(g.sum(g.square(x))) },
//!     &params,
//! )
//! .unwrap();
//! assert_eq!(value, 9.0);
//! assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite value produced by `{primitive}`")]
    NonFinite { primitive: &'static str },

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` contains a non-finite entry")]
    NonFiniteParameter(String),

    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("malformed tensor: {0}")]
    Malformed(String),
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    /// An `n x 1` column.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values)
    }

    /// Stacks equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }

    /// Copies `count` rows starting at `start`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        assert!(start + count <= self.rows, "row slice out of range");
        Tensor::new(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        )
    }

    /// Gathers the given rows in order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(indices.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("data", &self.data)
            .finish()
    }
}

impl From<Tensor> for Vec<Vec<f64>> {
    fn from(t: Tensor) -> Self {
        t.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Tensor {
    type Error = DiffError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(DiffError::Malformed("empty tensor".into()));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiffError::Malformed("ragged rows".into()));
        }
        Ok(Tensor::from_rows(&rows))
    }
}

/// Named trainable arrays. Names are unique and iteration order is sorted,
/// so serialization and summation order never depend on insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(DiffError::NonFiniteParameter(name));
        }
        if self.entries.contains_key(&name) {
            return Err(DiffError::DuplicateName(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Union of two sets with disjoint names.
    pub fn merged(&self, other: &ParameterSet) -> Result<ParameterSet, DiffError> {
        let mut out = self.clone();
        for (name, value) in other.iter() {
            out.insert(name, value.clone())?;
        }
        Ok(out)
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// `d loss / d parameter`, shape-congruent with the originating
/// [`ParameterSet`] (restricted to the parameters that were bound as
/// trainable).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Elementwise sum of two maps with identical layout.
    pub fn add(&self, other: &GradientMap) -> GradientMap {
        let mut out = self.clone();
        for (name, value) in other.iter() {
            match out.entries.get_mut(name) {
                Some(t) => t.add_assign(value),
                None => {
                    out.entries.insert(name.to_string(), value.clone());
                }
            }
        }
        out
    }

    fn insert(&mut self, name: String, value: Tensor) {
        self.entries.insert(name, value);
    }
}

/// Worst entry of a gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDiscrepancy {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all shared entries.
///
/// The floor keeps entries whose true gradient is essentially zero from
/// dominating through rounding noise in the finite-difference estimate.
pub fn compare_gradients(analytic: &GradientMap, numeric: &GradientMap, floor: f64) -> GradientDiscrepancy {
    let mut worst = GradientDiscrepancy {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
    };
    for (name, a) in analytic.iter() {
        let Some(b) = numeric.get(name) else { continue };
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(floor);
            let err = if (x - y).is_nan() { f64::INFINITY } else { (x - y).abs() / denom };
            if err > worst.max_relative_error || worst.worst_parameter.is_empty() {
                worst = GradientDiscrepancy {
                    max_relative_error: err,
                    worst_parameter: name.to_string(),
                    worst_index: i,
                };
            }
        }
    }
    worst
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise primitives addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Silu,
    Square,
    Sqrt,
    Recip,
}

impl FromStr for UnaryOp {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(UnaryOp::Tanh),
            "silu" => Ok(UnaryOp::Silu),
            "square" => Ok(UnaryOp::Square),
            "sqrt" => Ok(UnaryOp::Sqrt),
            "recip" | "reciprocal" => Ok(UnaryOp::Recip),
            other => Err(DiffError::UnsupportedPrimitive(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Unary(UnaryOp, Var),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
    ScaleRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Silu, _) => "silu",
            Op::Unary(UnaryOp::Square, _) => "square",
            Op::Unary(UnaryOp::Sqrt, _) => "sqrt",
            Op::Unary(UnaryOp::Recip, _) => "recip",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ScaleRows(..) => "scale_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Maps parameter names to the graph leaves they were bound to.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, DiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    /// Binds additional names, typically from a second parameter set.
    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
        self.trainable.extend(other.trainable);
    }
}

/// Recording of one forward pass.
///
/// Operations take `&self`; nodes live behind a `RefCell` so expressions can
/// nest freely. The first non-finite intermediate is remembered and reported
/// by [`Graph::check`] and [`Graph::gradients`].
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<DiffError>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(DiffError::NonFinite { primitive: op.name() });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.with(v, Tensor::clone)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with(v, Tensor::shape)
    }

    /// Value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with(v, |t| {
            assert_eq!(t.shape(), (1, 1), "not a scalar node");
            t.data[0]
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf not tied to a parameter name.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a fresh constant, cutting the
    /// gradient path.
    pub fn detach(&self, v: Var) -> Var {
        self.constant(self.value(v))
    }

    /// Binds every entry of `params` as a trainable leaf.
    pub fn bind(&self, params: &ParameterSet) -> Bindings {
        let mut b = Bindings::default();
        for (name, value) in params.iter() {
            let v = self.variable(value.clone());
            b.vars.insert(name.to_string(), v);
            b.trainable.push((name.to_string(), v));
        }
        b
    }

    /// Binds every entry of `params` as a constant; no gradients are
    /// produced for them.
    pub fn bind_constant(&self, params: &ParameterSet) -> Bindings {
        let mut b = Bindings::default();
        for (name, value) in params.iter() {
            b.vars.insert(name.to_string(), self.constant(value.clone()));
        }
        b
    }

    fn binary_shape(&self, op: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_shape("add", a, b);
        let value = self.with(a, |x| self.with(b, |y| x.zip_map(y, |p, q| p + q)));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_shape("sub", a, b);
        let value = self.with(a, |x| self.with(b, |y| x.zip_map(y, |p, q| p - q)));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_shape("mul", a, b);
        let value = self.with(a, |x| self.with(b, |y| x.zip_map(y, |p, q| p * q)));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with(a, |x| x.map(|p| p * c));
        let rg = self.grad_flag(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.with(a, |x| self.with(b, |y| matmul(x, y)));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x W + b` with the `1 x out` bias broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let value = self.with(x, |xv| {
            self.with(w, |wv| {
                self.with(b, |bv| {
                    assert_eq!(bv.shape(), (1, wv.cols), "affine: bias must be 1 x {}", wv.cols);
                    let mut out = matmul(xv, wv);
                    for row in out.data.chunks_mut(wv.cols) {
                        for (o, bias) in row.iter_mut().zip(&bv.data) {
                            *o += bias;
                        }
                    }
                    out
                })
            })
        });
        let rg = self.grad_flag(x) || self.grad_flag(w) || self.grad_flag(b);
        self.push(value, Op::Affine(x, w, b), rg)
    }

    pub fn unary(&self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Silu => |x| x / (1.0 + (-x).exp()),
            UnaryOp::Square => |x| x * x,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Recip => |x| 1.0 / x,
        };
        let value = self.with(a, |x| x.map(f));
        let rg = self.grad_flag(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    /// Applies a unary primitive looked up by name.
    pub fn apply(&self, name: &str, a: Var) -> Result<Var, DiffError> {
        Ok(self.unary(name.parse()?, a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(UnaryOp::Recip, a)
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum(&self, a: Var) -> Var {
        let value = self.with(a, |x| Tensor::scalar(x.data.iter().sum()));
        let rg = self.grad_flag(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries, as a `1x1` node.
    pub fn mean(&self, a: Var) -> Var {
        let value = self.with(a, |x| Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64));
        let rg = self.grad_flag(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Rows `start .. start + count`.
    pub fn slice_rows(&self, a: Var, start: usize, count: usize) -> Var {
        let value = self.with(a, |x| x.slice_rows(start, count));
        let rg = self.grad_flag(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// `[a | b]` for operands with equal row counts.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = self.with(a, |x| {
            self.with(b, |y| {
                assert_eq!(x.rows, y.rows, "concat_cols: row mismatch");
                let cols = x.cols + y.cols;
                let mut data = Vec::with_capacity(x.rows * cols);
                for r in 0..x.rows {
                    data.extend_from_slice(x.row(r));
                    data.extend_from_slice(y.row(r));
                }
                Tensor::new(x.rows, cols, data)
            })
        });
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Multiplies row `i` of `x (n x k)` by `s[i]` for a column `s (n x 1)`.
    pub fn scale_rows(&self, s: Var, x: Var) -> Var {
        let value = self.with(s, |sv| {
            self.with(x, |xv| {
                assert_eq!(sv.shape(), (xv.rows, 1), "scale_rows: need a {} x 1 column", xv.rows);
                let mut out = xv.clone();
                for (row, &c) in out.data.chunks_mut(xv.cols.max(1)).zip(&sv.data) {
                    for v in row {
                        *v *= c;
                    }
                }
                out
            })
        });
        let rg = self.grad_flag(s) || self.grad_flag(x);
        self.push(value, Op::ScaleRows(s, x), rg)
    }

    /// First non-finite intermediate recorded so far, if any.
    pub fn check(&self) -> Result<(), DiffError> {
        match self.fault.borrow().as_ref() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Reverse pass from the scalar `loss` to every trainable binding.
    pub fn gradients(&self, loss: Var, bindings: &Bindings) -> Result<GradientMap, DiffError> {
        self.check()?;
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows, cols });
        }
        let adjoints = self.backward(loss);
        let mut out = GradientMap::default();
        for (name, v) in &bindings.trainable {
            let g = adjoints[v.0]
                .clone()
                .unwrap_or_else(|| self.with(*v, |t| Tensor::zeros(t.rows, t.cols)));
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(name.clone()));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        accumulate(&mut adj, &nodes, b, g.clone());
                    }
                    accumulate(&mut adj, &nodes, a, g);
                }
                Op::Sub(a, b) => {
                    if wants(b) {
                        accumulate(&mut adj, &nodes, b, g.map(|x| -x));
                    }
                    accumulate(&mut adj, &nodes, a, g);
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        accumulate(&mut adj, &nodes, a, g.zip_map(val(b), |p, q| p * q));
                    }
                    if wants(b) {
                        accumulate(&mut adj, &nodes, b, g.zip_map(val(a), |p, q| p * q));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, &nodes, a, g.map(|x| x * c)),
                Op::MatMul(a, b) => {
                    if wants(a) {
                        accumulate(&mut adj, &nodes, a, matmul_nt(&g, val(b)));
                    }
                    if wants(b) {
                        accumulate(&mut adj, &nodes, b, matmul_tn(val(a), &g));
                    }
                }
                Op::Affine(x, w, b) => {
                    if wants(x) {
                        accumulate(&mut adj, &nodes, x, matmul_nt(&g, val(w)));
                    }
                    if wants(w) {
                        accumulate(&mut adj, &nodes, w, matmul_tn(val(x), &g));
                    }
                    if wants(b) {
                        let mut db = Tensor::zeros(1, g.cols);
                        for row in g.data.chunks(g.cols) {
                            for (d, v) in db.data.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut adj, &nodes, b, db);
                    }
                }
                Op::Unary(op, a) => {
                    let y = &node.value;
                    let x = val(a);
                    let local = match op {
                        UnaryOp::Tanh => g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
                        UnaryOp::Silu => g.zip_map(x, |gv, xv| {
                            let s = 1.0 / (1.0 + (-xv).exp());
                            gv * s * (1.0 + xv * (1.0 - s))
                        }),
                        UnaryOp::Square => g.zip_map(x, |gv, xv| 2.0 * gv * xv),
                        UnaryOp::Sqrt => g.zip_map(y, |gv, yv| gv / (2.0 * yv)),
                        UnaryOp::Recip => g.zip_map(y, |gv, yv| -gv * yv * yv),
                    };
                    accumulate(&mut adj, &nodes, a, local);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut adj, &nodes, a, Tensor::filled(r, c, g.data[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut adj, &nodes, a, Tensor::filled(r, c, g.data[0] / n));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(a).shape();
                    let mut full = Tensor::zeros(r, c);
                    full.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    accumulate(&mut adj, &nodes, a, full);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(a).cols;
                    let cb = val(b).cols;
                    if wants(a) {
                        let mut ga = Vec::with_capacity(g.rows * ca);
                        for row in g.data.chunks(ca + cb) {
                            ga.extend_from_slice(&row[..ca]);
                        }
                        accumulate(&mut adj, &nodes, a, Tensor::new(g.rows, ca, ga));
                    }
                    if wants(b) {
                        let mut gb = Vec::with_capacity(g.rows * cb);
                        for row in g.data.chunks(ca + cb) {
                            gb.extend_from_slice(&row[ca..]);
                        }
                        accumulate(&mut adj, &nodes, b, Tensor::new(g.rows, cb, gb));
                    }
                }
                Op::ScaleRows(s, x) => {
                    let sv = val(s);
                    let xv = val(x);
                    let cols = xv.cols.max(1);
                    if wants(s) {
                        let ds: Vec<f64> = g
                            .data
                            .chunks(cols)
                            .zip(xv.data.chunks(cols))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                            .collect();
                        accumulate(&mut adj, &nodes, s, Tensor::column(ds));
                    }
                    if wants(x) {
                        let mut dx = g.clone();
                        for (row, &c) in dx.data.chunks_mut(cols).zip(&sv.data) {
                            for v in row {
                                *v *= c;
                            }
                        }
                        accumulate(&mut adj, &nodes, x, dx);
                    }
                }
            }
        }
        adj
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul: inner dimensions {} vs {}", a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(m, n, out)
}

/// `g (m x n) * b^T` where `b` is `k x n`.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(m, k, out)
}

/// `a^T * g` where `a` is `m x k` and `g` is `m x n`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    Tensor::new(k, n, out)
}

/// Forward evaluation of a scalar loss.
pub fn evaluate<F, E>(loss_fn: F, params: &ParameterSet) -> Result<f64, E>
where
    F: Fn(&Graph, &Bindings) -> Result<Var, E>,
    E: From<DiffError>,
{
    let g = Graph::new();
    let b = g.bind_constant(params);
    let loss = loss_fn(&g, &b)?;
    g.check()?;
    let (rows, cols) = g.shape(loss);
    if (rows, cols) != (1, 1) {
        return Err(DiffError::NonScalarLoss { rows, cols }.into());
    }
    Ok(g.scalar_value(loss))
}

/// Loss value and its gradient with respect to every entry of `params`.
pub fn evaluate_with_gradients<F, E>(loss_fn: F, params: &ParameterSet) -> Result<(f64, GradientMap), E>
where
    F: Fn(&Graph, &Bindings) -> Result<Var, E>,
    E: From<DiffError>,
{
    let g = Graph::new();
    let b = g.bind(params);
    let loss = loss_fn(&g, &b)?;
    let grads = g.gradients(loss, &b)?;
    Ok((g.scalar_value(loss), grads))
}

/// Central differences `(f(θ + h) - f(θ - h)) / 2h`, one coordinate at a
/// time.
pub fn finite_difference_gradient<F, E>(loss_fn: F, params: &ParameterSet, step: f64) -> Result<GradientMap, E>
where
    F: Fn(&Graph, &Bindings) -> Result<Var, E>,
    E: From<DiffError>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(DiffError::InvalidStep(step).into());
    }
    let mut work = params.clone();
    let mut out = GradientMap::default();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, Tensor::len);
        let (rows, cols) = params.get(&name).map_or((0, 0), Tensor::shape);
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let original = params.get(&name).expect("name taken from params").data[i];
            work.get_mut(&name).expect("cloned").data[i] = original + step;
            let plus = evaluate(&loss_fn, &work)?;
            work.get_mut(&name).expect("cloned").data[i] = original - step;
            let minus = evaluate(&loss_fn, &work)?;
            work.get_mut(&name).expect("cloned").data[i] = original;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.insert(name, Tensor::new(rows, cols, grad));
    }
    Ok(out)
}
