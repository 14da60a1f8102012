//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are row-major `f64` matrices ([`Tensor`]); a column vector is `n x 1` and
//! a scalar is `1 x 1`. Trainable values come from a [`ParamStore`], a flat
//! vector split into named segments, and [`Gradients::flat`] scatters the
//! backward pass back into that flat layout.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so the backward pass is a single reverse sweep.
//!
//! ```
//! use ctesret::diff::{gradient, ParamStore, Tape};
//!
//! let mut store = ParamStore::new();
//! store.add("x", 1, 1, &[3.0]);
//! let g = gradient(|tape: &Tape, p: &ParamStore| {
//!     let x = tape.param(p, "x")?;
//!     Ok(tape.mul(x, x))
//! }, &store).unwrap();
//! assert_eq!(g, vec![6.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(m, n, out)
}

/// `a (m x k) * b^T` where `b` is `n x k`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(m, n, out)
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at shape mismatch");
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(m, n, out)
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

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of `LogNormal(mu, sigma^2)` at `gap`.
pub fn lognormal_log_density(gap: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(Error::NonPositiveGap(gap));
    }
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let z = (gap.ln() - mu) / sigma;
    Ok(-gap.ln() - sigma.ln() - HALF_LN_2PI - 0.5 * z * z)
}

/// A named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a named, contiguous segment layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment. Panics on duplicate names or a size mismatch.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) {
        assert_eq!(
            values.len(),
            rows * cols,
            "segment {name}: wrong value count"
        );
        assert!(!self.index.contains_key(name), "duplicate segment {name}");
        self.index.insert(name.to_string(), self.segments.len());
        self.segments.push(Segment {
            name: name.to_string(),
            offset: self.values.len(),
            rows,
            cols,
        });
        self.values.extend_from_slice(values);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.index
            .get(name)
            .map(|&i| &self.segments[i])
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let seg = self.segment(name)?;
        Ok(Tensor::new(
            seg.rows,
            seg.cols,
            self.values[seg.range()].to_vec(),
        ))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let seg = self.segment(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.segment(name)?.range();
        Ok(&mut self.values[range])
    }

    /// Rebuilds the name index after deserialization and checks that
    /// segments tile the value vector.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        let mut offset = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.offset != offset {
                return Err(Error::InvalidConfig(format!(
                    "segment {} starts at {} instead of {}",
                    seg.name, seg.offset, offset
                )));
            }
            offset += seg.len();
            if self.index.insert(seg.name.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate segment {}",
                    seg.name
                )));
            }
        }
        if offset != self.values.len() {
            return Err(Error::InvalidConfig(format!(
                "segments cover {offset} values but the store holds {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Contiguous flat range covered by the named segments, which must be
    /// adjacent and given in layout order.
    pub fn span(&self, names: &[&str]) -> Result<std::ops::Range<usize>> {
        let first = self.segment(names[0])?;
        let mut end = first.offset;
        for name in names {
            let seg = self.segment(name)?;
            if seg.offset != end {
                return Err(Error::InvalidConfig(format!(
                    "segment {name} is not adjacent to its predecessor"
                )));
            }
            end += seg.len();
        }
        Ok(first.offset..end)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        offset: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Softmax {
        input: Var,
    },
    LogSoftmax(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    CumSumRows(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    PickCols {
        input: Var,
        cols: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PairwiseDiff(Var, Var),
    L2Normalize {
        input: Var,
        norm: f64,
    },
    LogNormal {
        log_gaps: Var,
        mu: Var,
        log_sigma: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitives for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn map_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.map_value(a, |t| {
            Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect())
        });
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
            Tensor::new(
                ta.rows,
                ta.cols,
                ta.data
                    .iter()
                    .zip(&tb.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
        };
        self.push(value, op)
    }

    /// Copy of a node's value.
    pub fn value(&self, v: Var) -> Tensor {
        self.map_value(v, Tensor::clone)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.map_value(v, Tensor::item)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.map_value(v, Tensor::shape)
    }

    /// Differentiable input that is not part of a parameter store.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiated input. Gradients reaching it are simply dropped.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter segment; its gradient flows back to the flat store.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let seg = store.segment(name)?;
        let value = Tensor::new(seg.rows, seg.cols, store.values[seg.range()].to_vec());
        Ok(self.push(value, Op::Param { offset: seg.offset }))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, ta.cols), tr.shape(), "add_row shape mismatch");
            let mut out = ta.clone();
            for r in out.data.chunks_mut(ta.cols) {
                for (o, b) in r.iter_mut().zip(&tr.data) {
                    *o += b;
                }
            }
            out
        };
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `m x n` matrix elementwise by a `1 x n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, ta.cols), tr.shape(), "mul_row shape mismatch");
            let mut out = ta.clone();
            for r in out.data.chunks_mut(ta.cols) {
                for (o, b) in r.iter_mut().zip(&tr.data) {
                    *o *= b;
                }
            }
            out
        };
        self.push(value, Op::MulRow(a, row))
    }

    /// Elementwise product with a fixed tensor (dropout masks, quadrature
    /// weights).
    pub fn mul_const(&self, a: Var, c: Tensor) -> Var {
        let value = self.map_value(a, |t| {
            assert_eq!(t.shape(), c.shape(), "mul_const shape mismatch");
            Tensor::new(
                t.rows,
                t.cols,
                t.data.iter().zip(&c.data).map(|(x, y)| x * y).collect(),
            )
        });
        self.push(value, Op::MulConst(a, c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            matmul(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            matmul_bt(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.map_value(a, transpose);
        self.push(value, Op::Transpose(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.map_value(a, |t| Tensor::new(rows, cols, t.data.clone()));
        self.push(value, Op::Reshape(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax_rows(&self, a: Var, causal: bool) -> Var {
        let value = self.map_value(a, |t| {
            let mut out = Tensor::zeros(t.rows, t.cols);
            for i in 0..t.rows {
                let width = if causal { (i + 1).min(t.cols) } else { t.cols };
                let row = &t.row_slice(i)[..width];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out.data[i * t.cols..i * t.cols + width];
                let mut z = 0.0;
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = (x - m).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            out
        });
        self.push(value, Op::Softmax { input: a })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = self.map_value(a, |t| {
            let mut out = t.clone();
            for row in out.data.chunks_mut(t.cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            out
        });
        self.push(value, Op::LogSoftmax(a))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&self, a: Var) -> Var {
        let value = self.map_value(a, |t| Tensor::scalar(t.data.iter().sum()));
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.map_value(a, |t| t.data.len());
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of an `m x n` matrix, as `1 x n`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.map_value(a, |t| {
            let mut out = vec![0.0; t.cols];
            for r in t.data.chunks(t.cols) {
                for (o, x) in out.iter_mut().zip(r) {
                    *o += x;
                }
            }
            Tensor::row(out)
        });
        self.push(value, Op::SumRows(a))
    }

    /// Row sums of an `m x n` matrix, as `m x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.map_value(a, |t| {
            Tensor::column(t.data.chunks(t.cols).map(|r| r.iter().sum()).collect())
        });
        self.push(value, Op::SumCols(a))
    }

    /// Running sum down the rows: output row `r` is the sum of rows `0..=r`.
    pub fn cumsum_rows(&self, a: Var) -> Var {
        let value = self.map_value(a, |t| {
            let mut out = t.clone();
            for r in 1..t.rows {
                let (done, rest) = out.data.split_at_mut(r * t.cols);
                let prev = &done[(r - 1) * t.cols..];
                for (o, p) in rest[..t.cols].iter_mut().zip(prev) {
                    *o += p;
                }
            }
            out
        });
        self.push(value, Op::CumSumRows(a))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.map_value(a, |t| {
            assert!(start + len <= t.rows, "slice_rows out of range");
            Tensor::new(
                len,
                t.cols,
                t.data[start * t.cols..(start + len) * t.cols].to_vec(),
            )
        });
        self.push(value, Op::SliceRows { input: a, start })
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Var {
        let value = self.map_value(a, |t| {
            let mut data = Vec::with_capacity(rows.len() * t.cols);
            for &r in rows {
                data.extend_from_slice(t.row_slice(r));
            }
            Tensor::new(rows.len(), t.cols, data)
        });
        self.push(
            value,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Picks one column per row, as `m x 1`.
    pub fn pick_cols(&self, a: Var, cols: &[usize]) -> Var {
        let value = self.map_value(a, |t| {
            assert_eq!(t.rows, cols.len(), "pick_cols needs one column per row");
            Tensor::column(cols.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect())
        });
        self.push(
            value,
            Op::PickCols {
                input: a,
                cols: cols.to_vec(),
            },
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols, cols, "concat_rows column mismatch");
                data.extend_from_slice(&t.data);
                rows += t.rows;
            }
            Tensor::new(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// For column vectors `a (p x 1)` and `b (n x 1)`, the `p x n` matrix
    /// with entries `b_j - a_i`.
    pub fn pairwise_diff(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(
                ta.cols == 1 && tb.cols == 1,
                "pairwise_diff expects columns"
            );
            let mut data = Vec::with_capacity(ta.rows * tb.rows);
            for &x in &ta.data {
                data.extend(tb.data.iter().map(|&y| y - x));
            }
            Tensor::new(ta.rows, tb.rows, data)
        };
        self.push(value, Op::PairwiseDiff(a, b))
    }

    /// Divides by the Frobenius norm. The caller must rule out a zero norm.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let (value, norm) = self.map_value(a, |t| {
            let norm = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            (
                Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x / norm).collect()),
                norm,
            )
        });
        self.push(value, Op::L2Normalize { input: a, norm })
    }

    /// Log-normal log-density evaluated from log-gaps, with per-row location
    /// `mu` and log-scale `log_sigma`. All three are `n x 1`.
    pub fn lognormal_log_density(&self, log_gaps: Var, mu: Var, log_sigma: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tg = &nodes[log_gaps.0].value;
            let (tm, ts) = (&nodes[mu.0].value, &nodes[log_sigma.0].value);
            assert_eq!(tg.cols, 1, "log_gaps must be n x 1");
            assert_eq!(tm.shape(), tg.shape(), "mu must match log_gaps");
            assert_eq!(ts.shape(), tg.shape(), "log_sigma must match log_gaps");
            Tensor::column(
                (0..tg.rows)
                    .map(|i| {
                        let (lg, m, ls) = (tg.data[i], tm.data[i], ts.data[i]);
                        let z = (lg - m) * (-ls).exp();
                        -lg - ls - HALF_LN_2PI - 0.5 * z * z
                    })
                    .collect(),
            )
        };
        self.push(
            value,
            Op::LogNormal {
                log_gaps,
                mu,
                log_sigma,
            },
        )
    }

    /// [`Tape::lognormal_log_density`] for fixed, observed gaps.
    pub fn lognormal_observed(&self, gaps: &[f64], mu: Var, log_sigma: Var) -> Result<Var> {
        if let Some(&g) = gaps.iter().find(|&&g| !(g > 0.0)) {
            return Err(Error::NonPositiveGap(g));
        }
        let lg = self.constant(Tensor::column(gaps.iter().map(|g| g.ln()).collect()));
        Ok(self.lognormal_log_density(lg, mu, log_sigma))
    }

    /// Runs the backward pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.shape(),
            (1, 1),
            "backward needs a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf | Op::Param { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, map(&g, |x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, zip(&g, val(*b), |x, y| x * y));
                    acc(*b, zip(&g, val(*a), |x, y| x * y));
                }
                Op::Scale(a, s) => acc(*a, map(&g, |x| x * s)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::new(r, c, g.data));
                }
                Op::AddRow(a, row) => {
                    acc(*row, col_sums(&g));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let (ta, tr) = (val(*a), val(*row));
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; tr.cols];
                    for (r, grow) in ga.data.chunks_mut(tr.cols).enumerate() {
                        let arow = ta.row_slice(r);
                        for j in 0..tr.cols {
                            gr[j] += grow[j] * arow[j];
                            grow[j] *= tr.data[j];
                        }
                    }
                    acc(*a, ga);
                    acc(*row, Tensor::row(gr));
                }
                Op::MulConst(a, c) => acc(*a, zip(&g, c, |x, y| x * y)),
                Op::MatMul(a, b) => {
                    acc(*a, matmul_bt(&g, val(*b)));
                    acc(*b, matmul_at(val(*a), &g));
                }
                Op::MatMulBt(a, b) => {
                    acc(*a, matmul(&g, val(*b)));
                    acc(*b, matmul_at(&g, val(*a)));
                }
                Op::Transpose(a) => acc(*a, transpose(&g)),
                Op::Exp(a) => acc(*a, zip(&g, &node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, zip(&g, val(*a), |x, y| x / y)),
                Op::Tanh(a) => acc(*a, zip(&g, &node.value, |x, y| x * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, zip(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Softplus(a) => acc(*a, zip(&g, val(*a), |x, y| x * sigmoid(y))),
                Op::Abs(a) => acc(*a, zip(&g, val(*a), |x, y| x * sign0(y))),
                Op::Square(a) => acc(*a, zip(&g, val(*a), |x, y| 2.0 * x * y)),
                Op::Softmax { input, .. } => {
                    let y = &node.value;
                    let mut gi = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            gi.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*input, gi);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut gi = g.clone();
                    for r in 0..y.rows {
                        let s: f64 = g.row_slice(r).iter().sum();
                        for c in 0..y.cols {
                            gi.data[r * y.cols + c] -= y.get(r, c).exp() * s;
                        }
                    }
                    acc(*a, gi);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        data.extend_from_slice(&g.data);
                    }
                    acc(*a, Tensor::new(r, c, data));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    let data = g
                        .data
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(x, c))
                        .collect();
                    acc(*a, Tensor::new(r, c, data));
                }
                Op::CumSumRows(a) => {
                    let mut gi = g.clone();
                    for r in (0..gi.rows.saturating_sub(1)).rev() {
                        let (head, tail) = gi.data.split_at_mut((r + 1) * gi.cols);
                        for (o, n) in head[r * gi.cols..].iter_mut().zip(&tail[..gi.cols]) {
                            *o += n;
                        }
                    }
                    acc(*a, gi);
                }
                Op::SliceRows { input, start } => {
                    let (r, c) = val(*input).shape();
                    let mut gi = Tensor::zeros(r, c);
                    gi.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    acc(*input, gi);
                }
                Op::SelectRows { input, rows } => {
                    let (r, c) = val(*input).shape();
                    let mut gi = Tensor::zeros(r, c);
                    for (k, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            gi.data[row * c + j] += g.data[k * c + j];
                        }
                    }
                    acc(*input, gi);
                }
                Op::PickCols { input, cols } => {
                    let (r, c) = val(*input).shape();
                    let mut gi = Tensor::zeros(r, c);
                    for (row, &col) in cols.iter().enumerate() {
                        gi.data[row * c + col] = g.data[row];
                    }
                    acc(*input, gi);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = val(*p).shape();
                        let piece = g.data[offset..offset + r * c].to_vec();
                        offset += r * c;
                        acc(*p, Tensor::new(r, c, piece));
                    }
                }
                Op::PairwiseDiff(a, b) => {
                    let (p, n) = (g.rows, g.cols);
                    let ga = (0..p)
                        .map(|i| -g.row_slice(i).iter().sum::<f64>())
                        .collect();
                    let mut gb = vec![0.0; n];
                    for i in 0..p {
                        for (o, x) in gb.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    acc(*a, Tensor::column(ga));
                    acc(*b, Tensor::column(gb));
                }
                Op::L2Normalize { input, norm } => {
                    let y = &node.value;
                    let dot: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
                    acc(*input, zip(&g, y, |gx, yx| (gx - yx * dot) / norm));
                }
                Op::LogNormal {
                    log_gaps,
                    mu,
                    log_sigma,
                } => {
                    let (tg, tm, ts) = (val(*log_gaps), val(*mu), val(*log_sigma));
                    let n = tg.rows;
                    let (mut gg, mut gm, mut gs) = (
                        Vec::with_capacity(n),
                        Vec::with_capacity(n),
                        Vec::with_capacity(n),
                    );
                    for i in 0..n {
                        let inv_var = (-2.0 * ts.data[i]).exp();
                        let d = tg.data[i] - tm.data[i];
                        gg.push(g.data[i] * (-1.0 - d * inv_var));
                        gm.push(g.data[i] * d * inv_var);
                        gs.push(g.data[i] * (d * d * inv_var - 1.0));
                    }
                    acc(*log_gaps, Tensor::column(gg));
                    acc(*mu, Tensor::column(gm));
                    acc(*log_sigma, Tensor::column(gs));
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { offset } => Some((i, offset)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols];
    for r in t.data.chunks(t.cols) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    Tensor::row(out)
}

fn transpose(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.data.len()];
    for r in 0..t.rows {
        for c in 0..t.cols {
            out[c * t.rows + r] = t.data[r * t.cols + c];
        }
    }
    Tensor::new(t.cols, t.rows, out)
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, zero-shaped as `None` when the
    /// output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Scatters parameter gradients into a vector laid out like `store`.
    /// Segments loaded more than once accumulate.
    pub fn flat(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = vec![0.0; store.len()];
        self.accumulate_into(&mut out);
        out
    }

    /// Adds parameter gradients into an existing flat buffer.
    pub fn accumulate_into(&self, out: &mut [f64]) {
        for &(node, offset) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (o, x) in out[offset..offset + g.data.len()].iter_mut().zip(&g.data) {
                    *o += x;
                }
            }
        }
    }
}

/// Gradient of a scalar program with respect to every parameter in `params`.
pub fn gradient<F>(f: F, params: &ParamStore) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let out = f(&tape, params)?;
    if !tape.scalar_value(out).is_finite() {
        return Err(Error::NonFiniteValue("forward pass"));
    }
    let g = tape.backward(out).flat(params);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue("backward pass"));
    }
    Ok(g)
}

/// Central finite-difference estimate of the same gradient.
pub fn finite_diff<F>(f: F, params: &ParamStore, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |p: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, p)?;
        let v = tape.scalar_value(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteValue("finite difference"))
        }
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params.values[i];
        work.values[i] = x + step;
        let hi = eval(&work)?;
        work.values[i] = x - step;
        let lo = eval(&work)?;
        work.values[i] = x;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero components compare on absolute scale.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
