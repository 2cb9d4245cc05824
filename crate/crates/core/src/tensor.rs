//! Dense float64 tensors with a reverse-mode gradient tape.
//!
//! All operations work on 2-D row-major matrices; a scalar is `1 × 1`.
//! Build a [`Tape`], register leaves with [`Tape::var`] or
//! [`Tape::constant`], compose [`Var`] operations and call
//! [`Tape::backward`] on a scalar output.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CHECKPOINT_FORMAT_VERSION;

/// Largest accepted 1-norm condition estimate for [`Var::inverse`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Accumulated gradient, used by optimizers.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    fn raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Tensor {
            shape: vec![rows, cols],
            values,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::raw(rows, cols, vec![value; rows * cols])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::raw(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Tensor::raw(rows.len(), cols, rows.concat()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// `(rows, cols)` view; higher ranks fold trailing axes into columns.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims();
        let (k2, m) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} · {k2}x{m}")));
        }
        Ok(Tensor::raw(n, m, mm(&self.values, n, k, &other.values, m)))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        Tensor::raw(c, r, transpose_raw(&self.values, r, c))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

type Backward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Records operations in creation order, which is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Tensor,
        parents: &[usize],
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar output. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output has shape {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                for (&p, pg) in node.parents.iter().zip(bw(&g)) {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape(
                "concat",
                "need at least one part and axis 0 or 1",
            ));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let dims: Vec<(usize, usize)> = values.iter().map(|v| v.dims()).collect();
        let (r0, c0) = dims[0];
        if axis == 0 && dims.iter().any(|d| d.1 != c0)
            || axis == 1 && dims.iter().any(|d| d.0 != r0)
        {
            return Err(Error::shape(
                "concat",
                format!("incompatible parts {dims:?} on axis {axis}"),
            ));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let out: Vec<f64> = values
                .iter()
                .flat_map(|v| v.values.iter().copied())
                .collect();
            let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
            Ok(self.push(Tensor::raw(rows, c0, out), &ids, move |g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        offset += s;
                        g[offset - s..offset].to_vec()
                    })
                    .collect()
            }))
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for v in &values {
                    out.extend_from_slice(v.row(r));
                }
            }
            let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
            Ok(self.push(Tensor::raw(r0, cols, out), &ids, move |g| {
                let mut parts: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(w * r0)).collect();
                for r in 0..r0 {
                    let mut offset = r * cols;
                    for (p, &w) in parts.iter_mut().zip(&widths) {
                        p.extend_from_slice(&g[offset..offset + w]);
                        offset += w;
                    }
                }
                parts
            }))
        }
    }
}

/// Gradients of one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let (r, c) = self.shapes[var.id];
        self.grads
            .get(var.id)?
            .as_ref()
            .map(|g| Tensor::raw(r, c, g.clone()))
    }

    /// Gradient of `var`, zero when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).unwrap_or_else(|| {
            let (r, c) = self.shapes[var.id];
            Tensor::zeros(r, c)
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.value().dims()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.value().values[0]
    }

    /// The same value as a new constant leaf.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims();
        let y: Vec<f64> = x.values.iter().map(|&v| f(v)).collect();
        let y_saved = y.clone();
        self.tape.push(Tensor::raw(r, c, y), &[self.id], move |g| {
            vec![g
                .iter()
                .zip(&x.values)
                .zip(&y_saved)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect()]
        })
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", a.dims(), b.dims()),
            ));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        let (r, c) = a.dims();
        let out = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
        Ok(self
            .tape
            .push(Tensor::raw(r, c, out), &[self.id, other.id], |g| {
                vec![g.to_vec(), g.to_vec()]
            }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let (r, c) = a.dims();
        let out = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
        Ok(self
            .tape
            .push(Tensor::raw(r, c, out), &[self.id, other.id], |g| {
                vec![g.to_vec(), g.iter().map(|v| -v).collect()]
            }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let (r, c) = a.dims();
        let out = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        Ok(self
            .tape
            .push(Tensor::raw(r, c, out), &[self.id, other.id], move |g| {
                vec![
                    g.iter().zip(&b.values).map(|(g, y)| g * y).collect(),
                    g.iter().zip(&a.values).map(|(g, x)| g * x).collect(),
                ]
            }))
    }

    pub fn scalar_mul(self, k: f64) -> Var<'t> {
        self.unary(|x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(|x| x + k, |_, _| 1.0)
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row_broadcast(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let (r, c) = a.dims();
        if b.dims() != (1, c) {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{r}x{c} + {:?}", b.dims()),
            ));
        }
        let out = a
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| v + b.values[k % c])
            .collect();
        Ok(self
            .tape
            .push(Tensor::raw(r, c, out), &[self.id, row.id], move |g| {
                let mut gb = vec![0.0; c];
                for (k, v) in g.iter().enumerate() {
                    gb[k % c] += v;
                }
                vec![g.to_vec(), gb]
            }))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        let ((n, k), m) = (a.dims(), b.cols());
        Ok(self.tape.push(out, &[self.id, other.id], move |g| {
            let da = mm(g, n, m, &transpose_raw(&b.values, k, m), k);
            let db = mm(&transpose_raw(&a.values, n, k), k, n, g, m);
            vec![da, db]
        }))
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.dims();
        self.tape.push(a.transpose(), &[self.id], move |g| {
            vec![transpose_raw(g, c, r)]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn elu(self, alpha: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { alpha * x.exp_m1() },
            move |x, _| if x > 0.0 { 1.0 } else { alpha * x.exp() },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    x.exp() / (1.0 + x.exp())
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Sum of all entries as a `1 × 1` scalar.
    pub fn reduce_sum(self) -> Var<'t> {
        let a = self.value();
        let n = a.len();
        self.tape.push(
            Tensor::scalar(a.values.iter().sum()),
            &[self.id],
            move |g| vec![vec![g[0]; n]],
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.reduce_sum().scalar_mul(1.0 / n)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let mask = vec![true; self.value().len()];
        self.masked_softmax_rows(&mask)
            .expect("full mask matches shape")
    }

    /// Row softmax over entries where `mask` is true; masked entries are 0
    /// and fully masked rows are all zero.
    pub fn masked_softmax_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims();
        if mask.len() != r * c {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask of {} for {r}x{c}", mask.len()),
            ));
        }
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let idx = i * c..(i + 1) * c;
            let m = a.values[idx.clone()]
                .iter()
                .zip(&mask[idx.clone()])
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for k in idx.clone() {
                if mask[k] {
                    y[k] = (a.values[k] - m).exp();
                    z += y[k];
                }
            }
            y[idx].iter_mut().for_each(|v| *v /= z);
        }
        let ys = y.clone();
        Ok(self.tape.push(Tensor::raw(r, c, y), &[self.id], move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let idx = i * c..(i + 1) * c;
                let dot: f64 = g[idx.clone()]
                    .iter()
                    .zip(&ys[idx.clone()])
                    .map(|(g, y)| g * y)
                    .sum();
                for k in idx {
                    dx[k] = ys[k] * (g[k] - dot);
                }
            }
            vec![dx]
        }))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.dims();
        let mut y = vec![0.0; r * c];
        let mut p = vec![0.0; r * c];
        for i in 0..r {
            let row = a.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                y[i * c + j] = row[j] - lse;
                p[i * c + j] = y[i * c + j].exp();
            }
        }
        self.tape.push(Tensor::raw(r, c, y), &[self.id], move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let s: f64 = g[i * c..(i + 1) * c].iter().sum();
                for k in i * c..(i + 1) * c {
                    dx[k] = g[k] - p[k] * s;
                }
            }
            vec![dx]
        })
    }

    /// Normalizes each column over its masked entries (`mask[i*c+t]` selects
    /// row `i` of column `t`); unmasked entries and empty columns are zero.
    ///
    /// A column whose masked sum is below `epsilon` is first shifted by
    /// `|min| + epsilon` over its masked entries.
    pub fn masked_column_normalize(self, mask: &[bool], epsilon: f64) -> Result<Var<'t>> {
        let s = self.value();
        let (r, c) = s.dims();
        if mask.len() != r * c {
            return Err(Error::shape(
                "masked_column_normalize",
                format!("mask of {} for {r}x{c}", mask.len()),
            ));
        }
        let mut out = vec![0.0; r * c];
        // Per column: (denominator, index of the min entry when shifted).
        let mut cols: Vec<(f64, Option<usize>)> = vec![(0.0, None); c];
        let mut shifted = s.values.clone();
        for t in 0..c {
            let rows: Vec<usize> = (0..r).filter(|&i| mask[i * c + t]).collect();
            if rows.is_empty() {
                continue;
            }
            let mut sum: f64 = rows.iter().map(|&i| s.values[i * c + t]).sum();
            let mut argmin = None;
            if sum < epsilon {
                let m = *rows
                    .iter()
                    .min_by(|&&a, &&b| s.values[a * c + t].total_cmp(&s.values[b * c + t]))
                    .unwrap();
                let shift = s.values[m * c + t].abs() + epsilon;
                rows.iter().for_each(|&i| shifted[i * c + t] += shift);
                sum = rows.iter().map(|&i| shifted[i * c + t]).sum();
                argmin = Some(m);
            }
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::Numeric(format!(
                    "column {t} has non-positive mass {sum} after shifting"
                )));
            }
            rows.iter()
                .for_each(|&i| out[i * c + t] = shifted[i * c + t] / sum);
            cols[t] = (sum, argmin);
        }
        let a = out.clone();
        let mask = mask.to_vec();
        Ok(self
            .tape
            .push(Tensor::raw(r, c, out), &[self.id], move |g| {
                let mut ds = vec![0.0; r * c];
                for (t, &(sum, argmin)) in cols.iter().enumerate() {
                    if sum == 0.0 {
                        continue;
                    }
                    let rows = (0..r).filter(|&i| mask[i * c + t]);
                    let dot: f64 = rows.clone().map(|i| g[i * c + t] * a[i * c + t]).sum();
                    let mut total = 0.0;
                    for i in rows {
                        let d = (g[i * c + t] - dot) / sum;
                        ds[i * c + t] = d;
                        total += d;
                    }
                    if let Some(m) = argmin {
                        ds[m * c + t] += s.values[m * c + t].signum() * total;
                    }
                }
                vec![ds]
            }))
    }

    /// Matrix inverse; fails on singular or badly conditioned input.
    pub fn inverse(self) -> Result<Var<'t>> {
        let a = self.value();
        let (n, m) = a.dims();
        if n != m {
            return Err(Error::shape("inverse", format!("{n}x{m} is not square")));
        }
        let mat = DMatrix::from_row_slice(n, n, &a.values);
        let inv = mat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("{n}x{n} matrix is not invertible")))?;
        let cond = norm1(&mat) * norm1(&inv);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::Singular(format!(
                "condition estimate {cond:.3e} exceeds {MAX_CONDITION:.0e}"
            )));
        }
        let inv_rows: Vec<f64> = inv.transpose().iter().copied().collect();
        let inv_t = transpose_raw(&inv_rows, n, n);
        Ok(self
            .tape
            .push(Tensor::raw(n, n, inv_rows), &[self.id], move |g| {
                let d = mm(&mm(&inv_t, n, n, g, n), n, n, &inv_t, n);
                vec![d.into_iter().map(|v| -v).collect()]
            }))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims();
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {r}x{c}", start + len),
            ));
        }
        let (orows, ocols) = if axis == 0 { (len, c) } else { (r, len) };
        let index = move |i: usize, j: usize| {
            if axis == 0 {
                (start + i) * c + j
            } else {
                i * c + start + j
            }
        };
        let out = (0..orows)
            .flat_map(|i| (0..ocols).map(move |j| (i, j)))
            .map(|(i, j)| a.values[index(i, j)])
            .collect();
        Ok(self
            .tape
            .push(Tensor::raw(orows, ocols, out), &[self.id], move |g| {
                let mut d = vec![0.0; r * c];
                for i in 0..orows {
                    for j in 0..ocols {
                        d[index(i, j)] = g[i * ocols + j];
                    }
                }
                vec![d]
            }))
    }
}

/// `x · w + b` with `b` broadcast over rows.
pub fn mlp_layer<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row_broadcast(b)
}

/// Gated recurrent unit parameters, input size `i` and hidden size `h`:
/// `w_i*` are `i × h`, `w_h*` are `h × h`, biases `1 × h`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams<'t> {
    pub w_ir: Var<'t>,
    pub w_iz: Var<'t>,
    pub w_in: Var<'t>,
    pub w_hr: Var<'t>,
    pub w_hz: Var<'t>,
    pub w_hn: Var<'t>,
    pub b_ir: Var<'t>,
    pub b_iz: Var<'t>,
    pub b_in: Var<'t>,
    pub b_hr: Var<'t>,
    pub b_hz: Var<'t>,
    pub b_hn: Var<'t>,
}

/// One GRU step over a batch of rows:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<'t>(input: Var<'t>, state: Var<'t>, p: &GruParams<'t>) -> Result<Var<'t>> {
    let (rows, hidden) = state.dims();
    if input.dims().0 != rows || p.w_hr.dims() != (hidden, hidden) {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "input {:?}, state {:?}, w_hr {:?}",
                input.dims(),
                state.dims(),
                p.w_hr.dims()
            ),
        ));
    }
    let r = mlp_layer(input, p.w_ir, p.b_ir)?
        .add(mlp_layer(state, p.w_hr, p.b_hr)?)?
        .sigmoid();
    let z = mlp_layer(input, p.w_iz, p.b_iz)?
        .add(mlp_layer(state, p.w_hz, p.b_hz)?)?
        .sigmoid();
    let n = mlp_layer(input, p.w_in, p.b_in)?
        .add(r.mul(mlp_layer(state, p.w_hn, p.b_hn)?)?)?
        .tanh();
    n.add(z.mul(state.sub(n)?)?)
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    binary: String,
    params: Vec<ManifestEntry>,
    metadata: serde_json::Value,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(|t| t.grad = None);
    }

    /// Writes `path` (JSON manifest) and a sidecar `.bin` of little-endian
    /// f64 buffers next to it.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let bin = sidecar(path);
        let mut bytes = Vec::with_capacity(self.n_values() * 8);
        let mut params = Vec::with_capacity(self.len());
        for (name, t) in &self.tensors {
            params.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset: bytes.len() / 8,
                len: t.len(),
            });
            t.values
                .iter()
                .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            binary: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params,
            metadata,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&bin, bytes)?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bytes = fs::read(path.with_file_name(&manifest.binary))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Validation(
                "checkpoint binary length is not a multiple of 8".into(),
            ));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.params {
            let slice = floats.get(e.offset..e.offset + e.len).ok_or_else(|| {
                Error::Validation(format!(
                    "parameter {} extends past the end of the binary",
                    e.name
                ))
            })?;
            store.insert(e.name, Tensor::new(e.shape, slice.to_vec())?);
        }
        Ok((store, manifest.metadata))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Adam with bias correction and no schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter that carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, t) in store.iter_mut() {
            let Some(g) = t.grad.as_ref() else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                t.values[k] -=
                    self.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Largest relative error between tape gradients and central finite
/// differences of the scalar `f` over every entry of every input. The
/// denominator is floored at `1e-3` so that near-zero gradients are
/// compared absolutely.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..inputs[i].len() {
            let orig = xs[i].values[k];
            xs[i].values[k] = orig + h;
            let fp = eval(&xs)?;
            xs[i].values[k] = orig - h;
            let fm = eval(&xs)?;
            xs[i].values[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.values[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn square() -> impl Strategy<Value = (usize, Vec<f64>, Vec<bool>)> {
        (1usize..6).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(-2.0f64..2.0, n * n),
                prop::collection::vec(any::<bool>(), n * n),
            )
        })
    }

    proptest! {
        #[test]
        fn normalized_columns_sum_to_one((n, values, mask) in square()) {
            let tape = Tape::new();
            let x = Tensor::raw(n, n, values);
            let y = tape.constant(x.clone()).masked_column_normalize(&mask, 1e-6).unwrap().value();
            for t in 0..n {
                let rows: Vec<usize> = (0..n).filter(|&i| mask[i * n + t]).collect();
                let sum: f64 = rows.iter().map(|&i| y.get(i, t)).sum();
                if rows.is_empty() {
                    prop_assert!((0..n).all(|i| y.get(i, t) == 0.0));
                } else {
                    prop_assert!((sum - 1.0).abs() < 1e-9, "column {} sums to {}", t, sum);
                    // Shifted columns and nonnegative inputs yield a distribution.
                    let input_sum: f64 = rows.iter().map(|&i| x.get(i, t)).sum();
                    if input_sum < 1e-6 || rows.iter().all(|&i| x.get(i, t) >= 0.0) {
                        prop_assert!(rows.iter().all(|&i| y.get(i, t) >= 0.0));
                    }
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions((n, values, _) in square()) {
            let tape = Tape::new();
            let y = tape.constant(Tensor::raw(n, n, values)).softmax_rows().value();
            for i in 0..n {
                let sum: f64 = (0..n).map(|t| y.get(i, t)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
