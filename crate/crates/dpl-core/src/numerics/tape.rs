//! Eager tape-based reverse-mode differentiation over [`Tensor2D`].
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::grad`]
//! replays the record in reverse, accumulating vector-Jacobian products.
//! Values are materialized at node-creation time, so rebuilding the same
//! graph with the same inputs reproduces every intermediate bit for bit.
//!
//! The op set is the closure needed by the attention engine and the toy
//! encoders: add/scale/product, matmul, transpose, concat/slice, softmax,
//! layer norm, GELU, row normalization, gather, and a fused softmax
//! cross-entropy head.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, softmax_rows_masked, BoolMat, Tensor2D};

const LN_EPS: f64 = 1e-6;

enum BackStep {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// a + factor * b
    AddScaled(usize, usize, f64),
    Hadamard(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SoftmaxRows(usize, Option<BoolMat>),
    Exp(usize),
    SumRows(usize),
    SumAll(usize),
    /// Elementwise a / b on column vectors.
    DivCols(usize, usize),
    /// Row i of the matrix scaled by entry i of a column vector.
    MulColBroadcast(usize, usize),
    /// Entry (i, j) of the matrix minus entry i of a column vector.
    SubColBroadcast(usize, usize),
    /// Matrix plus a 1xC row vector broadcast down the rows.
    AddRowBroadcast(usize, usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Gelu(usize),
    L2NormalizeRows(usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    CrossEntropyMean {
        logits: usize,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor2D,
    step: BackStep,
}

/// Operation record for one forward pass. Single-writer: build one tape per
/// forward pass and do not share it across threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node; cheap to copy, tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input tensor. Gradients w.r.t. any leaf can be queried.
    pub fn leaf(&self, value: Tensor2D) -> Var<'_> {
        self.push(value, BackStep::Leaf)
    }

    fn push(&self, value: Tensor2D, step: BackStep) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, step });
        Var { tape: self, id }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor2D) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a 1x1 `loss` node; returns one gradient tensor per
    /// requested variable (zeros when no path connects it to the loss).
    pub fn grad(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor2D>> {
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.id].value;
        if ln.rows() != 1 || ln.cols() != 1 {
            return Err(Error::InvalidShape(format!(
                "grad needs a 1x1 loss, got {}x{}",
                ln.rows(),
                ln.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor2D::filled(1, 1, 1.0)?);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backstep(&nodes, &mut grads, id, &g)?;
            grads[id] = Some(g);
        }

        wrt.iter()
            .map(|v| match grads[v.id].take() {
                Some(g) => Ok(g),
                None => {
                    let val = &nodes[v.id].value;
                    Tensor2D::zeros(val.rows(), val.cols())
                }
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], id: usize, delta: &Tensor2D) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.axpy_in_place(1.0, delta),
        slot => {
            *slot = Some(delta.clone());
            Ok(())
        }
    }
}

fn backstep(
    nodes: &[Node],
    grads: &mut [Option<Tensor2D>],
    id: usize,
    g: &Tensor2D,
) -> Result<()> {
    match &nodes[id].step {
        BackStep::Leaf => {}
        BackStep::Add(a, b) => {
            accumulate(grads, *a, g)?;
            accumulate(grads, *b, g)?;
        }
        BackStep::Sub(a, b) => {
            accumulate(grads, *a, g)?;
            accumulate(grads, *b, &g.scale(-1.0)?)?;
        }
        BackStep::Scale(a, f) => accumulate(grads, *a, &g.scale(*f)?)?,
        BackStep::AddScaled(a, b, f) => {
            accumulate(grads, *a, g)?;
            accumulate(grads, *b, &g.scale(*f)?)?;
        }
        BackStep::Hadamard(a, b) => {
            accumulate(grads, *a, &g.zip_map(&nodes[*b].value, |gv, bv| gv * bv)?)?;
            accumulate(grads, *b, &g.zip_map(&nodes[*a].value, |gv, av| gv * av)?)?;
        }
        BackStep::MatMul(a, b) => {
            accumulate(grads, *a, &matmul(g, &nodes[*b].value.transpose())?)?;
            accumulate(grads, *b, &matmul(&nodes[*a].value.transpose(), g)?)?;
        }
        BackStep::Transpose(a) => accumulate(grads, *a, &g.transpose())?,
        BackStep::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                accumulate(grads, p, &g.slice_rows(start, rows)?)?;
                start += rows;
            }
        }
        BackStep::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let cols = nodes[p].value.cols();
                accumulate(grads, p, &g.slice_cols(start, cols)?)?;
                start += cols;
            }
        }
        BackStep::SliceRows(a, start) => {
            let src = &nodes[*a].value;
            let mut full = Tensor2D::zeros(src.rows(), src.cols())?;
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    full.set(start + r, c, g.get(r, c));
                }
            }
            accumulate(grads, *a, &full)?;
        }
        BackStep::SliceCols(a, start) => {
            let src = &nodes[*a].value;
            let mut full = Tensor2D::zeros(src.rows(), src.cols())?;
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    full.set(r, start + c, g.get(r, c));
                }
            }
            accumulate(grads, *a, &full)?;
        }
        BackStep::SoftmaxRows(a, _mask) => {
            // dx_ij = p_ij * (g_ij - sum_k g_ik p_ik); masked entries have
            // p = 0, which zeroes their gradient as required.
            let p = &nodes[id].value;
            let mut dx = Tensor2D::zeros(p.rows(), p.cols())?;
            for r in 0..p.rows() {
                let mut dot = 0.0;
                for c in 0..p.cols() {
                    dot += g.get(r, c) * p.get(r, c);
                }
                for c in 0..p.cols() {
                    dx.set(r, c, p.get(r, c) * (g.get(r, c) - dot));
                }
            }
            accumulate(grads, *a, &dx)?;
        }
        BackStep::Exp(a) => {
            accumulate(grads, *a, &g.zip_map(&nodes[id].value, |gv, ev| gv * ev)?)?;
        }
        BackStep::SumRows(a) => {
            let src = &nodes[*a].value;
            let mut dx = Tensor2D::zeros(src.rows(), src.cols())?;
            for r in 0..src.rows() {
                let gr = g.get(r, 0);
                for c in 0..src.cols() {
                    dx.set(r, c, gr);
                }
            }
            accumulate(grads, *a, &dx)?;
        }
        BackStep::SumAll(a) => {
            let src = &nodes[*a].value;
            accumulate(grads, *a, &Tensor2D::filled(src.rows(), src.cols(), g.get(0, 0))?)?;
        }
        BackStep::DivCols(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(grads, *a, &g.zip_map(bv, |gv, b| gv / b)?)?;
            let mut db = Tensor2D::zeros(bv.rows(), 1)?;
            for r in 0..bv.rows() {
                let b = bv.get(r, 0);
                db.set(r, 0, -g.get(r, 0) * av.get(r, 0) / (b * b));
            }
            accumulate(grads, *b, &db)?;
        }
        BackStep::MulColBroadcast(m, c) => {
            let mv = &nodes[*m].value;
            let cv = &nodes[*c].value;
            let mut dm = Tensor2D::zeros(mv.rows(), mv.cols())?;
            let mut dc = Tensor2D::zeros(cv.rows(), 1)?;
            for r in 0..mv.rows() {
                let cr = cv.get(r, 0);
                let mut acc = 0.0;
                for j in 0..mv.cols() {
                    dm.set(r, j, g.get(r, j) * cr);
                    acc += g.get(r, j) * mv.get(r, j);
                }
                dc.set(r, 0, acc);
            }
            accumulate(grads, *m, &dm)?;
            accumulate(grads, *c, &dc)?;
        }
        BackStep::SubColBroadcast(m, c) => {
            accumulate(grads, *m, g)?;
            let cv = &nodes[*c].value;
            let mut dc = Tensor2D::zeros(cv.rows(), 1)?;
            for r in 0..g.rows() {
                let mut acc = 0.0;
                for j in 0..g.cols() {
                    acc += g.get(r, j);
                }
                dc.set(r, 0, -acc);
            }
            accumulate(grads, *c, &dc)?;
        }
        BackStep::AddRowBroadcast(m, rvec) => {
            accumulate(grads, *m, g)?;
            let rv = &nodes[*rvec].value;
            let mut dr = Tensor2D::zeros(1, rv.cols())?;
            for c in 0..g.cols() {
                let mut acc = 0.0;
                for r in 0..g.rows() {
                    acc += g.get(r, c);
                }
                dr.set(0, c, acc);
            }
            accumulate(grads, *rvec, &dr)?;
        }
        BackStep::LayerNormRows { x, gain, bias } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let d = xv.cols() as f64;
            let mut dx = Tensor2D::zeros(xv.rows(), xv.cols())?;
            let mut dgain = Tensor2D::zeros(1, xv.cols())?;
            let mut dbias = Tensor2D::zeros(1, xv.cols())?;
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let s = (var + LN_EPS).sqrt();
                // ghat = upstream grad scaled by the gain
                let mut gh_mean = 0.0;
                let mut ghx_mean = 0.0;
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                let ghat: Vec<f64> = (0..xv.cols())
                    .map(|c| g.get(r, c) * gv.get(0, c))
                    .collect();
                for c in 0..xv.cols() {
                    gh_mean += ghat[c];
                    ghx_mean += ghat[c] * xhat[c];
                    dgain.set(0, c, dgain.get(0, c) + g.get(r, c) * xhat[c]);
                    dbias.set(0, c, dbias.get(0, c) + g.get(r, c));
                }
                gh_mean /= d;
                ghx_mean /= d;
                for c in 0..xv.cols() {
                    dx.set(r, c, (ghat[c] - gh_mean - xhat[c] * ghx_mean) / s);
                }
            }
            accumulate(grads, *x, &dx)?;
            accumulate(grads, *gain, &dgain)?;
            accumulate(grads, *bias, &dbias)?;
        }
        BackStep::Gelu(a) => {
            let xv = &nodes[*a].value;
            let dx = g.zip_map(xv, |gv, x| gv * gelu_derivative(x))?;
            accumulate(grads, *a, &dx)?;
        }
        BackStep::L2NormalizeRows(a) => {
            let xv = &nodes[*a].value;
            let yv = &nodes[id].value;
            let mut dx = Tensor2D::zeros(xv.rows(), xv.cols())?;
            for r in 0..xv.rows() {
                let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = (0..xv.cols()).map(|c| g.get(r, c) * yv.get(r, c)).sum();
                for c in 0..xv.cols() {
                    dx.set(r, c, (g.get(r, c) - yv.get(r, c) * dot) / norm);
                }
            }
            accumulate(grads, *a, &dx)?;
        }
        BackStep::GatherRows { table, indices } => {
            let tv = &nodes[*table].value;
            let mut dt = Tensor2D::zeros(tv.rows(), tv.cols())?;
            for (r, &idx) in indices.iter().enumerate() {
                for c in 0..tv.cols() {
                    dt.set(idx, c, dt.get(idx, c) + g.get(r, c));
                }
            }
            accumulate(grads, *table, &dt)?;
        }
        BackStep::CrossEntropyMean { logits, targets } => {
            let lv = &nodes[*logits].value;
            let probs = softmax_rows_masked(lv, None)?;
            let scale = g.get(0, 0) / targets.len() as f64;
            let mut dl = Tensor2D::zeros(lv.rows(), lv.cols())?;
            for (r, &t) in targets.iter().enumerate() {
                for c in 0..lv.cols() {
                    let indicator = if c == t { 1.0 } else { 0.0 };
                    dl.set(r, c, scale * (probs.get(r, c) - indicator));
                }
            }
            accumulate(grads, *logits, &dl)?;
        }
    }
    Ok(())
}

fn gelu_value(x: f64) -> f64 {
    // tanh approximation of GELU
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor2D {
        self.tape.with_value(self.id, |v| v.clone())
    }

    pub fn rows(&self) -> usize {
        self.tape.with_value(self.id, |v| v.rows())
    }

    pub fn cols(&self) -> usize {
        self.tape.with_value(self.id, |v| v.cols())
    }

    pub fn scalar(&self) -> Result<f64> {
        self.tape.with_value(self.id, |v| {
            if v.rows() == 1 && v.cols() == 1 {
                Ok(v.get(0, 0))
            } else {
                Err(Error::InvalidShape("scalar() on non-1x1 value".into()))
            }
        })
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        value: impl FnOnce(&Tensor2D, &Tensor2D) -> Result<Tensor2D>,
        step: BackStep,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = {
            let nodes = self.tape.nodes.borrow();
            value(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(v, step))
    }

    fn unary(
        &self,
        value: impl FnOnce(&Tensor2D) -> Result<Tensor2D>,
        step: BackStep,
    ) -> Result<Var<'t>> {
        let v = self.tape.with_value(self.id, |t| value(t))?;
        Ok(self.tape.push(v, step))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.add(b), BackStep::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.sub(b), BackStep::Sub(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary(|a| a.scale(factor), BackStep::Scale(self.id, factor))
    }

    /// self + factor * other.
    pub fn add_scaled(&self, other: Var<'t>, factor: f64) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| {
                let mut out = a.clone();
                out.axpy_in_place(factor, b)?;
                Ok(out)
            },
            BackStep::AddScaled(self.id, other.id, factor),
        )
    }

    pub fn hadamard(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.zip_map(b, |x, y| x * y),
            BackStep::Hadamard(self.id, other.id),
        )
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| matmul(a, b), BackStep::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.transpose()), BackStep::Transpose(self.id))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero parts".into()))?
            .tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let tensors: Vec<&Tensor2D> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor2D::concat_rows(&tensors)?
        };
        Ok(tape.push(v, BackStep::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero parts".into()))?
            .tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let tensors: Vec<&Tensor2D> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor2D::concat_cols(&tensors)?
        };
        Ok(tape.push(v, BackStep::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(|a| a.slice_rows(start, len), BackStep::SliceRows(self.id, start))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(|a| a.slice_cols(start, len), BackStep::SliceCols(self.id, start))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.softmax_rows_masked(None)
    }

    pub fn softmax_rows_masked(&self, mask: Option<&BoolMat>) -> Result<Var<'t>> {
        self.unary(
            |a| softmax_rows_masked(a, mask),
            BackStep::SoftmaxRows(self.id, mask.cloned()),
        )
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(|a| a.map(f64::exp), BackStep::Exp(self.id))
    }

    /// Row sums as an Nx1 column.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let sums: Vec<f64> = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                Tensor2D::new(a.rows(), 1, sums)
            },
            BackStep::SumRows(self.id),
        )
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        self.unary(
            |a| Tensor2D::new(1, 1, vec![a.data().iter().sum()]),
            BackStep::SumAll(self.id),
        )
    }

    /// Elementwise division of two Nx1 columns.
    pub fn div_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| {
                if a.cols() != 1 || b.cols() != 1 || a.rows() != b.rows() {
                    return Err(Error::InvalidShape("div_cols wants matching Nx1".into()));
                }
                a.zip_map(b, |x, y| x / y)
            },
            BackStep::DivCols(self.id, other.id),
        )
    }

    /// Scale row i of self by entry i of an Nx1 column.
    pub fn mul_col_broadcast(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            |m, c| {
                if c.cols() != 1 || c.rows() != m.rows() {
                    return Err(Error::InvalidShape("column broadcast shape".into()));
                }
                let mut out = m.clone();
                for r in 0..m.rows() {
                    let f = c.get(r, 0);
                    for j in 0..m.cols() {
                        out.set(r, j, m.get(r, j) * f);
                    }
                }
                Ok(out)
            },
            BackStep::MulColBroadcast(self.id, col.id),
        )
    }

    /// Subtract an Nx1 column from every column of self.
    pub fn sub_col_broadcast(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            |m, c| {
                if c.cols() != 1 || c.rows() != m.rows() {
                    return Err(Error::InvalidShape("column broadcast shape".into()));
                }
                let mut out = m.clone();
                for r in 0..m.rows() {
                    let s = c.get(r, 0);
                    for j in 0..m.cols() {
                        out.set(r, j, m.get(r, j) - s);
                    }
                }
                Ok(out)
            },
            BackStep::SubColBroadcast(self.id, col.id),
        )
    }

    /// Add a 1xC row vector to every row of self.
    pub fn add_row_broadcast(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            |m, r| {
                if r.rows() != 1 || r.cols() != m.cols() {
                    return Err(Error::InvalidShape("row broadcast shape".into()));
                }
                let mut out = m.clone();
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        out.set(i, j, m.get(i, j) + r.get(0, j));
                    }
                }
                Ok(out)
            },
            BackStep::AddRowBroadcast(self.id, row.id),
        )
    }

    /// Per-row layer norm with 1xD gain and bias.
    pub fn layer_norm_rows(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let v = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gv = &nodes[gain.id].value;
            let bv = &nodes[bias.id].value;
            if gv.rows() != 1 || gv.cols() != x.cols() || bv.rows() != 1 || bv.cols() != x.cols() {
                return Err(Error::InvalidShape("layer norm gain/bias must be 1xD".into()));
            }
            let d = x.cols() as f64;
            let mut out = Tensor2D::zeros(x.rows(), x.cols())?;
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let s = (var + LN_EPS).sqrt();
                for c in 0..x.cols() {
                    out.set(r, c, (x.get(r, c) - mean) / s * gv.get(0, c) + bv.get(0, c));
                }
            }
            out
        };
        Ok(self.tape.push(
            v,
            BackStep::LayerNormRows {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
        ))
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary(|a| a.map(gelu_value), BackStep::Gelu(self.id))
    }

    /// Rows rescaled to unit L2 norm. Errors on (near-)zero rows.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let norm = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-100 {
                        return Err(Error::Evaluation(format!("row {r} has zero norm")));
                    }
                    for c in 0..a.cols() {
                        out.set(r, c, a.get(r, c) / norm);
                    }
                }
                Ok(out)
            },
            BackStep::L2NormalizeRows(self.id),
        )
    }

    /// Gather rows of self (a table) by index; gradient scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        self.unary(
            |t| {
                if indices.is_empty() {
                    return Err(Error::InvalidShape("gather of zero rows".into()));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
                    return Err(Error::InvalidShape(format!(
                        "gather index {bad} out of {} rows",
                        t.rows()
                    )));
                }
                let rows: Vec<Vec<f64>> = indices.iter().map(|&i| t.row(i).to_vec()).collect();
                Tensor2D::from_rows(&rows)
            },
            BackStep::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy of BxC logits against per-row targets.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Var<'t>> {
        self.unary(
            |l| {
                if targets.len() != l.rows() {
                    return Err(Error::InvalidShape("one target per logit row".into()));
                }
                if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
                    return Err(Error::InvalidShape(format!(
                        "target class {bad} out of {}",
                        l.cols()
                    )));
                }
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    let row = l.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - l.get(r, t);
                }
                Tensor2D::new(1, 1, vec![total / targets.len() as f64])
            },
            BackStep::CrossEntropyMean {
                logits: self.id,
                targets: targets.to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn grad_of_linear_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor2D::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let loss = x.sum_all().unwrap();
        let g = tape.grad(loss, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor2D::zeros(2, 2).unwrap());
        assert!(tape.grad(x, &[x]).is_err());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor2D::filled(1, 2, 2.0).unwrap());
        let y = tape.leaf(Tensor2D::filled(3, 1, 5.0).unwrap());
        let loss = x.sum_all().unwrap();
        let g = tape.grad(loss, &[y]).unwrap();
        assert_eq!(g[0], Tensor2D::zeros(3, 1).unwrap());
    }

    #[test]
    fn matmul_gradient_hand_case() {
        // loss = sum(a @ b), d loss/da = ones @ b^T, d loss/db = a^T @ ones
        let tape = Tape::new();
        let a = tape.leaf(Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor2D::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let loss = a.matmul(b).unwrap().sum_all().unwrap();
        let g = tape.grad(loss, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[7.0, 11.0]);
        assert_eq!(g[1].data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn replaying_a_graph_is_bit_identical() {
        let build = || {
            let tape = Tape::new();
            let mut rng = RngStream::new(99);
            let x = tape.leaf(Tensor2D::random_normal(3, 4, 1.0, &mut rng).unwrap());
            let w = tape.leaf(Tensor2D::random_normal(4, 4, 1.0, &mut rng).unwrap());
            let y = x
                .matmul(w)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .gelu()
                .unwrap()
                .sum_all()
                .unwrap();
            y.value().get(0, 0).to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = RngStream::new(5);
        let xv = Tensor2D::random_normal(3, 3, 1.0, &mut rng).unwrap();
        let wv = Tensor2D::random_normal(3, 3, 1.0, &mut rng).unwrap();

        let tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(wv.clone());
        let h = x.matmul(w).unwrap().gelu().unwrap();
        let l1 = h.sum_all().unwrap();
        let l2 = h.hadamard(h).unwrap().sum_all().unwrap();
        let lsum = l1.add(l2).unwrap();

        let g1 = tape.grad(l1, &[x]).unwrap();
        let g2 = tape.grad(l2, &[x]).unwrap();
        let gs = tape.grad(lsum, &[x]).unwrap();
        let mut expect = g1[0].clone();
        expect.axpy_in_place(1.0, &g2[0]).unwrap();
        assert!(gs[0].max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor2D::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let picked = table.gather_rows(&[1, 1, 2]).unwrap();
        let loss = picked.sum_all().unwrap();
        let g = tape.grad(loss, &[table]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor2D::from_rows(&[vec![2.0, 0.0, -1.0]]).unwrap());
        let loss = logits.cross_entropy_mean(&[0]).unwrap();
        let p0 = 2.0f64.exp() / (2.0f64.exp() + 1.0 + (-1.0f64).exp());
        assert!((loss.scalar().unwrap() + p0.ln()).abs() < 1e-12);
    }
}
