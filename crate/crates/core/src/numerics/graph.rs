use rand::Rng;

use super::kernels::{gemm, log_softmax_in_place, softmax_in_place};
use super::{check_rate, NumericsError, Tensor, LAYER_NORM_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a convolution fills positions outside the sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Padding {
    /// Length-preserving, filled with zeros.
    Zero,
    /// Length-preserving, filled with a learned `[d_in]` vector.
    Learned(Var),
    /// No padding; output length is `L - k + 1`.
    Valid,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
        seq_len: usize,
        out_len: usize,
        cols: Vec<f64>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Pick {
        x: Var,
        index: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the arena order is already a
/// topological order and [`Graph::backward`] just walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it is not a trainable leaf or the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Interprets a tensor as `[rows, cols]` (vectors are one row).
fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.outer_len(), t.last_dim())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_require_grad(&op),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                rg(a) || rg(b)
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::SliceCols { x, .. }
            | Op::MaxRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Pick { x, .. }
            | Op::Dropout { x, .. }
            | Op::Reshape(x) => rg(x),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::Conv1d {
                x,
                weight,
                bias,
                padding,
                ..
            } => {
                rg(x)
                    || rg(weight)
                    || bias.as_ref().is_some_and(rg)
                    || matches!(padding, Padding::Learned(p) if rg(p))
            }
            Op::GatherRows { table, .. } => rg(table),
            Op::ConcatCols(vs) | Op::Concat(vs) => vs.iter().any(rg),
        }
    }

    /// Adds a leaf. Trainable leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcasts a `[d]` vector over every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.last_dim();
        if tr.len() != d {
            return Err(mismatch("add_row", tx, tr));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(d.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, factor), "scale")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::Invalid(format!(
                "transpose needs a matrix, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    fn map_rows(
        &mut self,
        x: Var,
        name: &'static str,
        f: fn(&mut [f64]),
        op: Op,
    ) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        if d > 0 {
            out.data_mut().chunks_mut(d).for_each(f);
        }
        self.push(out, op, name)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_rows(x, "softmax", softmax_in_place, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_rows(x, "log_softmax", log_softmax_in_place, Op::LogSoftmax(x))
    }

    fn map(
        &mut self,
        x: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map(
            x,
            "sigmoid",
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map(x, "gelu", gelu_scalar, Op::Gelu(x))
    }

    /// Normalizes each slice along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.len() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.outer_len();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let keep = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: if keep { xhat } else { Vec::new() },
            rstd,
        };
        self.push(out, op, "layer_norm")
    }

    /// Convolution over a single `[L, d_in]` sequence. See [`Graph::conv1d_batched`].
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var, NumericsError> {
        let seq_len = self.value(x).outer_len();
        self.conv1d_batched(x, seq_len, weight, bias, padding)
    }

    /// Convolution over `B` stacked sequences of `seq_len` rows each.
    ///
    /// `x` is `[B * seq_len, d_in]` and `weight` is `[k, d_in, d_out]`. Output row
    /// `i` of each sequence is `bias + sum_t x[i - w + t] . weight[t]` with
    /// `w = (k - 1) / 2` for the padded modes and `w = 0` for [`Padding::Valid`].
    pub fn conv1d_batched(
        &mut self,
        x: Var,
        seq_len: usize,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var, NumericsError> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (rows, d_in) = as_matrix(tx);
        if tw.rank() != 3 || tw.shape()[1] != d_in {
            return Err(mismatch("conv1d", tx, tw));
        }
        let (k, d_out) = (tw.shape()[0], tw.shape()[2]);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(NumericsError::Invalid(format!(
                "conv1d: {rows} rows are not a multiple of sequence length {seq_len}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != d_out {
                return Err(mismatch("conv1d", tw, self.value(b)));
            }
        }
        let (half, out_len) = match padding {
            Padding::Valid => {
                if seq_len < k {
                    return Err(NumericsError::Invalid(format!(
                        "conv1d: kernel {k} is longer than sequence {seq_len}"
                    )));
                }
                (0, seq_len - k + 1)
            }
            Padding::Zero | Padding::Learned(_) => {
                if k % 2 == 0 {
                    return Err(NumericsError::EvenKernel(k));
                }
                (k / 2, seq_len)
            }
        };
        let pad_row: Option<&[f64]> = match padding {
            Padding::Learned(p) => {
                let tp = self.value(p);
                if tp.len() != d_in {
                    return Err(mismatch("conv1d", tx, tp));
                }
                Some(tp.data())
            }
            _ => None,
        };
        let batch = rows / seq_len;
        let width = k * d_in;
        let n_out = batch * out_len;
        let mut cols = vec![0.0; n_out * width];
        for b in 0..batch {
            for i in 0..out_len {
                let dst = &mut cols[(b * out_len + i) * width..][..width];
                for t in 0..k {
                    let src = i as isize + t as isize - half as isize;
                    let block = &mut dst[t * d_in..(t + 1) * d_in];
                    if src >= 0 && (src as usize) < seq_len {
                        block.copy_from_slice(tx.row(b * seq_len + src as usize));
                    } else if let Some(p) = pad_row {
                        block.copy_from_slice(p);
                    }
                }
            }
        }
        let mut out = vec![0.0; n_out * d_out];
        if let Some(b) = bias {
            let tb = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(tb);
            }
        }
        gemm(
            n_out,
            width,
            d_out,
            &cols,
            false,
            tw.data(),
            false,
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![n_out, d_out], out)?;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let keep = rg(x)
            || rg(weight)
            || bias.is_some_and(rg)
            || matches!(padding, Padding::Learned(p) if rg(p));
        let op = Op::Conv1d {
            x,
            weight,
            bias,
            padding,
            seq_len,
            out_len,
            cols: if keep { cols } else { Vec::new() },
        };
        self.push(out, op, "conv1d")
    }

    /// Embedding lookup: row `i` of the output is `table[index[i]]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let (n, d) = as_matrix(tt);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(NumericsError::Invalid(format!(
                    "gather_rows: index {i} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![index.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Columns `start..start + len` of a `[rows, cols]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if start + len > c {
            return Err(NumericsError::Invalid(format!(
                "slice_cols: {start}..{} exceeds {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat_cols of nothing".into()))?;
        let r = self.value(*first).outer_len();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.outer_len() != r {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Flattens and joins tensors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::vector(out);
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Column-wise maximum over the rows of `[L, d]`, giving `[d]`.
    ///
    /// Ties route the gradient to the first maximal row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if r == 0 {
            return Err(NumericsError::Invalid("max_rows over zero rows".into()));
        }
        let mut argmax = vec![0usize; c];
        let mut out = t.row(0).to_vec();
        for i in 1..r {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(Tensor::vector(out), Op::MaxRows { x, argmax }, "max_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumericsError::Invalid("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            NumericsError::Invalid(format!("pick: index {index} out of range {}", t.len()))
        })?;
        self.push(Tensor::scalar(v), Op::Pick { x, index }, "pick")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Inverted dropout. Returns `x` itself when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        // Keep only leaf gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.accumulate(grads, *v) {
                        ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                let d = self.value(*row).len().max(1);
                if let Some(gr) = self.accumulate(grads, *row) {
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * f);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dY . B^T
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, ga);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = A^T . dY
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, gb);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim().max(1);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim().max(1);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            out[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(vx[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.accumulate(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                padding,
                seq_len,
                out_len,
                cols,
            } => {
                let tw = self.value(*weight);
                let (k, d_in, d_out) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let width = k * d_in;
                let n_out = g.len() / d_out;
                if let Some(gw) = self.accumulate(grads, *weight) {
                    gemm(width, n_out, d_out, cols, true, g, false, 1.0, gw);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.accumulate(grads, *b) {
                        for gr in g.chunks(d_out) {
                            gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                        }
                    }
                }
                let x_rg = self.nodes[x.0].requires_grad;
                let pad_rg =
                    matches!(padding, Padding::Learned(p) if self.nodes[p.0].requires_grad);
                if !x_rg && !pad_rg {
                    return;
                }
                let mut dcols = vec![0.0; n_out * width];
                gemm(
                    n_out,
                    d_out,
                    width,
                    g,
                    false,
                    tw.data(),
                    true,
                    0.0,
                    &mut dcols,
                );
                let half = match padding {
                    Padding::Valid => 0,
                    _ => k / 2,
                };
                let batch = n_out / out_len;
                let mut gpad = if pad_rg { vec![0.0; d_in] } else { Vec::new() };
                {
                    let mut gx = if x_rg {
                        self.accumulate(grads, *x)
                    } else {
                        None
                    };
                    for b in 0..batch {
                        for i in 0..*out_len {
                            let src_row = &dcols[(b * out_len + i) * width..][..width];
                            for t in 0..k {
                                let block = &src_row[t * d_in..(t + 1) * d_in];
                                let src = i as isize + t as isize - half as isize;
                                if src >= 0 && (src as usize) < *seq_len {
                                    if let Some(gx) = gx.as_deref_mut() {
                                        let r = b * seq_len + src as usize;
                                        let out = &mut gx[r * d_in..(r + 1) * d_in];
                                        out.iter_mut().zip(block).for_each(|(o, v)| *o += v);
                                    }
                                } else if pad_rg {
                                    gpad.iter_mut().zip(block).for_each(|(o, v)| *o += v);
                                }
                            }
                        }
                    }
                }
                if let (Padding::Learned(p), true) = (padding, pad_rg) {
                    if let Some(gp) = self.accumulate(grads, *p) {
                        gp.iter_mut().zip(&gpad).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let d = self.value(*table).last_dim();
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &i) in index.iter().enumerate() {
                        let out = &mut gt[i * d..(i + 1) * d];
                        out.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).last_dim();
                let len = node.value.last_dim();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        let out = &mut gx[r * c + start..r * c + start + len];
                        out.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(gp) = self.accumulate(grads, *p) {
                        for (r, out) in gp.chunks_mut(w.max(1)).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            out.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.accumulate(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(o, v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[i * c + j] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Pick { x, index } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx[*index] += g[0];
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
    }
}
