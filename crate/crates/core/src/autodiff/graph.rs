//! Tape of recorded operations and its reverse-mode sweep.

use crate::autodiff::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { key: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mean { input: Var, axis: usize },
    Sum { input: Var, axis: usize },
    SumAll(Var),
    Select { input: Var, cols: Vec<usize> },
    ScalarWithGrad { input: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Topologically ordered record of a forward computation.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// A node is recorded with its operation only when at least one input
/// requires a gradient; otherwise it is stored as a constant.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Iteration helper for reductions along one axis of a `rows × cols` matrix.
/// Returns `(line count, line length, index fn)`.
fn lines(rows: usize, cols: usize, axis: usize) -> (usize, usize, impl Fn(usize, usize) -> usize) {
    let along_rows = axis == 1;
    let (n_lines, len) = if along_rows { (rows, cols) } else { (cols, rows) };
    (n_lines, len, move |line: usize, i: usize| {
        if along_rows {
            line * cols + i
        } else {
            i * cols + line
        }
    })
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Argument(format!("axis {axis} out of range for a matrix")));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// A free input that is differentiated against when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { key: None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// A trainable parameter leaf identified by `key` in the resulting
    /// [`Gradients`].
    pub fn param(&mut self, value: Tensor, key: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { key: Some(key) },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf { key: None } };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Row-broadcast addition of a bias vector of length `cols`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let tb = self.value(bias);
        if tb.numel() != c || tb.rows() != 1 {
            return Err(Error::Shape(format!(
                "bias {:?} does not broadcast over {:?}",
                tb.shape(),
                self.value(x).shape()
            )));
        }
        let b = tb.data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (v, bj) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *v += bj;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a]))
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis(axis)?;
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| match self.value(p).shape() {
                [r, c] => Ok((*r, *c)),
                s => Err(Error::Shape(format!("concat needs matrices, got {s:?}"))),
            })
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let (rows, cols, data) = if axis == 0 {
            if let Some(bad) = dims.iter().find(|d| d.1 != c0) {
                return Err(Error::Shape(format!(
                    "concat along rows of {:?} and {:?}",
                    [r0, c0],
                    [bad.0, bad.1]
                )));
            }
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            (dims.iter().map(|d| d.0).sum(), c0, data)
        } else {
            if let Some(bad) = dims.iter().find(|d| d.0 != r0) {
                return Err(Error::Shape(format!(
                    "concat along columns of {:?} and {:?}",
                    [r0, c0],
                    [bad.0, bad.1]
                )));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            (r0, cols, data)
        };
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Half-open range `[start, end)` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_axis(axis)?;
        let t = self.value(a);
        let (r, c) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("slice needs a matrix, got {s:?}"))),
        };
        let extent = if axis == 0 { r } else { c };
        if start > end || end > extent {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                t.shape()
            )));
        }
        let (shape, data) = if axis == 0 {
            (vec![end - start, c], t.data()[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
            }
            (vec![r, w], data)
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = self.dims(a)?;
        let t = self.value(a);
        let mut out = t.data().to_vec();
        let (n, len, idx) = lines(r, c, axis);
        for l in 0..n {
            let m = (0..len).map(|i| out[idx(l, i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..len {
                let e = (out[idx(l, i)] - m).exp();
                out[idx(l, i)] = e;
                z += e;
            }
            for i in 0..len {
                out[idx(l, i)] /= z;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, &[a]))
    }

    /// Log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = self.dims(a)?;
        let t = self.value(a);
        let mut out = t.data().to_vec();
        let (n, len, idx) = lines(r, c, axis);
        for l in 0..n {
            let m = (0..len).map(|i| out[idx(l, i)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|i| (out[idx(l, i)] - m).exp()).sum();
            let lse = m + z.ln();
            for i in 0..len {
                out[idx(l, i)] -= lse;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { input: a, axis }, &[a]))
    }

    /// Per-row normalization followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::Shape(format!(
                    "layer_norm affine {:?} against input {:?}",
                    self.value(p).shape(),
                    self.value(x).shape()
                )));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(a), &[a])
    }

    /// Gather rows of `table` (vocab × width) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, w) = match t.shape() {
            [v, w] => (*v, *w),
            s => return Err(Error::Shape(format!("embedding table must be a matrix, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Argument(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(&t.data()[id * w..(id + 1) * w]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), w], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = self.dims(a)?;
        let (n, len, idx) = lines(r, c, axis);
        let src = self.value(a).data();
        let out: Vec<f64> = (0..n)
            .map(|l| {
                let s: f64 = (0..len).map(|i| src[idx(l, i)]).sum();
                if mean {
                    s / len as f64
                } else {
                    s
                }
            })
            .collect();
        let shape = if axis == 0 { vec![1, c] } else { vec![r, 1] };
        let op = if mean {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a]))
    }

    /// Mean along `axis`, keeping the reduced dimension with extent 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum along `axis`, keeping the reduced dimension with extent 1.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Picks `x[i, cols[i]]` for every row, producing a vector.
    pub fn select(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if cols.len() != r {
            return Err(Error::Shape(format!(
                "select of {} indices from {:?}",
                cols.len(),
                self.value(a).shape()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Argument(format!("column {bad} outside {c} columns")));
        }
        let src = self.value(a).data();
        let data = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![r], data),
            Op::Select {
                input: a,
                cols: cols.to_vec(),
            },
            &[a],
        ))
    }

    /// Records a scalar whose gradient with respect to `input` has already
    /// been computed (used by losses with their own backward recursions).
    pub(crate) fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        debug_assert_eq!(grad.shape(), self.value(input).shape());
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { input, grad }, &[input])
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Forward values are never modified, so calling this repeatedly returns
    /// identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { key }, true) = (&node.op, node.requires_grad) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                leaves.push((Var(i), *key, g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let (r, c) = g.dims2()?;
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (d, v) in db.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![c, r], d));
            }
            Op::Concat { parts, axis } => {
                let cols = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                    if self.requires_grad(p) {
                        let d = if *axis == 0 {
                            g.data()[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                d.extend_from_slice(
                                    &g.data()[i * cols + offset..i * cols + offset + pc],
                                );
                            }
                            d
                        };
                        self.accumulate(grads, p, Tensor::from_parts(vec![pr, pc], d));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                let mut d = vec![0.0; r * c];
                if *axis == 0 {
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                } else {
                    let w = g.shape()[1];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::Softmax { input, axis } => {
                let (r, c) = out.dims2()?;
                let (n, len, idx) = lines(r, c, *axis);
                let (y, gy) = (out.data(), g.data());
                let mut d = vec![0.0; r * c];
                for l in 0..n {
                    let dot: f64 = (0..len).map(|i| gy[idx(l, i)] * y[idx(l, i)]).sum();
                    for i in 0..len {
                        let k = idx(l, i);
                        d[k] = y[k] * (gy[k] - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmax { input, axis } => {
                let (r, c) = out.dims2()?;
                let (n, len, idx) = lines(r, c, *axis);
                let (y, gy) = (out.data(), g.data());
                let mut d = vec![0.0; r * c];
                for l in 0..n {
                    let total: f64 = (0..len).map(|i| gy[idx(l, i)]).sum();
                    for i in 0..len {
                        let k = idx(l, i);
                        d[k] = gy[k] - y[k].exp() * total;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = out.dims2()?;
                let gy = g.data();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*input) {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dh = gy[i * c + j] * gam[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * c + j];
                        }
                        let inv_n = 1.0 / c as f64;
                        for j in 0..c {
                            let dh = gy[i * c + j] * gam[j];
                            d[i * c + j] =
                                rstd[i] * (dh - inv_n * sum_d - xhat[i * c + j] * inv_n * sum_dx);
                        }
                    }
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::from_parts(shape, d));
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gy[i * c + j] * xhat[i * c + j];
                            db[j] += gy[i * c + j];
                        }
                    }
                    let sg = self.value(*gamma).shape().to_vec();
                    let sb = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_parts(sg, dg));
                    self.accumulate(grads, *beta, Tensor::from_parts(sb, db));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g.data())
                    .map(|(&x, gy)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let w = shape[1];
                let mut d = vec![0.0; shape[0] * w];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        d[id * w + j] += g.data()[row * w + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(shape, d));
            }
            Op::Mean { input, axis } | Op::Sum { input, axis } => {
                let shape = self.value(*input).shape().to_vec();
                let (r, c) = self.value(*input).dims2()?;
                let (n, len, idx) = lines(r, c, *axis);
                let scale = if matches!(op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; r * c];
                for l in 0..n {
                    for i in 0..len {
                        d[idx(l, i)] = g.data()[l] * scale;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::Select { input, cols } => {
                let shape = self.value(*input).shape().to_vec();
                let (r, c) = self.value(*input).dims2()?;
                let mut d = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *input, Tensor::from_parts(shape, d));
            }
            Op::ScalarWithGrad { input, grad } => {
                let s = g.item();
                let d = grad.data().iter().map(|v| v * s).collect();
                self.accumulate(grads, *input, Tensor::from_parts(grad.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

/// Gradients of every differentiable leaf reached by a backward sweep.
/// Leaves that the loss does not depend on receive zeros.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(Var, Option<usize>, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`] or
    /// [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|l| l.0 == v).map(|l| &l.2)
    }

    /// `(key, gradient)` for every parameter leaf, in graph order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.leaves.iter().filter_map(|(_, k, g)| k.map(|k| (k, g)))
    }

    pub fn into_params(self) -> impl Iterator<Item = (usize, Tensor)> {
        self.leaves.into_iter().filter_map(|(_, k, g)| k.map(|k| (k, g)))
    }
}
