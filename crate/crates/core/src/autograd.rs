//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! was computed from. Nodes are created in evaluation order, so walking the
//! tape backwards visits each node after all of its consumers.

use crate::tensor::{
    self, check_affine, gelu_derivative, layer_norm_stats, softmax_row, GeluKind,
    Result, Scalar, Tensor, TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var, GeluKind),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a tensor on the tape as an input. Only leaves created with
    /// `requires_grad` receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let (_, n) = xv.last_axis();
        if rv.numel() != n || rv.rank() != 1 {
            return Err(TensorError::Dimension {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                *d = *d + r;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, row], Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, &[x], Op::Scale(x, s))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax_last(self.value(x));
        self.push(out, &[x], Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        check_affine(xv, gv, bv)?;
        let stats = layer_norm_stats(xv, eps)?;
        let (_, n) = xv.last_axis();
        let mut out = stats.xhat.clone();
        for row in out.chunks_mut(n) {
            for ((v, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * g + b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        let out = tensor::gelu(self.value(x), kind);
        self.push(out, &[x], Op::Gelu(x, kind))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{} out of range for shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, &[x], Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<Vec<_>>>()?;
        let rows = dims.first().map(|d| d.0).ok_or_else(|| {
            TensorError::Contract("concat_cols needs at least one input".into())
        })?;
        if let Some((i, _)) = dims.iter().enumerate().find(|(_, d)| d.0 != rows) {
            return Err(TensorError::Dimension {
                op: "concat_cols",
                lhs: self.value(parts[0]).shape().to_vec(),
                rhs: self.value(parts[i]).shape().to_vec(),
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices (or row vectors) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<Vec<_>>>()?;
        let cols = dims.first().map(|d| d.1).ok_or_else(|| {
            TensorError::Contract("concat_rows needs at least one input".into())
        })?;
        if let Some((i, _)) = dims.iter().enumerate().find(|(_, d)| d.1 != cols) {
            return Err(TensorError::Dimension {
                op: "concat_rows",
                lhs: self.value(parts[0]).shape().to_vec(),
                rhs: self.value(parts[i]).shape().to_vec(),
            });
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Row `index` of a matrix as a `[1 × n]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if index >= r {
            return Err(TensorError::Contract(format!(
                "row {index} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let out = Tensor::new(vec![1, c], xv.data()[index * c..(index + 1) * c].to_vec())?;
        Ok(self.push(out, &[x], Op::Row(x, index)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of_f64(v.numel() as f64));
        self.push(out, &[x], Op::Mean(x))
    }

    /// Mean negative log-likelihood of `labels` under the row softmax of
    /// `logits[B × C]`, evaluated with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2()?;
        if labels.len() != b {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, (&label, p)) in lv
            .data()
            .chunks(c)
            .zip(labels.iter().zip(probs.chunks_mut(c)))
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[label]);
            softmax_row(p);
        }
        let out = Tensor::scalar(total / T::of_f64(b as f64));
        Ok(self.push(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// them. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                let node = &mut self.nodes[i];
                node.grad = Some(match node.grad.take() {
                    Some(prev) => {
                        let mut prev = prev.into_vec();
                        for (p, v) in prev.iter_mut().zip(&g) {
                            *p = *p + *v;
                        }
                        Tensor::new(shape, prev)?
                    }
                    None => Tensor::new(shape, g)?,
                });
                continue;
            }
            for (input, contribution) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out_shape = node.value.shape().to_vec();
        let upstream = || Tensor::new(out_shape.clone(), g.to_vec());
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let dc = upstream()?;
                let da = tensor::matmul_nt(&dc, val(*b))?;
                let db = tensor::matmul_tn(val(*a), &dc)?;
                vec![(*a, da.into_vec()), (*b, db.into_vec())]
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let dc = upstream()?;
                let da = tensor::matmul(&dc, val(*b))?;
                let db = tensor::matmul_tn(&dc, val(*a))?;
                vec![(*a, da.into_vec()), (*b, db.into_vec())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(x, row) => {
                let n = val(*row).numel();
                let mut dr = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    for (d, &v) in dr.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                vec![(*x, g.to_vec()), (*row, dr)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let db = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, n) = node.value.last_axis();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let n = gam.len();
                let nf = T::of_f64(n as f64);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = vec![T::zero(); g.len()];
                for (((gr, xr), dr), &r) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .zip(rstd)
                {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..n {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dxh = gr[j] * gam[j];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xr[j];
                    }
                    for j in 0..n {
                        let dxh = gr[j] * gam[j];
                        dr[j] = r / nf * (nf * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gelu(x, kind) => {
                let xv = val(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| g * gelu_derivative(x, *kind))
                    .collect();
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let len = g.len() / r;
                let mut dx = vec![T::zero(); r * c];
                for (row, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, c) = val(p).dims2()?;
                    let mut dp = Vec::with_capacity(val(p).numel());
                    for grow in g.chunks(total) {
                        dp.extend_from_slice(&grow[offset..offset + c]);
                    }
                    offset += c;
                    res.push((p, dp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).numel();
                    res.push((p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            Op::Row(x, index) => {
                let (r, c) = val(*x).dims2()?;
                let mut dx = vec![T::zero(); r * c];
                dx[index * c..(index + 1) * c].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / T::of_f64(n as f64); n])]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::of_f64(b as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    dl[row * c + label] = dl[row * c + label] - scale;
                }
                vec![(*logits, dl)]
            }
        })
    }
}
