use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{matrix_dims, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`Graph`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Softmax {
        x: Var,
        causal: bool,
    },
    LayerNorm(Var),
    MeanRows(Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ReplaceRow {
        x: Var,
        row: usize,
        src: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Pinball {
        pred: Var,
        target: Vec<f64>,
        levels: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Softmax { x, .. }
            | Op::LayerNorm(x)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::ReplaceRow { x, src, .. } => vec![*x, *src],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Pinball { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    /// Activations the backward rule needs beyond the output value.
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep visits each node after all of its consumers.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, saved: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            saved,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            saved: Vec::new(),
            requires_grad: t.requires_grad(),
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        matrix_dims(&self.nodes[v.0].shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    // forward ops

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        if self.shape(b).len() != 2 || self.shape(b)[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let n = self.shape(b)[1];
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Op::MatMul(a, b), shape, out, Vec::new()))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, kb) = self.dims(b)?;
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Op::MatMulNt(a, b), vec![m, n], out, Vec::new()))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(x)?;
        if self.value(r).len() != n {
            return Err(Error::Dimension {
                op,
                left: self.shape(x).to_vec(),
                right: self.shape(r).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds the vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand("add_row", x, r)?;
        let rv = self.value(r);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + rv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddRow(x, r), shape, out, Vec::new()))
    }

    /// Multiplies every row of `x` elementwise by the vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand("mul_row", x, r)?;
        let rv = self.value(r);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * rv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::MulRow(x, r), shape, out, Vec::new()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, c), shape, out, Vec::new())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh(x), shape, out, Vec::new())
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + (n - m)`;
    /// hidden entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if causal && n < m {
            return Err(Error::Dimension {
                op: "causal_softmax_rows",
                left: vec![m, n],
                right: vec![m, m],
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let visible = if causal { i + 1 + (n - m) } else { n };
            let row = &xv[i * n..i * n + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..i * n + visible];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Softmax { x, causal }, shape, out, Vec::new()))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm(x), shape, out, inv_std))
    }

    /// Column means of an `L×d` matrix, returned as a rank-1 `d` vector.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if m == 0 {
            return Err(Error::EmptySequence("mean_over_rows"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Op::MeanRows(x), vec![n], out, Vec::new()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], Vec::new())
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, d) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Vocabulary(format!(
                "row index {bad} out of range for table with {r} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            Vec::new(),
        ))
    }

    /// Stacks matrices (or rank-1 rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence("concat_rows"))?;
        let (_, d) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n) = self.dims(p)?;
            if n != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, d], out, Vec::new()))
    }

    /// Copy of `x` with row `row` replaced by the vector `src`.
    pub fn replace_row(&mut self, x: Var, row: usize, src: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if row >= m || self.value(src).len() != n {
            return Err(Error::Dimension {
                op: "replace_row",
                left: self.shape(x).to_vec(),
                right: self.shape(src).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        out[row * n..(row + 1) * n].copy_from_slice(self.value(src));
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ReplaceRow { x, row, src }, shape, out, Vec::new()))
    }

    pub fn replace_row_0(&mut self, x: Var, src: Var) -> Result<Var> {
        self.replace_row(x, 0, src)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if len == 0 || start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, vec![len, n], out, Vec::new()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, vec![m, len], out, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims(p)?;
            if mp != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], out, Vec::new()))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape, out, Vec::new()))
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits)?;
        if targets.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy_sum",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Vocabulary(format!("target id {bad} outside {n} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[targets[i]];
            for (p, v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![total],
            probs,
        ))
    }

    /// Mean pinball loss `max(q·u, (q-1)·u)` with `u = target - pred`,
    /// one level per element.
    pub fn pinball_mean(&mut self, pred: Var, target: &[f64], levels: &[f64]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || levels.len() != n {
            return Err(Error::Dimension {
                op: "pinball_mean",
                left: self.shape(pred).to_vec(),
                right: vec![target.len(), levels.len()],
            });
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(levels)
            .map(|((&p, &y), &q)| pinball(q, y - p))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Op::Pinball {
                pred,
                target: target.to_vec(),
                levels: levels.to_vec(),
            },
            vec![1],
            vec![loss],
            Vec::new(),
        ))
    }

    // backward

    /// Accumulates `∂loss/∂leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Ordering(format!("loss node {} not in graph", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Rank {
                expected: 0,
                shape: node.shape.clone(),
            });
        }
        if !node.requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut ctx = Ctx {
                nodes,
                grads: &mut grads,
                at: i,
            };
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = matrix_dims(&nodes[a.0].shape)?;
                    let n = nodes[b.0].shape[1];
                    ctx.with(*a, |da| gemm_nt(&g, &nodes[b.0].value, da, m, n, k))?;
                    ctx.with(*b, |db| gemm_tn(&nodes[a.0].value, &g, db, m, k, n))?;
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = matrix_dims(&nodes[a.0].shape)?;
                    let n = nodes[b.0].shape[0];
                    ctx.with(*a, |da| gemm_nn(&g, &nodes[b.0].value, da, m, n, k))?;
                    ctx.with(*b, |db| gemm_tn(&g, &nodes[a.0].value, db, m, n, k))?;
                }
                Op::Add(a, b) => {
                    ctx.with(*a, |da| axpy(da, &g, 1.0))?;
                    ctx.with(*b, |db| axpy(db, &g, 1.0))?;
                }
                Op::Sub(a, b) => {
                    ctx.with(*a, |da| axpy(da, &g, 1.0))?;
                    ctx.with(*b, |db| axpy(db, &g, -1.0))?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    ctx.with(*a, |da| {
                        for ((d, gi), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    })?;
                    ctx.with(*b, |db| {
                        for ((d, gi), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * x;
                        }
                    })?;
                }
                Op::AddRow(x, r) => {
                    let n = nodes[r.0].value.len();
                    ctx.with(*x, |dx| axpy(dx, &g, 1.0))?;
                    ctx.with(*r, |dr| {
                        for (i, gi) in g.iter().enumerate() {
                            dr[i % n] += gi;
                        }
                    })?;
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (&nodes[x.0].value, &nodes[r.0].value);
                    let n = rv.len();
                    ctx.with(*x, |dx| {
                        for (i, (d, gi)) in dx.iter_mut().zip(&g).enumerate() {
                            *d += gi * rv[i % n];
                        }
                    })?;
                    ctx.with(*r, |dr| {
                        for (i, (gi, xi)) in g.iter().zip(xv).enumerate() {
                            dr[i % n] += gi * xi;
                        }
                    })?;
                }
                Op::Scale(x, c) => ctx.with(*x, |dx| axpy(dx, &g, *c))?,
                Op::Tanh(x) => {
                    let y = &node.value;
                    ctx.with(*x, |dx| {
                        for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                            *d += gi * (1.0 - yi * yi);
                        }
                    })?;
                }
                Op::Softmax { x, causal } => {
                    let (m, n) = matrix_dims(&node.shape)?;
                    let y = &node.value;
                    ctx.with(*x, |dx| {
                        for i in 0..m {
                            let visible = if *causal { i + 1 + (n - m) } else { n };
                            let r = i * n..i * n + visible;
                            let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                            for j in r {
                                dx[j] += y[j] * (g[j] - dot);
                            }
                        }
                    })?;
                }
                Op::LayerNorm(x) => {
                    let (m, n) = matrix_dims(&node.shape)?;
                    let y = &node.value;
                    let inv_std = &node.saved;
                    ctx.with(*x, |dx| {
                        for i in 0..m {
                            let r = i * n..(i + 1) * n;
                            let gm = g[r.clone()].iter().sum::<f64>() / n as f64;
                            let gy = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for j in r {
                                dx[j] += inv_std[i] * (g[j] - gm - y[j] * gy);
                            }
                        }
                    })?;
                }
                Op::MeanRows(x) => {
                    let (m, n) = matrix_dims(&nodes[x.0].shape)?;
                    let inv = 1.0 / m as f64;
                    ctx.with(*x, |dx| {
                        for i in 0..m {
                            for (d, gi) in dx[i * n..(i + 1) * n].iter_mut().zip(&g) {
                                *d += gi * inv;
                            }
                        }
                    })?;
                }
                Op::Sum(x) => ctx.with(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0]))?,
                Op::Gather { table, ids } => {
                    let d = *nodes[table.0].shape.last().unwrap();
                    ctx.with(*table, |dt| {
                        for (row, &id) in ids.iter().enumerate() {
                            axpy(&mut dt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d], 1.0);
                        }
                    })?;
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        ctx.with(*p, |dp| axpy(dp, &g[off..off + len], 1.0))?;
                        off += len;
                    }
                }
                Op::ReplaceRow { x, row, src } => {
                    let n = nodes[src.0].value.len();
                    let (lo, hi) = (row * n, (row + 1) * n);
                    ctx.with(*x, |dx| {
                        axpy(&mut dx[..lo], &g[..lo], 1.0);
                        axpy(&mut dx[hi..], &g[hi..], 1.0);
                    })?;
                    ctx.with(*src, |ds| axpy(ds, &g[lo..hi], 1.0))?;
                }
                Op::SliceRows { x, start } => {
                    let n = node.shape[1];
                    let off = start * n;
                    ctx.with(*x, |dx| axpy(&mut dx[off..off + g.len()], &g, 1.0))?;
                }
                Op::SliceCols { x, start } => {
                    let (m, len) = (node.shape[0], node.shape[1]);
                    let (_, n) = matrix_dims(&nodes[x.0].shape)?;
                    ctx.with(*x, |dx| {
                        for i in 0..m {
                            axpy(
                                &mut dx[i * n + start..i * n + start + len],
                                &g[i * len..(i + 1) * len],
                                1.0,
                            );
                        }
                    })?;
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = (node.shape[0], node.shape[1]);
                    let mut col = 0;
                    for p in parts {
                        let (_, w) = matrix_dims(&nodes[p.0].shape)?;
                        ctx.with(*p, |dp| {
                            for i in 0..m {
                                axpy(
                                    &mut dp[i * w..(i + 1) * w],
                                    &g[i * total + col..i * total + col + w],
                                    1.0,
                                );
                            }
                        })?;
                        col += w;
                    }
                }
                Op::Reshape(x) => ctx.with(*x, |dx| axpy(dx, &g, 1.0))?,
                Op::CrossEntropy { logits, targets } => {
                    let n = nodes[logits.0].shape[1];
                    let probs = &node.saved;
                    ctx.with(*logits, |dl| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..n {
                                let p = probs[i * n + j] - if j == t { 1.0 } else { 0.0 };
                                dl[i * n + j] += g[0] * p;
                            }
                        }
                    })?;
                }
                Op::Pinball { pred, target, levels } => {
                    let pv = &nodes[pred.0].value;
                    let scale = g[0] / pv.len() as f64;
                    ctx.with(*pred, |dp| {
                        for i in 0..pv.len() {
                            dp[i] += scale * pinball_slope(levels[i], target[i] - pv[i]);
                        }
                    })?;
                }
            }
        }
        Ok(())
    }
}

struct Ctx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    at: usize,
}

impl Ctx<'_> {
    /// Runs `f` on the gradient buffer of input `v`, allocating it on first use.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if v.0 >= self.at {
            return Err(Error::Ordering(format!(
                "node {} consumes node {} which does not precede it",
                self.at, v.0
            )));
        }
        let input = &self.nodes[v.0];
        if !input.requires_grad {
            return Ok(());
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; input.value.len()]);
        f(buf);
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Pinball loss at level `q` for residual `u = y - ŷ`.
pub fn pinball(q: f64, u: f64) -> f64 {
    (q * u).max((q - 1.0) * u)
}

/// d pinball / d ŷ. At the kink the two one-sided slopes are averaged.
fn pinball_slope(q: f64, u: f64) -> f64 {
    if u > 0.0 {
        -q
    } else if u < 0.0 {
        1.0 - q
    } else {
        0.5 - q
    }
}
