//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-valued operations during a forward pass; calling
//! [`Tape::backward`] propagates adjoints from a scalar output back to every
//! recorded node. The op set is exactly what the encoder forward pass, the
//! two metric heads, and the episode losses need — including adjoints of the
//! SPD log-determinant and SPD solve, both routed through a cached Cholesky
//! factor rather than an explicit inverse.
//!
//! Scalars are 1x1 matrices; row vectors are 1xC.

use crate::numerics::{cholesky, log_det_from_factor, solve_with_factor, Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SumAll(NodeId),
    Trace(NodeId),
    LogDetSpd {
        a: NodeId,
        factor: Matrix,
    },
    SpdSolve {
        a: NodeId,
        b: NodeId,
        factor: Matrix,
    },
    MaxConst(NodeId, f64),
    AddScaledIdentity {
        a: NodeId,
        eps: NodeId,
    },
    AddN(Vec<NodeId>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }
}

/// Records a computation graph of matrix operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!((v.rows(), v.cols()), (1, 1));
        v.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Matrix::from_vec(1, 1, vec![value]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x += k;
        }
        self.push(v, Op::AddConst(a))
    }

    /// Adds a 1xC row to every row of an NxC matrix.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1);
        assert_eq!(m.cols(), r.cols());
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, &rv) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += rv;
            }
        }
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols);
            data.extend_from_slice(v.data());
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let m = self.value(a);
        assert!(start + len <= m.rows());
        let cols = m.cols();
        let data = m.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Matrix::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let m = self.value(a);
        assert!(start + len <= m.cols());
        let mut out = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            out.row_mut(i)
                .copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise mean over rows: NxC -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let n = m.rows() as f64;
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        for v in out.data_mut() {
            *v /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::RowLogSoftmax(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = gelu_val(*x);
        }
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learnable scale and shift (both 1xC).
    pub fn layer_norm(&mut self, x: NodeId, w: NodeId, b: NodeId, eps: f64) -> NodeId {
        let m = self.value(x);
        let c = m.cols() as f64;
        let mut xhat = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows());
        for i in 0..xhat.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let istd = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let (wv, bv) = (self.value(w).clone(), self.value(b).clone());
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, &wj), &bj) in out.row_mut(i).iter_mut().zip(wv.data()).zip(bv.data()) {
                *o = *o * wj + bj;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).trace();
        self.push(Matrix::from_vec(1, 1, vec![t]), Op::Trace(a))
    }

    /// Log-determinant of an SPD node. Fails if the value is not SPD.
    pub fn log_det_spd(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let factor = cholesky(self.value(a))?;
        let v = log_det_from_factor(&factor);
        Ok(self.push(Matrix::from_vec(1, 1, vec![v]), Op::LogDetSpd { a, factor }))
    }

    /// Solves `A X = B` for SPD `A`. Fails if `A` is not SPD.
    pub fn spd_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let factor = cholesky(self.value(a))?;
        let x = solve_with_factor(&factor, self.value(b));
        Ok(self.push(x, Op::SpdSolve { a, b, factor }))
    }

    /// Elementwise `max(a, k)` (used for the shrinkage floor on a scalar).
    pub fn max_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.max(k);
        }
        self.push(v, Op::MaxConst(a, k))
    }

    /// `A + eps * I` where `eps` is a 1x1 node.
    pub fn add_scaled_identity(&mut self, a: NodeId, eps: NodeId) -> NodeId {
        let e = self.scalar(eps);
        let mut v = self.value(a).clone();
        assert!(v.is_square());
        for i in 0..v.rows() {
            v[(i, i)] += e;
        }
        self.push(v, Op::AddScaledIdentity { a, eps })
    }

    /// Sum of same-shape nodes in the given (fixed) order.
    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v = v.add(self.value(p));
        }
        self.push(v, Op::AddN(parts.to_vec()))
    }

    /// Propagates adjoints from a scalar output node back through the tape.
    #[allow(clippy::needless_range_loop)] // row-indexed matrix sweeps
    pub fn backward(&self, output: NodeId) -> Gradients {
        let out_val = self.value(output);
        assert_eq!(
            (out_val.rows(), out_val.cols()),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[output.0] = Matrix::from_vec(1, 1, vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            if g.data().iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_scaled(&mut grads[b.0], &g, -1.0);
                }
                Op::Scale(a, k) => accumulate_scaled(&mut grads[a.0], &g, *k),
                Op::AddConst(a) => accumulate(&mut grads[a.0], &g),
                Op::AddRowBroadcast(a, row) => {
                    accumulate(&mut grads[a.0], &g);
                    let gr = &mut grads[row.0];
                    for i in 0..g.rows() {
                        for (acc, &v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    accumulate(&mut grads[a.0], &gt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let gp = &mut grads[p.0];
                        for i in 0..rows {
                            for (acc, &v) in gp.row_mut(i).iter_mut().zip(g.row(offset + i)) {
                                *acc += v;
                            }
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let ga = &mut grads[a.0];
                    for i in 0..g.rows() {
                        for (acc, &v) in ga.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let ga = &mut grads[a.0];
                    for i in 0..g.rows() {
                        for (j, &v) in g.row(i).iter().enumerate() {
                            ga.row_mut(i)[start + j] += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        let gp = &mut grads[p.0];
                        for i in 0..g.rows() {
                            for (j, acc) in gp.row_mut(i).iter_mut().enumerate() {
                                *acc += g.row(i)[offset + j];
                            }
                        }
                        offset += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a.0].value.rows();
                    let inv = 1.0 / n as f64;
                    let ga = &mut grads[a.0];
                    for i in 0..n {
                        for (acc, &v) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                            *acc += v * inv;
                        }
                    }
                }
                Op::RowSoftmax(a) => {
                    let s = &self.nodes[idx].value;
                    let ga = &mut grads[a.0];
                    for i in 0..s.rows() {
                        let dot: f64 = g.row(i).iter().zip(s.row(i)).map(|(x, y)| x * y).sum();
                        for ((acc, &gi), &si) in
                            ga.row_mut(i).iter_mut().zip(g.row(i)).zip(s.row(i))
                        {
                            *acc += si * (gi - dot);
                        }
                    }
                }
                Op::RowLogSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = &mut grads[a.0];
                    for i in 0..y.rows() {
                        let gsum: f64 = g.row(i).iter().sum();
                        for ((acc, &gi), &yi) in
                            ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i))
                        {
                            *acc += gi - yi.exp() * gsum;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = &mut grads[a.0];
                    for ((acc, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *acc += gi * gelu_grad(xi);
                    }
                }
                Op::LayerNorm {
                    x,
                    w,
                    b,
                    xhat,
                    inv_std,
                } => {
                    let c = xhat.cols() as f64;
                    let wv = &self.nodes[w.0].value;
                    {
                        let gx = &mut grads[x.0];
                        for i in 0..xhat.rows() {
                            let gw: Vec<f64> = g
                                .row(i)
                                .iter()
                                .zip(wv.data())
                                .map(|(gi, wi)| gi * wi)
                                .collect();
                            let mean_gw = gw.iter().sum::<f64>() / c;
                            let mean_gw_xhat =
                                gw.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / c;
                            let istd = inv_std[i];
                            for ((acc, &gwj), &xh) in
                                gx.row_mut(i).iter_mut().zip(&gw).zip(xhat.row(i))
                            {
                                *acc += istd * (gwj - mean_gw - xh * mean_gw_xhat);
                            }
                        }
                    }
                    {
                        let gwacc = &mut grads[w.0];
                        for i in 0..xhat.rows() {
                            for ((acc, &gi), &xh) in
                                gwacc.row_mut(0).iter_mut().zip(g.row(i)).zip(xhat.row(i))
                            {
                                *acc += gi * xh;
                            }
                        }
                    }
                    {
                        let gbacc = &mut grads[b.0];
                        for i in 0..xhat.rows() {
                            for (acc, &gi) in gbacc.row_mut(0).iter_mut().zip(g.row(i)) {
                                *acc += gi;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let gs = g.data()[0];
                    for acc in grads[a.0].data_mut() {
                        *acc += gs;
                    }
                }
                Op::Trace(a) => {
                    let gs = g.data()[0];
                    let ga = &mut grads[a.0];
                    for i in 0..ga.rows() {
                        ga[(i, i)] += gs;
                    }
                }
                Op::LogDetSpd { a, factor } => {
                    // d logdet(A) / dA = A^{-1}
                    let gs = g.data()[0];
                    let n = factor.rows();
                    let inv = solve_with_factor(factor, &Matrix::identity(n));
                    accumulate_scaled(&mut grads[a.0], &inv, gs);
                }
                Op::SpdSolve { a, b, factor } => {
                    // X = A^{-1} B:  dB += A^{-1} G,  dA += -(A^{-1} G) X^T
                    let x = &self.nodes[idx].value;
                    let ainv_g = solve_with_factor(factor, &g);
                    accumulate(&mut grads[b.0], &ainv_g);
                    let ga = ainv_g.matmul(&x.transpose());
                    accumulate_scaled(&mut grads[a.0], &ga, -1.0);
                }
                Op::MaxConst(a, k) => {
                    let x = &self.nodes[a.0].value;
                    let ga = &mut grads[a.0];
                    for ((acc, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xi > *k {
                            *acc += gi;
                        }
                    }
                }
                Op::AddScaledIdentity { a, eps } => {
                    accumulate(&mut grads[a.0], &g);
                    let mut tr = 0.0;
                    for i in 0..g.rows() {
                        tr += g[(i, i)];
                    }
                    grads[eps.0].data_mut()[0] += tr;
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads[p.0], &g);
                    }
                }
            }
            grads[idx] = g;
        }
        Gradients { grads }
    }
}

fn accumulate(acc: &mut Matrix, g: &Matrix) {
    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v;
    }
}

fn accumulate_scaled(acc: &mut Matrix, g: &Matrix, k: f64) {
    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v * k;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
