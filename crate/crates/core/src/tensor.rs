//! Tape-based reverse-mode autodiff over 2-D `f64` arrays.
//!
//! Every tensor in the network is a matrix; images enter as `(H*W, C)` token
//! matrices and convolutions are expressed as gather (im2col) + matmul. The
//! tape records one node per operation, values are computed eagerly, and
//! [`Tape::backward`] walks the node list in reverse accumulating gradients.
//!
//! All math is double precision and single-threaded, so forward passes are
//! bit-reproducible given identical inputs and weights.

use ndarray::{s, Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Row index sentinel for [`Tape::gather_rows`]: produces a zero row and
/// receives no gradient. Used for conv padding.
pub const PAD_ROW: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// `a @ b^T`
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `(m, n) + (1, n)` row broadcast.
    AddRow(NodeId, NodeId),
    /// `x * mul + add`; only the slope matters for gradients.
    Affine(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LogsumexpRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    MinEl(NodeId, NodeId),
    MaxEl(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Elementwise product with a constant matrix (targets, class weights).
    MulConst {
        x: NodeId,
        w: Arc<Array2<f64>>,
    },
    /// `(m, 1)` pick of one column per row.
    SelectColsPerRow {
        x: NodeId,
        cols: Arc<Vec<usize>>,
    },
    /// Identity value, gradient barrier.
    Detach,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root w.r.t. the given node, if any path
    /// reached it. Zero-filled otherwise handling is up to the caller.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.g[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `(1, 1)` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(x).mapv(|e| e * mul + add);
        self.push(v, Op::Affine(x, mul))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(softplus_scalar);
        self.push(v, Op::Softplus(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows_value(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let x_val = self.value(x);
        let mut v = Array2::zeros((x_val.nrows(), 1));
        for (r, row) in x_val.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|e| (e - max).exp()).sum();
            v[[r, 0]] = max + sum.ln();
        }
        self.push(v, Op::LogsumexpRows(x))
    }

    /// Row-wise layer norm with affine parameters `gamma`, `beta` of shape
    /// `(1, n)`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let gamma_v = self.value(gamma);
        let beta_v = self.value(beta);
        let mut v = Array2::zeros(xv.dim());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / n;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, &e) in row.iter().enumerate() {
                v[[r, c]] = (e - mu) * inv * gamma_v[[0, c]] + beta_v[[0, c]];
            }
        }
        self.push(
            v,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn min_el(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        self.push(v, Op::MinEl(a, b))
    }

    pub fn max_el(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        self.push(v, Op::MaxEl(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of `x` selected by `idx`, repeats allowed; [`PAD_ROW`] entries
    /// produce zero rows.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        let mut v = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            if i != PAD_ROW {
                v.row_mut(r).assign(&xv.row(i));
            }
        }
        self.push(v, Op::GatherRows { x, idx })
    }

    /// Row-major reinterpretation to `(rows, cols)`; element count must match.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), rows * cols);
        let flat: Vec<f64> = xv.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(v, Op::MeanAll(x))
    }

    pub fn mul_const(&mut self, x: NodeId, w: Arc<Array2<f64>>) -> NodeId {
        debug_assert_eq!(self.value(x).dim(), w.dim());
        let v = self.value(x) * &*w;
        self.push(v, Op::MulConst { x, w })
    }

    pub fn select_cols_per_row(&mut self, x: NodeId, cols: Arc<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(xv.nrows(), cols.len());
        let mut v = Array2::zeros((cols.len(), 1));
        for (r, &c) in cols.iter().enumerate() {
            v[[r, 0]] = xv[[r, c]];
        }
        self.push(v, Op::SelectColsPerRow { x, cols })
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach)
    }

    /// Reverse pass from `root`, which must be a `(1, 1)` scalar node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.accumulate(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn accumulate(&self, i: usize, gi: &Array2<f64>, g: &mut [Option<Array2<f64>>]) {
        let add_to =
            |g: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| match &mut g[id.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                add_to(g, *a, gi.dot(&self.value(*b).t()));
                add_to(g, *b, self.value(*a).t().dot(gi));
            }
            Op::MatmulNt(a, b) => {
                add_to(g, *a, gi.dot(self.value(*b)));
                add_to(g, *b, gi.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                add_to(g, *a, gi.clone());
                add_to(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                add_to(g, *a, gi.clone());
                add_to(g, *b, -gi);
            }
            Op::Mul(a, b) => {
                add_to(g, *a, gi * self.value(*b));
                add_to(g, *b, gi * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_to(g, *a, gi / bv);
                let y = &self.nodes[i].value;
                add_to(g, *b, -(gi * y / bv));
            }
            Op::AddRow(a, row) => {
                add_to(g, *a, gi.clone());
                add_to(g, *row, gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Affine(x, mul) => {
                add_to(g, *x, gi * *mul);
            }
            Op::Relu(x) => {
                let mask = self.value(*x).mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                add_to(g, *x, gi * &mask);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                add_to(g, *x, gi * y * &y.mapv(|e| 1.0 - e));
            }
            Op::Abs(x) => {
                let sign = self.value(*x).mapv(|e| {
                    if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                add_to(g, *x, gi * &sign);
            }
            Op::Softplus(x) => {
                let d = self.value(*x).mapv(sigmoid_scalar);
                add_to(g, *x, gi * &d);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let dot = (gi * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(g, *x, y * &(gi - &dot));
            }
            Op::LogsumexpRows(x) => {
                let sm = softmax_rows_value(self.value(*x));
                add_to(g, *x, &sm * gi);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let n = xv.ncols() as f64;
                let gamma_v = self.value(*gamma);
                let mut dx = Array2::zeros(xv.dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mu = row.sum() / n;
                    let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&e| (e - mu) * inv).collect();
                    let gg: Vec<f64> = (0..xv.ncols())
                        .map(|c| gi[[r, c]] * gamma_v[[0, c]])
                        .collect();
                    let mean_gg: f64 = gg.iter().sum::<f64>() / n;
                    let mean_gg_xhat: f64 =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = inv * (gg[c] - mean_gg - xhat[c] * mean_gg_xhat);
                        dgamma[[0, c]] += gi[[r, c]] * xhat[c];
                        dbeta[[0, c]] += gi[[r, c]];
                    }
                }
                add_to(g, *x, dx);
                add_to(g, *gamma, dgamma);
                add_to(g, *beta, dbeta);
            }
            Op::MinEl(a, b) | Op::MaxEl(a, b) => {
                // Grad routes to the side that produced the output; ties go to a.
                let av = self.value(*a);
                let y = &self.nodes[i].value;
                let mut mask_a = Array2::zeros(av.dim());
                ndarray::Zip::from(&mut mask_a)
                    .and(av)
                    .and(y)
                    .for_each(|m, &a_e, &y_e| *m = if a_e == y_e { 1.0 } else { 0.0 });
                let mask_b = mask_a.mapv(|e| 1.0 - e);
                add_to(g, *a, gi * &mask_a);
                add_to(g, *b, gi * &mask_b);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                dx.slice_mut(s![.., *start..*start + gi.ncols()]).assign(gi);
                add_to(g, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    add_to(g, p, gi.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                for (r, &ix) in idx.iter().enumerate() {
                    if ix != PAD_ROW {
                        let mut target = dx.row_mut(ix);
                        target += &gi.row(r);
                    }
                }
                add_to(g, *x, dx);
            }
            Op::Reshape(x) => {
                let (m, n) = self.value(*x).dim();
                let flat: Vec<f64> = gi.iter().cloned().collect();
                add_to(g, *x, Array2::from_shape_vec((m, n), flat).unwrap());
            }
            Op::SumAll(x) => {
                let c = gi[[0, 0]];
                add_to(g, *x, Array2::from_elem(self.value(*x).dim(), c));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let c = gi[[0, 0]] / xv.len() as f64;
                add_to(g, *x, Array2::from_elem(xv.dim(), c));
            }
            Op::MulConst { x, w } => {
                add_to(g, *x, gi * &**w);
            }
            Op::SelectColsPerRow { x, cols } => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                for (r, &c) in cols.iter().enumerate() {
                    dx[[r, c]] += gi[[r, 0]];
                }
                add_to(g, *x, dx);
            }
            Op::Detach => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences on every entry of every leaf, compared to
    /// the tape gradients of a scalar-valued graph.
    fn check_grads<F>(leaves: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(ids[li])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(leaf.dim()));
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let mut t = Tape::new();
                        let mut perturbed = leaves.clone();
                        perturbed[li][[r, c]] += delta;
                        let pids: Vec<NodeId> =
                            perturbed.iter().map(|l| t.leaf(l.clone())).collect();
                        let root = build(&mut t, &pids);
                        t.scalar(root)
                    };
                    let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-5,
                        "leaf {li} [{r},{c}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        check_grads(vec![a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]);
            let d = t.relu(c);
            t.sum_all(d)
        });
    }

    #[test]
    fn grad_matmul_nt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 5, 4);
        check_grads(vec![a, b], |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1]);
            let d = t.sigmoid(c);
            t.mean_all(d)
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 4, 3).mapv(|e| e + 3.0); // keep div well away from 0
        check_grads(vec![a, b], |t, ids| {
            let s = t.sub(ids[0], ids[1]);
            let m = t.mul(s, ids[0]);
            let d = t.div(m, ids[1]);
            let ad = t.add(d, ids[0]);
            let af = t.affine(ad, 0.7, -0.2);
            t.sum_all(af)
        });
    }

    #[test]
    fn grad_softmax_logsumexp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, 3, 5);
        let w = Arc::new(randn(&mut rng, 3, 5));
        let wc = Arc::clone(&w);
        check_grads(vec![a.clone()], move |t, ids| {
            let sm = t.softmax_rows(ids[0]);
            let weighted = t.mul_const(sm, Arc::clone(&wc));
            t.sum_all(weighted)
        });
        check_grads(vec![a], |t, ids| {
            let lse = t.logsumexp_rows(ids[0]);
            t.sum_all(lse)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 4, 6);
        let gamma = randn(&mut rng, 1, 6);
        let beta = randn(&mut rng, 1, 6);
        check_grads(vec![x, gamma, beta], |t, ids| {
            let ln = t.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5);
            let sq = t.mul(ln, ln);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_min_max_abs_softplus() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, 4, 4);
        let b = randn(&mut rng, 4, 4);
        check_grads(vec![a, b], |t, ids| {
            let mn = t.min_el(ids[0], ids[1]);
            let mx = t.max_el(ids[0], ids[1]);
            let d = t.sub(mx, mn);
            let ab = t.abs(d);
            let sp = t.softplus(ab);
            t.sum_all(sp)
        });
    }

    #[test]
    fn grad_slice_concat_gather_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 6, 8);
        let idx = Arc::new(vec![0usize, 2, 2, PAD_ROW, 5]);
        check_grads(vec![a], move |t, ids| {
            let left = t.slice_cols(ids[0], 0, 4);
            let right = t.slice_cols(ids[0], 4, 4);
            let swapped = t.concat_cols(&[right, left]);
            let picked = t.gather_rows(swapped, Arc::clone(&idx));
            let wide = t.reshape(picked, 5 * 2, 4);
            let act = t.sigmoid(wide);
            t.mean_all(act)
        });
    }

    #[test]
    fn grad_add_row_select_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, 5, 3);
        let row = randn(&mut rng, 1, 3);
        let cols = Arc::new(vec![0usize, 2, 1, 1, 0]);
        check_grads(vec![a, row], move |t, ids| {
            let shifted = t.add_row(ids[0], ids[1]);
            let lse = t.logsumexp_rows(shifted);
            let picked = t.select_cols_per_row(shifted, Arc::clone(&cols));
            let ce = t.sub(lse, picked);
            t.mean_all(ce)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, 3, 3);
        let mut tape = Tape::new();
        let ida = tape.leaf(a.clone());
        let d = tape.detach(ida);
        let sq = tape.mul(d, d);
        let root = tape.sum_all(sq);
        let grads = tape.backward(root);
        assert!(grads.get(ida).is_none());
        // Value still flows.
        assert_eq!(tape.value(d), &a);
    }

    #[test]
    fn gather_pad_rows_are_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = tape.gather_rows(x, Arc::new(vec![1, PAD_ROW, 0]));
        assert_eq!(tape.value(g), &array![[3.0, 4.0], [0.0, 0.0], [1.0, 2.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, 7, 11));
        let sm = tape.softmax_rows(x);
        for row in tape.value(sm).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::zeros((2, 2)));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(x);
        }));
        assert!(result.is_err());
    }
}
