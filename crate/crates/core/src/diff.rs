//! Minimal reverse-mode differentiation over a recorded operation tape.
//!
//! Nodes hold dense 64-bit matrices (scalars are 1x1). The tape is built
//! eagerly during the forward pass, so intermediate values (e.g. warped point
//! positions) can be inspected to fix data-dependent selections such as
//! nearest-neighbor indices; gradients then flow only through the selected
//! pairs, which is the subgradient convention used by the Chamfer loss.
//!
//! A tape is single-threaded by construction; independent tapes run in
//! parallel across samples and clients.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape's node list (gradient vectors index by this).
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient with respect to a flat parameter vector, same length and layout.
pub type Gradient = Vec<f64>;

const NORM_EPS: f64 = 1e-12;

enum Op {
    Var,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a (n x m) * b (m x p)
    MatMul(NodeId, NodeId),
    /// a (n x d) * b^T (d x p) without materializing the transpose
    MatMulT(NodeId, NodeId),
    /// a (n x d) + row vector b (1 x d) broadcast over rows
    AddRow(NodeId, NodeId),
    /// a (n x d) with row i scaled by w (n x 1)
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// sum of all entries -> 1 x 1
    Sum(NodeId),
    /// per-row sum: n x d -> n x 1
    RowSum(NodeId),
    /// per-row x / max(||x||, 1e-12)
    RowNormalize(NodeId),
    RowSoftmax(NodeId),
    /// out[i] = a[idx[i]]; gradient scatter-adds
    Gather(NodeId, Vec<usize>),
    /// [a | b] along columns
    ConcatCols(NodeId, NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations; record order is topological.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Differentiable leaf.
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Var, true)
    }

    /// Non-differentiable leaf (inputs, labels, fixed geometry).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn binary(&mut self, a: NodeId, b: NodeId, value: Array2<f64>, op: Op) -> NodeId {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    fn unary(&mut self, a: NodeId, value: Array2<f64>, op: Op) -> NodeId {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// a . b^T
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.binary(a, col, v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_axis(Axis(1));
        let n = s.len();
        let v = s.into_shape_with_order((n, 1)).expect("row sum shape");
        self.unary(a, v, Op::RowSum(a))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / n);
        }
        self.unary(a, v, Op::RowNormalize(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.unary(a, v, Op::RowSoftmax(a))
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(j));
        }
        self.unary(a, v, Op::Gather(a, idx))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.nrows(), vb.nrows());
        let mut v = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        v.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        v.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        self.binary(a, b, v, Op::ConcatCols(a, b))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode gradients of a scalar output with respect to every `var`
    /// leaf. Returns one optional matrix per node; only `var` leaves reachable
    /// from the output carry gradients.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Array2<f64>>>> {
        let out = &self.nodes[output.0];
        if out.value.dim() != (1, 1) {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar output, got {:?}",
                out.value.dim()
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Var) {
                grads[i] = adj[i].clone();
            }
        }
        Ok(grads)
    }

    fn accumulate(adj: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut adj[id.0] {
            Some(a) => *a += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, adj: &mut Vec<Option<Array2<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Var | Op::Const => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, g * self.value(*a));
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.needs(*row) {
                    let s = g.sum_axis(Axis(0));
                    let d = s.len();
                    Self::accumulate(
                        adj,
                        *row,
                        s.into_shape_with_order((1, d)).expect("row grad shape"),
                    );
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g * self.value(*col));
                }
                if self.needs(*col) {
                    let s = (g * self.value(*a)).sum_axis(Axis(1));
                    let n = s.len();
                    Self::accumulate(
                        adj,
                        *col,
                        s.into_shape_with_order((n, 1)).expect("col grad shape"),
                    );
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g * *s);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g * &node.value);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g * &node.value.mapv(|y| 1.0 - y * y));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(adj, *a, g * &mask);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let d = self.value(*a).dim();
                    Self::accumulate(adj, *a, Array2::from_elem(d, g[(0, 0)]));
                }
            }
            Op::RowSum(a) => {
                if self.needs(*a) {
                    let d = self.value(*a).dim();
                    let mut out = Array2::zeros(d);
                    for (mut row, gi) in out.rows_mut().into_iter().zip(g.column(0)) {
                        row.fill(*gi);
                    }
                    Self::accumulate(adj, *a, out);
                }
            }
            Op::RowNormalize(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut out = Array2::zeros(x.dim());
                    for ((xr, yr), (gr, mut or)) in x
                        .rows()
                        .into_iter()
                        .zip(y.rows())
                        .zip(g.rows().into_iter().zip(out.rows_mut()))
                    {
                        let n = xr.dot(&xr).sqrt();
                        if n > NORM_EPS {
                            let gy = gr.dot(&yr);
                            for j in 0..xr.len() {
                                or[j] = (gr[j] - gy * yr[j]) / n;
                            }
                        } else {
                            // Clamped branch: y = x / eps.
                            for j in 0..xr.len() {
                                or[j] = gr[j] / NORM_EPS;
                            }
                        }
                    }
                    Self::accumulate(adj, *a, out);
                }
            }
            Op::RowSoftmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut out = Array2::zeros(y.dim());
                    for ((yr, gr), mut or) in y
                        .rows()
                        .into_iter()
                        .zip(g.rows())
                        .zip(out.rows_mut())
                    {
                        let gy = gr.dot(&yr);
                        for j in 0..yr.len() {
                            or[j] = yr[j] * (gr[j] - gy);
                        }
                    }
                    Self::accumulate(adj, *a, out);
                }
            }
            Op::Gather(a, idx) => {
                if self.needs(*a) {
                    let mut out = Array2::zeros(self.value(*a).dim());
                    for (i, &j) in idx.iter().enumerate() {
                        let mut row = out.row_mut(j);
                        row += &g.row(i);
                    }
                    Self::accumulate(adj, *a, out);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
            }
        }
    }
}

/// Compares an analytic gradient against central finite differences on
/// `samples` randomly chosen coordinates.
///
/// Returns max over sampled coordinates of
/// |analytic - numeric| / max(1e-8, |numeric|).
pub fn grad_check<F>(
    mut objective: F,
    analytic: &[f64],
    params: &[f64],
    eps: f64,
    samples: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(analytic.len(), params.len());
    let n = params.len();
    let coords: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates keeps the choice stable across library versions.
        for i in 0..samples {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(samples);
        pool
    };

    let mut work = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = objective(&work);
        work[i] = orig - eps;
        let fm = objective(&work);
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn flat(a: &Array2<f64>) -> Vec<f64> {
        a.iter().copied().collect()
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut t = Tape::new();
        let x = t.var(array![[3.0]]);
        let g = t.backward(x).unwrap();
        assert_eq!(g[0].as_ref().unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::new();
        let x = t.var(array![[3.0]]);
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g[0].as_ref().unwrap()[(0, 0)], 6.0);
    }

    #[test]
    fn product_plus_exp_hand_calculus() {
        // f(x, y) = x*y + exp(y) at x = 2, y = 0: df/dx = 0, df/dy = 3.
        let mut t = Tape::new();
        let x = t.var(array![[2.0]]);
        let y = t.var(array![[0.0]]);
        let xy = t.mul(x, y);
        let ey = t.exp(y);
        let f = t.add(xy, ey);
        let g = t.backward(f).unwrap();
        assert!((g[0].as_ref().unwrap()[(0, 0)] - 0.0).abs() < 1e-15);
        assert!((g[1].as_ref().unwrap()[(0, 0)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.var(array![[1.0, 2.0]]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let params = vec![0.7, -1.3, 2.1];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let analytic: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(f, &analytic, &params, 1e-5, 3, 0);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_constant_objective() {
        let params = vec![0.3, 0.4];
        let f = |_: &[f64]| 42.0;
        let analytic = vec![0.0, 0.0];
        let err = grad_check(f, &analytic, &params, 1e-5, 2, 0);
        assert!(err < 1e-8);
    }

    /// Runs grad_check over a graph builder at random points.
    fn check_op<B>(name: &str, dims: (usize, usize), build: B)
    where
        B: Fn(&mut Tape, NodeId) -> NodeId,
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xd1ff);
        for trial in 0..100 {
            let vals: Vec<f64> = (0..dims.0 * dims.1)
                // Keep magnitudes away from relu/norm kinks.
                .map(|_| {
                    let m: f64 = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let eval = |p: &[f64]| {
                let a = Array2::from_shape_vec(dims, p.to_vec()).unwrap();
                let mut t = Tape::new();
                let x = t.var(a);
                let out = build(&mut t, x);
                let s = t.sum(out);
                t.value(s)[(0, 0)]
            };
            let a = Array2::from_shape_vec(dims, vals.clone()).unwrap();
            let mut t = Tape::new();
            let x = t.var(a);
            let out = build(&mut t, x);
            let s = t.sum(out);
            let grads = t.backward(s).unwrap();
            let analytic = flat(grads[0].as_ref().unwrap());
            let err = grad_check(eval, &analytic, &vals, 1e-6, vals.len(), trial);
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        check_op("exp", (3, 2), |t, x| t.exp(x));
        check_op("tanh", (3, 2), |t, x| t.tanh(x));
        check_op("relu", (3, 2), |t, x| t.relu(x));
        check_op("scale", (2, 3), |t, x| t.scale(x, -1.7));
        check_op("row_sum", (4, 3), |t, x| t.row_sum(x));
        check_op("row_normalize", (4, 3), |t, x| t.row_normalize(x));
        check_op("row_softmax", (3, 4), |t, x| {
            let y = t.row_softmax(x);
            // Weight the probabilities so the gradient is nontrivial.
            let w = t.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
                (i + 2 * j) as f64 * 0.3 - 0.5
            }));
            t.mul(y, w)
        });
        check_op("gather", (5, 2), |t, x| t.gather(x, vec![4, 0, 0, 2]));
        check_op("mul_self", (3, 3), |t, x| t.mul(x, x));
        check_op("matmul_self", (3, 3), |t, x| t.matmul(x, x));
        check_op("matmul_t_self", (3, 3), |t, x| t.matmul_t(x, x));
        check_op("mean", (4, 2), |t, x| t.mean(x));
        check_op("concat_with_const", (3, 2), |t, x| {
            let c = t.constant(Array2::from_elem((3, 2), 0.25));
            let cat = t.concat_cols(x, c);
            t.tanh(cat)
        });
    }

    #[test]
    fn binary_ops_with_two_vars_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let dims = (3, 2);
        let n = dims.0 * dims.1;
        for trial in 0..50 {
            let vals: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |p: &[f64]| {
                let a = Array2::from_shape_vec(dims, p[..n].to_vec()).unwrap();
                let b = Array2::from_shape_vec(dims, p[n..].to_vec()).unwrap();
                let mut t = Tape::new();
                let xa = t.var(a);
                let xb = t.var(b);
                let m = t.mul(xa, xb);
                let d = t.sub(m, xb);
                let e = t.add(d, xa);
                let mt = t.matmul_t(e, xb);
                let s = t.sum(mt);
                t.value(s)[(0, 0)]
            };
            let a = Array2::from_shape_vec(dims, vals[..n].to_vec()).unwrap();
            let b = Array2::from_shape_vec(dims, vals[n..].to_vec()).unwrap();
            let mut t = Tape::new();
            let xa = t.var(a);
            let xb = t.var(b);
            let m = t.mul(xa, xb);
            let d = t.sub(m, xb);
            let e = t.add(d, xa);
            let mt = t.matmul_t(e, xb);
            let s = t.sum(mt);
            let grads = t.backward(s).unwrap();
            let mut analytic = flat(grads[0].as_ref().unwrap());
            analytic.extend(flat(grads[1].as_ref().unwrap()));
            let err = grad_check(eval, &analytic, &vals, 1e-6, 2 * n, trial);
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn add_row_and_mul_col_gradients() {
        let mut t = Tape::new();
        let x = t.var(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.var(array![[0.5, -0.5]]);
        let w = t.var(array![[2.0], [3.0]]);
        let y = t.add_row(x, b);
        let z = t.mul_col(y, w);
        let s = t.sum(z);
        // s = sum_i w_i * sum_j (x_ij + b_j)
        let g = t.backward(s).unwrap();
        let gx = g[0].as_ref().unwrap();
        assert_eq!(gx, &array![[2.0, 2.0], [3.0, 3.0]]);
        let gb = g[1].as_ref().unwrap();
        assert_eq!(gb, &array![[5.0, 5.0]]);
        let gw = g[2].as_ref().unwrap();
        assert_eq!(gw, &array![[1.5 + 1.5], [3.5 + 3.5]]);
    }
}
