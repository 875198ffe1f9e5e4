//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! Every op records its inputs and whatever forward intermediates its
//! backward pass needs. A node only takes part in backpropagation when one of
//! its inputs does, so data leaves (including teacher-forced states) cut the
//! gradient path by construction.

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec3s(rows: &[[f64; 3]]) -> Self {
        Self::from_vec(rows.len(), 3, rows.iter().flatten().copied().collect())
    }

    pub fn to_vec3s(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.cols, 3);
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha · A · B + beta · C` for strided views (`m×k` times `k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-6;

#[inline]
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · W + b` with `b` a single row.
    Linear(Var, Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        a: Var,
        idx: Arc<[u32]>,
    },
    ConcatCols(Var, Var),
    MeanGroups {
        a: Var,
        group: usize,
    },
    /// Mean over rows of the squared row distance, a 1×1 result.
    Mse(Var, Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that blocks gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Mat::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            &self.value(a).data,
            (k, 1),
            &self.value(b).data,
            (n, 1),
            0.0,
            &mut out.data,
            (n, 1),
        );
        let tracked = self.any_tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), tracked)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k) = self.value(x).shape();
        let (k2, n) = self.value(w).shape();
        assert_eq!(k, k2, "linear input width");
        assert_eq!(self.value(b).shape(), (1, n), "linear bias shape");
        let mut out = Mat::zeros(m, n);
        for r in 0..m {
            out.data[r * n..(r + 1) * n].copy_from_slice(&self.value(b).data);
        }
        gemm(
            m,
            k,
            n,
            1.0,
            &self.value(x).data,
            (k, 1),
            &self.value(w).data,
            (n, 1),
            1.0,
            &mut out.data,
            (n, 1),
        );
        let tracked = self.any_tracked(&[x, w, b]);
        self.push(out, Op::Linear(x, w, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracked = self.any_tracked(&[a, b]);
        self.push(out, Op::Add(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::Scale(a, s), tracked)
    }

    /// Tanh approximation of GELU, evaluated as `x·σ(2y)` since
    /// `(1 + tanh y)/2 = σ(2y)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data.iter_mut() {
            *x *= gelu_gate(*x);
        }
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::Gelu(a), tracked)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (1, n));
        assert_eq!(self.value(beta).shape(), (1, n));
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let cache = if tracked { m } else { 0 };
        let mut xhat = vec![0.0; cache * n];
        let mut rstd = vec![0.0; cache];
        let mut out = Mat::zeros(m, n);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            let dst = &mut out.data[r * n..(r + 1) * n];
            for c in 0..n {
                dst[c] = (row[c] - mean) * rs;
            }
            if tracked {
                rstd[r] = rs;
                xhat[r * n..(r + 1) * n].copy_from_slice(dst);
            }
            for c in 0..n {
                dst[c] = dst[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `n×D`, `k` and `v`
    /// are `m×D`, and the `D` columns are split into `heads` equal slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = self.value(q).shape();
        let (m, dk) = self.value(k).shape();
        assert_eq!(d, dk, "attention key width");
        assert_eq!(self.value(v).shape(), (m, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Mat::zeros(n, d);
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                &self.value(q).data[h * dh..],
                (d, 1),
                &self.value(k).data[h * dh..],
                (1, d),
                0.0,
                p,
                (m, 1),
            );
            for row in p.chunks_exact_mut(m) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            gemm(
                n,
                m,
                dh,
                1.0,
                p,
                (m, 1),
                &self.value(v).data[h * dh..],
                (d, 1),
                0.0,
                &mut out.data[h * dh..],
                (d, 1),
            );
        }
        let tracked = self.any_tracked(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            tracked,
        )
    }

    pub fn gather(&mut self, a: Var, idx: Arc<[u32]>) -> Var {
        let src = self.value(a);
        let n = src.cols;
        let mut out = Mat::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * n..(r + 1) * n].copy_from_slice(src.row(i as usize));
        }
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::Gather { a, idx }, tracked)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.value(a).shape();
        let (mb, nb) = self.value(b).shape();
        assert_eq!(m, mb, "concat row count");
        let mut out = Mat::zeros(m, na + nb);
        for r in 0..m {
            out.data[r * (na + nb)..r * (na + nb) + na].copy_from_slice(self.value(a).row(r));
            out.data[r * (na + nb) + na..(r + 1) * (na + nb)].copy_from_slice(self.value(b).row(r));
        }
        let tracked = self.any_tracked(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), tracked)
    }

    /// Means of consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Var {
        let (m, n) = self.value(a).shape();
        assert!(group > 0 && m % group == 0, "rows must split into groups");
        let mut out = Mat::zeros(m / group, n);
        let src = &self.value(a).data;
        for g in 0..m / group {
            let dst = &mut out.data[g * n..(g + 1) * n];
            for r in g * group..(g + 1) * group {
                for c in 0..n {
                    dst[c] += src[r * n + c];
                }
            }
            dst.iter_mut().for_each(|x| *x /= group as f64);
        }
        let tracked = self.any_tracked(&[a]);
        self.push(out, Op::MeanGroups { a, group }, tracked)
    }

    /// `(1/K) Σ_i ‖a_i − b_i‖²` over the `K` rows.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mse shapes");
        let k = self.value(a).rows.max(1);
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let tracked = self.any_tracked(&[a, b]);
        self.push(Mat::from_vec(1, 1, vec![s / k as f64]), Op::Mse(a, b), tracked)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Grads { grads };
        }
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols;
                let bv = &self.value(*b).data;
                let av = &self.value(*a).data;
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, &g.data, (n, 1), bv, (1, n), 1.0, &mut ga.data, (k, 1));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, av, (1, k), &g.data, (n, 1), 1.0, &mut gb.data, (n, 1));
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = self.value(*x).shape();
                let n = self.value(*w).cols;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(m, n, k, 1.0, &g.data, (n, 1), wv, (1, n), 1.0, &mut gx.data, (k, 1));
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(k, m, n, 1.0, xv, (1, k), &g.data, (n, 1), 1.0, &mut gw.data, (n, 1));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..m {
                        for c in 0..n {
                            gb.data[c] += g.data[r * n + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += s * y;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((dst, &x), &gy) in ga.data.iter_mut().zip(av).zip(&g.data) {
                        let s = gelu_gate(x);
                        let ds = 2.0 * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *dst += gy * (s + x * ds);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).shape();
                let gv = &self.value(*gamma).data;
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            gg.data[c] += g.data[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..m {
                        for c in 0..n {
                            gb.data[c] += g.data[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            dxhat[c] = g.data[r * n + c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx.data[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Gather { a, idx } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = ga.cols;
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for c in 0..n {
                            ga.data[i * n + c] += g.data[r * n + c];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).cols;
                let nb = self.value(*b).cols;
                let w = na + nb;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..ga.rows {
                        for c in 0..na {
                            ga.data[r * na + c] += g.data[r * w + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..gb.rows {
                        for c in 0..nb {
                            gb.data[r * nb + c] += g.data[r * w + na + c];
                        }
                    }
                }
            }
            Op::MeanGroups { a, group } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = ga.cols;
                    let inv = 1.0 / *group as f64;
                    for r in 0..ga.rows {
                        let gr = r / group;
                        for c in 0..n {
                            ga.data[r * n + c] += g.data[gr * n + c] * inv;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let k = self.value(*a).rows.max(1) as f64;
                let scale = 2.0 * g.data[0] / k;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((dst, x), y) in ga.data.iter_mut().zip(av).zip(bv) {
                        *dst += scale * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((dst, x), y) in gb.data.iter_mut().zip(av).zip(bv) {
                        *dst -= scale * (x - y);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (n, d) = self.value(q).shape();
        let m = self.value(k).rows;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.value(q).data;
        let kv = &self.value(k).data;
        let vv = &self.value(v).data;
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            if let Some(gv) = self.acc(grads, v) {
                // dV_h = Pᵀ · dO_h
                gemm(m, n, dh, 1.0, p, (1, m), &g.data[h * dh..], (d, 1), 1.0, &mut gv.data[h * dh..], (d, 1));
            }
            let need_qk = self.nodes[q.0].tracked || self.nodes[k.0].tracked;
            if !need_qk {
                continue;
            }
            // dP = dO_h · V_hᵀ
            gemm(n, dh, m, 1.0, &g.data[h * dh..], (d, 1), &vv[h * dh..], (1, d), 0.0, &mut dp, (m, 1));
            for r in 0..n {
                let pr = &p[r * m..(r + 1) * m];
                let dr = &mut dp[r * m..(r + 1) * m];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            if let Some(gq) = self.acc(grads, q) {
                gemm(n, m, dh, scale, &dp, (m, 1), &kv[h * dh..], (d, 1), 1.0, &mut gq.data[h * dh..], (d, 1));
            }
            if let Some(gk) = self.acc(grads, k) {
                gemm(m, n, dh, scale, &dp, (1, m), &qv[h * dh..], (d, 1), 1.0, &mut gk.data[h * dh..], (d, 1));
            }
        }
    }
}
