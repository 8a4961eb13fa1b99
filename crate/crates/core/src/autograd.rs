//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward pass builds a fresh [`Graph`]; nodes are appended in
//! evaluation order so the backward sweep is a single reverse walk. Shape
//! errors here are programming errors and panic; the public operations in the
//! model modules validate user-facing shapes before touching the tape.

use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    GroupMeanRows(Var, usize),
    ScaleRows(Var, Var),
    MaskOuter(Var, Var),
    WeightedPool {
        weights: Var,
        tokens: Var,
        group: usize,
    },
    Interleave {
        a: Var,
        a_rows: usize,
        b: Var,
        b_rows: usize,
    },
    ConcatCols(Var, Var),
    NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    OrthoPenalty {
        x: Var,
        group: usize,
        residuals: Vec<Matrix>,
    },
    MeanSquaredDiff(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (a trainable parameter or a probe).
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x C` row to every row of an `N x C` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, bias]);
        self.push(out, Op::AddRowBias(x, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::tensor::sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Means of consecutive blocks of `group` rows: `(N*group) x C -> N x C`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows() % group == 0, "group mean shape");
        let n = av.rows() / group;
        let mut out = Matrix::zeros(n, av.cols());
        let inv = 1.0 / group as f64;
        for r in 0..av.rows() {
            let dst = r / group;
            for c in 0..av.cols() {
                let v = out.get(dst, c) + av.get(r, c) * inv;
                out.set(dst, c, v);
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::GroupMeanRows(a, group), ng)
    }

    /// Scales row `r` of `x` (`N x C`) by `s[r]` (`s` is `N x 1`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1), "row scale shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let f = sv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(&[x, s]);
        self.push(out, Op::ScaleRows(x, s), ng)
    }

    /// Row `b*P + i` of the output is `g[b] ⊙ masks[i]`: `(B x D, P x D) -> (B*P) x D`.
    pub fn mask_outer(&mut self, g: Var, masks: Var) -> Var {
        let (gv, mv) = (self.value(g), self.value(masks));
        assert_eq!(gv.cols(), mv.cols(), "mask width");
        let (b, p, d) = (gv.rows(), mv.rows(), gv.cols());
        let mut out = Matrix::zeros(b * p, d);
        for bi in 0..b {
            for i in 0..p {
                let row = out.row_mut(bi * p + i);
                for ((o, x), m) in row.iter_mut().zip(gv.row(bi)).zip(mv.row(i)) {
                    *o = x * m;
                }
            }
        }
        let ng = self.ng(&[g, masks]);
        self.push(out, Op::MaskOuter(g, masks), ng)
    }

    /// Per group of `group` token rows, `weights_bᵀ · tokens_b`:
    /// `((B*L) x Q, (B*L) x D) -> (B*Q) x D`.
    pub fn weighted_pool(&mut self, weights: Var, tokens: Var, group: usize) -> Var {
        let (wv, tv) = (self.value(weights), self.value(tokens));
        assert_eq!(wv.rows(), tv.rows(), "pool rows");
        assert!(group > 0 && tv.rows() % group == 0, "pool group");
        let b = tv.rows() / group;
        let (q, d) = (wv.cols(), tv.cols());
        let mut out = Matrix::zeros(b * q, d);
        for bi in 0..b {
            for l in 0..group {
                let src = bi * group + l;
                let tok = tv.row(src);
                for j in 0..q {
                    let w = wv.get(src, j);
                    let dst = out.row_mut(bi * q + j);
                    for (o, t) in dst.iter_mut().zip(tok) {
                        *o += w * t;
                    }
                }
            }
        }
        let ng = self.ng(&[weights, tokens]);
        self.push(
            out,
            Op::WeightedPool {
                weights,
                tokens,
                group,
            },
            ng,
        )
    }

    /// Interleaves row blocks: `a_rows` rows of `a`, then `b_rows` rows of `b`, per group.
    pub fn interleave(&mut self, a: Var, a_rows: usize, b: Var, b_rows: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "interleave width");
        assert!(a_rows > 0 || b_rows > 0);
        let groups = if a_rows > 0 {
            av.rows() / a_rows
        } else {
            bv.rows() / b_rows
        };
        assert_eq!(av.rows(), groups * a_rows, "interleave a rows");
        assert_eq!(bv.rows(), groups * b_rows, "interleave b rows");
        let k = a_rows + b_rows;
        let mut out = Matrix::zeros(groups * k, av.cols());
        for g in 0..groups {
            for i in 0..a_rows {
                out.row_mut(g * k + i).copy_from_slice(av.row(g * a_rows + i));
            }
            for j in 0..b_rows {
                out.row_mut(g * k + a_rows + j)
                    .copy_from_slice(bv.row(g * b_rows + j));
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            out,
            Op::Interleave {
                a,
                a_rows,
                b,
                b_rows,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat rows");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Matrix::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(av.row(r));
            row[ca..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// `x[r] / (‖x[r]‖ + eps)` for every row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = xv.clone();
        for (r, n) in norms.iter().enumerate() {
            let inv = 1.0 / (n + eps);
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::NormalizeRows { x, eps, norms }, ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::log_softmax(xv.row(r)));
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), xv.cols(), "diag of non-square");
        let out = Matrix::from_fn(xv.rows(), 1, |r, _| xv.get(r, r));
        let ng = self.ng(&[x]);
        self.push(out, Op::Diag(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::scalar(xv.sum() / xv.len() as f64);
        let ng = self.ng(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean over groups of `group` rows of `‖E Eᵀ - I‖_F²`.
    pub fn ortho_penalty(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows() % group == 0, "ortho group");
        let groups = xv.rows() / group;
        let mut residuals = Vec::with_capacity(groups);
        let mut total = 0.0;
        for g in 0..groups {
            let block = xv.slice_rows(g * group, (g + 1) * group);
            let mut gram = Matrix::zeros(group, group);
            gemm(1.0, &block, false, &block, true, 0.0, &mut gram);
            for i in 0..group {
                gram.set(i, i, gram.get(i, i) - 1.0);
            }
            total += gram.data().iter().map(|v| v * v).sum::<f64>();
            residuals.push(gram);
        }
        let out = Matrix::scalar(total / groups.max(1) as f64);
        let ng = self.ng(&[x]);
        self.push(
            out,
            Op::OrthoPenalty {
                x,
                group,
                residuals,
            },
            ng,
        )
    }

    /// Mean of `(a - b)²` over all entries.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape");
        let n = av.len().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(&[a, b]);
        self.push(Matrix::scalar(s / n), Op::MeanSquaredDiff(a, b), ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, true, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, g, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, false, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, g, true, av, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs_grad(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y)))
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.clone().reshaped(r, c));
            }
            Op::GroupMeanRows(a, group) => {
                let (r, c) = self.value(*a).shape();
                let inv = 1.0 / *group as f64;
                let d = Matrix::from_fn(r, c, |i, j| g.get(i / group, j) * inv);
                self.accumulate(grads, *a, d);
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.needs_grad(*x) {
                    let d = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| g.get(r, c) * sv.get(r, 0));
                    self.accumulate(grads, *x, d);
                }
                if self.needs_grad(*s) {
                    let d = Matrix::from_fn(xv.rows(), 1, |r, _| {
                        g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum()
                    });
                    self.accumulate(grads, *s, d);
                }
            }
            Op::MaskOuter(gl, masks) => {
                let (gv, mv) = (self.value(*gl), self.value(*masks));
                let (b, p, d) = (gv.rows(), mv.rows(), gv.cols());
                if self.needs_grad(*gl) {
                    let mut dg = Matrix::zeros(b, d);
                    for bi in 0..b {
                        for i in 0..p {
                            let grow = g.row(bi * p + i);
                            for ((o, gr), m) in dg.row_mut(bi).iter_mut().zip(grow).zip(mv.row(i)) {
                                *o += gr * m;
                            }
                        }
                    }
                    self.accumulate(grads, *gl, dg);
                }
                if self.needs_grad(*masks) {
                    let mut dm = Matrix::zeros(p, d);
                    for bi in 0..b {
                        for i in 0..p {
                            let grow = g.row(bi * p + i);
                            for ((o, gr), x) in dm.row_mut(i).iter_mut().zip(grow).zip(gv.row(bi)) {
                                *o += gr * x;
                            }
                        }
                    }
                    self.accumulate(grads, *masks, dm);
                }
            }
            Op::WeightedPool {
                weights,
                tokens,
                group,
            } => {
                let (wv, tv) = (self.value(*weights), self.value(*tokens));
                let b = tv.rows() / group;
                let q = wv.cols();
                let want_w = self.needs_grad(*weights);
                let want_t = self.needs_grad(*tokens);
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for bi in 0..b {
                    for l in 0..*group {
                        let src = bi * group + l;
                        for j in 0..q {
                            let grow = g.row(bi * q + j);
                            if want_w {
                                let dot: f64 = grow.iter().zip(tv.row(src)).map(|(a, b)| a * b).sum();
                                dw.set(src, j, dw.get(src, j) + dot);
                            }
                            if want_t {
                                let w = wv.get(src, j);
                                for (o, gr) in dt.row_mut(src).iter_mut().zip(grow) {
                                    *o += w * gr;
                                }
                            }
                        }
                    }
                }
                if want_w {
                    self.accumulate(grads, *weights, dw);
                }
                if want_t {
                    self.accumulate(grads, *tokens, dt);
                }
            }
            Op::Interleave {
                a,
                a_rows,
                b,
                b_rows,
            } => {
                let k = a_rows + b_rows;
                let groups = g.rows() / k;
                if self.needs_grad(*a) {
                    let mut da = Matrix::zeros(groups * a_rows, g.cols());
                    for gi in 0..groups {
                        for i in 0..*a_rows {
                            da.row_mut(gi * a_rows + i).copy_from_slice(g.row(gi * k + i));
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = Matrix::zeros(groups * b_rows, g.cols());
                    for gi in 0..groups {
                        for j in 0..*b_rows {
                            db.row_mut(gi * b_rows + j)
                                .copy_from_slice(g.row(gi * k + a_rows + j));
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.needs_grad(*a) {
                    let d = Matrix::from_fn(g.rows(), ca, |r, c| g.get(r, c));
                    self.accumulate(grads, *a, d);
                }
                if self.needs_grad(*b) {
                    let d = Matrix::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c));
                    self.accumulate(grads, *b, d);
                }
            }
            Op::NormalizeRows { x, eps, norms } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &n) in norms.iter().enumerate() {
                    let denom = n + eps;
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let proj = if n > 0.0 {
                        gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / (n * denom * denom)
                    } else {
                        0.0
                    };
                    for ((o, gi), xi) in d.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *o = gi / denom - xi * proj;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, gi), y) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                        *o = gi - y.exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Diag(x) => {
                let n = g.rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                let v = g.get(0, 0) / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, v));
            }
            Op::OrthoPenalty {
                x,
                group,
                residuals,
            } => {
                let xv = self.value(*x);
                let scale = 4.0 * g.get(0, 0) / residuals.len().max(1) as f64;
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (gi, res) in residuals.iter().enumerate() {
                    let block = xv.slice_rows(gi * group, (gi + 1) * group);
                    let mut db = Matrix::zeros(*group, xv.cols());
                    gemm(scale, res, false, &block, false, 0.0, &mut db);
                    for i in 0..*group {
                        d.row_mut(gi * group + i).copy_from_slice(db.row(i));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::MeanSquaredDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = 2.0 * g.get(0, 0) / av.len().max(1) as f64;
                let da = av.zip_map(bv, |x, y| f * (x - y));
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`, used by gradient checks.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Max-norm relative error between two gradients, floored so exact zeros compare sanely.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-8);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Builds `f` on a fresh graph with `x` as the single variable and checks
    /// its analytic gradient against central differences.
    fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_gradient(&x, 1e-6, |p| {
            let mut g = Graph::new();
            let v = g.variable(p.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_and_matrix_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, 4, 3);
        let bias = random(&mut rng, 1, 3);
        let x = random(&mut rng, 5, 4);
        check(x.clone(), |g, v| {
            let w = g.constant(w.clone());
            let b = g.constant(bias.clone());
            let h = g.matmul(v, w);
            let h = g.add_row_bias(h, b);
            let h = g.tanh(h);
            let s = g.sigmoid(h);
            let m = g.mul(s, h);
            g.sum(m)
        });
        check(x.clone(), |g, v| {
            let t = g.matmul_t(v, v);
            let r = g.relu(t);
            let d = g.diag(r);
            g.mean(d)
        });
        check(x, |g, v| {
            let n = g.normalize_rows(v, 1e-8);
            let l = g.matmul_t(n, n);
            let l = g.scale(l, 3.0);
            let ls = g.log_softmax_rows(l);
            let d = g.diag(ls);
            g.mean(d)
        });
    }

    #[test]
    fn structural_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let masks = random(&mut rng, 3, 4);
        let weights = random(&mut rng, 6, 2);
        let other = random(&mut rng, 4, 4);
        let probe = random(&mut rng, 10, 4);
        check(random(&mut rng, 2, 4), |g, v| {
            let m = g.constant(masks.clone());
            let o = g.mask_outer(v, m);
            let p = g.constant(probe.slice_rows(0, 6));
            let prod = g.mul(o, p);
            g.sum(prod)
        });
        check(masks.clone(), |g, v| {
            let x = g.constant(other.slice_rows(0, 2));
            let o = g.mask_outer(x, v);
            let sq = g.mul(o, o);
            g.sum(sq)
        });
        check(random(&mut rng, 6, 4), |g, v| {
            let w = g.constant(weights.clone());
            let pooled = g.weighted_pool(w, v, 3);
            let p = g.constant(probe.slice_rows(0, 4));
            let prod = g.mul(pooled, p);
            g.sum(prod)
        });
        check(weights.clone(), |g, v| {
            let t = g.constant(probe.slice_rows(0, 6));
            let pooled = g.weighted_pool(v, t, 3);
            let sq = g.mul(pooled, pooled);
            g.sum(sq)
        });
        check(random(&mut rng, 4, 4), |g, v| {
            let b = g.constant(other.slice_rows(0, 2));
            let il = g.interleave(v, 2, b, 1);
            let cc = g.concat_cols(il, il);
            let rs = g.reshape(cc, 4, 12);
            let gm = g.group_mean_rows(rs, 2);
            let sq = g.mul(gm, gm);
            g.sum(sq)
        });
        check(random(&mut rng, 6, 1), |g, v| {
            let x = g.constant(probe.slice_rows(0, 6));
            let s = g.scale_rows(x, v);
            let om = g.one_minus(v);
            let s2 = g.scale_rows(x, om);
            let t = g.sub(s, s2);
            let sq = g.mul(t, t);
            g.sum(sq)
        });
        check(random(&mut rng, 6, 4), |g, v| g.ortho_penalty(v, 3));
        check(random(&mut rng, 3, 2), |g, v| {
            let c = g.constant(weights.slice_rows(0, 3));
            g.mean_squared_diff(v, c)
        });
    }

    #[test]
    fn detached_nodes_block_gradients() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().get(0, 0), 2.0);
    }
}
