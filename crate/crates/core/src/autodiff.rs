//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes whose inputs
//! do not require gradients are recorded as values only and skipped during
//! [`Tape::backward`], so frozen weights and target-network passes cost a
//! plain forward evaluation.

use std::sync::Arc;

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Square(Var),
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MulCol(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    TopKGates(Var, Vec<Vec<usize>>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    PickElems(Var, Vec<(usize, usize)>),
    SumAll(Var),
    ColMean(Var),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Mat>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + 1e-5).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::GatherRows(a, rows), &[a])
    }

    /// Rows of `a` added into a zero matrix of `n_rows` rows at `rows`.
    pub fn scatter_rows(&mut self, a: Var, rows: Vec<usize>, n_rows: usize) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((n_rows, x.ncols()));
        for (j, &r) in rows.iter().enumerate() {
            let mut dst = out.row_mut(r);
            dst += &x.row(j);
        }
        self.push(out, Op::ScatterRows(a, rows), &[a])
    }

    /// Scale row `i` of `a` by `c[i, 0]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let x = self.value(a);
        let col = self.value(c);
        assert_eq!(col.ncols(), 1);
        assert_eq!(col.nrows(), x.nrows());
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row *= col[[i, 0]];
        }
        self.push(out, Op::MulCol(a, c), &[a, c])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Per row: softmax over the `k` largest logits, zero elsewhere.
    /// Ties go to the lower index.
    pub fn topk_gates(&mut self, logits: Var, k: usize) -> Var {
        let x = self.value(logits);
        let mut out = Mat::zeros(x.raw_dim());
        let mut selected = Vec::with_capacity(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let idx = top_k(row.as_slice().expect("contiguous row"), k);
            let m = idx.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.iter().map(|&j| (row[j] - m).exp()).sum();
            for &j in &idx {
                out[[i, j]] = (row[j] - m).exp() / z;
            }
            selected.push(idx);
        }
        self.push(out, Op::TopKGates(logits, selected), &[logits])
    }

    /// Multi-head causal self-attention over `rows / seq_len` independent
    /// sequences stacked along the row axis.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.dim();
        assert_eq!(rows % seq_len, 0, "rows must be a multiple of the sequence length");
        assert_eq!(d % heads, 0, "hidden size must divide into heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n_seq = rows / seq_len;
        let qs = qm.as_slice().expect("standard layout");
        let ks = km.as_slice().expect("standard layout");
        let vs = vm.as_slice().expect("standard layout");
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        for b in 0..n_seq {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = (b * seq_len + i) * d + h * hd;
                    let p = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = (b * seq_len + j) * d + h * hd;
                        let s: f64 = (0..hd).map(|t| qs[qi + t] * ks[kj + t]).sum::<f64>() * scale;
                        p[j] = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut().take(i + 1) {
                        *pj = (*pj - m).exp();
                        z += *pj;
                    }
                    for pj in p.iter_mut().take(i + 1) {
                        *pj /= z;
                    }
                    let oi = qi;
                    for j in 0..=i {
                        let vj = (b * seq_len + j) * d + h * hd;
                        let w = p[j];
                        for t in 0..hd {
                            out[oi + t] += w * vs[vj + t];
                        }
                    }
                }
            }
        }
        let out = Mat::from_shape_vec((rows, d), out).expect("shape");
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Column vector of the listed `(row, col)` entries.
    pub fn pick(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let v = Mat::from_shape_fn((idx.len(), 1), |(i, _)| x[idx[i]]);
        self.push(v, Op::PickElems(a, idx), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::ColMean(a), &[a])
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Mat::ones((1, 1)));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = y.mapv(|s| s * (1.0 - s)) * g;
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = self.value(*a) * g * 2.0;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm(a, inv) => {
                let n = y.ncols() as f64;
                let mut d = Mat::zeros(y.raw_dim());
                for (i, ((yr, gr), mut dr)) in y
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(d.rows_mut())
                    .enumerate()
                {
                    let mg = gr.sum() / n;
                    let mgy = gr.dot(&yr) / n;
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *dv = inv[i] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.raw_dim());
                for (j, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(j);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows(a, rows) => {
                self.accumulate(grads, *a, g.select(Axis(0), rows));
            }
            Op::MulCol(a, c) => {
                let x = self.value(*a);
                let col = self.value(*c);
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        row *= col[[i, 0]];
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*c) {
                    let d = Mat::from_shape_fn((x.nrows(), 1), |(i, _)| g.row(i).dot(&x.row(i)));
                    self.accumulate(grads, *c, d);
                }
            }
            Op::Softmax(a) => {
                let mut d = Mat::zeros(y.raw_dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let s = yr.dot(&gr);
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *dv = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = Mat::zeros(y.raw_dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let s = gr.sum();
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *dv = gv - yv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::TopKGates(a, selected) => {
                let mut d = Mat::zeros(y.raw_dim());
                for (i, idx) in selected.iter().enumerate() {
                    let s: f64 = idx.iter().map(|&j| g[[i, j]] * y[[i, j]]).sum();
                    for &j in idx {
                        d[[i, j]] = y[[i, j]] * (g[[i, j]] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::PickElems(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (i, &rc) in idx.iter().enumerate() {
                    d[rc] += g[[i, 0]];
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::ColMean(a) => {
                let src = self.value(*a);
                let n = src.nrows() as f64;
                let mut d = Mat::zeros(src.raw_dim());
                for mut row in d.rows_mut() {
                    row.assign(&(&g.row(0) / n));
                }
                self.accumulate(grads, *a, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.dim();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n_seq = rows / seq_len;
        let (qs, ks, vs) = (
            qm.as_slice().expect("layout"),
            km.as_slice().expect("layout"),
            vm.as_slice().expect("layout"),
        );
        let gs = g.as_standard_layout();
        let gs = gs.as_slice().expect("layout");
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len];
        for b in 0..n_seq {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let oi = (b * seq_len + i) * d + h * hd;
                    let p = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = (b * seq_len + j) * d + h * hd;
                        let mut s = 0.0;
                        for t in 0..hd {
                            s += gs[oi + t] * vs[vj + t];
                            dv[vj + t] += p[j] * gs[oi + t];
                        }
                        dp[j] = s;
                        dot += s * p[j];
                    }
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (b * seq_len + j) * d + h * hd;
                        for t in 0..hd {
                            dq[oi + t] += ds * ks[kj + t];
                            dk[kj + t] += ds * qs[oi + t];
                        }
                    }
                }
            }
        }
        let shape = (rows, d);
        (
            Mat::from_shape_vec(shape, dq).expect("shape"),
            Mat::from_shape_vec(shape, dk).expect("shape"),
            Mat::from_shape_vec(shape, dv).expect("shape"),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
