//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Each forward operation appends a node holding its value; `backward`
//! walks the tape in reverse and accumulates adjoints. Parameters enter the
//! tape through [`Tape::param`], which deduplicates so that a parameter used
//! twice receives the sum of both contributions.

use std::collections::HashMap;

use super::mat::{gemm, Mat};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, group: Option<usize>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    TileRows { x: Var, times: usize },
    MeanRows(Var),
    GroupMeanRows { x: Var, group: usize },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient outside the tape.
    /// The parameter a node was loaded from, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols, wv.rows, "linear: input width {} vs weight rows {}", xv.cols, wv.rows);
        let mut out = Mat::zeros(xv.rows, wv.cols);
        gemm(xv, false, wv, false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols));
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(av, false, bv, false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let m = self.zip_with(a, b, |x, y| x + y);
        self.push(m, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let m = self.zip_with(a, b, |x, y| x - y);
        self.push(m, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let m = self.zip_with(a, b, |x, y| x * y);
        self.push(m, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, x) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let m = self.value(a).map(|x| x * s);
        self.push(m, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let m = self.value(a).map(silu);
        self.push(m, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let m = self.value(a).map(f64::tanh);
        self.push(m, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let m = self.value(a).map(f64::sin);
        self.push(m, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let m = self.value(a).map(f64::cos);
        self.push(m, Op::Cos(a))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let (n, d) = xv.shape();
        assert_eq!(gv.shape(), (1, d));
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                *xhat.at_mut(r, c) = h;
                *out.at_mut(r, c) = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention on pre-projected `q`, `k`, `v`.
    ///
    /// With `group = Some(g)`, `q` and `k` have the same row count and query
    /// `i` only attends to keys in the block `[g·(i/g), g·(i/g) + g)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, group: Option<usize>) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert_eq!(kv.cols, d);
        assert_eq!(vv.shape(), (m, d));
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        if let Some(g) = group {
            assert_eq!(n, m, "grouped attention is self-attention");
            assert!(g > 0 && n % g == 0, "rows {n} not divisible by group {g}");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let span = group.unwrap_or(m);
        let mut probs = vec![0.0; heads * n * span];
        let mut out = Mat::zeros(n, d);
        let mut scores = vec![0.0; span];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let k0 = group.map_or(0, |g| (i / g) * g);
                let qi = &qv.row(i)[off..off + dh];
                let mut mx = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kv.row(k0 + j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let p = &mut probs[(h * n + i) * span..(h * n + i + 1) * span];
                for (pj, s) in p.iter_mut().zip(&scores) {
                    *pj = s / z;
                }
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv.row(k0 + j)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, group, probs })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows);
        let data = xv.data[start * xv.cols..(start + len) * xv.cols].to_vec();
        let cols = xv.cols;
        self.push(Mat::from_vec(len, cols, data), Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(idx.len(), tv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() })
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&xv.data);
        }
        let (r, c) = xv.shape();
        self.push(Mat::from_vec(r * times, c, data), Op::TileRows { x, times })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.col_sums();
        out.scale_assign(1.0 / xv.rows as f64);
        self.push(out, Op::MeanRows(x))
    }

    /// Means over consecutive blocks of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows % group == 0);
        let blocks = xv.rows / group;
        let mut out = Mat::zeros(blocks, xv.cols);
        for r in 0..xv.rows {
            let b = r / group;
            for c in 0..xv.cols {
                out.data[b * xv.cols + c] += xv.at(r, c) / group as f64;
            }
        }
        self.push(out, Op::GroupMeanRows { x, group })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols);
        let m = Mat::from_vec(rows, cols, xv.data.clone());
        self.push(m, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of each logit row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[t];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let n = targets.len() as f64;
        self.push(
            Mat::scalar(loss / n),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Reverse pass from a scalar output. Returns the adjoint of every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        fn acc(grads: &mut [Option<Mat>], v: Var, m: Mat) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                gemm(g, false, wv, true, &mut dx, 0.0);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                gemm(xv, true, g, false, &mut dw, 0.0);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    acc(grads, *b, g.col_sums());
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = Mat::zeros(av.rows, av.cols);
                gemm(g, false, bv, true, &mut da, 0.0);
                let mut db = Mat::zeros(bv.rows, bv.cols);
                gemm(av, true, g, false, &mut db, 0.0);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect());
                let db = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.col_sums());
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(gg, x)| gg * silu_grad(*x)).collect());
                acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&yv.data).map(|(gg, y)| gg * (1.0 - y * y)).collect());
                acc(grads, *a, d);
            }
            Op::Sin(a) => {
                let av = self.value(*a);
                let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(gg, x)| gg * x.cos()).collect());
                acc(grads, *a, d);
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(gg, x)| -gg * x.sin()).collect());
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let (n, d) = xhat.shape();
                let mut dx = Mat::zeros(n, d);
                let mut dg = Mat::zeros(1, d);
                let mut db = Mat::zeros(1, d);
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gv.data[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dg.data[c] += gr[c] * hr[c];
                        db.data[c] += gr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    let dxr = dx.row_mut(r);
                    for c in 0..d {
                        let dh = gr[c] * gv.data[c];
                        dxr[c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::Attention { q, k, v, heads, group, probs } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (n, d) = qv.shape();
                let m = kv.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let span = group.unwrap_or(m);
                let mut dq = Mat::zeros(n, d);
                let mut dk = Mat::zeros(m, d);
                let mut dv = Mat::zeros(m, d);
                let mut dp = vec![0.0; span];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let k0 = group.map_or(0, |gs| (i / gs) * gs);
                        let p = &probs[(h * n + i) * span..(h * n + i + 1) * span];
                        let go = &g.row(i)[off..off + dh];
                        let mut dot = 0.0;
                        for j in 0..span {
                            let vj = &vv.row(k0 + j)[off..off + dh];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += p[j] * dp[j];
                            let dvr = &mut dv.data[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                            for (o, x) in dvr.iter_mut().zip(go) {
                                *o += p[j] * x;
                            }
                        }
                        let qi = &qv.row(i)[off..off + dh];
                        for j in 0..span {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(k0 + j)[off..off + dh];
                            let dqr = &mut dq.data[i * d + off..i * d + off + dh];
                            for (o, x) in dqr.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let dkr = &mut dk.data[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                            for (o, x) in dkr.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let m = Mat::from_vec(r, c, g.data[r0 * c..(r0 + r) * c].to_vec());
                    acc(grads, p, m);
                    r0 += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut m = Mat::zeros(r, c);
                    for rr in 0..r {
                        m.row_mut(rr).copy_from_slice(&g.row(rr)[c0..c0 + c]);
                    }
                    acc(grads, p, m);
                    c0 += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut m = Mat::zeros(r, c);
                m.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                acc(grads, *x, m);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut m = Mat::zeros(r, c);
                for rr in 0..r {
                    m.row_mut(rr)[*start..*start + g.cols].copy_from_slice(g.row(rr));
                }
                acc(grads, *x, m);
            }
            Op::GatherRows { table, idx } => {
                let (r, c) = self.shape(*table);
                let mut m = Mat::zeros(r, c);
                for (gr, &i) in idx.iter().enumerate() {
                    for (o, x) in m.row_mut(i).iter_mut().zip(g.row(gr)) {
                        *o += x;
                    }
                }
                acc(grads, *table, m);
            }
            Op::TileRows { x, times } => {
                let (r, c) = self.shape(*x);
                let mut m = Mat::zeros(r, c);
                for t in 0..*times {
                    for (o, v) in m.data.iter_mut().zip(&g.data[t * r * c..(t + 1) * r * c]) {
                        *o += v;
                    }
                }
                acc(grads, *x, m);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let mut m = Mat::zeros(r, c);
                for rr in 0..r {
                    for (o, v) in m.row_mut(rr).iter_mut().zip(&g.data) {
                        *o = v / r as f64;
                    }
                }
                acc(grads, *x, m);
            }
            Op::GroupMeanRows { x, group } => {
                let (r, c) = self.shape(*x);
                let mut m = Mat::zeros(r, c);
                for rr in 0..r {
                    let b = rr / group;
                    for (o, v) in m.row_mut(rr).iter_mut().zip(g.row(b)) {
                        *o = v / *group as f64;
                    }
                }
                acc(grads, *x, m);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Mat::from_vec(r, c, g.data.clone()));
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Mat::from_vec(r, c, vec![g.data[0]; r * c]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    *d.at_mut(r, t) -= 1.0;
                }
                d.scale_assign(g.data[0] / n);
                acc(grads, *logits, d);
            }
        }
    }
}

/// Adjoints of every tape node after a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that entered the tape.
    pub fn params(&self, tape: &Tape) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = tape
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.of(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(v);
                    Mat::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
