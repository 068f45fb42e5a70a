use super::tensor::{axpy, dot, matmul_into, Mat, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named trainable tensors in a fixed declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Mat<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat<T>> {
        self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
        }
    }
}

/// A query range attending to a key range of the same attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// A contiguous row range of `src` shifted by one row of a position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub src: Var,
    pub start: usize,
    pub len: usize,
    pub pos_row: usize,
}

enum Op<T> {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Gather { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    MulConst(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        causal: bool,
        /// Per segment: heads x q_len x k_len probabilities.
        probs: Vec<Vec<T>>,
    },
    ConcatRows(Vec<Var>),
    Blocks { blocks: Vec<Block>, table: Var },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Reverse-mode tape over matrix-valued nodes.
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

pub fn gelu_value<T: Real>(x: T) -> T {
    gelu(x).0
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.tensors.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params.tensors[i],
            _ => &self.nodes[v.0].value,
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        let v = self.push(Mat::default(), Op::Param(index));
        self.param_nodes[index] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Row-wise layer normalisation with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let d = xv.cols;
        let mut out = Mat::zeros(xv.rows, d);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); xv.rows];
        let inv_d = T::lit(1.0 / d as f64);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                o[c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| gelu(v).0).collect());
        self.push(out, Op::Gelu(x))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let out = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        self.push(out, Op::MulConst(x, mask))
    }

    /// Multi-head scaled dot-product attention. Each segment's queries attend
    /// only to that segment's keys; with `causal`, query `i` of a segment sees
    /// keys `0..=i` of the same segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = Mat::zeros(qv.rows, d);
        let mut all_probs = Vec::with_capacity(segments.len());
        for seg in &segments {
            let mut probs = vec![T::zero(); heads * seg.q_len * seg.k_len];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seg.q_len {
                    let qi = &qv.row(seg.q_start + i)[cols.clone()];
                    let visible = if causal { (i + 1).min(seg.k_len) } else { seg.k_len };
                    if visible == 0 {
                        continue;
                    }
                    let p = &mut probs[(h * seg.q_len + i) * seg.k_len..(h * seg.q_len + i + 1) * seg.k_len];
                    let mut max = T::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let s = dot(qi, &kv.row(seg.k_start + j)[cols.clone()]) * scale;
                        *pj = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for pj in p.iter_mut().take(visible) {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    let inv = T::one() / sum;
                    let orow = &mut out.row_mut(seg.q_start + i)[cols.clone()];
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        *pj *= inv;
                        axpy(*pj, &vv.row(seg.k_start + j)[cols.clone()], orow);
                    }
                }
            }
            all_probs.push(probs);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                causal,
                probs: all_probs,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let rows = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Concatenate row blocks, adding row `pos_row` of `table` to every row of
    /// its block.
    pub fn blocks_with_position(&mut self, blocks: Vec<Block>, table: Var) -> Var {
        let t = self.value(table);
        let cols = t.cols;
        let rows = blocks.iter().map(|b| b.len).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r = 0;
        for b in &blocks {
            let src = self.value(b.src);
            let pos = t.row(b.pos_row);
            for i in 0..b.len {
                let o = out.row_mut(r);
                for ((oc, &s), &p) in o.iter_mut().zip(src.row(b.start + i)).zip(pos) {
                    *oc = s + p;
                }
                r += 1;
            }
        }
        self.push(out, Op::Blocks { blocks, table })
    }

    /// Mean token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let p = &mut probs[r * lv.cols..(r + 1) * lv.cols];
            let mut sum = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / sum;
            }
            loss += sum.ln() + max - row[t as usize];
        }
        let n = T::lit(targets.len().max(1) as f64);
        self.push(
            Mat::from_vec(1, 1, vec![loss / n]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, &b| a + b);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(x))
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// Gradients of scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Vec<Mat<T>> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        let mut out = self.params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(i) => out[*i].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_bt(bv);
                    let gb = av.matmul_at(&g);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv);
                    let gb = g.matmul_at(av);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let tg = self.slot(&mut grads, *table, t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = tg.row_mut(id as usize);
                        for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = g.cols;
                    let gv = self.value(*gamma).data.clone();
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    let mut dx = Mat::zeros(g.rows, d);
                    let inv_d = T::lit(1.0 / d as f64);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..d {
                            dg[c] += gr[c] * xh[c];
                            db[c] += gr[c];
                            let dxh = gr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        let o = dx.row_mut(r);
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            o[c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *gamma, Mat::from_vec(1, d, dg));
                    self.acc(&mut grads, *beta, Mat::from_vec(1, d, db));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(
                        g.rows,
                        g.cols,
                        xv.data.iter().zip(&g.data).map(|(&v, &gg)| gelu(v).1 * gg).collect(),
                    );
                    self.acc(&mut grads, *x, dx);
                }
                Op::MulConst(x, mask) => {
                    let dx = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(mask).map(|(&a, &m)| a * m).collect());
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, segments, causal, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = T::lit(1.0 / (dh as f64).sqrt());
                    let mut dq = Mat::zeros(qv.rows, d);
                    let mut dk = Mat::zeros(kv.rows, d);
                    let mut dv = Mat::zeros(vv.rows, d);
                    let mut dp = Vec::new();
                    for (seg, p_all) in segments.iter().zip(probs) {
                        dp.resize(seg.k_len, T::zero());
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            for i in 0..seg.q_len {
                                let visible = if *causal { (i + 1).min(seg.k_len) } else { seg.k_len };
                                if visible == 0 {
                                    continue;
                                }
                                let p = &p_all[(h * seg.q_len + i) * seg.k_len..][..seg.k_len];
                                let go = &g.row(seg.q_start + i)[cols.clone()];
                                let mut s = T::zero();
                                for j in 0..visible {
                                    let kr = seg.k_start + j;
                                    axpy(p[j], go, &mut dv.row_mut(kr)[cols.clone()]);
                                    dp[j] = dot(go, &vv.row(kr)[cols.clone()]);
                                    s += p[j] * dp[j];
                                }
                                let qi = &qv.row(seg.q_start + i)[cols.clone()];
                                for j in 0..visible {
                                    let ds = p[j] * (dp[j] - s) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let kr = seg.k_start + j;
                                    axpy(ds, &kv.row(kr)[cols.clone()], &mut dq.row_mut(seg.q_start + i)[cols.clone()]);
                                    axpy(ds, qi, &mut dk.row_mut(kr)[cols.clone()]);
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *q, dq);
                    self.acc(&mut grads, *k, dk);
                    self.acc(&mut grads, *v, dv);
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        self.acc(&mut grads, p, g.rows_slice(r, rows));
                        r += rows;
                    }
                }
                Op::Blocks { blocks, table } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    let mut r = 0;
                    for b in blocks {
                        let src = self.value(b.src);
                        let ds = self.slot(&mut grads, b.src, src.rows, src.cols);
                        for i in 0..b.len {
                            let gr = g.row(r);
                            for (d, &x) in ds.row_mut(b.start + i).iter_mut().zip(gr) {
                                *d += x;
                            }
                            for (d, &x) in dt.row_mut(b.pos_row).iter_mut().zip(gr) {
                                *d += x;
                            }
                            r += 1;
                        }
                    }
                    self.acc(&mut grads, *table, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = self.value(*logits);
                    let n = T::lit(targets.len().max(1) as f64);
                    let scale = g.data[0] / n;
                    let mut dl = Mat::from_vec(lv.rows, lv.cols, probs.clone());
                    for (r, &t) in targets.iter().enumerate() {
                        dl.row_mut(r)[t as usize] -= T::one();
                    }
                    dl.data.iter_mut().for_each(|x| *x *= scale);
                    self.acc(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(xv.rows, xv.cols, vec![g.data[0]; xv.len()]);
                    self.acc(&mut grads, *x, dx);
                }
            }
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Mat<T>>], v: Var, rows: usize, cols: usize) -> &'g mut Mat<T> {
        grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// `x W` for a single row, used by the incremental decoder.
pub fn vec_mat<T: Real>(x: &[T], w: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols];
    matmul_into(x, &w.data, &mut out, 1, w.rows, w.cols);
    out
}
