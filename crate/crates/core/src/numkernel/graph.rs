//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records operations eagerly as they are applied. Node ids are
//! assigned in creation order, which is a topological order, so the backward
//! pass is a single sweep from the loss down to node 0.

use super::ops;
use super::seq::{self, SeqLayout, SsmDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulCols(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<f64>,
    },
    CausalConv {
        x: Var,
        w: Var,
        bias: Var,
        layout: SeqLayout,
    },
    Scan(Box<ScanRecord>),
}

struct ScanRecord {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
    layout: SeqLayout,
    dims: SsmDims,
    /// State after every step, `rows × channels × state`.
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Inputs to [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    pub u: Var,
    pub delta: Var,
    pub a_log: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += x;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.cols() != tb.len() {
            return Err(dim_err("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &x) in row.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= x;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies each column `j` of `a` by `w[j]`.
    pub fn mul_cols(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if ta.cols() != tw.len() {
            return Err(dim_err("mul_cols", ta, tw));
        }
        let mut out = ta.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &x) in row.iter_mut().zip(tw.data()) {
                *o *= x;
            }
        }
        Ok(self.push(out, Op::MulCols(a, w)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = ops::silu(self.value(a));
        self.push(out, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = ops::softplus(*v));
        self.push(out, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        if tx.cols() != tg.len() {
            return Err(dim_err("rms_norm", tx, tg));
        }
        let mut out = Tensor::zeros(tx.shape());
        let c = tx.cols();
        let inv_rms = tx
            .data()
            .chunks(c)
            .zip(out.data_mut().chunks_mut(c))
            .map(|(xr, or)| ops::rms_norm_row(xr, tg.data(), or))
            .collect();
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Label { label: id, classes: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let loss = ops::cross_entropy_logits(t, targets)?;
        let probs = ops::softmax_rows(t).into_data();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Causal multi-head self-attention over a batch of sequences.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rows() != layout.rows() {
            return Err(dim_err("causal_attention", tq, tk));
        }
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let t_len = layout.seq;
        let mut out = Tensor::zeros(tq.shape());
        // probs for (b, i) occupy heads × (i + 1) entries in a T×T slab per head
        let mut probs = vec![0.0; layout.batch * heads * t_len * t_len];
        let mut scratch = vec![0.0; heads * t_len];
        for b in 0..layout.batch {
            let base = b * t_len;
            let keys = &tk.data()[base * d..(base + t_len) * d];
            let vals = &tv.data()[base * d..(base + t_len) * d];
            for i in 0..t_len {
                let n_pos = i + 1;
                ops::attend_row(
                    tq.row(base + i),
                    keys,
                    vals,
                    n_pos,
                    heads,
                    out.row_mut(base + i),
                    Some(&mut scratch[..heads * n_pos]),
                );
                for h in 0..heads {
                    let dst = ((b * heads + h) * t_len + i) * t_len;
                    probs[dst..dst + n_pos]
                        .copy_from_slice(&scratch[h * n_pos..(h + 1) * n_pos]);
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
        ))
    }

    /// Depthwise causal convolution: `x` is rows×C, `w` is C×K, `bias` is C.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var, layout: SeqLayout) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let c = tx.cols();
        if tw.rows() != c || tb.len() != c || tx.rows() != layout.rows() {
            return Err(dim_err("causal_conv", tx, tw));
        }
        let kw = tw.cols();
        let mut out = Tensor::zeros(tx.shape());
        for b in 0..layout.batch {
            for t in 0..layout.seq {
                let row = b * layout.seq + t;
                for ch in 0..c {
                    let v = seq::conv_tap(tw.row(ch), tb.data()[ch], |k| {
                        let s = t as isize - (kw - 1) as isize + k as isize;
                        if s < 0 {
                            0.0
                        } else {
                            tx.data()[(b * layout.seq + s as usize) * c + ch]
                        }
                    });
                    out.data_mut()[row * c + ch] = v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::CausalConv {
                x,
                w,
                bias,
                layout,
            },
        ))
    }

    /// Selective scan from zero state over every sequence of the batch.
    ///
    /// `u`, `delta`: rows×C; `a_log`: C×N (A = −exp(a_log)); `b`, `c`: rows×(G·N);
    /// `d`: C.
    pub fn selective_scan(
        &mut self,
        inputs: ScanInputs,
        layout: SeqLayout,
        groups: usize,
    ) -> Result<Var> {
        let tu = self.value(inputs.u);
        let (rows, channels) = (tu.rows(), tu.cols());
        let ta = self.value(inputs.a_log);
        let n_state = ta.cols();
        let dims = SsmDims {
            channels,
            state: n_state,
            groups,
        };
        let tdelta = self.value(inputs.delta);
        let (tb, tc, td) = (
            self.value(inputs.b),
            self.value(inputs.c),
            self.value(inputs.d),
        );
        if groups == 0
            || channels % groups != 0
            || tdelta.shape() != tu.shape()
            || ta.rows() != channels
            || tb.cols() != groups * n_state
            || tc.shape() != tb.shape()
            || tb.rows() != rows
            || td.len() != channels
            || rows != layout.rows()
        {
            return Err(dim_err("selective_scan", tu, tb));
        }
        if let Some(&bad) = tdelta.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Discretization(bad));
        }
        let a: Vec<f64> = ta.data().iter().map(|&l| -l.exp()).collect();
        let sz = channels * n_state;
        let mut states = vec![0.0; rows * sz];
        let mut out = Tensor::zeros(&[rows, channels]);
        let mut state = vec![0.0; sz];
        for bi in 0..layout.batch {
            state.fill(0.0);
            for t in 0..layout.seq {
                let r = bi * layout.seq + t;
                seq::ssm_advance(
                    dims,
                    &a,
                    tu.row(r),
                    tdelta.row(r),
                    tb.row(r),
                    tc.row(r),
                    td.data(),
                    &mut state,
                    out.row_mut(r),
                );
                states[r * sz..(r + 1) * sz].copy_from_slice(&state);
            }
        }
        Ok(self.push(
            out,
            Op::Scan(Box::new(ScanRecord {
                u: inputs.u,
                delta: inputs.delta,
                a_log: inputs.a_log,
                b: inputs.b,
                c: inputs.c,
                d: inputs.d,
                layout,
                dims,
                states,
            })),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                ops::gemm_a_bt_acc(g, tb.data(), m, k, n, slot!(*a));
                ops::gemm_at_b_acc(ta.data(), g, m, k, n, slot!(*b));
            }
            Op::Add(a, b) => {
                for (d, &x) in slot!(*a).iter_mut().zip(g) {
                    *d += x;
                }
                for (d, &x) in slot!(*b).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::AddBias(a, bias) => {
                for (d, &x) in slot!(*a).iter_mut().zip(g) {
                    *d += x;
                }
                let c = val(*bias).len();
                let db = slot!(*bias);
                for row in g.chunks(c) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for ((d, &x), &y) in slot!(*a).iter_mut().zip(g).zip(tb.data()) {
                    *d += x * y;
                }
                for ((d, &x), &y) in slot!(*b).iter_mut().zip(g).zip(ta.data()) {
                    *d += x * y;
                }
            }
            Op::MulCols(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let c = tw.len();
                {
                    let da = slot!(*a);
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, &x), &wv) in drow.iter_mut().zip(grow).zip(tw.data()) {
                            *d += x * wv;
                        }
                    }
                }
                let dw = slot!(*w);
                for (arow, grow) in ta.data().chunks(c).zip(g.chunks(c)) {
                    for ((d, &x), &av) in dw.iter_mut().zip(grow).zip(arow) {
                        *d += x * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in slot!(*a).iter_mut().zip(g) {
                    *d += c * x;
                }
            }
            Op::Silu(a) => {
                let ta = val(*a);
                for ((d, &x), &z) in slot!(*a).iter_mut().zip(g).zip(ta.data()) {
                    let s = ops::sigmoid(z);
                    *d += x * s * (1.0 + z * (1.0 - s));
                }
            }
            Op::Softplus(a) => {
                let ta = val(*a);
                for ((d, &x), &z) in slot!(*a).iter_mut().zip(g).zip(ta.data()) {
                    *d += x * ops::sigmoid(z);
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let p = node.value.data();
                let da = slot!(*a);
                for ((drow, grow), prow) in da.chunks_mut(c).zip(g.chunks(c)).zip(p.chunks(c)) {
                    let s: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for ((d, &x), &pv) in drow.iter_mut().zip(grow).zip(prow) {
                        *d += pv * (x - s);
                    }
                }
            }
            Op::Sum(a) => {
                for d in slot!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let c = tg.len();
                {
                    let dg = slot!(*gain);
                    for ((xr, gr), &inv) in tx.data().chunks(c).zip(g.chunks(c)).zip(inv_rms) {
                        for ((d, &xv), &gv) in dg.iter_mut().zip(xr).zip(gr) {
                            *d += gv * xv * inv;
                        }
                    }
                }
                let dx = slot!(*x);
                for (((dr, xr), gr), &inv) in dx
                    .chunks_mut(c)
                    .zip(tx.data().chunks(c))
                    .zip(g.chunks(c))
                    .zip(inv_rms)
                {
                    let proj: f64 = gr
                        .iter()
                        .zip(tg.data())
                        .zip(xr)
                        .map(|((gv, gn), xv)| gv * gn * xv)
                        .sum();
                    let k = inv * inv * inv * proj / c as f64;
                    for (((d, &gv), &gn), &xv) in dr.iter_mut().zip(gr).zip(tg.data()).zip(xr) {
                        *d += inv * gv * gn - k * xv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                let dt = slot!(*table);
                for (i, &id) in ids.iter().enumerate() {
                    for (dv, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dv += x;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let dl = slot!(*logits);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == t { 1.0 } else { 0.0 };
                        dl[i * c + j] += scale * (probs[i * c + j] - y);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *layout, *heads, probs, g, grads),
            Op::CausalConv { x, w, bias, layout } => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tx.cols();
                let kw = tw.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dw = vec![0.0; tw.len()];
                let mut db = vec![0.0; c];
                for b in 0..layout.batch {
                    for t in 0..layout.seq {
                        let row = b * layout.seq + t;
                        for ch in 0..c {
                            let gv = g[row * c + ch];
                            db[ch] += gv;
                            for k in 0..kw {
                                let s = t as isize - (kw - 1) as isize + k as isize;
                                if s < 0 {
                                    continue;
                                }
                                let src = (b * layout.seq + s as usize) * c + ch;
                                dw[ch * kw + k] += gv * tx.data()[src];
                                dx[src] += gv * tw.data()[ch * kw + k];
                            }
                        }
                    }
                }
                add_into(slot!(*x), &dx);
                add_into(slot!(*w), &dw);
                add_into(slot!(*bias), &db);
            }
            Op::Scan(rec) => self.scan_backward(rec, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = tq.cols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let t_len = layout.seq;
        let mut dq = vec![0.0; tq.len()];
        let mut dkk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; t_len];
        for b in 0..layout.batch {
            let base = b * t_len;
            for h in 0..heads {
                let off = h * dk;
                for i in 0..t_len {
                    let p = &probs[((b * heads + h) * t_len + i) * t_len..][..i + 1];
                    let go = &g[(base + i) * d + off..(base + i) * d + off + dk];
                    for j in 0..=i {
                        let vj = &tv.data()[(base + j) * d + off..(base + j) * d + off + dk];
                        dp[j] = ops::dot(go, vj);
                        for (dvv, &x) in dv[(base + j) * d + off..(base + j) * d + off + dk]
                            .iter_mut()
                            .zip(go)
                        {
                            *dvv += p[j] * x;
                        }
                    }
                    let s: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                    let qi = &tq.data()[(base + i) * d + off..(base + i) * d + off + dk];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &tk.data()[(base + j) * d + off..(base + j) * d + off + dk];
                        for (dqv, &x) in dq[(base + i) * d + off..(base + i) * d + off + dk]
                            .iter_mut()
                            .zip(kj)
                        {
                            *dqv += ds * x;
                        }
                        for (dkv, &x) in dkk[(base + j) * d + off..(base + j) * d + off + dk]
                            .iter_mut()
                            .zip(qi)
                        {
                            *dkv += ds * x;
                        }
                    }
                }
            }
        }
        for (var, upd) in [(q, dq), (k, dkk), (v, dv)] {
            let len = upd.len();
            add_into(grads[var.0].get_or_insert_with(|| vec![0.0; len]), &upd);
        }
    }

    fn scan_backward(&self, rec: &ScanRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (tu, tdelta, ta, tb, tc, td) = (
            val(rec.u),
            val(rec.delta),
            val(rec.a_log),
            val(rec.b),
            val(rec.c),
            val(rec.d),
        );
        let dims = rec.dims;
        let (ch_n, n_state) = (dims.channels, dims.state);
        let gn = dims.groups * n_state;
        let sz = ch_n * n_state;
        let a: Vec<f64> = ta.data().iter().map(|&l| -l.exp()).collect();
        let mut du = vec![0.0; tu.len()];
        let mut ddelta = vec![0.0; tdelta.len()];
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; tb.len()];
        let mut dc = vec![0.0; tc.len()];
        let mut dd = vec![0.0; td.len()];
        let mut carry = vec![0.0; sz];
        let zero_state = vec![0.0; sz];
        for bi in 0..rec.layout.batch {
            carry.fill(0.0);
            for t in (0..rec.layout.seq).rev() {
                let r = bi * rec.layout.seq + t;
                let x_t = &rec.states[r * sz..(r + 1) * sz];
                let x_prev = if t == 0 {
                    &zero_state[..]
                } else {
                    &rec.states[(r - 1) * sz..r * sz]
                };
                let u = tu.row(r);
                let delta = tdelta.row(r);
                let brow = tb.row(r);
                let crow = tc.row(r);
                let gy = &g[r * ch_n..(r + 1) * ch_n];
                for ch in 0..ch_n {
                    let grp = dims.group_of(ch);
                    let (dt, uc, gyc) = (delta[ch], u[ch], gy[ch]);
                    dd[ch] += gyc * uc;
                    du[r * ch_n + ch] += gyc * td.data()[ch];
                    for n in 0..n_state {
                        let si = ch * n_state + n;
                        let bn = grp * n_state + n;
                        dc[r * gn + bn] += gyc * x_t[si];
                        // total gradient reaching x_t[c,n]
                        let dx = carry[si] + gyc * crow[bn];
                        let decay = (dt * a[si]).exp();
                        let d_decay = dx * x_prev[si];
                        ddelta[r * ch_n + ch] += d_decay * decay * a[si] + dx * brow[bn] * uc;
                        da[si] += d_decay * decay * dt;
                        db[r * gn + bn] += dx * dt * uc;
                        du[r * ch_n + ch] += dx * dt * brow[bn];
                        carry[si] = dx * decay;
                    }
                }
            }
        }
        // dA/d(a_log) = A
        for (d, &av) in da.iter_mut().zip(&a) {
            *d *= av;
        }
        for (var, upd) in [
            (rec.u, du),
            (rec.delta, ddelta),
            (rec.a_log, da),
            (rec.b, db),
            (rec.c, dc),
            (rec.d, dd),
        ] {
            let len = upd.len();
            add_into(grads[var.0].get_or_insert_with(|| vec![0.0; len]), &upd);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves retain them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Gradients of `loss` with respect to each of `params`, in order.
///
/// A parameter that the loss does not depend on is reported as a
/// connectivity error rather than silently given a zero gradient.
pub fn grad_of(graph: &Graph, loss: Var, params: &[Var]) -> Result<Vec<Vec<f64>>> {
    let grads = graph.backward(loss)?;
    params
        .iter()
        .map(|&p| {
            if p.0 >= graph.len() {
                return Err(Error::Connectivity(p.0));
            }
            grads
                .get(p)
                .map(|g| g.to_vec())
                .ok_or(Error::Connectivity(p.0))
        })
        .collect()
}
