//! Reverse-mode differentiation over a tape of fused matrix operations.
//!
//! Values are computed eagerly as nodes are added. `backward` walks the
//! tape once in reverse and returns gradients for every parameter leaf.

use super::tensor::{dot, masked_log_sum_exp, matmul_acc, matmul_t_acc, t_matmul_acc, Mat};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(usize),
    Gather { table: NodeId, ids: Vec<usize> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Add(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, rstd: Vec<f64> },
    Gelu(NodeId),
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, probs: Mat, scale: f64 },
    Dropout { x: NodeId, mask: Vec<f64> },
    Rnn { x: NodeId, wx: NodeId, wh: NodeId, b: NodeId },
    TokenLogProbs { logits: NodeId, targets: Vec<usize>, probs: Mat, allowed: Vec<bool> },
    WeightedSum { x: NodeId, weights: Vec<f64> },
    PpoSurrogate { logp: NodeId, coeff: Vec<f64> },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Summary of a clipped-surrogate evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateStats {
    pub objective: f64,
    pub clipped: usize,
    pub tokens: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, index: usize, value: &Mat) -> NodeId {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let src = &self.nodes[x].value;
        let mut out = Mat::zeros(rows.len(), src.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        self.push(out, Op::Add(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = Mat::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = Mat::zeros(av.rows, bv.rows);
        matmul_t_acc(av, bv, &mut out);
        self.push(out, Op::MatMulT(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        let b = &self.nodes[bias].value;
        for i in 0..out.rows {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&b.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (g, b) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (j, v) in row.iter().enumerate() {
                xh[j] = (v - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..o.len() {
                o[j] = xh[j] * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// Single-head causal scaled dot-product attention.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let n = qv.rows;
        let scale = 1.0 / (qv.cols as f64).sqrt();
        let mut probs = Mat::zeros(n, n);
        let mut out = Mat::zeros(n, vv.cols);
        for i in 0..n {
            let p = &mut probs.data[i * n..i * n + i + 1];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = dot(qv.row(i), kv.row(j)) * scale;
            }
            softmax_in_place(p);
            let o = &mut out.data[i * vv.cols..(i + 1) * vv.cols];
            for (j, &pj) in p.iter().enumerate() {
                for (ov, &x) in o.iter_mut().zip(vv.row(j)) {
                    *ov += pj * x;
                }
            }
        }
        self.push(out, Op::CausalAttention { q, k, v, probs, scale })
    }

    /// Multiplies by a fixed mask (entries are 0 or the inverse keep rate).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Elman recurrence `h_t = tanh(x_t Wx + h_{t-1} Wh + b)` with `h_{-1} = 0`.
    pub fn rnn(&mut self, x: NodeId, wx: NodeId, wh: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (wxv, whv, bv) = (&self.nodes[wx].value, &self.nodes[wh].value, &self.nodes[b].value);
        let h = wxv.cols;
        let mut pre = Mat::zeros(xv.rows, h);
        matmul_acc(xv, wxv, &mut pre);
        let mut out = Mat::zeros(xv.rows, h);
        for t in 0..xv.rows {
            let mut a: Vec<f64> = pre.row(t).iter().zip(&bv.data).map(|(p, b)| p + b).collect();
            if t > 0 {
                super::tensor::vecmat_acc(out.row(t - 1), whv, &mut a);
            }
            for (o, v) in out.row_mut(t).iter_mut().zip(a) {
                *o = v.tanh();
            }
        }
        self.push(out, Op::Rnn { x, wx, wh, b })
    }

    /// Per-row log-probability of `targets[i]` under a softmax of row `i`
    /// restricted to the allowed vocabulary entries. Output is `n×1`.
    pub fn token_log_probs(&mut self, logits: NodeId, targets: &[usize], allowed: &[bool]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows, targets.len());
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut out = Mat::zeros(lv.rows, 1);
        for i in 0..lv.rows {
            let row = lv.row(i);
            let lse = masked_log_sum_exp(row, allowed);
            let p = probs.row_mut(i);
            for j in 0..row.len() {
                p[j] = if allowed[j] { (row[j] - lse).exp() } else { 0.0 };
            }
            out.data[i] = if allowed[targets[i]] {
                row[targets[i]] - lse
            } else {
                f64::NEG_INFINITY
            };
        }
        self.push(
            out,
            Op::TokenLogProbs {
                logits,
                targets: targets.to_vec(),
                probs,
                allowed: allowed.to_vec(),
            },
        )
    }

    /// `Σ w_i x_i` as a `1×1` node.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.len(), weights.len());
        let s = dot(&xv.data, &weights);
        self.push(Mat::scalar(s), Op::WeightedSum { x, weights })
    }

    /// Negated clipped surrogate `-scale · Σ min(ρA, clip(ρ, 1-ε, 1+ε)A)`
    /// with `ρ = exp(logp - old_logp)`.
    pub fn ppo_surrogate(
        &mut self,
        logp: NodeId,
        old_logp: &[f64],
        advantages: &[f64],
        epsilon: f64,
        scale: f64,
    ) -> (NodeId, SurrogateStats) {
        let lp = &self.nodes[logp].value.data;
        assert_eq!(lp.len(), old_logp.len());
        assert_eq!(lp.len(), advantages.len());
        let mut stats = SurrogateStats {
            tokens: lp.len(),
            ..Default::default()
        };
        let mut coeff = Vec::with_capacity(lp.len());
        let mut loss = 0.0;
        for i in 0..lp.len() {
            let ratio = (lp[i] - old_logp[i]).exp();
            let a = advantages[i];
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
            if unclipped <= clipped {
                loss -= scale * unclipped;
                stats.objective += unclipped;
                // d(-scale·ρA)/dlogp
                coeff.push(-scale * unclipped);
            } else {
                loss -= scale * clipped;
                stats.objective += clipped;
                coeff.push(0.0);
            }
            if ratio < 1.0 - epsilon || ratio > 1.0 + epsilon {
                stats.clipped += 1;
            }
        }
        (self.push(Mat::scalar(loss), Op::PpoSurrogate { logp, coeff }), stats)
    }

    /// Backpropagates from a `1×1` node. Returns `(param index, gradient)`
    /// pairs; a parameter used several times appears once with the sum.
    pub fn backward(&self, root: NodeId) -> Vec<(usize, Mat)> {
        let mut grads: Vec<Option<Mat>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Mat::filled(1, 1, 1.0));
        let mut out = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.push((*p, g)),
                Op::Gather { table, ids } => {
                    let t = &self.nodes[*table].value;
                    let gt = grad_slot(&mut grads, *table, t);
                    for (i, &r) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = &self.nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, xv);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, *a, &node.value).add_assign(&g);
                    grad_slot(&mut grads, *b, &node.value).add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    matmul_t_acc(&g, bv, grad_slot(&mut grads, *a, av));
                    t_matmul_acc(av, &g, grad_slot(&mut grads, *b, bv));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    matmul_acc(&g, bv, grad_slot(&mut grads, *a, av));
                    t_matmul_acc(&g, av, grad_slot(&mut grads, *b, bv));
                }
                Op::AddRow(a, bias) => {
                    grad_slot(&mut grads, *a, &node.value).add_assign(&g);
                    let bv = &self.nodes[*bias].value;
                    let gb = grad_slot(&mut grads, *bias, bv);
                    for i in 0..g.rows {
                        for (s, v) in gb.data.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = &self.nodes[*gamma].value;
                    let c = g.cols;
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    let mut gx = Mat::zeros(g.rows, c);
                    for i in 0..g.rows {
                        let (gr, xh) = (g.row(i), xhat.row(i));
                        let mut gxh = vec![0.0; c];
                        for j in 0..c {
                            ggamma[j] += gr[j] * xh[j];
                            gbeta[j] += gr[j];
                            gxh[j] = gr[j] * gv.data[j];
                        }
                        let n = c as f64;
                        let mean_g = gxh.iter().sum::<f64>() / n;
                        let mean_gx = dot(&gxh, xh) / n;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (gxh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                    grad_slot(&mut grads, *x, &gx).add_assign(&gx);
                    let gsl = grad_slot(&mut grads, *gamma, gv);
                    gsl.data.iter_mut().zip(&ggamma).for_each(|(a, b)| *a += b);
                    let bv = &self.nodes[*beta].value;
                    let bsl = grad_slot(&mut grads, *beta, bv);
                    bsl.data.iter_mut().zip(&gbeta).for_each(|(a, b)| *a += b);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, xv);
                    for ((o, &v), &gi) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                        *o += gi * gelu_grad(v);
                    }
                }
                Op::CausalAttention { q, k, v, probs, scale } => {
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let n = qv.rows;
                    let mut gq = Mat::zeros(n, qv.cols);
                    let mut gk = Mat::zeros(n, kv.cols);
                    let mut gvm = Mat::zeros(n, vv.cols);
                    let mut gs = vec![0.0; n];
                    for i in 0..n {
                        let p = &probs.data[i * n..i * n + i + 1];
                        let gi = g.row(i);
                        let mut acc = 0.0;
                        for j in 0..=i {
                            for (o, &x) in gvm.row_mut(j).iter_mut().zip(gi) {
                                *o += p[j] * x;
                            }
                            gs[j] = dot(gi, vv.row(j));
                            acc += gs[j] * p[j];
                        }
                        for j in 0..=i {
                            let d = p[j] * (gs[j] - acc) * scale;
                            if d == 0.0 {
                                continue;
                            }
                            for (o, &x) in gq.row_mut(i).iter_mut().zip(kv.row(j)) {
                                *o += d * x;
                            }
                            for (o, &x) in gk.row_mut(j).iter_mut().zip(qv.row(i)) {
                                *o += d * x;
                            }
                        }
                    }
                    grad_slot(&mut grads, *q, qv).add_assign(&gq);
                    grad_slot(&mut grads, *k, kv).add_assign(&gk);
                    grad_slot(&mut grads, *v, vv).add_assign(&gvm);
                }
                Op::Dropout { x, mask } => {
                    let xv = &self.nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, xv);
                    for ((o, &gi), &m) in gx.data.iter_mut().zip(&g.data).zip(mask) {
                        *o += gi * m;
                    }
                }
                Op::Rnn { x, wx, wh, b } => {
                    let (xv, wxv, whv) = (&self.nodes[*x].value, &self.nodes[*wx].value, &self.nodes[*wh].value);
                    let hs = &node.value;
                    let h = hs.cols;
                    let mut da_all = Mat::zeros(hs.rows, h);
                    let mut carry = vec![0.0; h];
                    for t in (0..hs.rows).rev() {
                        let ht = hs.row(t);
                        let da = da_all.row_mut(t);
                        for j in 0..h {
                            da[j] = (g.data[t * h + j] + carry[j]) * (1.0 - ht[j] * ht[j]);
                        }
                        carry.iter_mut().for_each(|c| *c = 0.0);
                        // carry = da · Whᵀ
                        for (j, c) in carry.iter_mut().enumerate() {
                            *c = dot(da, whv.row(j));
                        }
                    }
                    let mut gwh = Mat::zeros(h, h);
                    if hs.rows > 1 {
                        let prev = Mat::from_vec(hs.rows - 1, h, hs.data[..(hs.rows - 1) * h].to_vec());
                        let next = Mat::from_vec(hs.rows - 1, h, da_all.data[h..].to_vec());
                        t_matmul_acc(&prev, &next, &mut gwh);
                    }
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    matmul_t_acc(&da_all, wxv, &mut gx);
                    grad_slot(&mut grads, *x, xv).add_assign(&gx);
                    t_matmul_acc(xv, &da_all, grad_slot(&mut grads, *wx, wxv));
                    grad_slot(&mut grads, *wh, whv).add_assign(&gwh);
                    let bv = &self.nodes[*b].value;
                    let gb = grad_slot(&mut grads, *b, bv);
                    for t in 0..hs.rows {
                        for (s, v) in gb.data.iter_mut().zip(da_all.row(t)) {
                            *s += v;
                        }
                    }
                }
                Op::TokenLogProbs { logits, targets, probs, allowed } => {
                    let lv = &self.nodes[*logits].value;
                    let gl = grad_slot(&mut grads, *logits, lv);
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = g.data[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = gl.row_mut(i);
                        for j in 0..row.len() {
                            if allowed[j] {
                                row[j] -= gi * probs.data[i * probs.cols + j];
                            }
                        }
                        if allowed[t] {
                            row[t] += gi;
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let xv = &self.nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, xv);
                    let s = g.data[0];
                    for (o, w) in gx.data.iter_mut().zip(weights) {
                        *o += s * w;
                    }
                }
                Op::PpoSurrogate { logp, coeff } => {
                    let lv = &self.nodes[*logp].value;
                    let gx = grad_slot(&mut grads, *logp, lv);
                    let s = g.data[0];
                    for (o, c) in gx.data.iter_mut().zip(coeff) {
                        *o += s * c;
                    }
                }
            }
        }
        out
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Mat>], id: NodeId, like: &Mat) -> &'a mut Mat {
    grads[id].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Row-wise layer norm of a single vector, matching [`Graph::layer_norm`].
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of every op against a scalar loss.
    fn check(build: impl Fn(&mut Graph, &[Mat]) -> NodeId, params: Vec<Mat>) {
        let mut g = Graph::new();
        let root = build(&mut g, &params);
        let grads = g.backward(root);
        let h = 1e-5;
        for (pi, grad) in grads {
            for k in 0..params[pi].len() {
                let mut plus = params.clone();
                plus[pi].data[k] += h;
                let mut minus = params.clone();
                minus[pi].data[k] -= h;
                let mut gp = Graph::new();
                let rp = build(&mut gp, &plus);
                let fp = gp.value(rp).data[0];
                let mut gm = Graph::new();
                let rm = build(&mut gm, &minus);
                let fm = gm.value(rm).data[0];
                let num = (fp - fm) / (2.0 * h);
                let ana = grad.data[k];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                    "param {pi}[{k}]: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn attention_layernorm_gelu_chain() {
        let params = vec![m(4, 3, 1), m(3, 3, 2), m(3, 3, 3), m(3, 3, 4), m(1, 3, 5), m(1, 3, 6), m(5, 3, 7)];
        check(
            |g, p| {
                let ids: Vec<NodeId> = p.iter().enumerate().map(|(i, v)| g.param(i, v)).collect();
                let x = g.gather(ids[0], &[0, 2, 1, 3]);
                let n = g.layer_norm(x, ids[4], ids[5]);
                let q = g.matmul(n, ids[1]);
                let k = g.matmul(n, ids[2]);
                let v = g.matmul(n, ids[3]);
                let a = g.causal_attention(q, k, v);
                let a = g.gelu(a);
                let a = g.add(a, x);
                let a = g.add_row(a, ids[5]);
                let a = g.dropout(a, vec![2.0, 0.0, 1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
                let s = g.select_rows(a, &[1, 3, 0]);
                let logits = g.matmul_t(s, ids[6]);
                let lp = g.token_log_probs(logits, &[4, 0, 2], &[true, true, true, false, true]);
                g.weighted_sum(lp, vec![0.5, -1.0, 0.25])
            },
            params,
        );
    }

    #[test]
    fn rnn_chain() {
        let params = vec![m(5, 3, 11), m(3, 4, 12), m(4, 4, 13), m(1, 4, 14), m(5, 4, 15)];
        check(
            |g, p| {
                let ids: Vec<NodeId> = p.iter().enumerate().map(|(i, v)| g.param(i, v)).collect();
                let x = g.gather(ids[0], &[1, 4, 2, 2]);
                let h = g.rnn(x, ids[1], ids[2], ids[3]);
                let logits = g.matmul_t(h, ids[4]);
                let lp = g.token_log_probs(logits, &[0, 1, 3, 4], &[true; 5]);
                g.weighted_sum(lp, vec![1.0; 4])
            },
            params,
        );
    }

    #[test]
    fn surrogate_gradient_inside_clip_range() {
        let params = vec![m(2, 3, 21), m(4, 3, 22)];
        let logprobs = |g: &mut Graph, p: &[Mat]| {
            let e = g.param(0, &p[0]);
            let w = g.param(1, &p[1]);
            let logits = g.matmul_t(e, w);
            g.token_log_probs(logits, &[1, 2], &[true; 4])
        };
        let mut g0 = Graph::new();
        let lp0 = logprobs(&mut g0, &params);
        let old: Vec<f64> = g0.value(lp0).data.iter().map(|x| x + 0.01).collect();
        check(
            |g, p| {
                let lp = logprobs(g, p);
                g.ppo_surrogate(lp, &old, &[1.0, -0.5], 0.2, 0.5).0
            },
            params,
        );
    }

    #[test]
    fn clipped_tokens_contribute_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, &Mat::from_vec(1, 2, vec![0.0, 0.0]));
        // ratio 2 with positive advantage and ratio 0.5 with negative advantage
        let (loss, stats) = g.ppo_surrogate(x, &[-(2f64.ln()), 0.5f64.ln().abs()], &[1.0, -1.0], 0.2, 1.0);
        let grads = g.backward(loss);
        assert_eq!(stats.clipped, 2);
        assert!(grads[0].1.data.iter().all(|&v| v == 0.0));
        // the other sides of the clip keep their gradient
        let mut g = Graph::new();
        let x = g.param(0, &Mat::from_vec(1, 2, vec![0.0, 0.0]));
        let (loss, _) = g.ppo_surrogate(x, &[-(2f64.ln()), 0.5f64.ln().abs()], &[-1.0, 1.0], 0.2, 1.0);
        let grads = g.backward(loss);
        assert!(grads[0].1.data.iter().all(|&v| v != 0.0));
    }
}
