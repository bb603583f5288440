//! Forward passes: a tape-recording pass used for training and scoring, and
//! an incremental decoder with cached state used for generation.

use rand::Rng as _;

use super::graph::{gelu, layer_norm_row, softmax_in_place, Graph, NodeId};
use super::tensor::{dot, vecmat_acc, Mat};
use super::{Architecture, ConditionalLM};
use crate::error::{GcnError, Result};
use crate::seed::Rng;

const TF_PER_LAYER: usize = 12;

struct Layer {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn tf_layer(l: usize) -> Layer {
    let o = 2 + l * TF_PER_LAYER;
    Layer {
        ln1_g: o,
        ln1_b: o + 1,
        wq: o + 2,
        wk: o + 3,
        wv: o + 4,
        wo: o + 5,
        ln2_g: o + 6,
        ln2_b: o + 7,
        w1: o + 8,
        b1: o + 9,
        w2: o + 10,
        b2: o + 11,
    }
}

fn dropout_mask(rng: &mut Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Records the forward pass over `seq` and returns the log-probabilities of
/// `targets` read off at positions `rows`.
pub(super) fn forward(
    model: &ConditionalLM,
    g: &mut Graph,
    seq: &[usize],
    rows: &[usize],
    targets: &[usize],
    mut dropout_rng: Option<&mut Rng>,
) -> NodeId {
    let cfg = &model.config;
    let p = &model.params;
    let rate = cfg.dropout;
    let ids: Vec<NodeId> = p.iter().enumerate().map(|(i, m)| g.param(i, m)).collect();
    let mut drop = |g: &mut Graph, x: NodeId| -> NodeId {
        match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(rng, g.value(x).len(), rate);
                g.dropout(x, mask)
            }
            _ => x,
        }
    };

    let hidden = match cfg.architecture {
        Architecture::SelfAttention => {
            let positions: Vec<usize> = (0..seq.len()).collect();
            let tok = g.gather(ids[0], seq);
            let pos = g.gather(ids[1], &positions);
            let mut x = g.add(tok, pos);
            x = drop(g, x);
            for l in 0..cfg.num_layers {
                let w = tf_layer(l);
                let h = g.layer_norm(x, ids[w.ln1_g], ids[w.ln1_b]);
                let q = g.matmul(h, ids[w.wq]);
                let k = g.matmul(h, ids[w.wk]);
                let v = g.matmul(h, ids[w.wv]);
                let a = g.causal_attention(q, k, v);
                let o = g.matmul(a, ids[w.wo]);
                let o = drop(g, o);
                x = g.add(x, o);
                let h = g.layer_norm(x, ids[w.ln2_g], ids[w.ln2_b]);
                let f = g.matmul(h, ids[w.w1]);
                let f = g.add_row(f, ids[w.b1]);
                let f = g.gelu(f);
                let f = g.matmul(f, ids[w.w2]);
                let f = g.add_row(f, ids[w.b2]);
                let f = drop(g, f);
                x = g.add(x, f);
            }
            let n = p.len();
            let sel = g.select_rows(x, rows);
            g.layer_norm(sel, ids[n - 2], ids[n - 1])
        }
        Architecture::Recurrent => {
            let mut x = g.gather(ids[0], seq);
            x = drop(g, x);
            for l in 0..cfg.num_layers {
                let o = 1 + 3 * l;
                x = g.rnn(x, ids[o], ids[o + 1], ids[o + 2]);
                x = drop(g, x);
            }
            let n = p.len();
            let sel = g.select_rows(x, rows);
            let proj = g.matmul(sel, ids[n - 2]);
            g.add_row(proj, ids[n - 1])
        }
    };
    let logits = g.matmul_t(hidden, ids[0]);
    g.token_log_probs(logits, targets, &model.emittable)
}

/// Incremental decoding state. Feeding tokens one at a time reproduces the
/// tape forward pass without dropout.
#[derive(Debug, Clone)]
pub struct Decoder {
    len: usize,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    hidden: Vec<Vec<f64>>,
}

impl Decoder {
    pub(super) fn new(model: &ConditionalLM) -> Self {
        let layers = model.config.num_layers;
        Decoder {
            len: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            hidden: vec![vec![0.0; model.config.hidden_dim]; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token and returns the final hidden vector at its
    /// position; logits are `model.logits(hidden)`.
    pub fn step(&mut self, model: &ConditionalLM, token: usize) -> Result<Vec<f64>> {
        let cfg = &model.config;
        if token >= cfg.vocab_size {
            return Err(GcnError::InvalidInput(format!("token id {token} outside vocabulary")));
        }
        let p = &model.params;
        let pos = self.len;
        self.len += 1;
        match cfg.architecture {
            Architecture::SelfAttention => {
                if pos >= cfg.max_seq_len {
                    return Err(GcnError::InvalidInput("decoder exceeded max_seq_len".into()));
                }
                let mut x: Vec<f64> = p[0].row(token).iter().zip(p[1].row(pos)).map(|(a, b)| a + b).collect();
                let e = x.len();
                for l in 0..cfg.num_layers {
                    let w = tf_layer(l);
                    let h = layer_norm_row(&x, &p[w.ln1_g].data, &p[w.ln1_b].data);
                    let proj = |m: &Mat| {
                        let mut out = vec![0.0; e];
                        vecmat_acc(&h, m, &mut out);
                        out
                    };
                    let (q, k, v) = (proj(&p[w.wq]), proj(&p[w.wk]), proj(&p[w.wv]));
                    self.keys[l].push(k);
                    self.values[l].push(v);
                    let scale = 1.0 / (e as f64).sqrt();
                    let mut scores: Vec<f64> = self.keys[l].iter().map(|k| dot(&q, k) * scale).collect();
                    softmax_in_place(&mut scores);
                    let mut a = vec![0.0; e];
                    for (s, v) in scores.iter().zip(&self.values[l]) {
                        for (o, x) in a.iter_mut().zip(v) {
                            *o += s * x;
                        }
                    }
                    let mut o = vec![0.0; e];
                    vecmat_acc(&a, &p[w.wo], &mut o);
                    x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
                    let h = layer_norm_row(&x, &p[w.ln2_g].data, &p[w.ln2_b].data);
                    let mut f = p[w.b1].data.clone();
                    vecmat_acc(&h, &p[w.w1], &mut f);
                    f.iter_mut().for_each(|v| *v = gelu(*v));
                    let mut f2 = p[w.b2].data.clone();
                    vecmat_acc(&f, &p[w.w2], &mut f2);
                    x.iter_mut().zip(&f2).for_each(|(x, o)| *x += o);
                }
                let n = p.len();
                Ok(layer_norm_row(&x, &p[n - 2].data, &p[n - 1].data))
            }
            Architecture::Recurrent => {
                let mut x = p[0].row(token).to_vec();
                for l in 0..cfg.num_layers {
                    let o = 1 + 3 * l;
                    let mut a = p[o + 2].data.clone();
                    vecmat_acc(&x, &p[o], &mut a);
                    vecmat_acc(&self.hidden[l], &p[o + 1], &mut a);
                    a.iter_mut().for_each(|v| *v = v.tanh());
                    self.hidden[l] = a.clone();
                    x = a;
                }
                let n = p.len();
                let mut out = p[n - 1].data.clone();
                vecmat_acc(&x, &p[n - 2], &mut out);
                Ok(out)
            }
        }
    }
}
