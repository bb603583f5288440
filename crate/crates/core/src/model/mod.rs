//! Small conditional autoregressive language model used as generator,
//! reference generator and learner.
//!
//! Two architectures share one interface: a pre-norm causal transformer and
//! an Elman recurrent network. Both tie input and output embeddings. The
//! next-token distribution never places mass on the padding, begin and
//! separator markers.

mod checkpoint;
pub mod graph;
mod net;
pub mod optim;
mod sampling;
pub mod tensor;
mod train;

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DataPoint, KnowledgePiece, Utterance, Vocabulary};
use crate::error::{GcnError, Result};
use crate::seed::{self, Rng};
use graph::{Graph, NodeId};
use tensor::{masked_log_sum_exp, Mat};

pub use net::Decoder;
pub use sampling::{GenerationOutput, SampleSpec, Strategy};
pub use train::{decode_tokens, encode_example, train_supervised, EncodedExample, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Recurrent,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub architecture: Architecture,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            vocab_size: 0,
            embed_dim: 64,
            hidden_dim: 128,
            num_layers: 2,
            max_seq_len: 128,
            dropout: 0.1,
            architecture: Architecture::SelfAttention,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GcnError::Config(format!("model {name} must be positive")));
        }
        if self.vocab_size <= Vocabulary::NUM_RESERVED {
            return Err(GcnError::Config("vocabulary has no ordinary tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GcnError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub(crate) fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut shapes = vec![("tok_emb".to_string(), v, e)];
        match self.architecture {
            Architecture::SelfAttention => {
                shapes.push(("pos_emb".into(), self.max_seq_len, e));
                for l in 0..self.num_layers {
                    for (name, r, c) in [
                        ("ln1_g", 1, e),
                        ("ln1_b", 1, e),
                        ("wq", e, e),
                        ("wk", e, e),
                        ("wv", e, e),
                        ("wo", e, e),
                        ("ln2_g", 1, e),
                        ("ln2_b", 1, e),
                        ("w1", e, h),
                        ("b1", 1, h),
                        ("w2", h, e),
                        ("b2", 1, e),
                    ] {
                        shapes.push((format!("layer{l}.{name}"), r, c));
                    }
                }
                shapes.push(("lnf_g".into(), 1, e));
                shapes.push(("lnf_b".into(), 1, e));
            }
            Architecture::Recurrent => {
                for l in 0..self.num_layers {
                    let input = if l == 0 { e } else { h };
                    shapes.push((format!("layer{l}.wx"), input, h));
                    shapes.push((format!("layer{l}.wh"), h, h));
                    shapes.push((format!("layer{l}.b"), 1, h));
                }
                shapes.push(("proj".into(), h, e));
                shapes.push(("proj_b".into(), 1, e));
            }
        }
        shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.param_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConditionalLM {
    config: LMConfig,
    params: Vec<Mat>,
    vocab: Arc<Vocabulary>,
    emittable: Vec<bool>,
}

fn emittable_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size)
        .map(|i| !Vocabulary::is_reserved(i) || i == Vocabulary::EOS || i == Vocabulary::UNK)
        .collect()
}

impl ConditionalLM {
    /// Fresh model with parameters drawn deterministically from `rng_seed`.
    pub fn init(config: LMConfig, vocab: Arc<Vocabulary>, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(GcnError::Config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = seed::rng_for(rng_seed, "init", 0);
        let residual_std = 0.02 / (2.0 * config.num_layers as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, r, c)| {
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                let std = match leaf {
                    "ln1_g" | "ln2_g" | "lnf_g" => return Mat::filled(r, c, 1.0),
                    "ln1_b" | "ln2_b" | "lnf_b" | "b1" | "b2" | "b" | "proj_b" => return Mat::zeros(r, c),
                    "wo" | "w2" => residual_std,
                    "wx" | "wh" | "proj" => 1.0 / (r as f64).sqrt(),
                    _ => 0.02,
                };
                gaussian(&mut rng, r, c, std)
            })
            .collect();
        Ok(ConditionalLM {
            emittable: emittable_mask(config.vocab_size),
            config,
            params,
            vocab,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    /// Narrows the set of tokens the model may emit.
    pub fn with_emittable(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.config.vocab_size || !mask.iter().any(|&m| m) {
            return Err(GcnError::InvalidInput(
                "emittable mask must match the vocabulary and allow at least one token".into(),
            ));
        }
        self.emittable = mask;
        Ok(self)
    }

    pub fn emittable(&self) -> &[bool] {
        &self.emittable
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Row `token` of the input embedding table.
    pub fn embedding(&self, token: usize) -> &[f64] {
        self.params[0].row(token)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => Err(GcnError::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Builds the tape for `input ++ targets` and returns the `n×1` node of
    /// per-target log-probabilities. Dropout is applied when `dropout_rng`
    /// is given and the configured rate is positive.
    pub fn forward_logprobs(
        &self,
        g: &mut Graph,
        input: &[usize],
        targets: &[usize],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        if input.is_empty() {
            return Err(GcnError::InvalidInput("empty model input".into()));
        }
        if targets.is_empty() {
            return Err(GcnError::InvalidInput("empty target sequence".into()));
        }
        self.check_ids(input)?;
        self.check_ids(targets)?;
        let mut seq = Vec::with_capacity(input.len() + targets.len() - 1);
        seq.extend_from_slice(input);
        seq.extend_from_slice(&targets[..targets.len() - 1]);
        if self.config.architecture == Architecture::SelfAttention && seq.len() > self.config.max_seq_len {
            return Err(GcnError::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                seq.len(),
                self.config.max_seq_len
            )));
        }
        let rows: Vec<usize> = (input.len() - 1..seq.len()).collect();
        Ok(net::forward(self, g, &seq, &rows, targets, dropout_rng))
    }

    /// Mean per-token negative log-likelihood of `target` given `input`
    /// under teacher forcing. Padding targets are excluded.
    pub fn nll(&self, input: &[usize], target: &[usize]) -> Result<f64> {
        let (sum, n) = self.nll_sum(input, target)?;
        if n == 0 {
            return Err(GcnError::InvalidInput("target has only padding".into()));
        }
        Ok(sum / n as f64)
    }

    /// Summed negative log-likelihood and the number of scored tokens.
    pub fn nll_sum(&self, input: &[usize], target: &[usize]) -> Result<(f64, usize)> {
        if target.is_empty() {
            return Err(GcnError::InvalidInput("nll of an empty target".into()));
        }
        let lp = self.logprob_of(input, target)?;
        let scored = target.iter().zip(&lp).filter(|(&t, _)| t != Vocabulary::PAD);
        let (sum, n) = scored.fold((0.0, 0), |(s, n), (_, l)| (s - l, n + 1));
        Ok((sum, n))
    }

    /// Log-probability of each response token under the full next-token
    /// distribution. Their sum is `log G(response | input)`.
    pub fn logprob_of(&self, input: &[usize], response: &[usize]) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Ok(Vec::new());
        }
        let targets: Vec<usize> = response
            .iter()
            .map(|&t| if t == Vocabulary::PAD { Vocabulary::EOS } else { t })
            .collect();
        self.check_ids(response)?;
        let mut g = Graph::new();
        let node = self.forward_logprobs(&mut g, input, &targets, None)?;
        Ok(g.value(node).data.clone())
    }

    /// Probabilities of the next token after `prefix`.
    pub fn next_token_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_ids(prefix)?;
        let mut dec = self.decoder();
        let mut hidden = Vec::new();
        for &t in prefix {
            hidden = dec.step(self, t)?;
        }
        if prefix.is_empty() {
            return Err(GcnError::InvalidInput("empty prefix".into()));
        }
        let logits = self.logits(&hidden);
        let lse = masked_log_sum_exp(&logits, &self.emittable);
        Ok(logits
            .iter()
            .zip(&self.emittable)
            .map(|(&l, &a)| if a { (l - lse).exp() } else { 0.0 })
            .collect())
    }

    pub fn decoder(&self) -> Decoder {
        Decoder::new(self)
    }

    /// Output logits for a final hidden vector (tied embeddings).
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let emb = &self.params[0];
        (0..emb.rows).map(|j| tensor::dot(hidden, emb.row(j))).collect()
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("positive std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Token ids `<ctx> c_1 … <ctx> c_t <knw> k_1 … <knw> k_m <rsp>`, dropping
/// the oldest tokens first when longer than `max_len`.
pub fn encode_input(
    context: &[Utterance],
    knowledge: &[KnowledgePiece],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<usize> {
    let mut ids = Vec::new();
    for u in context {
        ids.push(Vocabulary::SEP_CTX);
        ids.extend(u.tokens.iter().map(|t| vocab.id(t)));
    }
    for k in knowledge {
        ids.push(Vocabulary::SEP_KNW);
        ids.extend(k.tokens.iter().map(|t| vocab.id(t)));
    }
    ids.push(Vocabulary::SEP_RSP);
    let max_len = max_len.max(1);
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    ids
}

/// Encoded conditioning input of a datapoint for a model.
pub fn encode_datapoint_input(dp: &DataPoint, model: &ConditionalLM, max_response_tokens: usize) -> Vec<usize> {
    let budget = model.config().max_seq_len.saturating_sub(max_response_tokens + 1);
    encode_input(&dp.context, &dp.knowledge, model.vocab(), budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Speaker};

    pub(crate) fn tiny_vocab(words: &str) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_tokens(tokenize(words)))
    }

    fn utt(s: &str) -> Utterance {
        Utterance::new(Speaker::A, s).unwrap()
    }

    #[test]
    fn encode_layout() {
        let v = tiny_vocab("a b c d");
        let ctx = [utt("a b"), utt("c")];
        let ids = encode_input(&ctx, &[], &v, 100);
        assert!(!ids.contains(&Vocabulary::SEP_KNW));
        assert_eq!(ids.iter().filter(|&&i| i == Vocabulary::SEP_CTX).count(), 2);
        let k: Vec<_> = (0..3).map(|i| KnowledgePiece::new(format!("k{i}"), "d zz").unwrap()).collect();
        let ids = encode_input(&ctx, &k, &v, 100);
        assert_eq!(ids.iter().filter(|&&i| i == Vocabulary::SEP_KNW).count(), 3);
        assert!(ids.contains(&Vocabulary::UNK));
        let short = encode_input(&ctx, &k, &v, 5);
        assert_eq!(short.len(), 5);
        assert_eq!(*short.last().unwrap(), Vocabulary::SEP_RSP);
        assert_eq!(short[..], ids[ids.len() - 5..]);
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let v = tiny_vocab("a b c");
        let cfg = LMConfig {
            vocab_size: v.len(),
            embed_dim: 8,
            hidden_dim: 8,
            num_layers: 1,
            max_seq_len: 16,
            ..Default::default()
        };
        let a = ConditionalLM::init(cfg.clone(), v.clone(), 3).unwrap();
        let b = ConditionalLM::init(cfg.clone(), v.clone(), 3).unwrap();
        let c = ConditionalLM::init(cfg.clone(), v.clone(), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let bad = LMConfig { embed_dim: 0, ..cfg.clone() };
        assert!(matches!(ConditionalLM::init(bad, v.clone(), 0), Err(GcnError::Config(_))));
        let bad = LMConfig { vocab_size: 99, ..cfg };
        assert!(ConditionalLM::init(bad, v, 0).is_err());
    }
}
