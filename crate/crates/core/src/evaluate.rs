//! Greedy-decoding evaluation of a trained model against human responses.

use crate::corpus::{DataPoint, Vocabulary};
use crate::error::{GcnError, Result};
use crate::metrics::{self, MetricReport, RougeVariant, Smoothing};
use crate::model::{decode_tokens, encode_example, ConditionalLM, SampleSpec};

/// Frozen token embeddings looked up by token string; rows are returned
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: std::sync::Arc<Vocabulary>,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Snapshot of a model's input embedding table.
    pub fn from_model(model: &ConditionalLM) -> Self {
        let rows = (0..model.vocab().len())
            .map(|i| {
                let r = model.embedding(i);
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
            })
            .collect();
        EmbeddingTable {
            vocab: model.vocab().clone(),
            rows,
        }
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        self.rows[self.vocab.id(token)].clone()
    }
}

/// Greedy responses, one per datapoint, as content tokens.
pub fn generate_responses(model: &ConditionalLM, datapoints: &[DataPoint], max_new_tokens: usize) -> Result<Vec<Vec<String>>> {
    let spec = SampleSpec::greedy(max_new_tokens);
    datapoints
        .iter()
        .map(|dp| {
            let ex = encode_example(dp, model, max_new_tokens);
            let out = model.generate(&ex.input, &spec)?;
            Ok(decode_tokens(model.vocab(), out.content()))
        })
        .collect()
}

/// Sentence-averaged reference metrics of greedy responses plus
/// token-pooled perplexity of the human responses.
pub fn evaluate(
    model: &ConditionalLM,
    datapoints: &[DataPoint],
    embedding: Option<&EmbeddingTable>,
    max_new_tokens: usize,
) -> Result<MetricReport> {
    if datapoints.is_empty() {
        return Err(GcnError::InvalidInput("evaluation set is empty".into()));
    }
    let responses = generate_responses(model, datapoints, max_new_tokens)?;
    let pairs: Vec<(&Vec<String>, &DataPoint)> = responses.iter().zip(datapoints).collect();
    let bleu = |n: usize| -> Result<f64> {
        let mut total = 0.0;
        for (c, dp) in &pairs {
            total += metrics::bleu(c, std::slice::from_ref(&dp.response.tokens), n, Smoothing::Method7)?;
        }
        Ok(total / pairs.len() as f64)
    };
    let (mut nll, mut tokens) = (0.0, 0usize);
    for dp in datapoints {
        let ex = encode_example(dp, model, max_new_tokens);
        let (s, n) = model.nll_sum(&ex.input, &ex.target)?;
        nll += s;
        tokens += n;
    }
    let mean = |f: &dyn Fn(&(&Vec<String>, &DataPoint)) -> f64| metrics::corpus_level(&pairs, f);
    Ok(MetricReport {
        bleu1: Some(bleu(1)?),
        bleu4: Some(bleu(4)?),
        rouge1: Some(mean(&|(c, dp)| metrics::rouge(c, &dp.response.tokens, RougeVariant::R1))?),
        rouge2: Some(mean(&|(c, dp)| metrics::rouge(c, &dp.response.tokens, RougeVariant::R2))?),
        rouge_l: Some(mean(&|(c, dp)| metrics::rouge(c, &dp.response.tokens, RougeVariant::RL))?),
        kf1: Some(mean(&|(c, dp)| metrics::kf1_multi(c, &dp.knowledge))?),
        kf1_gold: Some(mean(&|(c, dp)| metrics::kf1_multi(c, &dp.gold_knowledge))?),
        embed_score: match embedding {
            Some(e) => Some(mean(&|(c, dp)| metrics::embed_score(c, &dp.response.tokens, |t| e.embed(t)))?),
            None => None,
        },
        perplexity: Some(metrics::perplexity(nll, tokens)?),
        oov_rate: None,
    })
}
