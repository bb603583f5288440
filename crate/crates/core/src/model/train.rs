//! Supervised learner training: teacher-forced cross-entropy plus an
//! optional self-critical knowledge-F1 term.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::optim::{accumulate, clip_grad_norm, zero_grads, Adam};
use super::sampling::{SampleSpec, Strategy};
use super::{encode_datapoint_input, ConditionalLM};
use crate::corpus::{DataPoint, KnowledgePiece, Vocabulary};
use crate::error::{GcnError, Result};
use crate::metrics::kf1_multi;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the self-critical KF1 term; 0 gives pure cross-entropy.
    pub lambda_kf1: f64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub max_response_tokens: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            lambda_kf1: 0.1,
            batch_size: 4,
            max_grad_norm: 1.0,
            max_response_tokens: 24,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_response_tokens == 0 {
            return Err(GcnError::Config("batch_size and max_response_tokens must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_kf1 >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(GcnError::Config(
                "learning_rate and max_grad_norm must be positive, lambda_kf1 non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each epoch.
    pub loss_curve: Vec<f64>,
    /// Mean sampled-minus-greedy KF1 of each epoch (0 when disabled).
    pub kf1_advantage: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: Vec<usize>,
    /// Response ids followed by EOS.
    pub target: Vec<usize>,
    pub knowledge: Vec<KnowledgePiece>,
}

pub fn encode_example(dp: &DataPoint, model: &ConditionalLM, max_response_tokens: usize) -> EncodedExample {
    let vocab = model.vocab();
    let mut target: Vec<usize> = dp
        .response
        .tokens
        .iter()
        .take(max_response_tokens)
        .map(|t| vocab.id(t))
        .collect();
    target.push(Vocabulary::EOS);
    EncodedExample {
        input: encode_datapoint_input(dp, model, max_response_tokens),
        target,
        knowledge: dp.knowledge.clone(),
    }
}

/// Content tokens of a generated id sequence (EOS and UNK dropped).
pub fn decode_tokens(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .filter(|&&i| !Vocabulary::is_reserved(i))
        .filter_map(|&i| vocab.token(i).map(str::to_string))
        .collect()
}

/// Trains `model` in place. Deterministic for a given `rng_seed`; data
/// order, dropout and self-critical sampling use independent streams.
pub fn train_supervised(model: &mut ConditionalLM, datapoints: &[DataPoint], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if datapoints.is_empty() {
        return Err(GcnError::InvalidInput("training set is empty".into()));
    }
    let examples: Vec<EncodedExample> = datapoints
        .iter()
        .map(|dp| encode_example(dp, model, cfg.max_response_tokens))
        .collect();
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut dropout_rng = seed::rng_for(cfg.rng_seed, "dropout", 0);
    let mut sc_rng = seed::rng_for(cfg.rng_seed, "self-critical", 0);
    let sc_spec = SampleSpec {
        strategy: Strategy::Nucleus,
        p: 1.0,
        temperature: 1.0,
        max_new_tokens: cfg.max_response_tokens,
        ..Default::default()
    };
    let greedy_spec = SampleSpec::greedy(cfg.max_response_tokens);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::rng_for(cfg.rng_seed, "shuffle", epoch as u64));
        let (mut ce_sum, mut ce_n, mut adv_sum, mut adv_n) = (0.0, 0usize, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(model.params());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                let mut g = Graph::new();
                let lp = model.forward_logprobs(&mut g, &ex.input, &ex.target, Some(&mut dropout_rng))?;
                let n = ex.target.len() as f64;
                let loss = g.weighted_sum(lp, vec![-1.0 / n; ex.target.len()]);
                let ce = g.value(loss).data[0];
                if !ce.is_finite() {
                    return Err(GcnError::Divergence(format!(
                        "cross-entropy {ce} at epoch {epoch}, step {}, example {i}",
                        report.steps
                    )));
                }
                ce_sum += ce;
                ce_n += 1;
                accumulate(&mut grads, g.backward(loss), scale);

                if cfg.lambda_kf1 > 0.0 && !ex.knowledge.is_empty() {
                    let sampled = model.generate_with(&ex.input, &sc_spec, &mut sc_rng)?;
                    let greedy = model.generate_with(&ex.input, &greedy_spec, &mut sc_rng)?;
                    let vocab = model.vocab();
                    let reward = kf1_multi(&decode_tokens(vocab, sampled.content()), &ex.knowledge);
                    let baseline = kf1_multi(&decode_tokens(vocab, greedy.content()), &ex.knowledge);
                    let advantage = reward - baseline;
                    adv_sum += advantage;
                    adv_n += 1;
                    if advantage != 0.0 && !sampled.tokens.is_empty() {
                        let mut g = Graph::new();
                        let lp = model.forward_logprobs(&mut g, &ex.input, &sampled.tokens, Some(&mut dropout_rng))?;
                        let m = sampled.tokens.len() as f64;
                        let w = -cfg.lambda_kf1 * advantage / m;
                        let loss = g.weighted_sum(lp, vec![w; sampled.tokens.len()]);
                        accumulate(&mut grads, g.backward(loss), scale);
                    }
                }
            }
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(GcnError::Divergence(format!(
                    "gradient norm {norm} at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            opt.step(model.params_mut(), &grads);
            report.steps += 1;
        }
        report.loss_curve.push(ce_sum / ce_n as f64);
        report
            .kf1_advantage
            .push(if adv_n == 0 { 0.0 } else { adv_sum / adv_n as f64 });
        log::debug!(
            "epoch {epoch}: ce {:.4}, kf1 advantage {:.4}",
            report.loss_curve[epoch],
            report.kf1_advantage[epoch]
        );
    }
    Ok(report)
}
