//! Learner-performance reward: weighted metric mixes, KL-anchored shaping
//! and the meta-level validation score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DataPoint, KnowledgePiece, Mode};
use crate::error::{GcnError, Result};
use crate::evaluate::{generate_responses, EmbeddingTable};
use crate::metrics::{self, MetricReport, RougeVariant, Smoothing};
use crate::model::ConditionalLM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    Bleu1,
    /// BLEU-4 with method-7 smoothing.
    Bleu4,
    RougeL,
    EmbedScore,
    Kf1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub mode: Mode,
    pub weights: BTreeMap<RewardMetric, f64>,
}

impl RewardWeights {
    /// Open-domain: 0.1 BLEU, 0.01 ROUGE-L, 0.95 embedding score.
    /// Knowledge-grounded: 0.75 BLEU-1, 0.25 KF1.
    pub fn defaults(mode: Mode) -> Self {
        let weights = match mode {
            Mode::OpenDomain => BTreeMap::from([
                (RewardMetric::Bleu4, 0.1),
                (RewardMetric::RougeL, 0.01),
                (RewardMetric::EmbedScore, 0.95),
            ]),
            Mode::KnowledgeGrounded => BTreeMap::from([(RewardMetric::Bleu1, 0.75), (RewardMetric::Kf1, 0.25)]),
        };
        RewardWeights { mode, weights }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(GcnError::Config("reward weights must be finite and non-negative".into()));
        }
        if !self.weights.values().any(|&w| w > 0.0) {
            return Err(GcnError::Config("at least one reward weight must be positive".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn needs_embedding(&self) -> bool {
        self.weights.get(&RewardMetric::EmbedScore).is_some_and(|&w| w > 0.0)
    }

    /// Weighted sum of component scores divided by the weight total.
    pub fn combine(&self, components: &BTreeMap<RewardMetric, f64>) -> Result<f64> {
        self.validate()?;
        let mut sum = 0.0;
        for (metric, &w) in &self.weights {
            if w == 0.0 {
                continue;
            }
            let v = components
                .get(metric)
                .ok_or_else(|| GcnError::InvalidInput(format!("missing reward component {metric:?}")))?;
            sum += w * v;
        }
        Ok(sum / self.total())
    }
}

/// One scored response: candidate tokens, the human reference and the
/// knowledge the response was conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct RewardSample<'a> {
    pub candidate: &'a [String],
    pub reference: &'a [String],
    pub knowledge: &'a [KnowledgePiece],
}

/// Batch-mean component metrics needed by `weights`.
pub fn components(
    samples: &[RewardSample<'_>],
    weights: &RewardWeights,
    embedding: Option<&EmbeddingTable>,
) -> Result<BTreeMap<RewardMetric, f64>> {
    if samples.is_empty() {
        return Err(GcnError::InvalidInput("reward over an empty batch".into()));
    }
    let mut out = BTreeMap::new();
    for (&metric, &w) in &weights.weights {
        if w == 0.0 {
            continue;
        }
        let mut total = 0.0;
        for s in samples {
            let refs = [s.reference.to_vec()];
            total += match metric {
                RewardMetric::Bleu1 => metrics::bleu(s.candidate, &refs, 1, Smoothing::None)?,
                RewardMetric::Bleu4 => metrics::bleu(s.candidate, &refs, 4, Smoothing::Method7)?,
                RewardMetric::RougeL => metrics::rouge(s.candidate, s.reference, RougeVariant::RL),
                RewardMetric::Kf1 => metrics::kf1_multi(s.candidate, s.knowledge),
                RewardMetric::EmbedScore => {
                    let e = embedding.ok_or_else(|| {
                        GcnError::Config("embedding-score reward needs an embedding table".into())
                    })?;
                    metrics::embed_score(s.candidate, s.reference, |t| e.embed(t))
                }
            };
        }
        out.insert(metric, total / samples.len() as f64);
    }
    Ok(out)
}

/// Normalized weighted metric mix over a batch; lies in [0, 1].
pub fn raw_reward(samples: &[RewardSample<'_>], weights: &RewardWeights, embedding: Option<&EmbeddingTable>) -> Result<f64> {
    let c = components(samples, weights, embedding)?;
    Ok(weights.combine(&c)?.clamp(0.0, 1.0))
}

/// The weighted mix read off an evaluation report computed with the same
/// per-sentence metrics.
pub fn performance_from_report(report: &MetricReport, weights: &RewardWeights) -> Result<f64> {
    let mut c = BTreeMap::new();
    for (metric, value) in [
        (RewardMetric::Bleu1, report.bleu1),
        (RewardMetric::Bleu4, report.bleu4),
        (RewardMetric::RougeL, report.rouge_l),
        (RewardMetric::EmbedScore, report.embed_score),
        (RewardMetric::Kf1, report.kf1),
    ] {
        if let Some(v) = value {
            c.insert(metric, v);
        }
    }
    Ok(weights.combine(&c)?.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub beta: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig { beta: 0.02 }
    }
}

/// `R = r - beta * (log G(U|C) - log G_ref(U|C))`.
pub fn shaped_reward(r: f64, logp_g: f64, logp_ref: f64, config: &ShapingConfig) -> Result<f64> {
    if !logp_g.is_finite() || !logp_ref.is_finite() {
        return Err(GcnError::InvalidInput(format!(
            "non-finite log-probabilities in shaped reward: {logp_g}, {logp_ref}"
        )));
    }
    Ok(r - config.beta * (logp_g - logp_ref))
}

/// Greedy responses of `learner` on the validation set, scored against the
/// human responses with the unshaped metric mix.
pub fn performance_meta(
    learner: &ConditionalLM,
    val: &[DataPoint],
    weights: &RewardWeights,
    embedding: Option<&EmbeddingTable>,
    max_new_tokens: usize,
) -> Result<f64> {
    if val.is_empty() {
        return Err(GcnError::InvalidInput("validation set is empty".into()));
    }
    let responses = generate_responses(learner, val, max_new_tokens)?;
    let samples: Vec<RewardSample<'_>> = responses
        .iter()
        .zip(val)
        .map(|(c, dp)| RewardSample {
            candidate: c,
            reference: &dp.response.tokens,
            knowledge: &dp.knowledge,
        })
        .collect();
    raw_reward(&samples, weights, embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all(v: f64) -> BTreeMap<RewardMetric, f64> {
        [RewardMetric::Bleu1, RewardMetric::Bleu4, RewardMetric::RougeL, RewardMetric::EmbedScore, RewardMetric::Kf1]
            .into_iter()
            .map(|m| (m, v))
            .collect()
    }

    #[test]
    fn normalized_bounds() {
        for mode in [Mode::OpenDomain, Mode::KnowledgeGrounded] {
            let w = RewardWeights::defaults(mode);
            assert!((w.combine(&all(1.0)).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(w.combine(&all(0.0)).unwrap(), 0.0);
        }
        assert!((RewardWeights::defaults(Mode::OpenDomain).total() - 1.06).abs() < 1e-12);
    }

    #[test]
    fn knowledge_grounded_mix() {
        let w = RewardWeights::defaults(Mode::KnowledgeGrounded);
        let c = BTreeMap::from([(RewardMetric::Bleu1, 0.4), (RewardMetric::Kf1, 0.2)]);
        assert!((w.combine(&c).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn invalid_weights() {
        let mut w = RewardWeights::defaults(Mode::KnowledgeGrounded);
        w.weights.insert(RewardMetric::Kf1, -1.0);
        assert!(w.validate().is_err());
        let zero = RewardWeights {
            mode: Mode::OpenDomain,
            weights: BTreeMap::from([(RewardMetric::Bleu4, 0.0)]),
        };
        assert!(zero.validate().is_err());
        assert!(raw_reward(&[], &RewardWeights::defaults(Mode::KnowledgeGrounded), None).is_err());
    }

    #[test]
    fn shaping_examples() {
        let cfg = ShapingConfig { beta: 0.02 };
        assert!((shaped_reward(0.5, -1.0, -3.0, &cfg).unwrap() - 0.46).abs() < 1e-12);
        assert_eq!(shaped_reward(0.5, -1.0, -3.0, &ShapingConfig { beta: 0.0 }).unwrap(), 0.5);
        assert_eq!(shaped_reward(0.7, -2.0, -2.0, &cfg).unwrap(), 0.7);
        assert!(shaped_reward(0.5, f64::NEG_INFINITY, -1.0, &cfg).is_err());
    }

    #[test]
    fn open_domain_without_embedding_is_config_error() {
        let cand = vec!["a".to_string()];
        let s = RewardSample {
            candidate: &cand,
            reference: &cand,
            knowledge: &[],
        };
        let err = raw_reward(&[s], &RewardWeights::defaults(Mode::OpenDomain), None).unwrap_err();
        assert!(err.is_config());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(
            vals in prop::collection::vec(0.0f64..=1.0, 5),
            which in 0usize..5,
            bump in 0.0f64..1.0,
            od in any::<bool>(),
        ) {
            let mode = if od { Mode::OpenDomain } else { Mode::KnowledgeGrounded };
            let w = RewardWeights::defaults(mode);
            let keys = [RewardMetric::Bleu1, RewardMetric::Bleu4, RewardMetric::RougeL, RewardMetric::EmbedScore, RewardMetric::Kf1];
            let c: BTreeMap<_, _> = keys.iter().copied().zip(vals.iter().copied()).collect();
            let base = w.combine(&c).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
            let mut higher = c.clone();
            let v = higher.get_mut(&keys[which]).unwrap();
            *v = (*v + bump).min(1.0);
            prop_assert!(w.combine(&higher).unwrap() >= base - 1e-15);
        }

        #[test]
        fn shaping_is_identity_without_kl(r in -1.0f64..2.0, a in -50.0f64..0.0, beta in 0.0f64..1.0) {
            prop_assert_eq!(shaped_reward(r, a, a, &ShapingConfig { beta }).unwrap(), r);
            prop_assert_eq!(shaped_reward(r, a, a - 3.0, &ShapingConfig { beta: 0.0 }).unwrap(), r);
        }
    }
}
