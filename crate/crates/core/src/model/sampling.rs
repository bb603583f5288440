use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::masked_log_sum_exp;
use super::ConditionalLM;
use crate::corpus::Vocabulary;
use crate::error::{GcnError, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub strategy: Strategy,
    pub k: usize,
    pub p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            strategy: Strategy::Nucleus,
            k: 10,
            p: 0.9,
            temperature: 1.0,
            max_new_tokens: 24,
            rng_seed: 0,
        }
    }
}

impl SampleSpec {
    pub fn greedy(max_new_tokens: usize) -> Self {
        SampleSpec {
            strategy: Strategy::Greedy,
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GcnError::Config("sampling temperature must be positive".into()));
        }
        match self.strategy {
            Strategy::TopK if self.k == 0 => Err(GcnError::Config("top_k sampling needs k >= 1".into())),
            Strategy::Nucleus if !(self.p > 0.0 && self.p <= 1.0) => {
                Err(GcnError::Config("nucleus sampling needs p in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Generated ids, ending with EOS unless truncated.
    pub tokens: Vec<usize>,
    /// Log-probabilities of the chosen tokens under the sampling
    /// distribution (tempered and truncated for top-k and nucleus).
    pub logprobs: Vec<f64>,
    /// Log-probabilities of the chosen tokens under the model's full
    /// next-token distribution.
    pub full_logprobs: Vec<f64>,
    pub ended_with_eos: bool,
}

impl GenerationOutput {
    /// Generated ids without the terminating EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == Vocabulary::EOS => rest,
            _ => &self.tokens,
        }
    }
}

fn argmax(logits: &[f64], allowed: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (i, (&l, &a)) in logits.iter().zip(allowed).enumerate() {
        if a && (best == usize::MAX || l > logits[best]) {
            best = i;
        }
    }
    best
}

/// Candidate `(token, probability)` pairs of the sampling distribution,
/// renormalized.
fn sampling_distribution(logits: &[f64], allowed: &[bool], spec: &SampleSpec) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / spec.temperature).collect();
    let lse = masked_log_sum_exp(&scaled, allowed);
    let mut cand: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed[*i])
        .map(|(i, &s)| (i, (s - lse).exp()))
        .collect();
    match spec.strategy {
        Strategy::Greedy => unreachable!("greedy does not sample"),
        Strategy::TopK => {
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(spec.k);
        }
        Strategy::Nucleus => {
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut cum = 0.0;
            let mut keep = cand.len();
            for (i, (_, p)) in cand.iter().enumerate() {
                cum += p;
                if cum >= spec.p {
                    keep = i + 1;
                    break;
                }
            }
            cand.truncate(keep);
        }
    }
    let total: f64 = cand.iter().map(|c| c.1).sum();
    cand.iter_mut().for_each(|c| c.1 /= total);
    cand
}

impl ConditionalLM {
    /// Autoregressive generation seeded by `spec.rng_seed`.
    pub fn generate(&self, input: &[usize], spec: &SampleSpec) -> Result<GenerationOutput> {
        let mut rng = seed::rng_for(spec.rng_seed, "generate", 0);
        self.generate_with(input, spec, &mut rng)
    }

    /// Autoregressive generation drawing from a caller-supplied stream.
    /// Stops at EOS, after `max_new_tokens`, or at the position limit.
    pub fn generate_with(&self, input: &[usize], spec: &SampleSpec, rng: &mut Rng) -> Result<GenerationOutput> {
        spec.validate()?;
        if input.is_empty() {
            return Err(GcnError::InvalidInput("generation needs a non-empty input".into()));
        }
        let mut dec = self.decoder();
        let mut hidden = Vec::new();
        for &t in input {
            hidden = dec.step(self, t)?;
        }
        let limit = match self.config.architecture {
            super::Architecture::SelfAttention => self.config.max_seq_len,
            super::Architecture::Recurrent => usize::MAX,
        };
        let mut out = GenerationOutput {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            full_logprobs: Vec::new(),
            ended_with_eos: false,
        };
        for _ in 0..spec.max_new_tokens {
            let logits = self.logits(&hidden);
            let lse = masked_log_sum_exp(&logits, &self.emittable);
            let (token, lp) = match spec.strategy {
                Strategy::Greedy => {
                    let t = argmax(&logits, &self.emittable);
                    (t, logits[t] - lse)
                }
                _ => {
                    let cand = sampling_distribution(&logits, &self.emittable, spec);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = cand[cand.len() - 1];
                    for &c in &cand {
                        acc += c.1;
                        if u < acc {
                            chosen = c;
                            break;
                        }
                    }
                    (chosen.0, chosen.1.ln())
                }
            };
            out.tokens.push(token);
            out.logprobs.push(lp);
            out.full_logprobs.push(logits[token] - lse);
            if token == Vocabulary::EOS {
                out.ended_with_eos = true;
                break;
            }
            if dec.len() >= limit {
                break;
            }
            hidden = dec.step(self, token)?;
        }
        Ok(out)
    }
}
