//! Proximal policy optimization of the generator against a frozen
//! reference copy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::DataPoint;
use crate::error::{GcnError, Result};
use crate::model::graph::Graph;
use crate::model::optim::{accumulate, clip_grad_norm, zero_grads, Adam};
use crate::model::{decode_tokens, encode_datapoint_input, ConditionalLM, SampleSpec};
use crate::reward::{shaped_reward, ShapingConfig};
use crate::seed::Rng;

/// Where each trajectory's raw reward comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardChannel {
    /// Metric mix of the sampled response against the seed reference.
    #[default]
    PerSample,
    /// The meta-iteration's learner validation score, shared by every
    /// trajectory.
    BroadcastMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub rollouts_per_update: usize,
    pub max_grad_norm: f64,
    /// Mean KL (nats) above which update stats carry a warning.
    pub kl_ceiling: f64,
    /// PPO updates per meta-iteration.
    pub updates_per_iteration: usize,
    pub reward_channel: RewardChannel,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            epochs_per_batch: 4,
            minibatch_size: 8,
            learning_rate: 1e-4,
            rollouts_per_update: 32,
            max_grad_norm: 1.0,
            kl_ceiling: 10.0,
            updates_per_iteration: 1,
            reward_channel: RewardChannel::PerSample,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GcnError::Config(format!(
                "ppo.clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.epochs_per_batch == 0
            || self.minibatch_size == 0
            || self.rollouts_per_update == 0
            || self.updates_per_iteration == 0
        {
            return Err(GcnError::Config("ppo counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) || !(self.kl_ceiling > 0.0) {
            return Err(GcnError::Config(
                "ppo.learning_rate, ppo.max_grad_norm and ppo.kl_ceiling must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub input: Vec<usize>,
    /// Sampled action ids, including a terminating EOS when emitted.
    pub response: Vec<usize>,
    pub behavior_logprobs: Vec<f64>,
    pub reference_logprobs: Vec<f64>,
    pub reward: f64,
    pub shaped_reward: f64,
}

impl Trajectory {
    /// `log G(U|C) - log G_ref(U|C)` from the stored per-token values.
    pub fn log_ratio(&self) -> f64 {
        self.behavior_logprobs.iter().sum::<f64>() - self.reference_logprobs.iter().sum::<f64>()
    }
}

/// One trajectory per context: sample from `generator`, score with
/// `reward_fn(context, response tokens)`, shape against `reference`.
pub fn collect_rollouts<F>(
    generator: &ConditionalLM,
    reference: &ConditionalLM,
    contexts: &[&DataPoint],
    spec: &SampleSpec,
    shaping: &ShapingConfig,
    mut reward_fn: F,
    rng: &mut Rng,
) -> Result<Vec<Trajectory>>
where
    F: FnMut(&DataPoint, &[String]) -> Result<f64>,
{
    if contexts.is_empty() {
        return Err(GcnError::InvalidInput("no contexts for rollouts".into()));
    }
    contexts
        .iter()
        .map(|dp| {
            let input = encode_datapoint_input(dp, generator, spec.max_new_tokens);
            let out = generator.generate_with(&input, spec, rng)?;
            let reference_logprobs = reference.logprob_of(&input, &out.tokens)?;
            let words = decode_tokens(generator.vocab(), out.content());
            let reward = reward_fn(dp, &words)?;
            let behavior_logprobs = out.full_logprobs;
            let lg: f64 = behavior_logprobs.iter().sum();
            let lr: f64 = reference_logprobs.iter().sum();
            Ok(Trajectory {
                shaped_reward: shaped_reward(reward, lg, lr, shaping)?,
                input,
                response: out.tokens,
                behavior_logprobs,
                reference_logprobs,
                reward,
            })
        })
        .collect()
}

/// Shaped rewards broadcast over each trajectory's tokens and whitened
/// across the batch.
pub fn compute_advantages(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    let n = trajectories.len() as f64;
    let mean = trajectories.iter().map(|t| t.shaped_reward).sum::<f64>() / n;
    let var = trajectories.iter().map(|t| (t.shaped_reward - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    trajectories
        .iter()
        .map(|t| {
            let a = if std == 0.0 { 0.0 } else { (t.shaped_reward - mean) / (std + 1e-8) };
            vec![a; t.response.len()]
        })
        .collect()
}

/// Shaped rewards minus a fixed baseline, broadcast without whitening.
pub fn baseline_advantages(trajectories: &[Trajectory], baseline: f64) -> Vec<Vec<f64>> {
    trajectories
        .iter()
        .map(|t| vec![t.shaped_reward - baseline; t.response.len()])
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_r: f64,
    #[serde(rename = "mean_R")]
    pub mean_shaped: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub kl_warning: bool,
    pub steps: usize,
}

/// Mean clipped-surrogate objective and per-token ratios of `model`
/// on stored trajectories, without updating.
pub fn surrogate(
    model: &ConditionalLM,
    trajectories: &[Trajectory],
    advantages: &[Vec<f64>],
    clip_epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let (mut obj, mut tokens, mut ratios) = (0.0, 0usize, Vec::new());
    for (t, a) in trajectories.iter().zip(advantages) {
        let mut g = Graph::new();
        let lp = model.forward_logprobs(&mut g, &t.input, &t.response, None)?;
        ratios.extend(g.value(lp).data.iter().zip(&t.behavior_logprobs).map(|(n, o)| (n - o).exp()));
        let (_, stats) = g.ppo_surrogate(lp, &t.behavior_logprobs, a, clip_epsilon, 1.0);
        obj += stats.objective;
        tokens += stats.tokens;
    }
    Ok((obj / tokens.max(1) as f64, ratios))
}

/// Maximizes the clipped surrogate over `epochs_per_batch` shuffled passes
/// with a fresh Adam state.
pub fn ppo_update(
    model: &mut ConditionalLM,
    trajectories: &[Trajectory],
    advantages: &[Vec<f64>],
    config: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    if trajectories.is_empty() || trajectories.len() != advantages.len() {
        return Err(GcnError::InvalidInput("trajectories and advantages must be non-empty and aligned".into()));
    }
    if !(config.clip_epsilon > 0.0) || config.epochs_per_batch == 0 || config.minibatch_size == 0 {
        return Err(GcnError::Config("invalid ppo update settings".into()));
    }
    for (t, a) in trajectories.iter().zip(advantages) {
        if t.response.len() != t.behavior_logprobs.len()
            || t.response.len() != t.reference_logprobs.len()
            || t.response.len() != a.len()
        {
            return Err(GcnError::InvalidInput("trajectory sequences differ in length".into()));
        }
    }
    let n = trajectories.len() as f64;
    let mut stats = PpoStats {
        mean_r: trajectories.iter().map(|t| t.reward).sum::<f64>() / n,
        mean_shaped: trajectories.iter().map(|t| t.shaped_reward).sum::<f64>() / n,
        mean_kl: trajectories.iter().map(Trajectory::log_ratio).sum::<f64>() / n,
        ..Default::default()
    };
    stats.kl_warning = stats.mean_kl > config.kl_ceiling;
    if stats.kl_warning {
        log::warn!("mean KL {:.3} exceeds ceiling {}", stats.mean_kl, config.kl_ceiling);
    }
    let mut opt = Adam::new(model.params(), config.learning_rate);
    let (mut clipped, mut seen) = (0usize, 0usize);
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    for epoch in 0..config.epochs_per_batch {
        order.shuffle(rng);
        for batch in order.chunks(config.minibatch_size) {
            let tokens: usize = batch.iter().map(|&i| trajectories[i].response.len()).sum();
            let scale = 1.0 / tokens as f64;
            let mut grads = zero_grads(model.params());
            for &i in batch {
                let t = &trajectories[i];
                let mut g = Graph::new();
                let lp = model.forward_logprobs(&mut g, &t.input, &t.response, None)?;
                let (loss, s) = g.ppo_surrogate(lp, &t.behavior_logprobs, &advantages[i], config.clip_epsilon, scale);
                let value = g.value(loss).data[0];
                if !value.is_finite() {
                    return Err(GcnError::Divergence(format!(
                        "non-finite PPO loss at epoch {epoch}, trajectory {i}; stats {}",
                        serde_json::to_string(&stats).unwrap_or_default()
                    )));
                }
                clipped += s.clipped;
                seen += s.tokens;
                accumulate(&mut grads, g.backward(loss), 1.0);
            }
            clip_grad_norm(&mut grads, config.max_grad_norm);
            opt.step(model.params_mut(), &grads);
            stats.steps += 1;
        }
    }
    stats.clip_fraction = clipped as f64 / seen.max(1) as f64;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{tokenize, Speaker, Utterance, Vocabulary};
    use crate::model::{LMConfig, Strategy};
    use crate::seed;

    fn traj(r: f64, len: usize) -> Trajectory {
        Trajectory {
            input: vec![Vocabulary::SEP_RSP],
            response: vec![Vocabulary::EOS; len],
            behavior_logprobs: vec![0.0; len],
            reference_logprobs: vec![0.0; len],
            reward: r,
            shaped_reward: r,
        }
    }

    #[test]
    fn whitening() {
        let adv = compute_advantages(&[traj(0.0, 2), traj(1.0, 3)]);
        assert!(adv[0].iter().all(|a| (a + 1.0).abs() < 1e-6));
        assert!(adv[1].iter().all(|a| (a - 1.0).abs() < 1e-6));
        assert_eq!(adv[1].len(), 3);
        assert!(compute_advantages(&[traj(0.3, 2), traj(0.3, 1)]).iter().flatten().all(|&a| a == 0.0));
        assert_eq!(compute_advantages(&[traj(0.7, 4)]), vec![vec![0.0; 4]]);
        let many: Vec<_> = (0..7).map(|i| traj((i * i) as f64 * 0.1, 1)).collect();
        let sum: f64 = compute_advantages(&many).iter().flatten().sum();
        assert!(sum.abs() < 1e-6);
    }

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_tokens(tokenize("the cat sat on a mat")))
    }

    fn tiny(seed: u64) -> ConditionalLM {
        let cfg = LMConfig {
            vocab_size: vocab().len(),
            embed_dim: 8,
            hidden_dim: 16,
            num_layers: 1,
            max_seq_len: 24,
            dropout: 0.0,
            ..Default::default()
        };
        ConditionalLM::init(cfg, vocab(), seed).unwrap()
    }

    fn contexts(n: usize) -> Vec<DataPoint> {
        (0..n)
            .map(|i| DataPoint {
                context: vec![Utterance::new(Speaker::A, if i % 2 == 0 { "the cat" } else { "a mat" }).unwrap()],
                knowledge: vec![],
                response: Utterance::new(Speaker::B, "the cat sat").unwrap(),
                origin: crate::corpus::Origin::Seed,
                gold_knowledge: vec![],
            })
            .collect()
    }

    fn nucleus() -> SampleSpec {
        SampleSpec {
            strategy: Strategy::Nucleus,
            p: 1.0,
            max_new_tokens: 5,
            ..Default::default()
        }
    }

    #[test]
    fn identical_policies_have_no_kl() {
        let g = tiny(1);
        let data = contexts(32);
        let refs: Vec<&DataPoint> = data.iter().collect();
        let mut rng = seed::rng_for(3, "rollout", 0);
        let trajs = collect_rollouts(&g, &g, &refs, &nucleus(), &ShapingConfig::default(), |_, w| Ok(w.len() as f64 / 5.0), &mut rng).unwrap();
        assert_eq!(trajs.len(), 32);
        for t in &trajs {
            assert!(t.log_ratio().abs() < 1e-9);
            assert!((t.shaped_reward - t.reward).abs() < 1e-9);
            assert_eq!(t.response.len(), t.behavior_logprobs.len());
            assert_eq!(t.response.len(), t.reference_logprobs.len());
        }
        assert!(collect_rollouts(&g, &g, &[], &nucleus(), &ShapingConfig::default(), |_, _| Ok(0.0), &mut rng).is_err());
    }

    #[test]
    fn greedy_behavior_logprobs_match_recomputation() {
        let g = tiny(2);
        let r = tiny(5);
        let data = contexts(4);
        let refs: Vec<&DataPoint> = data.iter().collect();
        let mut rng = seed::rng_for(0, "rollout", 0);
        let trajs = collect_rollouts(&g, &r, &refs, &SampleSpec::greedy(6), &ShapingConfig::default(), |_, _| Ok(0.5), &mut rng).unwrap();
        for t in &trajs {
            let again = g.logprob_of(&t.input, &t.response).unwrap();
            for (a, b) in again.iter().zip(&t.behavior_logprobs) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((t.shaped_reward - (0.5 - 0.02 * t.log_ratio())).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_ratio_is_one_and_zero_advantage_is_noop() {
        let mut g = tiny(4);
        let data = contexts(8);
        let refs: Vec<&DataPoint> = data.iter().collect();
        let mut rng = seed::rng_for(9, "rollout", 0);
        let trajs = collect_rollouts(&g, &g, &refs, &nucleus(), &ShapingConfig::default(), |_, w| Ok(w.len() as f64), &mut rng).unwrap();
        let adv = compute_advantages(&trajs);
        let (obj, ratios) = surrogate(&g, &trajs, &adv, 0.2).unwrap();
        assert!(ratios.iter().all(|r| (r - 1.0).abs() < 1e-9));
        let tokens: usize = adv.iter().map(Vec::len).sum();
        let mean_adv = adv.iter().flatten().sum::<f64>() / tokens as f64;
        assert!((obj - mean_adv).abs() < 1e-9);

        let before = g.params().to_vec();
        let zeros: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.response.len()]).collect();
        ppo_update(&mut g, &trajs, &zeros, &PpoConfig::default(), &mut rng).unwrap();
        assert_eq!(g.params(), &before[..]);
    }

    #[test]
    fn bandit_learns_preferred_action() {
        let v = Arc::new(Vocabulary::from_tokens(["a".to_string(), "b".to_string()]));
        let (a, b) = (v.id("a"), v.id("b"));
        let cfg = LMConfig {
            vocab_size: v.len(),
            embed_dim: 8,
            hidden_dim: 16,
            num_layers: 1,
            max_seq_len: 4,
            dropout: 0.0,
            ..Default::default()
        };
        let mut mask = vec![false; v.len()];
        mask[a] = true;
        mask[b] = true;
        let mut g = ConditionalLM::init(cfg, v.clone(), 11).unwrap().with_emittable(mask).unwrap();
        let reference = g.clone();
        let spec = SampleSpec {
            strategy: Strategy::Nucleus,
            p: 1.0,
            max_new_tokens: 1,
            ..Default::default()
        };
        let ppo = PpoConfig {
            learning_rate: 1e-2,
            rollouts_per_update: 16,
            ..Default::default()
        };
        let input = [Vocabulary::SEP_RSP];
        let mut rng = seed::rng_for(11, "bandit", 0);
        for _ in 0..200 {
            let mut trajs = Vec::new();
            for _ in 0..ppo.rollouts_per_update {
                let out = g.generate_with(&input, &spec, &mut rng).unwrap();
                let reference_logprobs = reference.logprob_of(&input, &out.tokens).unwrap();
                let r = if out.tokens[0] == a { 1.0 } else { 0.0 };
                let lg: f64 = out.full_logprobs.iter().sum();
                let lr: f64 = reference_logprobs.iter().sum();
                trajs.push(Trajectory {
                    input: input.to_vec(),
                    shaped_reward: shaped_reward(r, lg, lr, &ShapingConfig::default()).unwrap(),
                    response: out.tokens,
                    behavior_logprobs: out.full_logprobs,
                    reference_logprobs,
                    reward: r,
                });
            }
            let adv = compute_advantages(&trajs);
            ppo_update(&mut g, &trajs, &adv, &ppo, &mut rng).unwrap();
        }
        assert!(g.next_token_distribution(&input).unwrap()[a] > 0.95);
    }

    #[test]
    fn unclipped_update_follows_policy_gradient_signs() {
        let mut g = tiny(6);
        let data = contexts(12);
        let refs: Vec<&DataPoint> = data.iter().collect();
        let mut rng = seed::rng_for(21, "rollout", 0);
        let shaping = ShapingConfig { beta: 0.0 };
        let trajs = collect_rollouts(&g, &g, &refs, &nucleus(), &shaping, |_, w| Ok(w.len() as f64), &mut rng).unwrap();
        let adv = compute_advantages(&trajs);
        let tokens: usize = adv.iter().map(Vec::len).sum();
        let mut pg = zero_grads(g.params());
        for (t, a) in trajs.iter().zip(&adv) {
            let mut gr = Graph::new();
            let lp = g.forward_logprobs(&mut gr, &t.input, &t.response, None).unwrap();
            let obj = gr.weighted_sum(lp, a.clone());
            accumulate(&mut pg, gr.backward(obj), 1.0 / tokens as f64);
        }
        let before = g.params().to_vec();
        let cfg = PpoConfig {
            clip_epsilon: 1e9,
            epochs_per_batch: 1,
            minibatch_size: trajs.len(),
            max_grad_norm: 1e12,
            ..Default::default()
        };
        ppo_update(&mut g, &trajs, &adv, &cfg, &mut rng).unwrap();
        let mut compared = 0;
        for ((p0, p1), d) in before.iter().zip(g.params()).zip(&pg) {
            for i in 0..d.data.len() {
                if d.data[i].abs() > 1e-9 {
                    assert_eq!((p1.data[i] - p0.data[i]).signum(), d.data[i].signum());
                    compared += 1;
                }
            }
        }
        assert!(compared > 100);
    }
}
