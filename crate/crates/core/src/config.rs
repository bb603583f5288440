//! Whole-run configuration, loaded from TOML and validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Mode, SplitSpec, SyntheticSpec};
use crate::error::{GcnError, Result};
use crate::model::{LMConfig, SampleSpec, TrainConfig};
use crate::ppo::PpoConfig;
use crate::reward::{RewardWeights, ShapingConfig};

/// Experimental condition of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// Learner trained on seed data only.
    Baseline,
    /// Seed data plus synthetic data from the seed-trained generator.
    GcnNoRl,
    /// Full meta-loop with reinforcement-learned generator.
    #[default]
    GcnRl,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::GcnNoRl => "gcn-no-rl",
            Condition::GcnRl => "gcn-rl",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = GcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Condition::Baseline),
            "gcn-no-rl" => Ok(Condition::GcnNoRl),
            "gcn-rl" => Ok(Condition::GcnRl),
            other => Err(GcnError::Config(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// The loop stops once the validation score reaches `1 - epsilon`.
    pub epsilon: f64,
    pub max_meta_iterations: usize,
    /// Inner-loop synthetic set size as a multiple of the seed set.
    pub synth_multiplier_inner: f64,
    /// Final synthetic set size as a multiple of the seed set.
    pub synth_multiplier_final: f64,
    pub learner_epochs: usize,
    pub runs_to_average: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            epsilon: 0.05,
            max_meta_iterations: 10,
            synth_multiplier_inner: 1.0,
            synth_multiplier_final: 5.0,
            learner_epochs: 3,
            runs_to_average: 3,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(GcnError::Config(format!("meta.epsilon must be in (0, 1], got {}", self.epsilon)));
        }
        if !(self.synth_multiplier_inner >= 1.0) || !(self.synth_multiplier_final >= 1.0) {
            return Err(GcnError::Config("meta synthetic multipliers must be at least 1".into()));
        }
        if self.learner_epochs == 0 || self.runs_to_average == 0 {
            return Err(GcnError::Config("meta.learner_epochs and meta.runs_to_average must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus file; when absent a synthetic corpus is generated from
    /// `synthetic_corpus` and `seed`.
    pub corpus: Option<PathBuf>,
    pub synthetic_corpus: SyntheticSpec,
    pub mode: Mode,
    pub condition: Condition,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub context_turns: usize,
    pub knowledge_pieces: usize,
    pub vocab_min_count: usize,
    pub split: SplitSpec,
    pub generator: LMConfig,
    pub learner: LMConfig,
    /// Generator seed fine-tuning; the KF1 term is always disabled.
    pub generator_training: TrainConfig,
    /// Learner training; `epochs` is taken from `meta.learner_epochs`.
    pub learner_training: TrainConfig,
    pub sampling: SampleSpec,
    /// Defaults to the mode's standard mix.
    pub reward: Option<RewardWeights>,
    pub shaping: ShapingConfig,
    pub ppo: PpoConfig,
    pub meta: MetaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            synthetic_corpus: SyntheticSpec::default(),
            mode: Mode::KnowledgeGrounded,
            condition: Condition::GcnRl,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            context_turns: 2,
            knowledge_pieces: 3,
            vocab_min_count: 1,
            split: SplitSpec::default(),
            generator: LMConfig::default(),
            learner: LMConfig::default(),
            generator_training: TrainConfig {
                lambda_kf1: 0.0,
                ..TrainConfig::default()
            },
            learner_training: TrainConfig::default(),
            sampling: SampleSpec::default(),
            reward: None,
            shaping: ShapingConfig::default(),
            ppo: PpoConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small models and budgets that run the full pipeline on one CPU core
    /// in minutes.
    pub fn desk() -> Self {
        let lm = LMConfig {
            embed_dim: 32,
            hidden_dim: 64,
            num_layers: 1,
            max_seq_len: 96,
            dropout: 0.1,
            ..LMConfig::default()
        };
        RunConfig {
            generator: lm.clone(),
            learner: lm,
            generator_training: TrainConfig {
                epochs: 20,
                learning_rate: 3e-3,
                lambda_kf1: 0.0,
                batch_size: 8,
                max_response_tokens: 20,
                ..TrainConfig::default()
            },
            learner_training: TrainConfig {
                learning_rate: 3e-3,
                lambda_kf1: 0.1,
                batch_size: 8,
                max_response_tokens: 20,
                ..TrainConfig::default()
            },
            sampling: SampleSpec {
                max_new_tokens: 20,
                ..SampleSpec::default()
            },
            ppo: PpoConfig {
                learning_rate: 3e-4,
                rollouts_per_update: 32,
                minibatch_size: 8,
                ..PpoConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| GcnError::Config(e.to_string().trim_end().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GcnError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            GcnError::Config(m) => GcnError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GcnError::Serde(e.to_string()))
    }

    pub fn reward_weights(&self) -> RewardWeights {
        self.reward.clone().unwrap_or_else(|| RewardWeights::defaults(self.mode))
    }

    /// Checks every section; the vocabulary size of both models is filled
    /// in from data and therefore not checked here.
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                GcnError::Config(m) => GcnError::Config(format!("[{name}] {m}")),
                other => other,
            })
        };
        section("split", self.split.validate())?;
        for (name, lm) in [("generator", &self.generator), ("learner", &self.learner)] {
            let probe = LMConfig {
                vocab_size: lm.vocab_size.max(crate::corpus::Vocabulary::NUM_RESERVED + 1),
                ..lm.clone()
            };
            section(name, probe.validate())?;
        }
        section("generator_training", self.generator_training.validate())?;
        section("learner_training", self.learner_training.validate())?;
        section("sampling", self.sampling.validate())?;
        section("ppo", self.ppo.validate())?;
        section("meta", self.meta.validate())?;
        let weights = self.reward_weights();
        section("reward", weights.validate())?;
        if weights.mode != self.mode {
            return Err(GcnError::Config(format!(
                "[reward] mode {:?} does not match run mode {:?}",
                weights.mode, self.mode
            )));
        }
        if !(self.shaping.beta >= 0.0 && self.shaping.beta.is_finite()) {
            return Err(GcnError::Config("[shaping] beta must be finite and non-negative".into()));
        }
        if self.context_turns == 0 {
            return Err(GcnError::Config("context_turns must be at least 1".into()));
        }
        if self.mode == Mode::KnowledgeGrounded && self.knowledge_pieces == 0 {
            return Err(GcnError::Config("knowledge_pieces must be at least 1 in knowledge-grounded mode".into()));
        }
        if self.vocab_min_count == 0 {
            return Err(GcnError::Config("vocab_min_count must be at least 1".into()));
        }
        let budget = self.sampling.max_new_tokens.max(self.learner_training.max_response_tokens) + 2;
        for (name, lm) in [("generator", &self.generator), ("learner", &self.learner)] {
            if lm.max_seq_len <= budget {
                return Err(GcnError::Config(format!(
                    "[{name}] max_seq_len {} leaves no room for the input",
                    lm.max_seq_len
                )));
            }
        }
        Ok(())
    }
}
