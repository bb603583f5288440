//! Generative conversational networks at desk scale.
//!
//! A generator model writes synthetic knowledge-grounded dialogue data, a
//! freshly initialized learner is trained on it, and the learner's
//! validation score drives a PPO update of the generator.

pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod metaloop;
pub mod metrics;
pub mod model;
pub mod ppo;
pub mod retriever;
pub mod reward;
pub mod seed;

pub use corpus::{DataPoint, Dialogue, KnowledgePiece, Mode, Origin, Speaker, SplitSpec, Utterance, Vocabulary};
pub use error::{GcnError, Result};
pub use metrics::MetricReport;
pub use model::{Architecture, ConditionalLM, GenerationOutput, LMConfig, SampleSpec, Strategy, TrainConfig};
pub use retriever::TfidfIndex;
pub use ppo::{PpoConfig, RewardChannel, Trajectory};
pub use reward::{RewardMetric, RewardWeights, ShapingConfig};
pub use config::{Condition, MetaConfig, RunConfig};
pub use metaloop::{MetaRunState, Prepared, RunDir};
