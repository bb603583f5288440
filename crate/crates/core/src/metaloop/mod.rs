//! The generate → train learner → evaluate → update generator loop, final
//! data generation and learner training, and the ablation conditions.

mod ablation;
mod rundir;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{Condition, RunConfig};
use crate::corpus::{
    extract_datapoints, generate_synthetic_corpus, load_corpus, retrieve_knowledge, split, vocabulary_from_counts,
    Corpus, DataPoint, Mode, Origin, Utterance, Vocabulary,
};
use crate::error::{GcnError, Result};
use crate::evaluate::{evaluate, EmbeddingTable};
use crate::metrics::{oov_rate, MetricReport};
use crate::model::{decode_tokens, encode_datapoint_input, train_supervised, ConditionalLM, LMConfig, SampleSpec, TrainConfig};
use crate::ppo::{baseline_advantages, collect_rollouts, compute_advantages, ppo_update, PpoStats, RewardChannel};
use crate::retriever::TfidfIndex;
use crate::reward::{performance_from_report, raw_reward, RewardSample};
use crate::seed::{self, derive, tag};

pub use ablation::{run_ablation, write_table, AblationRow, Sweep};
pub use rundir::{read_json, write_json, RunDir, CONFIG_FILE, REPORT_FILE};

/// Record of one meta-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRunState {
    pub iteration: usize,
    /// Checkpoint of the generator that produced this iteration's data.
    pub generator_checkpoint: String,
    pub synthetic_dataset: Option<String>,
    /// Absent when the iteration failed.
    pub performance_meta: Option<f64>,
    pub learner_metrics: MetricReport,
    pub synthetic_skipped: usize,
    pub error: Option<String>,
    pub wall_clock_seconds: f64,
}

/// Corpus splits, datapoints and vocabularies shared by every condition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: Option<TfidfIndex>,
    pub seed: Vec<DataPoint>,
    pub val: Vec<DataPoint>,
    pub test: Vec<DataPoint>,
    /// Model vocabulary: seed datapoints plus the knowledge bank.
    pub vocab: Arc<Vocabulary>,
    /// Tokens of the seed dialogue utterances, the reference for OOV.
    pub seed_vocab: Vocabulary,
}

/// The configured corpus file, or the generated synthetic corpus.
pub fn load_run_corpus(config: &RunConfig) -> Result<Corpus> {
    match &config.corpus {
        Some(path) => load_corpus(path),
        None => generate_synthetic_corpus(&config.synthetic_corpus, derive(config.seed, &[tag("corpus")])),
    }
}

pub fn prepare(config: &RunConfig, corpus: &Corpus) -> Result<Prepared> {
    let splits = split(&corpus.dialogues, &config.split)?;
    let index = match config.mode {
        Mode::KnowledgeGrounded => Some(TfidfIndex::build(&corpus.knowledge)?),
        Mode::OpenDomain => None,
    };
    let extract = |d: &[_]| {
        extract_datapoints(d, config.context_turns, config.mode, index.as_ref(), config.knowledge_pieces)
            .map(|e| e.datapoints)
    };
    let (seed, val, test) = (extract(&splits.seed)?, extract(&splits.val)?, extract(&splits.test)?);
    if seed.is_empty() {
        return Err(GcnError::Config("seed split yields no datapoints".into()));
    }
    if test.is_empty() {
        return Err(GcnError::Config("test split yields no datapoints".into()));
    }
    let utterance_tokens = || {
        seed.iter()
            .flat_map(|dp| dp.context.iter().chain(std::iter::once(&dp.response)))
            .flat_map(|u| u.tokens.iter())
    };
    let bank: Vec<&String> = corpus.knowledge.iter().flat_map(|k| k.tokens.iter()).collect();
    let knowledge_seen = seed.iter().flat_map(|dp| dp.knowledge.iter().flat_map(|k| k.tokens.iter()));
    let vocab = vocabulary_from_counts(
        utterance_tokens()
            .chain(knowledge_seen)
            .chain(bank.iter().copied().filter(|_| config.mode == Mode::KnowledgeGrounded)),
        config.vocab_min_count,
    );
    let seed_vocab = vocabulary_from_counts(utterance_tokens(), 1);
    Ok(Prepared {
        index,
        seed,
        val,
        test,
        vocab: Arc::new(vocab),
        seed_vocab,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub datapoints: Vec<DataPoint>,
    pub requested: usize,
    pub skipped: usize,
}

const GENERATION_ATTEMPTS: usize = 3;

/// Generates `size` datapoints from contexts drawn from `contexts`
/// (without replacement while possible), re-retrieving knowledge for each.
/// Empty responses are resampled; a context failing every attempt is
/// skipped.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    generator: &ConditionalLM,
    contexts: &[DataPoint],
    index: Option<&TfidfIndex>,
    knowledge_pieces: usize,
    spec: &SampleSpec,
    size: usize,
    rng_seed: u64,
) -> Result<SyntheticData> {
    if contexts.is_empty() {
        return Err(GcnError::InvalidInput("no contexts to generate from".into()));
    }
    let mut pick_rng = seed::rng_for(rng_seed, "contexts", 0);
    let picks: Vec<usize> = if size <= contexts.len() {
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        order.shuffle(&mut pick_rng);
        order.truncate(size);
        order
    } else {
        (0..size).map(|_| pick_rng.random_range(0..contexts.len())).collect()
    };
    let mut out = SyntheticData {
        datapoints: Vec::with_capacity(size),
        requested: size,
        skipped: 0,
    };
    for (n, &c) in picks.iter().enumerate() {
        let source = &contexts[c];
        let knowledge = match index {
            Some(index) => retrieve_knowledge(index, &source.context, knowledge_pieces),
            None => Vec::new(),
        };
        let mut dp = DataPoint {
            context: source.context.clone(),
            knowledge,
            response: source.response.clone(),
            origin: Origin::Synthetic,
            gold_knowledge: Vec::new(),
        };
        let input = encode_datapoint_input(&dp, generator, spec.max_new_tokens);
        let mut rng = seed::rng_for(rng_seed, "sample", n as u64);
        let mut response = None;
        for _ in 0..GENERATION_ATTEMPTS {
            let words = decode_tokens(generator.vocab(), generator.generate_with(&input, spec, &mut rng)?.content());
            if !words.is_empty() {
                response = Some(words);
                break;
            }
        }
        match response {
            Some(words) => {
                let speaker = source.context.last().map_or(source.response.speaker, |u| u.speaker.other());
                dp.response = Utterance::from_tokens(speaker, &words)?;
                out.datapoints.push(dp);
            }
            None => out.skipped += 1,
        }
    }
    if out.skipped * 2 > size {
        return Err(GcnError::DegenerateGenerator(format!(
            "{} of {size} generations were empty after {GENERATION_ATTEMPTS} attempts",
            out.skipped
        )));
    }
    Ok(out)
}

fn sized(multiplier: f64, base: usize) -> usize {
    (multiplier * base as f64).round() as usize
}

fn lm(config: &LMConfig, vocab: &Vocabulary) -> LMConfig {
    LMConfig {
        vocab_size: vocab.len(),
        ..config.clone()
    }
}

/// Supervised seed training of a fresh generator, with the KF1 term off.
pub fn pretrain_generator(config: &RunConfig, data: &Prepared, rng_seed: u64) -> Result<ConditionalLM> {
    if data.seed.is_empty() {
        return Err(GcnError::InvalidInput("seed set is empty".into()));
    }
    let mut g = ConditionalLM::init(lm(&config.generator, &data.vocab), data.vocab.clone(), derive(rng_seed, &[tag("init")]))?;
    let cfg = TrainConfig {
        lambda_kf1: 0.0,
        rng_seed: derive(rng_seed, &[tag("train")]),
        ..config.generator_training.clone()
    };
    train_supervised(&mut g, &data.seed, &cfg)?;
    Ok(g)
}

/// A fresh learner trained on `datapoints`.
pub fn train_learner(config: &RunConfig, data: &Prepared, datapoints: &[DataPoint], rng_seed: u64) -> Result<ConditionalLM> {
    let mut l = ConditionalLM::init(lm(&config.learner, &data.vocab), data.vocab.clone(), derive(rng_seed, &[tag("init")]))?;
    let cfg = TrainConfig {
        epochs: config.meta.learner_epochs,
        rng_seed: derive(rng_seed, &[tag("train")]),
        ..config.learner_training.clone()
    };
    train_supervised(&mut l, datapoints, &cfg)?;
    Ok(l)
}

/// Test-time hooks.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunHooks {
    /// Stop with [`GcnError::Interrupted`] once this many meta-iterations
    /// of a run have been persisted.
    pub halt_after_iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct PpoLogRecord {
    iteration: usize,
    update: usize,
    #[serde(flatten)]
    stats: PpoStats,
}

struct RunContext<'a> {
    config: &'a RunConfig,
    data: &'a Prepared,
    dir: &'a RunDir,
    run: usize,
    run_seed: u64,
    embedding: Option<EmbeddingTable>,
}

impl RunContext<'_> {
    fn max_tokens(&self) -> usize {
        self.config.learner_training.max_response_tokens
    }

    fn evaluate(&self, model: &ConditionalLM, datapoints: &[DataPoint]) -> Result<MetricReport> {
        evaluate(model, datapoints, self.embedding.as_ref(), self.max_tokens())
    }

    fn synthesize(&self, generator: &ConditionalLM, multiplier: f64, rng_seed: u64) -> Result<SyntheticData> {
        generate_synthetic(
            generator,
            &self.data.seed,
            self.data.index.as_ref(),
            self.config.knowledge_pieces,
            &self.config.sampling,
            sized(multiplier, self.data.seed.len()),
            rng_seed,
        )
    }

    fn with_seed(&self, synth: &[DataPoint]) -> Vec<DataPoint> {
        self.data.seed.iter().chain(synth).cloned().collect()
    }

    /// One meta-iteration; returns its record and the updated generator.
    fn iteration(
        &self,
        i: usize,
        generator: &ConditionalLM,
        reference: &ConditionalLM,
        previous: f64,
    ) -> Result<(MetaRunState, ConditionalLM)> {
        let started = Instant::now();
        let iter_seed = derive(self.run_seed, &[tag("iteration"), i as u64]);
        let synth = self.synthesize(generator, self.config.meta.synth_multiplier_inner, derive(iter_seed, &[tag("synth")]))?;
        let dataset_id = format!("run{}-iter{i:03}-synth", self.run);
        self.dir
            .write_dataset(&self.dir.iteration(self.run, i), "synth", &dataset_id, &synth.datapoints, self.config.context_turns)?;

        let learner = train_learner(self.config, self.data, &self.with_seed(&synth.datapoints), derive(iter_seed, &[tag("learner")]))?;
        let weights = self.config.reward_weights();
        let report = self.evaluate(&learner, &self.data.val)?;
        let perf = performance_from_report(&report, &weights)?;

        let mut updated = generator.clone();
        let ppo = &self.config.ppo;
        for u in 0..ppo.updates_per_iteration {
            let mut pick = seed::rng_for(iter_seed, "rollout-contexts", u as u64);
            let contexts: Vec<&DataPoint> = (0..ppo.rollouts_per_update)
                .map(|_| &self.data.seed[pick.random_range(0..self.data.seed.len())])
                .collect();
            let reward_fn = |dp: &DataPoint, words: &[String]| match ppo.reward_channel {
                RewardChannel::PerSample => raw_reward(
                    &[RewardSample {
                        candidate: words,
                        reference: &dp.response.tokens,
                        knowledge: &dp.knowledge,
                    }],
                    &weights,
                    self.embedding.as_ref(),
                ),
                RewardChannel::BroadcastMeta => Ok(perf),
            };
            let mut rng = seed::rng_for(iter_seed, "rollouts", u as u64);
            let trajectories = collect_rollouts(
                &updated,
                reference,
                &contexts,
                &self.config.sampling,
                &self.config.shaping,
                reward_fn,
                &mut rng,
            )?;
            let advantages = match ppo.reward_channel {
                RewardChannel::PerSample => compute_advantages(&trajectories),
                RewardChannel::BroadcastMeta => baseline_advantages(&trajectories, previous),
            };
            let stats = ppo_update(&mut updated, &trajectories, &advantages, ppo, &mut seed::rng_for(iter_seed, "ppo", u as u64))?;
            self.dir.append_ppo_log(self.run, &PpoLogRecord { iteration: i, update: u, stats })?;
        }
        let state = MetaRunState {
            iteration: i,
            generator_checkpoint: RunDir::generator_id(self.run, i),
            synthetic_dataset: Some(dataset_id),
            performance_meta: Some(perf),
            learner_metrics: report,
            synthetic_skipped: synth.skipped,
            error: None,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((state, updated))
    }

    /// Runs or resumes the meta-loop and returns the persisted records.
    fn meta_loop(&self, reference: &ConditionalLM, hooks: RunHooks) -> Result<Vec<MetaRunState>> {
        let meta = &self.config.meta;
        let mut states = self.dir.read_states(self.run)?;
        let mut generator = if states.is_empty() {
            let dir = self.dir.iteration(self.run, 0);
            self.dir.ensure(&dir)?;
            reference.save(self.dir.resolve(&RunDir::generator_id(self.run, 0)))?;
            reference.clone()
        } else {
            ConditionalLM::load(self.dir.resolve(&RunDir::generator_id(self.run, states.len())), self.data.vocab.clone())?
        };
        let mut perf = states.iter().rev().find_map(|s| s.performance_meta).unwrap_or(0.0);
        while states.len() < meta.max_meta_iterations && perf < 1.0 - meta.epsilon {
            let i = states.len();
            if hooks.halt_after_iterations == Some(i) {
                return Err(GcnError::Interrupted(i));
            }
            let started = Instant::now();
            let state = match self.iteration(i, &generator, reference, perf) {
                Ok((state, next)) => {
                    generator = next;
                    perf = state.performance_meta.unwrap_or(perf);
                    state
                }
                Err(e @ (GcnError::Io { .. } | GcnError::Locked(_))) => return Err(e),
                Err(e) => {
                    log::warn!("run {} meta-iteration {i} failed: {e}", self.run);
                    MetaRunState {
                        iteration: i,
                        generator_checkpoint: RunDir::generator_id(self.run, i),
                        synthetic_dataset: None,
                        performance_meta: None,
                        learner_metrics: MetricReport::default(),
                        synthetic_skipped: 0,
                        error: Some(e.to_string()),
                        wall_clock_seconds: started.elapsed().as_secs_f64(),
                    }
                }
            };
            let next_dir = self.dir.iteration(self.run, i + 1);
            self.dir.ensure(&next_dir)?;
            generator.save(self.dir.resolve(&RunDir::generator_id(self.run, i + 1)))?;
            self.dir.append_state(self.run, &state)?;
            log::info!(
                "run {} meta-iteration {i}: performance {:?}",
                self.run,
                state.performance_meta
            );
            states.push(state);
        }
        Ok(states)
    }

    /// Final synthetic data from `generator`, a fresh learner on seed plus
    /// synthetic data, and its test report.
    fn final_stage(&self, generator: &ConditionalLM) -> Result<MetricReport> {
        let synth = self.synthesize(generator, self.config.meta.synth_multiplier_final, derive(self.run_seed, &[tag("final-synth")]))?;
        self.dir.write_dataset(
            &self.dir.run(self.run),
            "final-synth",
            &format!("run{}-final-synth", self.run),
            &synth.datapoints,
            self.config.context_turns,
        )?;
        let learner = train_learner(self.config, self.data, &self.with_seed(&synth.datapoints), derive(self.run_seed, &[tag("final-learner")]))?;
        learner.save(self.dir.run(self.run).join("final-learner.ckpt"))?;
        let mut report = self.evaluate(&learner, &self.data.test)?;
        report.oov_rate = Some(oov_rate(&synth.datapoints, &self.data.seed_vocab)?);
        Ok(report)
    }
}

/// Index of the best recorded validation score; ties go to the earliest.
pub fn select_best(states: &[MetaRunState]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in states.iter().enumerate() {
        if let Some(p) = s.performance_meta {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn run_seed(config: &RunConfig, run: usize) -> u64 {
    derive(config.seed, &[tag("run"), run as u64])
}

/// One full pipeline run of the configured condition; returns its flat
/// report and persists it under `run-<run>/`.
pub fn run_once(config: &RunConfig, data: &Prepared, dir: &RunDir, run: usize, hooks: RunHooks) -> Result<BTreeMap<String, f64>> {
    let report_path = dir.run(run).join(REPORT_FILE);
    if report_path.exists() {
        return read_json(&report_path);
    }
    dir.ensure(&dir.run(run))?;
    let seed = run_seed(config, run);
    let needs_generator = config.condition != Condition::Baseline || config.mode == Mode::OpenDomain;
    let reference = if needs_generator {
        let path = dir.run(run).join("generator-ref.ckpt");
        Some(if path.exists() {
            ConditionalLM::load(&path, data.vocab.clone())?
        } else {
            let g = pretrain_generator(config, data, derive(seed, &[tag("generator")]))?;
            g.save(&path)?;
            g
        })
    } else {
        None
    };
    let ctx = RunContext {
        config,
        data,
        dir,
        run,
        run_seed: seed,
        embedding: match (config.mode, &reference) {
            (Mode::OpenDomain, Some(g)) => Some(EmbeddingTable::from_model(g)),
            _ => None,
        },
    };
    let mut out = BTreeMap::new();
    let report = match (config.condition, &reference) {
        (Condition::Baseline, _) => {
            let learner = train_learner(config, data, &data.seed, derive(seed, &[tag("final-learner")]))?;
            learner.save(dir.run(run).join("final-learner.ckpt"))?;
            let mut report = ctx.evaluate(&learner, &data.test)?;
            report.oov_rate = Some(0.0);
            out.insert("meta_iterations".into(), 0.0);
            report
        }
        (Condition::GcnNoRl, Some(g)) => {
            out.insert("meta_iterations".into(), 0.0);
            ctx.final_stage(g)?
        }
        (Condition::GcnRl, Some(g)) => {
            if data.val.is_empty() {
                return Err(GcnError::Config("validation split yields no datapoints".into()));
            }
            let states = ctx.meta_loop(g, hooks)?;
            out.insert("meta_iterations".into(), states.len() as f64);
            let best = match select_best(&states) {
                Some(b) => {
                    out.insert("best_iteration".into(), b as f64);
                    out.insert("best_performance_meta".into(), states[b].performance_meta.unwrap_or(0.0));
                    ConditionalLM::load(dir.resolve(&states[b].generator_checkpoint), data.vocab.clone())?
                }
                None => g.clone(),
            };
            ctx.final_stage(&best)?
        }
        (_, None) => unreachable!("generator is trained for every generating condition"),
    };
    out.extend(report.to_map());
    write_json(&report_path, &out)?;
    Ok(out)
}

/// Mean and sample standard deviation of every key across runs.
pub fn aggregate(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out = BTreeMap::new();
    out.insert("runs".to_string(), runs.len() as f64);
    for k in keys {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(k).copied()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.insert(format!("{k}_mean"), mean);
        out.insert(format!("{k}_std"), std);
    }
    out
}

/// Every run of `config` into `root`, resuming persisted progress, plus
/// the aggregate report.
pub fn run_experiment(config: &RunConfig, root: &Path, hooks: RunHooks) -> Result<BTreeMap<String, f64>> {
    config.validate()?;
    let dir = RunDir::create(root, config)?;
    let corpus = load_run_corpus(config)?;
    let data = prepare(config, &corpus)?;
    run_prepared(config, &data, &dir, hooks)
}

/// As [`run_experiment`] with already prepared data and a held directory.
pub fn run_prepared(config: &RunConfig, data: &Prepared, dir: &RunDir, hooks: RunHooks) -> Result<BTreeMap<String, f64>> {
    let runs = (0..config.meta.runs_to_average)
        .map(|r| run_once(config, data, dir, r, hooks))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&runs);
    write_json(&dir.root().join(REPORT_FILE), &report)?;
    Ok(report)
}
