use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcn_core::corpus::{generate_synthetic_corpus, write_corpus, SyntheticSpec};
use gcn_core::evaluate::{evaluate, EmbeddingTable};
use gcn_core::metaloop::{self, read_json, RunDir, RunHooks, Sweep, REPORT_FILE};
use gcn_core::{ConditionalLM, GcnError, Mode, Result, RunConfig};

/// Generative conversational networks: synthetic dialogue data from a
/// generator trained by reinforcement learning on learner performance.
#[derive(Debug, Parser)]
#[command(name = "gcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a templated knowledge-grounded dialogue corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        dialogues: usize,
        #[arg(long, default_value_t = 50)]
        facts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one condition and write its run directory.
    Train {
        #[arg(long, value_enum)]
        condition: ConditionArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-evaluate the final learners of a run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Sweep one setting and write a table of results.
    Ablate {
        #[arg(long)]
        sweep: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Side-by-side table of finished runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConditionArg {
    Baseline,
    GcnNoRl,
    GcnRl,
}

impl From<ConditionArg> for gcn_core::Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Baseline => gcn_core::Condition::Baseline,
            ConditionArg::GcnNoRl => gcn_core::Condition::GcnNoRl,
            ConditionArg::GcnRl => gcn_core::Condition::GcnRl,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    OpenDomain,
    KnowledgeGrounded,
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Default root for run directories when neither a flag nor the
    /// configuration names one.
    #[arg(long, env = "GCN_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_meta_iterations: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

impl Overrides {
    fn resolve(&self, default_name: &str) -> Result<RunConfig> {
        let (mut cfg, file_sets_output) = match &self.config {
            Some(path) => {
                let cfg = RunConfig::load(path)?;
                let text = std::fs::read_to_string(path).map_err(|e| GcnError::io(path, e))?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| GcnError::Config(e.to_string()))?;
                (cfg, table.contains_key("output_dir"))
            }
            None => (RunConfig::default(), false),
        };
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        } else if !file_sets_output {
            cfg.output_dir = self.output_root.join(default_name);
        }
        if let Some(c) = &self.corpus {
            cfg.corpus = Some(c.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::OpenDomain => Mode::OpenDomain,
                ModeArg::KnowledgeGrounded => Mode::KnowledgeGrounded,
            };
        }
        if let Some(n) = self.max_meta_iterations {
            cfg.meta.max_meta_iterations = n;
        }
        if let Some(n) = self.runs {
            cfg.meta.runs_to_average = n;
        }
        Ok(cfg)
    }
}

fn flat_json(map: &BTreeMap<String, f64>) -> Result<String> {
    Ok(serde_json::to_string_pretty(map)?)
}

fn train(condition: ConditionArg, overrides: &Overrides) -> Result<()> {
    let condition: gcn_core::Condition = condition.into();
    let mut cfg = overrides.resolve(condition.as_str())?;
    cfg.condition = condition;
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let report = metaloop::run_experiment(&cfg, &out, RunHooks::default())?;
    println!("{}", flat_json(&report)?);
    eprintln!("run directory: {}", out.display());
    Ok(())
}

fn evaluate_run(run: &Path, split: SplitArg) -> Result<()> {
    let dir = RunDir::open(run)?;
    let cfg = dir.config()?;
    let corpus = metaloop::load_run_corpus(&cfg)?;
    let data = metaloop::prepare(&cfg, &corpus)?;
    let set = match split {
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    };
    let mut reports = Vec::new();
    for r in 0..cfg.meta.runs_to_average {
        let path = dir.run(r).join("final-learner.ckpt");
        if !path.exists() {
            return Err(GcnError::InvalidInput(format!("{} is missing; train the run first", path.display())));
        }
        let learner = ConditionalLM::load(&path, data.vocab.clone())?;
        let embedding = match cfg.mode {
            Mode::OpenDomain => Some(EmbeddingTable::from_model(&ConditionalLM::load(
                dir.run(r).join("generator-ref.ckpt"),
                data.vocab.clone(),
            )?)),
            Mode::KnowledgeGrounded => None,
        };
        reports.push(evaluate(&learner, set, embedding.as_ref(), cfg.learner_training.max_response_tokens)?.to_map());
    }
    println!("{}", flat_json(&metaloop::aggregate(&reports))?);
    Ok(())
}

fn ablate(sweep: &str, values: &[f64], overrides: &Overrides) -> Result<()> {
    let sweep: Sweep = sweep.parse()?;
    let cfg = overrides.resolve(&format!("ablate-{}", sweep.as_str()))?;
    cfg.validate()?;
    let rows = metaloop::run_ablation(sweep, values, &cfg, &cfg.output_dir)?;
    let table = metaloop::write_table(sweep, &rows);
    let path = cfg.output_dir.join(format!("{}.csv", sweep.as_str()));
    std::fs::write(&path, &table).map_err(|e| GcnError::io(&path, e))?;
    print!("{table}");
    eprintln!("table: {}", path.display());
    Ok(())
}

fn compare(runs: &[PathBuf]) -> Result<()> {
    let mut s = String::from("run,condition,ppl,kf1,bleu4,oov\n");
    for run in runs {
        let cfg = RunConfig::load(run.join(metaloop::CONFIG_FILE))?;
        let report: BTreeMap<String, f64> = read_json(&run.join(REPORT_FILE))?;
        let get = |k: &str| report.get(&format!("{k}_mean")).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            run.display(),
            cfg.condition.as_str(),
            get("perplexity"),
            get("kf1"),
            get("bleu4"),
            get("oov_rate")
        );
    }
    print!("{s}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus {
            out,
            dialogues,
            facts,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_dialogues: dialogues,
                fact_bank_size: facts,
                ..SyntheticSpec::default()
            };
            let corpus = generate_synthetic_corpus(&spec, seed)?;
            write_corpus(&out, &corpus)?;
            eprintln!(
                "wrote {} dialogues and {} facts to {}",
                corpus.dialogues.len(),
                corpus.knowledge.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { condition, overrides } => train(condition, &overrides),
        Command::Evaluate { run, split } => evaluate_run(&run, split),
        Command::Ablate {
            sweep,
            values,
            overrides,
        } => ablate(&sweep, &values, &overrides),
        Command::Compare { runs } => compare(&runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
