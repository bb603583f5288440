use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_run_corpus, prepare, run_prepared, RunDir, RunHooks};
use crate::config::{Condition, RunConfig};
use crate::error::{GcnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    MetaIterations,
    DataMultiplier,
    SeedFraction,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::MetaIterations => "meta_iterations",
            Sweep::DataMultiplier => "data_multiplier",
            Sweep::SeedFraction => "seed_fraction",
        }
    }

    fn conditions(self) -> &'static [Condition] {
        match self {
            Sweep::SeedFraction => &[Condition::Baseline, Condition::GcnNoRl, Condition::GcnRl],
            _ => &[Condition::GcnRl],
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            Sweep::MetaIterations => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(GcnError::Config(format!("meta_iterations value {value} is not a count")));
                }
                config.meta.max_meta_iterations = value as usize;
            }
            Sweep::DataMultiplier => config.meta.synth_multiplier_final = value,
            Sweep::SeedFraction => config.split.seed_fraction = value,
        }
        Ok(())
    }
}

impl std::str::FromStr for Sweep {
    type Err = GcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "meta_iterations" => Ok(Sweep::MetaIterations),
            "data_multiplier" => Ok(Sweep::DataMultiplier),
            "seed_fraction" => Ok(Sweep::SeedFraction),
            _ => Err(GcnError::Config(format!("unknown sweep {s:?}"))),
        }
    }
}

/// One line of an ablation table; metrics are means over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub condition: Condition,
    pub perplexity: f64,
    pub kf1: f64,
    pub bleu4: f64,
    pub oov_rate: f64,
}

/// One pipeline run per value (and per condition for the seed-fraction
/// sweep), each in its own directory under `root`.
pub fn run_ablation(sweep: Sweep, values: &[f64], base: &RunConfig, root: &Path) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(GcnError::Config("ablation needs at least one value".into()));
    }
    let corpus = load_run_corpus(base)?;
    let mut rows = Vec::new();
    for &value in values {
        let mut config = base.clone();
        sweep.apply(&mut config, value)?;
        config.validate()?;
        let data = prepare(&config, &corpus)?;
        for &condition in sweep.conditions() {
            let config = RunConfig {
                condition,
                ..config.clone()
            };
            let dir = RunDir::create(root.join(format!("{}-{value}", sweep.as_str())).join(condition.as_str()), &config)?;
            let report = run_prepared(&config, &data, &dir, RunHooks::default())?;
            let get = |k: &str| report.get(&format!("{k}_mean")).copied().unwrap_or(f64::NAN);
            rows.push(AblationRow {
                value,
                condition,
                perplexity: get("perplexity"),
                kf1: get("kf1"),
                bleu4: get("bleu4"),
                oov_rate: get("oov_rate"),
            });
        }
    }
    Ok(rows)
}

/// Comma-separated table with a header line.
pub fn write_table(sweep: Sweep, rows: &[AblationRow]) -> String {
    let mut s = format!("{},condition,ppl,kf1,bleu4,oov\n", sweep.as_str());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.value,
            r.condition.as_str(),
            r.perplexity,
            r.kf1,
            r.bleu4,
            r.oov_rate
        );
    }
    s
}
