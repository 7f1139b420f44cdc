//! On-disk artifacts written by `search` and read back by `report`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use layerprune::evolution::{GenerationRecord, Origin, SearchOutcome};
use layerprune::PruningConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

pub const BEST_CONFIG: &str = "best_config.json";
pub const HISTORY: &str = "history.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRANSCRIPT: &str = "transcripts.jsonl";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// First line of history.csv; readers reject other versions.
pub const HISTORY_VERSION_LINE: &str = "# layerprune history v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub schema_version: u32,
    pub rates: Vec<f64>,
    pub beta: f64,
    pub fitness: f64,
    pub generation_found: u32,
    pub origin: Origin,
    pub uniform_fitness: Option<f64>,
    pub total_evaluations: usize,
}

impl BestConfig {
    pub fn from_outcome(outcome: &SearchOutcome) -> Self {
        Self {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            rates: outcome.best.config.rates().to_vec(),
            beta: outcome.best.config.target_mean(),
            fitness: outcome.best_fitness,
            generation_found: outcome.best.generation_born,
            origin: outcome.best.origin,
            uniform_fitness: outcome.uniform_fitness,
            total_evaluations: outcome.total_evaluations,
        }
    }

    pub fn config(&self) -> anyhow::Result<PruningConfig> {
        Ok(PruningConfig::new(self.rates.clone(), self.beta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatusTag {
    Finished,
    Interrupted,
}

/// Everything needed to resume or report on a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub status: RunStatusTag,
    pub generation: u32,
    pub n_layers: usize,
    pub model_sha256: String,
    pub config: RunConfig,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(ARTIFACT_SCHEMA_VERSION as u64) {
        bail!(
            "{} has schema_version {:?}, expected {ARTIFACT_SCHEMA_VERSION}",
            path.display(),
            version
        );
    }
    serde_json::from_value(value).with_context(|| format!("decoding {}", path.display()))
}

pub fn render_history(history: &[GenerationRecord]) -> String {
    let mut out = format!("{HISTORY_VERSION_LINE}\n{}\n", GenerationRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_history(path: &Path, history: &[GenerationRecord]) -> anyhow::Result<()> {
    fs::write(path, render_history(history)).with_context(|| format!("writing {}", path.display()))
}

pub fn parse_history(text: &str) -> anyhow::Result<Vec<GenerationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_VERSION_LINE) {
        bail!("history does not start with {HISTORY_VERSION_LINE:?}");
    }
    if lines.next() != Some(GenerationRecord::CSV_HEADER) {
        bail!("history header mismatch");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                bail!("history row {} has {} fields, expected 7", i + 1, f.len());
            }
            let bad = |what: &str| format!("history row {}: bad {what}", i + 1);
            Ok(GenerationRecord {
                generation: f[0].parse().with_context(|| bad("generation"))?,
                best_fitness: f[1].parse().with_context(|| bad("best_fitness"))?,
                mean_fitness: f[2].parse().with_context(|| bad("mean_fitness"))?,
                evaluations: f[3].parse().with_context(|| bad("evaluations"))?,
                llm_offspring: f[4].parse().with_context(|| bad("llm_offspring"))?,
                fallback_offspring: f[5].parse().with_context(|| bad("fallback_offspring"))?,
                repair_events: f[6].parse().with_context(|| bad("repair_events"))?,
            })
        })
        .collect()
}

pub fn read_history(path: &Path) -> anyhow::Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_history(&text)
}

/// Reads a pruning configuration from JSON holding `rates` and either
/// `beta` or `target_mean`. A search's best_config.json qualifies.
pub fn load_pruning_config(path: &Path) -> anyhow::Result<PruningConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let rates: Vec<f64> = serde_json::from_value(
        value
            .get("rates")
            .cloned()
            .with_context(|| format!("{} has no rates array", path.display()))?,
    )
    .with_context(|| format!("{}: rates must be an array of numbers", path.display()))?;
    let beta = value
        .get("beta")
        .or_else(|| value.get("target_mean"))
        .and_then(serde_json::Value::as_f64)
        .with_context(|| format!("{} has no beta", path.display()))?;
    PruningConfig::new(rates, beta).with_context(|| format!("{} is not a feasible configuration", path.display()))
}

pub fn run_paths(dir: &Path) -> [(&'static str, PathBuf); 3] {
    [
        (RUN_MANIFEST, dir.join(RUN_MANIFEST)),
        (BEST_CONFIG, dir.join(BEST_CONFIG)),
        (HISTORY, dir.join(HISTORY)),
    ]
}
