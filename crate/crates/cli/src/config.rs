//! Run configuration: flat `key = value` file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use layerprune::evolution::Hyper;
use layerprune::operator::DEFAULT_API_KEY_ENV;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    Llm,
    Fallback,
    Replay,
}

impl FromStr for OperatorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(Self::Llm),
            "fallback" => Ok(Self::Fallback),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown operator {other:?} (llm, fallback, replay)")),
        }
    }
}

/// Everything `search` needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub calib_corpus_path: PathBuf,
    pub fitness_corpus_path: PathBuf,
    pub report_corpus_path: PathBuf,
    pub model_name: String,
    pub beta: f64,
    pub population_size: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub generations: u32,
    pub seed: u64,
    pub seq_len: usize,
    pub jobs: usize,
    pub operator: OperatorMode,
    pub endpoint_url: String,
    pub llm_model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: Option<usize>,
    pub replay_transcript: Option<PathBuf>,
    pub no_llm_init: bool,
    pub no_mutation: bool,
    pub no_crossover: bool,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            population_size: self.population_size,
            mutations: if self.no_mutation { 0 } else { self.mutations },
            crossovers: if self.no_crossover { 0 } else { self.crossovers },
            generations: self.generations,
            beta: self.beta,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.population_size == 0 {
            return Err(CliError::usage("population_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CliError::usage(format!("beta {} outside [0,1]", self.beta)));
        }
        if self.seq_len < 2 {
            return Err(CliError::usage("seq_len must be at least 2"));
        }
        for (key, p) in [
            ("model_path", &self.model_path),
            ("calib_corpus_path", &self.calib_corpus_path),
            ("fitness_corpus_path", &self.fitness_corpus_path),
            ("report_corpus_path", &self.report_corpus_path),
        ] {
            if !p.exists() {
                return Err(CliError::usage(format!("{key} {} does not exist", p.display())));
            }
        }
        if self.operator == OperatorMode::Replay && self.replay_transcript.is_none() {
            return Err(CliError::usage("replay mode needs replay_transcript"));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_kv(&text)
}

/// Flag-over-file-over-default lookup for one key.
pub struct Layered<'a> {
    pub file: &'a BTreeMap<String, String>,
}

impl Layered<'_> {
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(raw) = self.file.get(key) {
            return raw
                .parse()
                .map_err(|e| CliError::usage(format!("config key {key}: {e}")));
        }
        default.ok_or_else(|| CliError::usage(format!("missing required setting {key}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| raw.parse().map_err(|e| CliError::usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    /// A switch set by either the flag or a truthy file value.
    pub fn flag(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        Ok(flag || self.get::<bool>(key, None, Some(false))?)
    }
}

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_LLM_MODEL: &str = "gpt-4o";

pub fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
