//! Elitist evolutionary search over pruning-rate configurations.
//!
//! Each generation evaluates any unscored individuals, keeps the best `K`,
//! asks the operator for `M` mutants and `S` crossover children of that
//! top-K, and merges parents and offspring for the next selection. Parents
//! are never evicted by worse offspring, so the best fitness can only improve.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::{uniform, ConfigError, PruningConfig};
use crate::engine::{ActivationStats, Model, TokenCorpus};
use crate::operator::{fallback_propose, Operator, OperatorKind, ProposalRequest};
use crate::pruner;
use crate::scalar::Scalar;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
/// Fitness assigned to configurations whose evaluation blew up.
pub const WORST_FITNESS: f64 = 1e30;
/// Extra fallback draws per missing offspring before duplicates are accepted.
const DEDUP_ATTEMPTS: usize = 20;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checkpoint {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Population size `K`.
    pub population_size: usize,
    /// Mutants per generation `M`.
    pub mutations: usize,
    /// Crossover children per generation `S`.
    pub crossovers: usize,
    /// Generations `N`.
    pub generations: u32,
    pub beta: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            population_size: 30,
            mutations: 10,
            crossovers: 10,
            generations: 20,
            beta: 0.3,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.population_size == 0 {
            return Err(EvolutionError::InvalidHyper("population size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(EvolutionError::InvalidHyper(format!("beta {} outside [0,1]", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Init,
    Mutation,
    Crossover,
    Fallback,
    /// The injected uniform allocation.
    Baseline,
}

impl From<OperatorKind> for Origin {
    fn from(k: OperatorKind) -> Self {
        match k {
            OperatorKind::Init => Origin::Init,
            OperatorKind::Mutation => Origin::Mutation,
            OperatorKind::Crossover => Origin::Crossover,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub config: PruningConfig,
    /// Perplexity; lower is better.
    pub fitness: Option<f64>,
    pub origin: Origin,
    pub generation_born: u32,
    /// Set when evaluation produced a non-finite value.
    #[serde(default)]
    pub failed: bool,
}

impl Individual {
    fn new(config: PruningConfig, origin: Origin, generation_born: u32) -> Self {
        Self {
            config,
            fitness: None,
            origin,
            generation_born,
            failed: false,
        }
    }
}

/// Seed plus ChaCha word position; enough to resume the exact stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u64,
}

impl RngState {
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos as u128);
        rng
    }

    pub fn capture(&mut self, rng: &ChaCha8Rng) {
        self.word_pos = u64::try_from(rng.get_word_pos()).expect("rng position fits in u64");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub evaluations: usize,
    pub llm_offspring: usize,
    pub fallback_offspring: usize,
    pub repair_events: usize,
}

impl GenerationRecord {
    pub const CSV_HEADER: &'static str =
        "generation,best_fitness,mean_fitness,evaluations,llm_offspring,fallback_offspring,repair_events";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{},{}",
            self.generation,
            self.best_fitness,
            self.mean_fitness,
            self.evaluations,
            self.llm_offspring,
            self.fallback_offspring,
            self.repair_events
        )
    }
}

/// Counts from building the initial population.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSummary {
    pub from_operator: usize,
    pub from_fallback: usize,
    pub repair_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub schema_version: u32,
    pub n_layers: usize,
    pub hyper: Hyper,
    pub generation: u32,
    pub population: Vec<Individual>,
    /// Canonical config text to fitness.
    pub fitness_cache: BTreeMap<String, f64>,
    pub history: Vec<GenerationRecord>,
    pub rng: RngState,
    pub init: InitSummary,
    pub finished: bool,
}

/// Fitness of a configuration; lower is better.
pub trait Fitness: Sync {
    fn fitness(&self, config: &PruningConfig) -> f64;
}

impl<F: Fn(&PruningConfig) -> f64 + Sync> Fitness for F {
    fn fitness(&self, config: &PruningConfig) -> f64 {
        self(config)
    }
}

/// Perplexity of the dense model pruned to a configuration.
pub struct PerplexityFitness<'a, T> {
    pub model: &'a Model<T>,
    pub stats: &'a ActivationStats<T>,
    pub corpus: &'a TokenCorpus,
    pub seq_len: usize,
}

impl<T: Scalar> Fitness for PerplexityFitness<'_, T> {
    fn fitness(&self, config: &PruningConfig) -> f64 {
        let pruned = match pruner::prune(self.model, self.stats, config) {
            Ok((m, _)) => m,
            Err(e) => {
                log::error!("pruning {config} failed: {e}");
                return f64::NAN;
            }
        };
        match pruned.perplexity(self.corpus, self.seq_len) {
            Ok(p) => p,
            Err(e) => {
                log::error!("evaluating {config} failed: {e}");
                f64::NAN
            }
        }
    }
}

fn compare_individuals(a: &Individual, b: &Individual) -> Ordering {
    let fa = a.fitness.unwrap_or(f64::INFINITY);
    let fb = b.fitness.unwrap_or(f64::INFINITY);
    fa.total_cmp(&fb)
        .then(a.generation_born.cmp(&b.generation_born))
        .then_with(|| {
            a.config
                .rates()
                .iter()
                .zip(b.config.rates())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// The `k` fittest individuals, best first. Ties go to the earlier
/// generation, then to the lexicographically smaller config.
pub fn select_top_k(mut population: Vec<Individual>, k: usize) -> Vec<Individual> {
    population.sort_by(compare_individuals);
    population.truncate(k);
    population
}

struct Draw {
    individuals: Vec<Individual>,
    from_operator: usize,
    from_fallback: usize,
    repair_events: usize,
}

/// Asks the operator for `count` configs distinct from `existing`, topping
/// up with fallback draws. Duplicates survive only when fallback draws
/// keep colliding.
fn draw_distinct(
    operator: &mut dyn Operator,
    request: ProposalRequest<'_>,
    existing: &mut HashSet<String>,
    born: u32,
    rng: &mut ChaCha8Rng,
) -> Draw {
    let count = request.count;
    let proposal = operator.propose(&request, rng);
    if let Some(cause) = &proposal.failure {
        log::warn!("{:?} operator failed ({cause}); filling with fallback", request.kind);
    }
    let mut repair_events = proposal.repair_events;
    let mut individuals = Vec::with_capacity(count);
    for cfg in proposal.configs {
        if individuals.len() == count {
            break;
        }
        if existing.insert(cfg.canonical()) {
            individuals.push(Individual::new(cfg, request.kind.into(), born));
        }
    }
    let from_operator = individuals.len();
    let mut attempts = 0;
    while individuals.len() < count {
        let single = ProposalRequest { count: 1, ..request };
        let fill = fallback_propose(&single, rng);
        repair_events += fill.repair_events;
        let cfg = fill.configs.into_iter().next().expect("fallback yields exactly one");
        attempts += 1;
        let fresh = existing.insert(cfg.canonical());
        if fresh || attempts > DEDUP_ATTEMPTS * count {
            individuals.push(Individual::new(cfg, Origin::Fallback, born));
        }
    }
    let (from_operator, from_fallback) = if operator.is_fallback() {
        (0, individuals.len())
    } else {
        (from_operator, individuals.len() - from_operator)
    };
    Draw {
        individuals,
        from_operator,
        from_fallback,
        repair_events,
    }
}

/// Builds `k` distinct feasible individuals. With `inject_uniform` the
/// uniform allocation occupies the first slot and the operator supplies the
/// remaining `k - 1`.
pub fn initialize(
    operator: &mut dyn Operator,
    k: usize,
    n_layers: usize,
    beta: f64,
    rng: &mut ChaCha8Rng,
    inject_uniform: bool,
) -> Result<(Vec<Individual>, InitSummary), EvolutionError> {
    if k == 0 {
        return Err(EvolutionError::InvalidHyper("population size must be at least 1".into()));
    }
    let mut existing = HashSet::new();
    let mut population = Vec::with_capacity(k);
    if inject_uniform {
        let u = uniform(n_layers, beta)?;
        existing.insert(u.canonical());
        population.push(Individual::new(u, Origin::Baseline, 0));
    }
    let wanted = k - population.len();
    let mut summary = InitSummary::default();
    if wanted > 0 {
        let request = ProposalRequest {
            kind: OperatorKind::Init,
            parents: &[],
            count: wanted,
            n_layers,
            beta,
        };
        let draw = draw_distinct(operator, request, &mut existing, 0, rng);
        summary = InitSummary {
            from_operator: draw.from_operator,
            from_fallback: draw.from_fallback,
            repair_events: draw.repair_events,
        };
        population.extend(draw.individuals);
    }
    Ok((population, summary))
}

impl SearchState {
    /// Fresh search: initial population (uniform allocation injected) drawn
    /// from `init_operator`, nothing evaluated yet.
    pub fn new(
        hyper: Hyper,
        n_layers: usize,
        init_operator: &mut dyn Operator,
    ) -> Result<Self, EvolutionError> {
        hyper.validate()?;
        if n_layers == 0 {
            return Err(EvolutionError::InvalidHyper("model has no layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let (population, init) = initialize(
            init_operator,
            hyper.population_size,
            n_layers,
            hyper.beta,
            &mut rng,
            true,
        )?;
        let mut state = Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            n_layers,
            hyper,
            generation: 0,
            population,
            fitness_cache: BTreeMap::new(),
            history: Vec::new(),
            rng: RngState {
                seed: hyper.seed,
                word_pos: 0,
            },
            init,
            finished: false,
        };
        state.rng.capture(&rng);
        Ok(state)
    }

    /// Best individual currently retained.
    pub fn best(&self) -> Option<&Individual> {
        self.population
            .iter()
            .filter(|i| i.fitness.is_some())
            .min_by(|a, b| compare_individuals(a, b))
    }

    pub fn cached_fitness(&self, config: &PruningConfig) -> Option<f64> {
        self.fitness_cache.get(&config.canonical()).copied()
    }
}

/// Scores every unevaluated individual, consulting the cache first.
/// Returns the number of fresh fitness evaluations.
pub fn evaluate(state: &mut SearchState, fitness: &dyn Fitness, jobs: usize) -> usize {
    let mut pending: Vec<(String, PruningConfig)> = Vec::new();
    let mut queued = HashSet::new();
    for ind in state.population.iter().filter(|i| i.fitness.is_none()) {
        let key = ind.config.canonical();
        if !state.fitness_cache.contains_key(&key) && queued.insert(key.clone()) {
            pending.push((key, ind.config.clone()));
        }
    }
    let score = |(_, cfg): &(String, PruningConfig)| {
        let f = fitness.fitness(cfg);
        if f.is_finite() && f > 0.0 {
            f
        } else {
            log::warn!("non-finite fitness for {cfg}; assigning sentinel");
            WORST_FITNESS
        }
    };
    let values: Vec<f64> = if jobs > 1 && pending.len() > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| pending.par_iter().map(score).collect()),
            Err(_) => pending.iter().map(score).collect(),
        }
    } else {
        pending.iter().map(score).collect()
    };
    for ((key, _), v) in pending.iter().zip(&values) {
        state.fitness_cache.insert(key.clone(), *v);
    }
    for ind in state.population.iter_mut().filter(|i| i.fitness.is_none()) {
        let f = state.fitness_cache[&ind.config.canonical()];
        ind.fitness = Some(f);
        ind.failed = f >= WORST_FITNESS;
    }
    pending.len()
}

fn selection_record(state: &SearchState, evaluations: usize) -> GenerationRecord {
    let fits: Vec<f64> = state.population.iter().filter_map(|i| i.fitness).collect();
    GenerationRecord {
        generation: state.generation,
        best_fitness: fits.iter().copied().fold(f64::INFINITY, f64::min),
        mean_fitness: fits.iter().sum::<f64>() / fits.len() as f64,
        evaluations,
        llm_offspring: 0,
        fallback_offspring: 0,
        repair_events: 0,
    }
}

/// One generation: evaluate, keep the top K, breed M mutants and S
/// crossover children, merge.
pub fn step(
    state: &mut SearchState,
    operator: &mut dyn Operator,
    fitness: &dyn Fitness,
    jobs: usize,
) {
    let evaluations = evaluate(state, fitness, jobs);
    let hyper = state.hyper;
    state.population = select_top_k(std::mem::take(&mut state.population), hyper.population_size);
    let mut record = selection_record(state, evaluations);

    let parents: Vec<(PruningConfig, f64)> = state
        .population
        .iter()
        .map(|i| (i.config.clone(), i.fitness.expect("evaluated")))
        .collect();
    let mut existing: HashSet<String> = parents.iter().map(|(c, _)| c.canonical()).collect();
    let mut rng = state.rng.restore();
    let born = state.generation + 1;
    let mut offspring = Vec::new();
    for (kind, count) in [
        (OperatorKind::Mutation, hyper.mutations),
        (OperatorKind::Crossover, hyper.crossovers),
    ] {
        if count == 0 {
            continue;
        }
        let request = ProposalRequest {
            kind,
            parents: &parents,
            count,
            n_layers: state.n_layers,
            beta: hyper.beta,
        };
        let draw = draw_distinct(operator, request, &mut existing, born, &mut rng);
        record.llm_offspring += draw.from_operator;
        record.fallback_offspring += draw.from_fallback;
        record.repair_events += draw.repair_events;
        offspring.extend(draw.individuals);
    }
    state.rng.capture(&rng);
    state.population.extend(offspring);
    state.history.push(record);
    state.generation += 1;
}

/// Final evaluation and selection after the last generation.
pub fn finalize(state: &mut SearchState, fitness: &dyn Fitness, jobs: usize) {
    let evaluations = evaluate(state, fitness, jobs);
    state.population = select_top_k(std::mem::take(&mut state.population), state.hyper.population_size);
    let record = selection_record(state, evaluations);
    state.history.push(record);
    state.finished = true;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Individual,
    pub best_fitness: f64,
    pub uniform_fitness: Option<f64>,
    pub total_evaluations: usize,
}

impl SearchOutcome {
    pub fn from_state(state: &SearchState) -> Option<Self> {
        let best = state.best()?.clone();
        let u = uniform(state.n_layers, state.hyper.beta).ok()?;
        Some(Self {
            best_fitness: best.fitness.expect("best is evaluated"),
            best,
            uniform_fitness: state.cached_fitness(&u),
            total_evaluations: state.fitness_cache.len(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub jobs: usize,
    /// Checkpoints are written here after every generation.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once this generation count is reached, leaving a resumable state.
    pub stop_after: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Finished(SearchOutcome),
    Interrupted { generation: u32 },
}

pub fn checkpoint_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join(format!("gen_{generation:04}.json"))
}

pub const LATEST_CHECKPOINT: &str = "latest.json";

fn write_checkpoints(state: &SearchState, dir: &Path) -> Result<(), EvolutionError> {
    fs::create_dir_all(dir)?;
    checkpoint_save(state, &checkpoint_path(dir, state.generation))?;
    checkpoint_save(state, &dir.join(LATEST_CHECKPOINT))
}

/// Drives the search to completion (or to `stop_after`), resuming from
/// whatever generation `state` is at.
pub fn run(
    state: &mut SearchState,
    operator: &mut dyn Operator,
    fitness: &dyn Fitness,
    options: &RunOptions,
) -> Result<RunStatus, EvolutionError> {
    let jobs = options.jobs.max(1);
    while !state.finished && state.generation < state.hyper.generations {
        if options.stop_after.is_some_and(|g| state.generation >= g) {
            return Ok(RunStatus::Interrupted {
                generation: state.generation,
            });
        }
        step(state, operator, fitness, jobs);
        if let Some(dir) = &options.checkpoint_dir {
            write_checkpoints(state, dir)?;
        }
    }
    if !state.finished {
        finalize(state, fitness, jobs);
        if let Some(dir) = &options.checkpoint_dir {
            write_checkpoints(state, dir)?;
        }
    }
    Ok(RunStatus::Finished(
        SearchOutcome::from_state(state).expect("finished search has an evaluated best"),
    ))
}

pub fn checkpoint_save(state: &SearchState, path: &Path) -> Result<(), EvolutionError> {
    let text = serde_json::to_string_pretty(state).map_err(|source| EvolutionError::Json {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<SearchState, EvolutionError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| EvolutionError::Json {
        path: path.to_owned(),
        source,
    })?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0) as u32;
    if found != CHECKPOINT_SCHEMA_VERSION {
        return Err(EvolutionError::SchemaVersion {
            found,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|source| EvolutionError::Json {
        path: path.to_owned(),
        source,
    })
}
