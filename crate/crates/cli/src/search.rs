use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use layerprune::engine::{load_model, TokenCorpus};
use layerprune::evolution::{
    checkpoint_load, run, RunOptions, RunStatus, SearchState, LATEST_CHECKPOINT,
};
use layerprune::operator::{
    EndpointConfig, FallbackOperator, HttpChatClient, LlmOperator, Operator, OperatorError,
    ReplayChatClient, RetryPolicy, TranscriptLog,
};
use layerprune::{ModelF32, PerplexityFitnessF32};

use crate::artifacts::{
    read_json, sha256_file, write_history, write_json, BestConfig, RunManifest, RunStatusTag,
    ARTIFACT_SCHEMA_VERSION, BEST_CONFIG, CHECKPOINT_DIR, HISTORY, RUN_MANIFEST, TRANSCRIPT,
};
use crate::config::{
    default_api_key_env, load_kv, Layered, OperatorMode, RunConfig, DEFAULT_ENDPOINT,
    DEFAULT_LLM_MODEL,
};
use crate::{CliError, SearchArgs};

/// What a `search` invocation ended with.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchResult {
    Finished(BestConfig),
    Interrupted { generation: u32 },
}

/// Merges the optional config file with flags. Flags win.
pub fn resolve_run_config(args: &SearchArgs) -> Result<RunConfig, CliError> {
    let file = match &args.config {
        Some(p) => load_kv(p)?,
        None => Default::default(),
    };
    let l = Layered { file: &file };
    let model_path: PathBuf = l.get("model_path", args.model.clone(), None)?;
    let calib: PathBuf = l.get("calib_corpus_path", args.calib.clone(), None)?;
    let fitness: PathBuf = l.get("fitness_corpus_path", args.fitness_corpus.clone(), Some(calib.clone()))?;
    let report: PathBuf = l.get("report_corpus_path", args.report_corpus.clone(), Some(fitness.clone()))?;
    let stem = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let defaults = layerprune::evolution::Hyper::default();
    let cfg = RunConfig {
        model_name: l.get("model_name", args.model_name.clone(), Some(stem))?,
        beta: l.get("beta", args.beta, Some(defaults.beta))?,
        population_size: l.get("population_size", args.population_size, Some(defaults.population_size))?,
        mutations: l.get("mutations", args.mutations, Some(defaults.mutations))?,
        crossovers: l.get("crossovers", args.crossovers, Some(defaults.crossovers))?,
        generations: l.get("generations", args.generations, Some(defaults.generations))?,
        seed: l.get("seed", args.seed, Some(defaults.seed))?,
        seq_len: l.get("seq_len", args.seq_len, Some(64))?,
        jobs: l.get("jobs", args.jobs, Some(1))?,
        operator: l.get("operator", args.operator, Some(OperatorMode::Fallback))?,
        endpoint_url: l.get("endpoint_url", args.endpoint.clone(), Some(DEFAULT_ENDPOINT.into()))?,
        llm_model: l.get("llm_model", args.llm_model.clone(), Some(DEFAULT_LLM_MODEL.into()))?,
        api_key_env: l.get("api_key_env", args.api_key_env.clone(), Some(default_api_key_env()))?,
        temperature: l.get("temperature", args.temperature, Some(1.0))?,
        max_tokens: l.optional("max_tokens", args.max_tokens)?,
        replay_transcript: l.optional("replay_transcript", args.replay_transcript.clone())?,
        no_llm_init: l.flag("no_llm_init", args.no_llm_init)?,
        no_mutation: l.flag("no_mutation", args.no_mutation)?,
        no_crossover: l.flag("no_crossover", args.no_crossover)?,
        output_dir: l.get("output_dir", args.out_dir.clone(), None)?,
        model_path,
        calib_corpus_path: calib,
        fitness_corpus_path: fitness,
        report_corpus_path: report,
    };
    Ok(cfg)
}

fn endpoint(cfg: &RunConfig) -> EndpointConfig {
    EndpointConfig {
        url: cfg.endpoint_url.clone(),
        model: cfg.llm_model.clone(),
        api_key_env: cfg.api_key_env.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        ..EndpointConfig::default()
    }
}

fn build_operator(cfg: &RunConfig, retry_base_ms: Option<u64>) -> Result<Box<dyn Operator>, CliError> {
    Ok(match cfg.operator {
        OperatorMode::Fallback => Box::new(FallbackOperator),
        OperatorMode::Llm => {
            let mut retry = RetryPolicy::default();
            if let Some(ms) = retry_base_ms {
                retry.base_delay = Duration::from_millis(ms);
            }
            let client = HttpChatClient::from_env(endpoint(cfg))
                .map_err(|e| match e {
                    OperatorError::MissingCredential(var) => {
                        CliError::usage(format!("llm operator needs the credential in environment variable {var}"))
                    }
                    other => CliError::Runtime(other.into()),
                })?
                .with_retry(retry)
                .with_transcript(TranscriptLog::new(cfg.output_dir.join(TRANSCRIPT)));
            Box::new(LlmOperator::new(client, cfg.model_name.clone()))
        }
        OperatorMode::Replay => {
            let path = cfg.replay_transcript.as_ref().expect("validated");
            let client = ReplayChatClient::from_path(path)
                .with_context(|| format!("loading transcript {}", path.display()))?;
            Box::new(LlmOperator::new(client, cfg.model_name.clone()))
        }
    })
}

fn load_corpus(path: &Path) -> anyhow::Result<TokenCorpus> {
    TokenCorpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

pub fn cmd_search(args: &SearchArgs) -> Result<SearchResult, CliError> {
    let mut cfg = if args.resume {
        let dir = args
            .out_dir
            .as_ref()
            .ok_or_else(|| CliError::usage("--resume needs --out-dir"))?;
        let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
        manifest.config
    } else {
        resolve_run_config(args)?
    };
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if cfg.operator == OperatorMode::Llm {
        let present = std::env::var(&cfg.api_key_env).is_ok_and(|v| !v.is_empty());
        if !present {
            return Err(CliError::usage(format!(
                "llm operator needs the credential in environment variable {}",
                cfg.api_key_env
            )));
        }
    }
    cfg.validate()?;
    let result = execute(&cfg, args.resume, args.stop_after, args.retry_base_ms)?;
    match &result {
        SearchResult::Finished(best) => {
            println!("best rates  {:?}", best.rates);
            println!("best fitness {:.6}", best.fitness);
            if let Some(u) = best.uniform_fitness {
                println!("uniform fitness {u:.6}");
            }
            println!("evaluations {}", best.total_evaluations);
        }
        SearchResult::Interrupted { generation } => println!(
            "stopped after generation {generation}; resume with --resume --out-dir {}",
            cfg.output_dir.display()
        ),
    }
    Ok(result)
}

/// Runs (or resumes) a search described by `cfg`, writing all artifacts.
pub fn execute(
    cfg: &RunConfig,
    resume: bool,
    stop_after: Option<u32>,
    retry_base_ms: Option<u64>,
) -> Result<SearchResult, CliError> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model: ModelF32 =
        load_model(&cfg.model_path).with_context(|| format!("loading model {}", cfg.model_path.display()))?;
    let calib = load_corpus(&cfg.calib_corpus_path)?;
    let fitness_corpus = load_corpus(&cfg.fitness_corpus_path)?;
    let stats = model
        .collect_activation_stats(&calib, cfg.seq_len)
        .context("collecting activation statistics")?;
    let fitness = PerplexityFitnessF32 {
        model: &model,
        stats: &stats,
        corpus: &fitness_corpus,
        seq_len: cfg.seq_len,
    };

    let mut operator = build_operator(cfg, retry_base_ms)?;
    let n_layers = model.blocks.len();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut state = if resume {
        let s = checkpoint_load(&ckpt_dir.join(LATEST_CHECKPOINT)).context("loading checkpoint")?;
        if s.n_layers != n_layers || s.hyper != cfg.hyper() {
            return Err(CliError::usage("checkpoint does not match the run configuration"));
        }
        s
    } else {
        let init: &mut dyn Operator = if cfg.no_llm_init {
            &mut FallbackOperator
        } else {
            operator.as_mut()
        };
        SearchState::new(cfg.hyper(), n_layers, init).map_err(|e| CliError::usage(e.to_string()))?
    };
    if !resume {
        log::info!(
            "initial population: {} from operator, {} from fallback, {} repaired",
            state.init.from_operator,
            state.init.from_fallback,
            state.init.repair_events
        );
    }

    let options = RunOptions {
        jobs: cfg.jobs,
        checkpoint_dir: Some(ckpt_dir),
        stop_after,
    };
    let status = run(&mut state, operator.as_mut(), &fitness, &options)?;
    write_history(&out.join(HISTORY), &state.history)?;
    let (tag, result) = match status {
        RunStatus::Finished(outcome) => {
            let best = BestConfig::from_outcome(&outcome);
            write_json(&out.join(BEST_CONFIG), &best)?;
            (RunStatusTag::Finished, SearchResult::Finished(best))
        }
        RunStatus::Interrupted { generation } => {
            (RunStatusTag::Interrupted, SearchResult::Interrupted { generation })
        }
    };
    let manifest = RunManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        status: tag,
        generation: state.generation,
        n_layers,
        model_sha256: sha256_file(&cfg.model_path)?,
        config: cfg.clone(),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(result)
}
