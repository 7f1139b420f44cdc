//! The small commands: model and corpus generation, pruning, evaluation.

use anyhow::Context;
use layerprune::engine::{init_random_model, load_model, save_model, ModelSpec, TokenCorpus};
use layerprune::pruner::prune as prune_model;
use layerprune::ModelF32;
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_pruning_config, sha256_file, write_json, ARTIFACT_SCHEMA_VERSION};
use crate::{CliError, EvalArgs, GenCorpusArgs, GenModelArgs, PruneArgs};

pub fn gen_model(a: &GenModelArgs) -> Result<(), CliError> {
    let spec = ModelSpec::new(a.layers, a.d_model, a.heads, a.d_ff, a.vocab, a.max_seq_len)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let model: ModelF32 = init_random_model(spec, a.seed)?;
    save_model(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "params total={} block={}",
        model.total_param_count(),
        model.block_param_count()
    );
    println!("sha256 {}", sha256_file(&a.out)?);
    Ok(())
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<(), CliError> {
    let name = a.name.clone().unwrap_or_else(|| format!("synthetic-{}", a.seed));
    let corpus = TokenCorpus::synthetic(name, a.vocab, a.tokens, a.seed).map_err(|e| CliError::usage(e.to_string()))?;
    corpus.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("tokens {} vocab {}", corpus.len(), corpus.vocab_size());
    Ok(())
}

/// Path of the plan written next to a pruned model.
pub fn plan_path(out: &std::path::Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".plan.json");
    s.into()
}

pub fn prune(a: &PruneArgs) -> Result<(), CliError> {
    let model: ModelF32 = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let calib = TokenCorpus::load(&a.calib).with_context(|| format!("loading corpus {}", a.calib.display()))?;
    let config = load_pruning_config(&a.config)?;
    let stats = model
        .collect_activation_stats(&calib, a.seq_len)
        .context("collecting activation statistics")?;
    let (pruned, plan) = prune_model(&model, &stats, &config)?;
    save_model(&pruned, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&plan_path(&a.out), &plan)?;
    let before = model.block_param_count();
    let after = pruned.block_param_count();
    println!("block params before={before} after={after}");
    println!(
        "total params before={} after={}",
        model.total_param_count(),
        pruned.total_param_count()
    );
    println!("removed {:.2}% of block params", 100.0 * (before - after) as f64 / before as f64);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub schema_version: u32,
    pub perplexity: f64,
    pub tokens_evaluated: usize,
    pub windows: usize,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let model: ModelF32 = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let corpus = TokenCorpus::load(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let r = model.evaluate_perplexity(&corpus, a.seq_len)?;
    let out = EvalOutput {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        perplexity: r.perplexity,
        tokens_evaluated: r.tokens_evaluated,
        windows: r.windows,
    };
    println!("{}", serde_json::to_string(&out).expect("plain struct serializes"));
    if let Some(p) = &a.json_out {
        write_json(p, &out)?;
    }
    Ok(())
}
