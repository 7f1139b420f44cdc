use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use layerprune::config_space::uniform;
use layerprune::engine::{benchmark_throughput, load_model, TokenCorpus};
use layerprune::evolution::GenerationRecord;
use layerprune::pruner::prune;
use layerprune::{ModelF32, PruningConfig};

use crate::artifacts::{
    read_history, read_json, run_paths, BestConfig, RunManifest, REPORT_CSV, REPORT_TXT,
};
use crate::{CliError, ReportArgs};

pub const REPORT_VERSION_LINE: &str = "# layerprune report v1";
pub const REPORT_CSV_HEADER: &str =
    "row,fitness,report_perplexity,block_params,total_params,block_removed_fraction";

const CAVEAT: &str = "Toy-scale run on a synthetic model and corpus. \
These numbers show search behaviour only and say nothing about pruning quality on full-size language models.";

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: &'static str,
    pub fitness: f64,
    pub report_perplexity: f64,
    pub block_params: usize,
    pub total_params: usize,
    pub block_removed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub history: Vec<GenerationRecord>,
    pub best: BestConfig,
    pub dense_tokens_per_sec: f64,
    pub pruned_tokens_per_sec: f64,
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{REPORT_VERSION_LINE}\n{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{:.6}",
                r.label, r.fitness, r.report_perplexity, r.block_params, r.total_params, r.block_removed_fraction
            );
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Search summary (beta = {})", self.best.beta);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>14} {:>12} {:>12} {:>9}",
            "row", "fitness", "report ppl", "block params", "total params", "removed"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>14.4} {:>14.4} {:>12} {:>12} {:>8.2}%",
                r.label,
                r.fitness,
                r.report_perplexity,
                r.block_params,
                r.total_params,
                100.0 * r.block_removed_fraction
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "best rates: {:?}", self.best.rates);
        let _ = writeln!(out, "found in generation {}", self.best.generation_found);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>10} {:>14} {:>14} {:>11}", "generation", "best", "mean", "evaluations");
        for h in &self.history {
            let _ = writeln!(
                out,
                "{:>10} {:>14.6} {:>14.6} {:>11}",
                h.generation, h.best_fitness, h.mean_fitness, h.evaluations
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "throughput: dense {:.1} tok/s, searched {:.1} tok/s ({:.2}x)",
            self.dense_tokens_per_sec,
            self.pruned_tokens_per_sec,
            self.pruned_tokens_per_sec / self.dense_tokens_per_sec
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{CAVEAT}");
        out
    }
}

fn check_artifacts(dir: &Path) -> Result<(), CliError> {
    let missing: Vec<&str> = run_paths(dir)
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(name, _)| *name)
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let expected: Vec<&str> = run_paths(dir).iter().map(|(n, _)| *n).collect();
    Err(CliError::usage(format!(
        "{} is not a finished search directory: missing {} (expected {})",
        dir.display(),
        missing.join(", "),
        expected.join(", ")
    )))
}

/// Builds the report for a finished search directory without writing it.
pub fn build_report(args: &ReportArgs) -> Result<Report, CliError> {
    let dir = &args.run_dir;
    check_artifacts(dir)?;
    let [(_, manifest_path), (_, best_path), (_, history_path)] = run_paths(dir);
    let manifest: RunManifest = read_json(&manifest_path)?;
    let best: BestConfig = read_json(&best_path)?;
    let history = read_history(&history_path)?;
    let cfg = &manifest.config;

    let model: ModelF32 =
        load_model(&cfg.model_path).with_context(|| format!("loading model {}", cfg.model_path.display()))?;
    let load = |p: &Path| TokenCorpus::load(p).with_context(|| format!("loading corpus {}", p.display()));
    let calib = load(&cfg.calib_corpus_path)?;
    let fitness_corpus = load(&cfg.fitness_corpus_path)?;
    let report_corpus = load(&cfg.report_corpus_path)?;
    let stats = model.collect_activation_stats(&calib, cfg.seq_len)?;

    let dense_block = model.block_param_count();
    let mut rows = Vec::new();
    let mut measure = |label: &'static str, m: &ModelF32| -> anyhow::Result<()> {
        let block = m.block_param_count();
        rows.push(ReportRow {
            label,
            fitness: m.perplexity(&fitness_corpus, cfg.seq_len)?,
            report_perplexity: m.perplexity(&report_corpus, cfg.seq_len)?,
            block_params: block,
            total_params: m.total_param_count(),
            block_removed_fraction: (dense_block - block) as f64 / dense_block as f64,
        });
        Ok(())
    };
    measure("dense", &model)?;
    let uniform_cfg: PruningConfig = uniform(manifest.n_layers, best.beta)?;
    let (uniform_model, _) = prune(&model, &stats, &uniform_cfg)?;
    measure("uniform", &uniform_model)?;
    let (searched_model, _) = prune(&model, &stats, &best.config()?)?;
    measure("searched", &searched_model)?;

    let dense_tp = benchmark_throughput(&model, args.bench_tokens, args.bench_repeats)?;
    let pruned_tp = benchmark_throughput(&searched_model, args.bench_tokens, args.bench_repeats)?;
    Ok(Report {
        rows,
        history,
        best,
        dense_tokens_per_sec: dense_tp.tokens_per_sec,
        pruned_tokens_per_sec: pruned_tp.tokens_per_sec,
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<Report, CliError> {
    let report = build_report(args)?;
    let text = report.text();
    fs::write(args.run_dir.join(REPORT_TXT), &text).context("writing report.txt")?;
    fs::write(args.run_dir.join(REPORT_CSV), report.csv()).context("writing report.csv")?;
    print!("{text}");
    Ok(report)
}
