//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use layerprune::config_space::{uniform, validate, MEAN_TOLERANCE};
use layerprune::engine::{
    benchmark_throughput, from_bytes, init_random_model, load_model, save_model, to_bytes, ActivationStats,
    LayerStats, ModelSpec, TokenCorpus,
};
use layerprune::evolution::{checkpoint_load, SearchState, LATEST_CHECKPOINT};
use layerprune::operator::{render_evolve_prompt, render_init_prompt, EvolveKind, TranscriptLog};
use layerprune::pruner::{plan, prune, rate_to_counts};
use layerprune::{ModelF32, ModelF64, PruningConfig};
use layerprune_cli::artifacts::{
    read_history, read_json, BestConfig, RunManifest, BEST_CONFIG, CHECKPOINT_DIR, HISTORY, RUN_MANIFEST,
    TRANSCRIPT,
};
use layerprune_cli::config::{OperatorMode, RunConfig};
use layerprune_cli::search::{execute, SearchResult};
use layerprune_cli::tools::plan_path;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KEY_ENV: &str = "LAYERPRUNE_ACCEPTANCE_KEY";
const BETA: f64 = 0.3;
const SEQ_LEN: usize = 64;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    train: PathBuf,
    test: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let model = root.join("toy4.bin");
        let train = root.join("train.tok");
        let test = root.join("test.tok");
        let spec = ModelSpec::new(4, 64, 4, 128, 256, 128).unwrap();
        let m: ModelF32 = init_random_model(spec, 7).unwrap();
        save_model(&m, &model).unwrap();
        TokenCorpus::synthetic("train", 256, 2048, 1).unwrap().save(&train).unwrap();
        TokenCorpus::synthetic("test", 256, 1024, 2).unwrap().save(&test).unwrap();
        Self {
            _dir: dir,
            root,
            model,
            train,
            test,
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn search_args(&self, out: &str, extra: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = [
            "search", "--model", p(&self.model), "--calib", p(&self.train), "--report-corpus", p(&self.test),
            "--seq-len", "64", "-k", "8", "-m", "4", "-s", "4", "-n", "10", "--beta", "0.3", "--seed", "7",
            "--out-dir", p(&self.dir(out)),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    fn run_config(&self, out: &str) -> RunConfig {
        RunConfig {
            model_path: self.model.clone(),
            calib_corpus_path: self.train.clone(),
            fitness_corpus_path: self.train.clone(),
            report_corpus_path: self.test.clone(),
            model_name: "toy-4L".into(),
            beta: BETA,
            population_size: 8,
            mutations: 4,
            crossovers: 4,
            generations: 10,
            seed: 7,
            seq_len: SEQ_LEN,
            jobs: 1,
            operator: OperatorMode::Fallback,
            endpoint_url: String::new(),
            llm_model: "stub".into(),
            api_key_env: KEY_ENV.into(),
            temperature: 1.0,
            max_tokens: None,
            replay_transcript: None,
            no_llm_init: false,
            no_mutation: false,
            no_crossover: false,
            output_dir: self.dir(out),
        }
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cli(args: &[String]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_layerprune")).args(args).output()?;
    ensure!(
        out.status.success(),
        "{:?} exited {:?}: {}",
        args.first(),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn final_state(run_dir: &Path) -> Result<SearchState> {
    Ok(checkpoint_load(&run_dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT))?)
}

fn evaluated_configs(state: &SearchState) -> Result<Vec<Vec<f64>>> {
    state
        .fitness_cache
        .keys()
        .map(|k| serde_json::from_str(k).with_context(|| format!("cache key {k}")))
        .collect()
}

/// Shared state: the main fallback run is reused by several criteria.
struct MainRun {
    dir: PathBuf,
    elapsed: Duration,
}

fn c1(main: &MainRun) -> Result<String> {
    let state = final_state(&main.dir)?;
    let configs = evaluated_configs(&state)?;
    let bad = configs
        .iter()
        .filter(|r| validate(r, BETA, MEAN_TOLERANCE).is_err())
        .count();
    ensure!(bad == 0, "{bad} of {} evaluated configs infeasible", configs.len());
    ensure!(main.elapsed < Duration::from_secs(120), "search took {:?}", main.elapsed);
    Ok(format!(
        "{} evaluated configs feasible, search took {:.1}s",
        configs.len(),
        main.elapsed.as_secs_f64()
    ))
}

fn c2(main: &MainRun) -> Result<String> {
    let state = final_state(&main.dir)?;
    let h = &state.history;
    ensure!(h.len() == 11, "expected 11 history records, got {}", h.len());
    for w in h.windows(2) {
        ensure!(
            w[1].best_fitness <= w[0].best_fitness,
            "best rose from {} to {} at generation {}",
            w[0].best_fitness,
            w[1].best_fitness,
            w[1].generation
        );
    }
    Ok(format!(
        "best fitness {:.4} -> {:.4} over {} records",
        h[0].best_fitness,
        h[h.len() - 1].best_fitness,
        h.len()
    ))
}

fn c3(main: &MainRun) -> Result<String> {
    let best: BestConfig = read_json(&main.dir.join(BEST_CONFIG))?;
    let u = best.uniform_fitness.context("uniform fitness missing")?;
    let run = read_json::<RunManifest>(&main.dir.join(RUN_MANIFEST))?.config;
    let model: ModelF32 = load_model(&run.model_path)?;
    let calib = TokenCorpus::load(&run.calib_corpus_path)?;
    let stats = model.collect_activation_stats(&calib, SEQ_LEN)?;
    let (pruned, _) = prune(&model, &stats, &uniform(4, BETA)?)?;
    let recomputed = pruned.perplexity(&calib, SEQ_LEN)?;
    ensure!(recomputed == u, "recorded uniform fitness {u} but recomputed {recomputed}");
    ensure!(best.fitness <= u, "searched {} > uniform {u}", best.fitness);
    Ok(format!("searched {:.4} <= uniform {:.4}", best.fitness, u))
}

fn c4() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    for trial in 0..200u64 {
        let heads = rng.random_range(1..=4usize);
        let head_dim = rng.random_range(1..=3usize);
        let ff = rng.random_range(1..=6usize);
        let d = heads * head_dim;
        let m: ModelF32 = init_random_model(ModelSpec::new(1, d, heads, ff, 8, 8)?, 1000 + trial)?;
        let norms = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| rng.random_range(0.0..3.0)).collect() };
        let stats = ActivationStats {
            layers: vec![LayerStats {
                attn_input_norms: norms(d, &mut rng),
                ffn_input_norms: norms(d, &mut rng),
                ffn_mid_norms: norms(ff, &mut rng),
            }],
            token_count: 1,
        };
        let rate = rng.random_range(0..=100u32) as f64 / 100.0;
        let got = &plan(&m, &stats, &uniform(1, rate)?)?.layers[0];
        let st = &stats.layers[0];
        let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let a = wide(&st.attn_input_norms);
        let fin = wide(&st.ffn_input_norms);
        let hs: Vec<f64> = (0..heads).map(|h| oracle::oracle_head_score(&m, 0, h, &a)).collect();
        let fs: Vec<f64> = (0..ff)
            .map(|k| oracle::oracle_ffn_score(&m, 0, k, &fin, st.ffn_mid_norms[k] as f64))
            .collect();
        let want_h = oracle::brute_force_keep(&hs, heads - rate_to_counts(rate, heads));
        let want_f = oracle::brute_force_keep(&fs, ff - rate_to_counts(rate, ff));
        if got.kept_heads == want_h && got.kept_ffn_channels == want_f {
            agree += 1;
        }
    }
    ensure!(agree == 200, "{agree}/200 layers agree");
    Ok("200/200 layers agree with subset enumeration".into())
}

fn c5(env: &Env) -> Result<String> {
    let cfg = env.dir("rate0.json");
    std::fs::write(&cfg, r#"{"rates": [0.0, 0.0, 0.0, 0.0], "beta": 0.0}"#)?;
    let out = env.dir("rate0.bin");
    cli(&[
        "prune", "--model", p(&env.model), "--calib", p(&env.train), "--config", p(&cfg), "--seq-len", "64", "--out",
        p(&out),
    ]
    .map(String::from))?;
    ensure!(plan_path(&out).is_file(), "plan JSON missing");
    let dense: ModelF32 = load_model(&env.model)?;
    let pruned: ModelF32 = load_model(&out)?;
    let probe: Vec<u32> = (0..64u32).map(|i| (i * 37 + 11) % 256).collect();
    let (a, b) = (dense.logits(&probe)?, pruned.logits(&probe)?);
    ensure!(
        a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "logits differ"
    );
    let test = TokenCorpus::load(&env.test)?;
    let (pa, pb) = (dense.perplexity(&test, SEQ_LEN)?, pruned.perplexity(&test, SEQ_LEN)?);
    ensure!(pa == pb, "perplexity {pa} vs {pb}");
    Ok(format!("64-token logits bit-identical, perplexity {pa:.4} on both"))
}

fn c6() -> Result<String> {
    let m32: ModelF32 = init_random_model(ModelSpec::new(2, 32, 4, 48, 64, 64)?, 6)?;
    let m: ModelF64 = from_bytes(&to_bytes(&m32))?;
    let corpus = TokenCorpus::synthetic("c6", 64, 512, 6)?;
    let engine = m.perplexity(&corpus, 32)?;
    let reference = oracle::oracle_perplexity(&m, corpus.tokens(), 32);
    let rel = (engine - reference).abs() / reference;
    ensure!(rel <= 1e-6, "relative error {rel:e}");
    Ok(format!("engine {engine:.6} vs reference {reference:.6} (rel {rel:.1e})"))
}

fn c7(env: &Env) -> Result<String> {
    let model: ModelF32 = load_model(&env.model)?;
    let stats = model.collect_activation_stats(&TokenCorpus::load(&env.train)?, SEQ_LEN)?;
    let s = model.spec;
    let unit = (4 * s.d_model * s.head_dim) as f64 / s.dense_block_params() as f64;
    let mut parts = Vec::new();
    for beta in [0.2, 0.3, 0.4, 0.5] {
        let (pruned, _) = prune(&model, &stats, &uniform(4, beta)?)?;
        let heads = s.n_heads - rate_to_counts(beta, s.n_heads);
        let ff = s.d_ff - rate_to_counts(beta, s.d_ff);
        let analytic = 4 * (4 * s.d_model * heads * s.head_dim + 2 * s.d_model * ff);
        ensure!(pruned.block_param_count() == analytic, "beta {beta}: {} vs analytic {analytic}", pruned.block_param_count());
        let removed = 1.0 - analytic as f64 / model.block_param_count() as f64;
        ensure!((removed - beta).abs() <= unit, "beta {beta}: removed {removed:.4}");
        parts.push(format!("{beta}->{removed:.4}"));
    }
    Ok(format!("analytic counts exact; removal {}", parts.join(" ")))
}

fn c8(env: &Env) -> Result<String> {
    let model: ModelF32 = load_model(&env.model)?;
    let stats = model.collect_activation_stats(&TokenCorpus::load(&env.train)?, SEQ_LEN)?;
    let (half, _) = prune(&model, &stats, &uniform(4, 0.5)?)?;
    let dense = benchmark_throughput(&model, 2048, 7)?;
    let pruned = benchmark_throughput(&half, 2048, 7)?;
    ensure!(
        pruned.tokens_per_sec > dense.tokens_per_sec,
        "pruned {:.0} tok/s not above dense {:.0}",
        pruned.tokens_per_sec,
        dense.tokens_per_sec
    );
    Ok(format!(
        "dense {:.0} tok/s, 50% pruned {:.0} tok/s (median of 7)",
        dense.tokens_per_sec, pruned.tokens_per_sec
    ))
}

fn c9() -> Result<String> {
    let golden = |name: &str| -> Result<String> {
        let path = format!("{}/../core/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(&path).with_context(|| path)
    };
    let pop = vec![
        (PruningConfig::new(vec![0.1, 0.2, 0.4, 0.5], 0.3)?, 12.345678),
        (PruningConfig::new(vec![0.3; 4], 0.3)?, 14.0),
    ];
    ensure!(render_init_prompt("toy-4L", 4, 5, 0.3) == golden("init_prompt.txt")?, "init prompt differs");
    ensure!(
        render_evolve_prompt(EvolveKind::Mutation, "toy-4L", 4, 0.3, &pop, 3) == golden("evolve_mutation_prompt.txt")?,
        "mutation prompt differs"
    );
    ensure!(
        render_evolve_prompt(EvolveKind::Crossover, "toy-4L", 4, 0.3, &pop, 4) == golden("evolve_crossover_prompt.txt")?,
        "crossover prompt differs"
    );
    Ok("init, mutation and crossover prompts byte-identical to goldens".into())
}

fn c10(env: &Env, main: &MainRun) -> Result<String> {
    cli(&env.search_args("det_b", &[]))?;
    let a = std::fs::read(main.dir.join(BEST_CONFIG))?;
    ensure!(a == std::fs::read(env.dir("det_b").join(BEST_CONFIG))?, "two seeded runs differ");
    cli(&env.search_args("det_c", &["--stop-after", "3"]))?;
    let manifest: RunManifest = read_json(&env.dir("det_c").join(RUN_MANIFEST))?;
    ensure!(manifest.generation == 3, "interrupted at generation {}", manifest.generation);
    cli(&["search", "--resume", "--out-dir", p(&env.dir("det_c"))].map(String::from))?;
    ensure!(a == std::fs::read(env.dir("det_c").join(BEST_CONFIG))?, "resumed run differs");
    let full = final_state(&main.dir)?;
    let resumed = final_state(&env.dir("det_c"))?;
    ensure!(full == resumed, "final search states differ");
    Ok("repeat run and resume-from-generation-3 both byte-identical".into())
}

/// Deterministic pseudo-random 4-layer configs, deliberately off-budget so
/// that repair is exercised.
fn stub_configs(n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..12)
        .map(|i| {
            let v: Vec<String> = (0..4).map(|_| format!("{:.5}", rng.random_range(0.0..0.7))).collect();
            format!("Configuration{}: [{}]", i + 1, v.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn c11(env: &Env) -> Result<String> {
    let server = oracle::stub::start(|n, _| (200, oracle::stub::completion(&stub_configs(n))));
    let mut lines = Vec::new();
    for mask in 0..8u8 {
        let (no_init, no_mut, no_cross) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let name = format!("ablate_{mask}");
        let cfg = RunConfig {
            operator: OperatorMode::Llm,
            endpoint_url: server.url.clone(),
            generations: 4,
            no_llm_init: no_init,
            no_mutation: no_mut,
            no_crossover: no_cross,
            ..env.run_config(&name)
        };
        let SearchResult::Finished(best) = execute(&cfg, false, None, Some(1)).map_err(|e| e.into_anyhow())? else {
            anyhow::bail!("{name} did not finish");
        };
        let dir = env.dir(&name);
        ensure!(read_json::<BestConfig>(&dir.join(BEST_CONFIG))? == best, "{name}: best_config mismatch");
        let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
        ensure!(manifest.config.no_mutation == no_mut, "{name}: manifest flags");
        ensure!(read_history(&dir.join(HISTORY))?.len() == 5, "{name}: history length");
        validate(&best.rates, BETA, MEAN_TOLERANCE).map_err(|e| anyhow::anyhow!("{name}: {e}"))?;
        let state = final_state(&dir)?;
        ensure!((state.init.from_operator == 0) == no_init, "{name}: init source");
        let offspring: usize = state.history.iter().map(|r| r.llm_offspring + r.fallback_offspring).sum();
        if no_mut && no_cross {
            ensure!(offspring == 0, "{name}: offspring produced");
            let first = state.history[0].best_fitness;
            ensure!(state.history.iter().all(|r| r.best_fitness == first), "{name}: best changed");
        }
        let uses_llm = !(no_init && no_mut && no_cross);
        ensure!(dir.join(TRANSCRIPT).is_file() == uses_llm, "{name}: transcript presence");
        lines.push(format!("{mask:03b}"));
    }
    Ok(format!("8 flag combinations ok ({}); best constant with both operators off", lines.join(" ")))
}

fn c12(env: &Env) -> Result<String> {
    let server = oracle::stub::start(|n, _| match n % 4 {
        0 => (200, "this is not json {".to_string()),
        2 => (200, oracle::stub::completion("I would suggest [0.3, 0.3] or maybe [a, b, c, d].")),
        _ => (200, oracle::stub::completion(&stub_configs(n))),
    });
    let cfg = RunConfig {
        operator: OperatorMode::Llm,
        endpoint_url: server.url.clone(),
        generations: 6,
        ..env.run_config("robust")
    };
    let SearchResult::Finished(best) = execute(&cfg, false, None, Some(1)).map_err(|e| e.into_anyhow())? else {
        anyhow::bail!("search did not finish");
    };
    let state = final_state(&env.dir("robust"))?;
    let configs = evaluated_configs(&state)?;
    ensure!(
        configs.iter().all(|r| validate(r, BETA, MEAN_TOLERANCE).is_ok()),
        "infeasible config evaluated"
    );
    ensure!(
        state.population.iter().all(|i| validate(i.config.rates(), BETA, MEAN_TOLERANCE).is_ok()),
        "infeasible individual retained"
    );
    let requests = server.requests.lock().unwrap().len();
    let entries = TranscriptLog::read(&env.dir("robust").join(TRANSCRIPT))?;
    ensure!(entries.len() == requests, "{} transcript entries for {requests} requests", entries.len());
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    let llm: usize = state.history.iter().map(|r| r.llm_offspring).sum();
    let fallback: usize = state.history.iter().map(|r| r.fallback_offspring).sum();
    ensure!(llm > 0 && fallback > 0, "expected a mix of sources, got llm {llm} fallback {fallback}");
    Ok(format!(
        "{requests} exchanges logged ({failed} errors), {llm} llm + {fallback} fallback offspring, best {:.4}",
        best.fitness
    ))
}

fn main() {
    // Only this process reads the variable; set before any thread starts.
    std::env::set_var(KEY_ENV, "acceptance-stub-key");
    let env = Env::new();

    let started = Instant::now();
    let main_run = cli(&env.search_args("main", &[])).map(|_| MainRun {
        dir: env.dir("main"),
        elapsed: started.elapsed(),
    });

    type Check<'a> = Box<dyn FnOnce() -> Result<String> + 'a>;
    let needs_main = |f: fn(&MainRun) -> Result<String>| -> Check<'_> {
        let m = main_run.as_ref().map_err(|e| anyhow::anyhow!("main search failed: {e:#}"));
        Box::new(move || f(m?))
    };
    let checks: Vec<(&str, Check<'_>)> = vec![
        ("constraint satisfaction", needs_main(c1)),
        ("elitism / monotone best", needs_main(c2)),
        ("baseline dominance", needs_main(c3)),
        ("wanda-sp oracle equivalence", Box::new(c4)),
        ("identity pruning", Box::new(|| c5(&env))),
        ("perplexity oracle", Box::new(c6)),
        ("parameter accounting", Box::new(|| c7(&env))),
        ("throughput direction", Box::new(|| c8(&env))),
        ("prompt fidelity", Box::new(c9)),
        (
            "determinism and resumability",
            Box::new(|| match &main_run {
                Ok(m) => c10(&env, m),
                Err(e) => Err(anyhow::anyhow!("main search failed: {e:#}")),
            }),
        ),
        ("ablation modes", Box::new(|| c11(&env))),
        ("operator robustness", Box::new(|| c12(&env))),
    ];

    let mut failures = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(e) => {
                failures += 1;
                println!("FAIL criterion {:>2} {name}: {e:#} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
