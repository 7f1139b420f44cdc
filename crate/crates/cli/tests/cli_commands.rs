use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layerprune::engine::{init_random_model, load_model, save_model, Matrix, ModelSpec, TokenCorpus};
use layerprune::ModelF32;
use layerprune_cli::artifacts::{read_history, BestConfig, REPORT_CSV};
use layerprune_cli::tools::plan_path;
use serde_json::Value;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerprune"))
        .args(args)
        .env_remove("LAYERPRUNE_API_KEY")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "gen-model", "--layers", "2", "--d-model", "16", "--heads", "4", "--d-ff", "32", "--vocab", "64",
            "--max-seq-len", "32", "--seed", "7", "--out", s(&f.path("m.bin")),
        ]);
        ok(&["gen-corpus", "--vocab", "64", "--tokens", "512", "--seed", "1", "--out", s(&f.path("train.tok"))]);
        ok(&["gen-corpus", "--vocab", "64", "--tokens", "256", "--seed", "2", "--out", s(&f.path("test.tok"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn search(&self, out: &str, extra: &[&str]) -> Output {
        let (model, train, test) = (self.path("m.bin"), self.path("train.tok"), self.path("test.tok"));
        let mut args = vec![
            "search", "--model", s(&model), "--calib", s(&train), "--report-corpus", s(&test), "--seq-len", "16",
            "-k", "4", "-m", "2", "-s", "2", "-n", "3", "--seed", "7",
        ];
        let out = self.path(out);
        args.extend(["--out-dir", s(&out)]);
        args.extend(extra);
        bin(&args)
    }
}

#[test]
fn gen_model_checksum_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        ok(&[
            "gen-model", "--layers", "4", "--d-model", "64", "--heads", "4", "--d-ff", "128", "--vocab", "256",
            "--seed", "7", "--out", s(&dir.path().join(name)),
        ])
    };
    let a = run("a.bin");
    let b = run("b.bin");
    assert!(a.contains("sha256 "));
    assert_eq!(a, b);
    assert!(a.contains("params total="));
}

#[test]
fn gen_model_rejects_indivisible_heads() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "gen-model", "--layers", "2", "--d-model", "64", "--heads", "3", "--d-ff", "8", "--vocab", "16", "--out",
        s(&dir.path().join("x.bin")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not divisible"));
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["search", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn llm_mode_without_credential_is_usage_error() {
    let f = Fixture::new();
    let out = f.search("run", &["--operator", "llm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LAYERPRUNE_API_KEY"));
    assert!(!f.path("run").join("checkpoints").exists());
}

#[test]
fn missing_model_path_is_usage_error() {
    let f = Fixture::new();
    let out = bin(&["search", "--model", s(&f.path("nope.bin")), "--calib", s(&f.path("train.tok")), "--out-dir",
        s(&f.path("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
}

#[test]
fn search_writes_artifacts_and_is_deterministic() {
    let f = Fixture::new();
    assert!(f.search("a", &[]).status.success());
    assert!(f.search("b", &["--jobs", "3"]).status.success());
    let a = std::fs::read(f.path("a/best_config.json")).unwrap();
    assert_eq!(a, std::fs::read(f.path("b/best_config.json")).unwrap());
    let best: BestConfig = serde_json::from_slice(&a).unwrap();
    assert_eq!(best.schema_version, 1);
    assert!(best.fitness <= best.uniform_fitness.unwrap());
    let history = read_history(&f.path("a/history.csv")).unwrap();
    assert_eq!(history.len(), 4);
    assert!(f.path("a/checkpoints/latest.json").is_file());
    assert!(f.path("a/run.json").is_file());
    assert!(!f.path("a/transcripts.jsonl").exists());
}

#[test]
fn config_file_with_flag_override() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# test run\nmodel_path = {}\ncalib_corpus_path = {}\nbeta = 0.5\npopulation_size = 3\nmutations = 1\n\
             crossovers = 1\ngenerations = 2\nseq_len = 16\noutput_dir = {}\n",
            s(&f.path("m.bin")),
            s(&f.path("train.tok")),
            s(&f.path("from_file"))
        ),
    )
    .unwrap();
    ok(&["search", "--config", s(&cfg), "--beta", "0.25"]);
    let best: BestConfig = serde_json::from_slice(&std::fs::read(f.path("from_file/best_config.json")).unwrap()).unwrap();
    assert_eq!(best.beta, 0.25);
    let manifest: Value = serde_json::from_slice(&std::fs::read(f.path("from_file/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["population_size"], 3);
    assert_eq!(manifest["config"]["generations"], 2);
}

#[test]
fn ablated_search_keeps_best_constant() {
    let f = Fixture::new();
    assert!(f.search("abl", &["--no-mutation", "--no-crossover"]).status.success());
    let h = read_history(&f.path("abl/history.csv")).unwrap();
    assert!(h.iter().all(|r| r.best_fitness == h[0].best_fitness));
}

#[test]
fn interrupted_then_resumed_matches_full_run() {
    let f = Fixture::new();
    assert!(f.search("full", &[]).status.success());
    let out = f.search("part", &["--stop-after", "2"]);
    assert!(out.status.success());
    assert!(!f.path("part/best_config.json").exists());
    ok(&["search", "--resume", "--out-dir", s(&f.path("part"))]);
    assert_eq!(
        std::fs::read(f.path("full/best_config.json")).unwrap(),
        std::fs::read(f.path("part/best_config.json")).unwrap()
    );
}

#[test]
fn prune_rate_zero_preserves_logits() {
    let f = Fixture::new();
    let cfg = f.path("zero.json");
    std::fs::write(&cfg, r#"{"rates": [0.0, 0.0], "beta": 0.0}"#).unwrap();
    let out = f.path("p.bin");
    let text = ok(&[
        "prune", "--model", s(&f.path("m.bin")), "--calib", s(&f.path("train.tok")), "--config", s(&cfg),
        "--seq-len", "16", "--out", s(&out),
    ]);
    assert!(text.contains("removed 0.00%"));
    let a: ModelF32 = load_model(&f.path("m.bin")).unwrap();
    let b: ModelF32 = load_model(&out).unwrap();
    let probe: Vec<u32> = (0..32).map(|i| (i * 11 % 64) as u32).collect();
    assert_eq!(a.logits(&probe).unwrap(), b.logits(&probe).unwrap());
    let plan: Value = serde_json::from_slice(&std::fs::read(plan_path(&out)).unwrap()).unwrap();
    assert_eq!(plan["schema_version"], 1);
    assert_eq!(plan["layers"][0]["kept_heads"], serde_json::json!([0, 1, 2, 3]));
}

#[test]
fn prune_half_is_within_one_unit() {
    let f = Fixture::new();
    let cfg = f.path("half.json");
    std::fs::write(&cfg, r#"{"rates": [0.5, 0.5], "beta": 0.5}"#).unwrap();
    let out = f.path("p.bin");
    ok(&[
        "prune", "--model", s(&f.path("m.bin")), "--calib", s(&f.path("train.tok")), "--config", s(&cfg),
        "--seq-len", "16", "--out", s(&out),
    ]);
    let a: ModelF32 = load_model(&f.path("m.bin")).unwrap();
    let b: ModelF32 = load_model(&out).unwrap();
    // 2 of 4 heads and 16 of 32 channels go in each layer
    assert_eq!(b.block_param_count(), 2 * (4 * 16 * 2 * 4 + 2 * 16 * 16));
    assert_eq!(b.block_param_count() * 2, a.block_param_count());
}

#[test]
fn prune_layer_mismatch_names_counts() {
    let f = Fixture::new();
    let cfg = f.path("three.json");
    std::fs::write(&cfg, r#"{"rates": [0.3, 0.3, 0.3], "beta": 0.3}"#).unwrap();
    let out = bin(&[
        "prune", "--model", s(&f.path("m.bin")), "--calib", s(&f.path("train.tok")), "--config", s(&cfg),
        "--seq-len", "16", "--out", s(&f.path("p.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("expected 2") && err.contains("got 3"), "{err}");
}

#[test]
fn eval_uniform_logits_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut m: ModelF32 = init_random_model(ModelSpec::new(2, 8, 2, 8, 16, 32).unwrap(), 0).unwrap();
    m.embedding = Matrix::zeros(16, 8);
    let model = dir.path().join("flat.bin");
    save_model(&m, &model).unwrap();
    let corpus = dir.path().join("c.tok");
    TokenCorpus::synthetic("c", 16, 256, 3).unwrap().save(&corpus).unwrap();
    let a = ok(&["eval", "--model", s(&model), "--corpus", s(&corpus), "--seq-len", "32"]);
    let b = ok(&["eval", "--model", s(&model), "--corpus", s(&corpus), "--seq-len", "32"]);
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert!((v["perplexity"].as_f64().unwrap() - 16.0).abs() < 1e-4);
    assert_eq!(v["windows"], 8);
    assert_eq!(v["tokens_evaluated"], 8 * 31);

    let short = dir.path().join("short.tok");
    TokenCorpus::synthetic("s", 16, 10, 3).unwrap().save(&short).unwrap();
    let out = bin(&["eval", "--model", s(&model), "--corpus", s(&short), "--seq-len", "32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shorter than one window"));
}

#[test]
fn report_rows_and_stability() {
    let f = Fixture::new();
    assert!(f.search("r", &[]).status.success());
    let run_dir = f.path("r");
    let text = ok(&["report", "--run-dir", s(&run_dir), "--bench-tokens", "64", "--bench-repeats", "3"]);
    assert!(text.contains("uniform") && text.contains("searched"));
    assert!(text.contains("Toy-scale"));
    let csv1 = std::fs::read_to_string(run_dir.join(REPORT_CSV)).unwrap();
    ok(&["report", "--run-dir", s(&run_dir), "--bench-tokens", "64", "--bench-repeats", "3"]);
    let csv2 = std::fs::read_to_string(run_dir.join(REPORT_CSV)).unwrap();
    assert_eq!(csv1, csv2);
    let field = |row: &str, col: usize| -> f64 {
        csv1.lines()
            .find(|l| l.starts_with(row))
            .unwrap()
            .split(',')
            .nth(col)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("searched", 1) <= field("uniform", 1));
}

#[test]
fn report_on_empty_dir_lists_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["report", "--run-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["run.json", "best_config.json", "history.csv"] {
        assert!(err.contains(name), "{err}");
    }
}
