use layerprune::operator::{render_evolve_prompt, render_init_prompt, EvolveKind};
use layerprune::PruningConfig;

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn population() -> Vec<(PruningConfig, f64)> {
    vec![
        (PruningConfig::new(vec![0.1, 0.2, 0.4, 0.5], 0.3).unwrap(), 12.345678),
        (PruningConfig::new(vec![0.3, 0.3, 0.3, 0.3], 0.3).unwrap(), 14.0),
    ]
}

#[test]
fn init_prompt_matches_golden() {
    assert_eq!(render_init_prompt("toy-4L", 4, 5, 0.3), golden("init_prompt.txt"));
}

#[test]
fn mutation_prompt_matches_golden() {
    let got = render_evolve_prompt(EvolveKind::Mutation, "toy-4L", 4, 0.3, &population(), 3);
    assert_eq!(got, golden("evolve_mutation_prompt.txt"));
}

#[test]
fn crossover_prompt_matches_golden() {
    let got = render_evolve_prompt(EvolveKind::Crossover, "toy-4L", 4, 0.3, &population(), 4);
    assert_eq!(got, golden("evolve_crossover_prompt.txt"));
}
