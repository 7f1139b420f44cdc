//! Offline stand-in for the language-model operator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Operator, OperatorKind, Proposal, ProposalRequest};
use crate::config_space::{repair, PruningConfig};

/// Standard deviation of the per-coordinate mutation noise.
pub const MUTATION_SIGMA: f64 = 0.05;

/// Picks a parent index with probability proportional to `P - rank`, where
/// rank 0 is the lowest fitness. `order` lists parent indices best first.
fn rank_weighted(order: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let p = order.len() as u64;
    let total = p * (p + 1) / 2;
    let mut ticket = rng.random_range(0..total);
    for (rank, &idx) in order.iter().enumerate() {
        let w = p - rank as u64;
        if ticket < w {
            return idx;
        }
        ticket -= w;
    }
    unreachable!("ticket is below the total weight")
}

fn fitness_order(parents: &[(PruningConfig, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.sort_by(|&a, &b| parents[a].1.total_cmp(&parents[b].1).then(a.cmp(&b)));
    order
}

fn sample_init(n: usize, beta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lo = (2.0 * beta - 1.0).max(0.0);
    let hi = (2.0 * beta).min(1.0);
    (0..n)
        .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

fn mutate(parent: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, MUTATION_SIGMA).expect("positive sigma");
    parent.iter().map(|&r| r + noise.sample(rng)).collect()
}

fn blend(a: &[f64], b: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let w: f64 = rng.random_range(0.0..=1.0);
            w * x + (1.0 - w) * y
        })
        .collect()
}

/// Produces exactly `request.count` feasible configurations from `rng`.
///
/// * init: each rate uniform on `[max(0, 2b-1), min(1, 2b)]`, then repaired
/// * mutation: rank-weighted parent plus Gaussian noise, then repaired
/// * crossover: two distinct rank-weighted parents blended per coordinate
///
/// Crossover with a single parent degenerates to mutation; mutation or
/// crossover without parents degenerates to init.
pub fn fallback_propose(request: &ProposalRequest<'_>, rng: &mut ChaCha8Rng) -> Proposal {
    let n = request.n_layers;
    let beta = request.beta;
    let parents = request.parents;
    let order = fitness_order(parents);
    let mut kind = request.kind;
    if kind == OperatorKind::Crossover && parents.len() < 2 {
        log::warn!("crossover needs two parents, got {}; mutating instead", parents.len());
        kind = OperatorKind::Mutation;
    }
    if kind != OperatorKind::Init && parents.is_empty() {
        log::warn!("no parents for {kind:?}; sampling fresh configurations");
        kind = OperatorKind::Init;
    }

    let mut proposal = Proposal::default();
    for _ in 0..request.count {
        let raw = match kind {
            OperatorKind::Init => sample_init(n, beta, rng),
            OperatorKind::Mutation => {
                let p = rank_weighted(&order, rng);
                mutate(parents[p].0.rates(), rng)
            }
            OperatorKind::Crossover => {
                let first = rank_weighted(&order, rng);
                let rest: Vec<usize> = order.iter().copied().filter(|&i| i != first).collect();
                let second = rank_weighted(&rest, rng);
                blend(parents[first].0.rates(), parents[second].0.rates(), rng)
            }
        };
        let (cfg, report) = repair(&raw, beta).expect("sampled rates are finite and beta is valid");
        if report.changed() {
            proposal.repair_events += 1;
        }
        proposal.configs.push(cfg);
    }
    proposal
}

/// Operator that never leaves the process.
#[derive(Debug, Default, Clone, Copy)]
pub struct FallbackOperator;

impl Operator for FallbackOperator {
    fn propose(&mut self, request: &ProposalRequest<'_>, rng: &mut ChaCha8Rng) -> Proposal {
        fallback_propose(request, rng)
    }

    fn is_fallback(&self) -> bool {
        true
    }
}
