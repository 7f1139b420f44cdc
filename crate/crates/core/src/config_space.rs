//! Layer-wise pruning-rate vectors under the box-and-mean constraint.
//!
//! A configuration assigns every transformer block a removal fraction in
//! `[0, 1]`; the fractions must average to the global budget `beta`. Configs
//! live on a 5-decimal grid, which is also their canonical text form
//! (`[0.30000, 0.25000, ...]`) used in prompts, reports and cache keys.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation between the mean of a config and its target.
pub const MEAN_TOLERANCE: f64 = 1e-5;
/// Number of decimal places kept in every stored genome.
pub const DECIMALS: usize = 5;

const GRID: f64 = 1e5;
const PROJECTION_TOLERANCE: f64 = 1e-9;
const PROJECTION_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("empty rate vector")]
    Empty,
    #[error("rate[{index}] is not finite")]
    NonFinite { index: usize },
    #[error("rate[{index}] out of [0,1] (value {value})")]
    OutOfRange { index: usize, value: f64 },
    #[error("mean={} does not match target {}", trim(*mean), trim(*target))]
    MeanMismatch { mean: f64, target: f64 },
    #[error("target mean {0} outside [0,1]")]
    BadTarget(f64),
    #[error("expected {expected} layers, got {actual}")]
    LayerCount { expected: usize, actual: usize },
    #[error("found {found} of {expected} requested configurations")]
    ParseShortfall {
        found: usize,
        expected: usize,
        vectors: Vec<Vec<f64>>,
    },
}

fn trim(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Rounds to the canonical 5-decimal grid.
#[inline]
pub fn round_to_grid(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Checks the box and mean constraints, reporting the first failure.
pub fn validate(rates: &[f64], beta: f64, tol: f64) -> Result<(), ConfigError> {
    assert!(tol > 0.0, "tolerance must be positive");
    if rates.is_empty() {
        return Err(ConfigError::Empty);
    }
    for (index, &value) in rates.iter().enumerate() {
        if !value.is_finite() {
            return Err(ConfigError::NonFinite { index });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(ConfigError::OutOfRange { index, value });
        }
    }
    let m = mean(rates);
    if (m - beta).abs() > tol {
        return Err(ConfigError::MeanMismatch { mean: m, target: beta });
    }
    Ok(())
}

/// A feasible layer-wise pruning-rate vector. Each rate is the fraction of a
/// block's structural units that gets removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct PruningConfig {
    rates: Vec<f64>,
    target_mean: f64,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    rates: Vec<f64>,
    target_mean: f64,
}

impl TryFrom<RawConfig> for PruningConfig {
    type Error = ConfigError;
    fn try_from(raw: RawConfig) -> Result<Self, Self::Error> {
        PruningConfig::new(raw.rates, raw.target_mean)
    }
}

impl From<PruningConfig> for RawConfig {
    fn from(c: PruningConfig) -> Self {
        RawConfig {
            rates: c.rates,
            target_mean: c.target_mean,
        }
    }
}

impl PruningConfig {
    /// Wraps `rates` after checking every invariant; no repair is attempted.
    pub fn new(rates: Vec<f64>, target_mean: f64) -> Result<Self, ConfigError> {
        check_target(target_mean)?;
        validate(&rates, target_mean, MEAN_TOLERANCE)?;
        Ok(Self { rates, target_mean })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn n_layers(&self) -> usize {
        self.rates.len()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.rates)
    }

    /// Canonical `[r1, r2, ...]` text with exactly five decimals per entry.
    pub fn canonical(&self) -> String {
        format_rates(&self.rates)
    }
}

impl fmt::Display for PruningConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Formats any rate slice in the canonical bracketed 5-decimal form.
pub fn format_rates(rates: &[f64]) -> String {
    let body: Vec<String> = rates.iter().map(|r| format!("{r:.5}")).collect();
    format!("[{}]", body.join(", "))
}

fn check_target(beta: f64) -> Result<(), ConfigError> {
    if beta.is_finite() && (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(ConfigError::BadTarget(beta))
    }
}

/// What [`repair`] had to do to make a vector feasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    /// Distinct coordinates that were pinned to a bound at any point.
    pub clamped_count: usize,
    /// Total uniform mean shift distributed over free coordinates.
    pub shift_applied: f64,
    pub iterations: usize,
    pub feasible: bool,
}

impl RepairReport {
    /// Whether the input needed anything beyond grid rounding.
    pub fn changed(&self) -> bool {
        self.clamped_count > 0 || self.shift_applied != 0.0
    }
}

/// Maps an arbitrary finite vector onto the feasible set.
///
/// Alternates between clamping to `[0, 1]` and spreading the remaining mean
/// gap over the coordinates that can still move in that direction. The
/// result is rounded to the 5-decimal grid and the leftover rounding error
/// is absorbed by the coordinate with the most slack. Already feasible
/// inputs are only rounded, which makes the map idempotent.
pub fn repair(raw: &[f64], beta: f64) -> Result<(PruningConfig, RepairReport), ConfigError> {
    check_target(beta)?;
    if raw.is_empty() {
        return Err(ConfigError::Empty);
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(ConfigError::NonFinite { index });
    }

    let n = raw.len();
    let mut clamped = vec![false; n];
    let mut x: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(0.0..=1.0).contains(&v) {
                clamped[i] = true;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();

    let mut shift_applied = 0.0;
    let mut iterations = 1;
    let interior_feasible =
        !clamped.iter().any(|&c| c) && (mean(&x) - beta).abs() <= MEAN_TOLERANCE;

    if !interior_feasible {
        iterations = 0;
        while iterations < PROJECTION_MAX_ITERATIONS {
            iterations += 1;
            let gap = beta - mean(&x);
            if gap.abs() <= PROJECTION_TOLERANCE {
                break;
            }
            let free: Vec<usize> = (0..n)
                .filter(|&i| if gap > 0.0 { x[i] < 1.0 } else { x[i] > 0.0 })
                .collect();
            if free.is_empty() {
                break;
            }
            let delta = gap * n as f64 / free.len() as f64;
            for &i in &free {
                let moved = x[i] + delta;
                if !(0.0..=1.0).contains(&moved) {
                    clamped[i] = true;
                }
                x[i] = moved.clamp(0.0, 1.0);
            }
            shift_applied += gap;
        }
    }

    for v in x.iter_mut() {
        *v = round_to_grid(*v);
    }
    let residual = n as f64 * beta - x.iter().sum::<f64>();
    let slack = |v: f64| v.min(1.0 - v);
    let mut target = 0;
    for i in 1..n {
        if slack(x[i]) > slack(x[target]) {
            target = i;
        }
    }
    x[target] = round_to_grid(x[target] + residual).clamp(0.0, 1.0);

    let feasible = validate(&x, beta, MEAN_TOLERANCE).is_ok();
    let report = RepairReport {
        clamped_count: clamped.iter().filter(|&&c| c).count(),
        shift_applied,
        iterations,
        feasible,
    };
    Ok((
        PruningConfig {
            rates: x,
            target_mean: beta,
        },
        report,
    ))
}

/// The uniform allocation: every layer gets the global rate.
pub fn uniform(n: usize, beta: f64) -> Result<PruningConfig, ConfigError> {
    check_target(beta)?;
    if n == 0 {
        return Err(ConfigError::Empty);
    }
    Ok(PruningConfig {
        rates: vec![beta; n],
        target_mean: beta,
    })
}

fn bracket_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("static regex"))
}

/// Extracts every bracketed, comma-separated numeric list with exactly `n`
/// entries from free-form text. Lists with the wrong arity or any
/// non-numeric entry are skipped.
pub fn parse_config_text(
    text: &str,
    n: usize,
    expected_count: usize,
) -> Result<Vec<Vec<f64>>, ConfigError> {
    let mut vectors = Vec::new();
    for cap in bracket_regex().captures_iter(text) {
        let body = &cap[1];
        let parsed: Option<Vec<f64>> = body
            .split(',')
            .map(|tok| tok.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        if let Some(v) = parsed {
            if v.len() == n {
                vectors.push(v);
            }
        }
    }
    if vectors.len() < expected_count {
        return Err(ConfigError::ParseShortfall {
            found: vectors.len(),
            expected: expected_count,
            vectors,
        });
    }
    Ok(vectors)
}
