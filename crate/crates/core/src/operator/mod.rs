//! Genetic operators: the language-model operator that drives the search
//! through prompts, and the seeded offline fallback.

mod chat;
mod fallback;
mod llm;
mod prompts;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::PruningConfig;

pub use chat::{
    default_max_tokens, extract_content, request_body, ChatClient, ChatExchange, EndpointConfig,
    HttpChatClient, ReplayChatClient, RetryPolicy, TranscriptEntry, TranscriptLog,
    DEFAULT_API_KEY_ENV,
};
pub use fallback::{fallback_propose, FallbackOperator, MUTATION_SIGMA};
pub use llm::LlmOperator;
pub use prompts::{
    render_evolve_prompt, render_init_prompt, render_population, EvolveKind, TemplateId,
    EVOLVE_TEMPLATE, INIT_TEMPLATE,
};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("operator failure after {attempts} attempts: {cause}")]
    Exhausted { attempts: u32, cause: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("replay transcript exhausted")]
    ReplayExhausted,
    #[error("replay transcript entry {index} does not match the rendered prompt")]
    ReplayMismatch { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Init,
    Mutation,
    Crossover,
}

/// What the search asks an operator for.
#[derive(Debug, Clone, Copy)]
pub struct ProposalRequest<'a> {
    pub kind: OperatorKind,
    /// Current top-K with fitness (empty for init).
    pub parents: &'a [(PruningConfig, f64)],
    pub count: usize,
    pub n_layers: usize,
    pub beta: f64,
}

/// Operator output: between 0 and `count` feasible configs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Proposal {
    pub configs: Vec<PruningConfig>,
    /// Configs that needed clamping or a mean shift.
    pub repair_events: usize,
    pub failure: Option<String>,
}

pub trait Operator {
    /// Never fails; a shortfall (possibly empty) signals trouble. `rng` is
    /// the search's generator and is only consumed by seeded operators.
    fn propose(&mut self, request: &ProposalRequest<'_>, rng: &mut ChaCha8Rng) -> Proposal;

    /// Whether offspring come from the offline sampler rather than a model.
    fn is_fallback(&self) -> bool {
        false
    }
}

impl<O: Operator + ?Sized> Operator for Box<O> {
    fn propose(&mut self, request: &ProposalRequest<'_>, rng: &mut ChaCha8Rng) -> Proposal {
        (**self).propose(request, rng)
    }

    fn is_fallback(&self) -> bool {
        (**self).is_fallback()
    }
}
