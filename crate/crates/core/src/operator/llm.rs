use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use super::chat::{default_max_tokens, ChatClient};
use super::prompts::{render_evolve_prompt, render_init_prompt, EvolveKind, TemplateId};
use super::{Operator, OperatorKind, Proposal, ProposalRequest};
use crate::config_space::{parse_config_text, repair, ConfigError};

/// Operator that asks a chat model for configurations.
pub struct LlmOperator<C> {
    client: C,
    model_name: String,
    rounds: usize,
}

impl<C: ChatClient> LlmOperator<C> {
    /// `model_name` is the name of the pruned model as written into prompts.
    pub fn new(client: C, model_name: impl Into<String>) -> Self {
        Self {
            client,
            model_name: model_name.into(),
            rounds: 2,
        }
    }

    /// Requests per proposal when responses come back short.
    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds.max(1);
        self
    }

    pub fn client(&self) -> &C {
        &self.client
    }

    fn render(&self, request: &ProposalRequest<'_>, count: usize) -> (TemplateId, String) {
        let kind = match request.kind {
            OperatorKind::Init => {
                return (
                    TemplateId::Init,
                    render_init_prompt(&self.model_name, request.n_layers, count, request.beta),
                )
            }
            OperatorKind::Mutation => EvolveKind::Mutation,
            OperatorKind::Crossover => EvolveKind::Crossover,
        };
        (
            kind.template_id(),
            render_evolve_prompt(
                kind,
                &self.model_name,
                request.n_layers,
                request.beta,
                request.parents,
                count,
            ),
        )
    }
}

impl<C: ChatClient> Operator for LlmOperator<C> {
    fn propose(&mut self, request: &ProposalRequest<'_>, _rng: &mut ChaCha8Rng) -> Proposal {
        let mut proposal = Proposal::default();
        let mut seen = HashSet::new();
        for _ in 0..self.rounds {
            let remaining = request.count - proposal.configs.len();
            if remaining == 0 {
                break;
            }
            let (template, prompt) = self.render(request, remaining);
            let max_tokens = default_max_tokens(request.n_layers, remaining);
            let text = match self.client.complete(template, &prompt, max_tokens) {
                Ok(ex) => ex.response_text,
                Err(e) => {
                    log::warn!("{template} request failed: {e}");
                    proposal.failure = Some(e.to_string());
                    break;
                }
            };
            let vectors = match parse_config_text(&text, request.n_layers, remaining) {
                Ok(v) => v,
                Err(ConfigError::ParseShortfall { vectors, found, expected }) => {
                    log::warn!("{template} response held {found} of {expected} usable lists");
                    vectors
                }
                Err(e) => {
                    log::warn!("{template} response unusable: {e}");
                    Vec::new()
                }
            };
            for raw in vectors {
                if proposal.configs.len() == request.count {
                    break;
                }
                let Ok((cfg, report)) = repair(&raw, request.beta) else {
                    continue;
                };
                if seen.insert(cfg.canonical()) {
                    if report.changed() {
                        proposal.repair_events += 1;
                    }
                    proposal.configs.push(cfg);
                }
            }
        }
        proposal
    }
}
