//! Prompt templates for population initialization and for mutation /
//! crossover. Placeholders are written `{like this}` and are all resolved by
//! the render functions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config_space::{format_rates, PruningConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Init,
    EvolveMutation,
    EvolveCrossover,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Init => "init",
            TemplateId::EvolveMutation => "evolve_mutation",
            TemplateId::EvolveCrossover => "evolve_crossover",
        })
    }
}

/// Which genetic operation an evolve prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolveKind {
    Mutation,
    Crossover,
}

impl EvolveKind {
    pub fn word(self) -> &'static str {
        match self {
            EvolveKind::Mutation => "mutation",
            EvolveKind::Crossover => "crossover",
        }
    }

    pub fn template_id(self) -> TemplateId {
        match self {
            EvolveKind::Mutation => TemplateId::EvolveMutation,
            EvolveKind::Crossover => TemplateId::EvolveCrossover,
        }
    }
}

const SOLUTION_ATTRIBUTES: &str = "### Solution attributes ###

· Contain {number of model layers} decimals between 0 and 1, accurate to 5 decimal places.

· Ensure the average of these numbers equals {pruning ratio}.

· Be distinct, starting with \"[\" and ending with \"]\".";

pub const INIT_TEMPLATE: &str = "### Problem description and task instruction ###

Let's think step by step! You are helping me prune the {model}, aiming to minimize perplexity on the WikiText-2 dataset. The model has {number of model layers} transformer layers. Layer-wise pruning rate measures how many parameters are pruned from each layer of the model. Different layers may have different pruning rates based on their importance and contribution to the performance of model. You need to generate {population size} valid layer-wise pruning rate configurations. Each configuration should:

{solution attributes}

Your response should only contain the {population size} configurations without any additional text.
";

pub const EVOLVE_TEMPLATE: &str = "### Problem description and task instruction ###

Let's think step by step! You will receive {population size} lists representing the layer-wise pruning rates of the {model} and a fitness value for each list. The lower the fitness value, the better. Your task is to perform the {mutation/crossover} operation in the evolutionary algorithm to generate new configurations. Each new pruning rate configuration list should:

{solution attributes}

Please provide exactly {number of mutation/crossover} new configurations based on the existing data provided below without any additional text.

### Current Population and Fitnesses ###

Here are the existing layer-wise pruning rate configurations and their fitness values:

{population}
";

fn attributes(n_layers: usize, beta: f64) -> String {
    SOLUTION_ATTRIBUTES
        .replace("{number of model layers}", &n_layers.to_string())
        .replace("{pruning ratio}", &beta.to_string())
}

pub fn render_init_prompt(model_name: &str, n_layers: usize, population_size: usize, beta: f64) -> String {
    INIT_TEMPLATE
        .replace("{solution attributes}", &attributes(n_layers, beta))
        .replace("{model}", model_name)
        .replace("{number of model layers}", &n_layers.to_string())
        .replace("{population size}", &population_size.to_string())
}

/// `ConfigurationN: [...], FitnessN: x.xxxx` lines, one blank line apart.
pub fn render_population(population: &[(PruningConfig, f64)]) -> String {
    population
        .iter()
        .enumerate()
        .map(|(i, (cfg, fit))| {
            format!(
                "Configuration{n}: {}, Fitness{n}: {fit:.4}",
                format_rates(cfg.rates()),
                n = i + 1
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_evolve_prompt(
    kind: EvolveKind,
    model_name: &str,
    n_layers: usize,
    beta: f64,
    population: &[(PruningConfig, f64)],
    count: usize,
) -> String {
    EVOLVE_TEMPLATE
        .replace("{solution attributes}", &attributes(n_layers, beta))
        .replace("{population}", &render_population(population))
        .replace("{mutation/crossover}", kind.word())
        .replace("{number of mutation/crossover}", &count.to_string())
        .replace("{model}", model_name)
        .replace("{population size}", &population.len().to_string())
}
