//! Cross-model prompt evolution: a population of candidate instructions is
//! scored by running the execution model on training data, while a separate
//! evolution model mutates survivors. Stage 1 optimizes the router prompt
//! for category Recall@k; stage 2 optimizes one detector prompt per
//! category for binary F1, independently and in parallel.

pub mod templates;

pub use templates::{
    parent_text_from_mutation_payload, render_detector_seeds, render_flat_prompt,
    render_mutation_payload, render_router_seeds, MUTATION_INSTRUCTION_V1,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fnv1a, CategoryDataset, CodeSample, LabeledDataset};
use crate::gateway::{GatewayError, ModelRole};
use crate::pipeline::{PipelineContext, PipelineError};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("seed prompt list is empty")]
    NoSeedPrompts,
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("category {0} has no positive samples")]
    NoPositives(String),
    #[error("no category has positive samples")]
    AllCategoriesEmpty,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// An evolvable instruction with its lineage and last evaluated fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub lineage: Option<String>,
    pub generation: u32,
    pub fitness: Option<f64>,
}

impl Prompt {
    pub fn seed(index: usize, text: impl Into<String>) -> Self {
        Prompt {
            id: format!("seed-{index}"),
            text: text.into(),
            lineage: None,
            generation: 0,
            fitness: None,
        }
    }
}

/// What a population is evolving toward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionTarget {
    Router,
    Detector(String),
}

impl std::fmt::Display for EvolutionTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvolutionTarget::Router => write!(f, "router"),
            EvolutionTarget::Detector(category) => write!(f, "detector:{category}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Population {
    pub prompts: Vec<Prompt>,
    pub target: EvolutionTarget,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvolutionConfig {
    /// Population size n.
    pub population: usize,
    /// Generations T.
    pub iterations: u32,
    /// Elite ratio alpha in (0, 1).
    pub elite_ratio: f64,
    /// Router top-k used by the Recall@k fitness.
    pub k: usize,
    /// Per-run cap on training samples evaluated per fitness call
    /// (0 = no cap). The subsample is drawn once per run, not per
    /// generation, so scores stay comparable across generations.
    pub eval_subsample: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 8,
            iterations: 5,
            elite_ratio: 0.25,
            k: 3,
            eval_subsample: 32,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn elite_count(&self) -> usize {
        (self.elite_ratio * self.population as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.population < 2 {
            return Err(EvolutionError::InvalidConfig(
                "population must be at least 2".into(),
            ));
        }
        if self.iterations < 1 {
            return Err(EvolutionError::InvalidConfig(
                "iterations must be at least 1".into(),
            ));
        }
        if !(0.0 < self.elite_ratio && self.elite_ratio < 1.0) {
            return Err(EvolutionError::InvalidConfig(
                "elite_ratio must be in (0, 1)".into(),
            ));
        }
        if self.elite_count() < 1 {
            return Err(EvolutionError::InvalidConfig(format!(
                "elite_ratio {} with population {} keeps no elites",
                self.elite_ratio, self.population
            )));
        }
        Ok(())
    }
}

/// Per-generation tracking plus the final selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub best_prompt_id: String,
    pub best_text: String,
    pub best_fitness: f64,
    pub population_fitness: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub target: String,
    pub generations: Vec<GenerationRecord>,
    pub selected_generation: u32,
    pub validation_fitness: f64,
}

impl EvolutionRecord {
    /// Best training fitness must be non-decreasing: elites are copied
    /// verbatim and fitness is deterministic per prompt text.
    pub fn best_fitness_is_monotone(&self) -> bool {
        self.generations
            .windows(2)
            .all(|w| w[1].best_fitness >= w[0].best_fitness - 1e-12)
    }
}

/// Competition ("min") ranks: 1 + the number of strictly better scores.
/// Tied scores share a rank, so an all-tied population gets uniform
/// selection weights.
fn competition_ranks(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|&s| 1 + scores.iter().filter(|&&o| o > s).count())
        .collect()
}

/// Linear rank weights: n - rank + 1.
pub fn rank_weights(scores: &[f64]) -> Vec<u64> {
    let n = scores.len();
    competition_ranks(scores)
        .into_iter()
        .map(|rank| (n - rank + 1) as u64)
        .collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[u64]) -> usize {
    let total: u64 = weights.iter().sum();
    debug_assert!(total > 0);
    let mut pick = rng.gen_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            return i;
        }
        pick -= w;
    }
    weights.len() - 1
}

/// Indices sorted by descending score, position-stable for ties.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..scores.len()).collect();
    indices.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    indices
}

/// One generation step: keep the top `floor(alpha * n)` prompts verbatim,
/// then refill the population with children mutated by the evolution model
/// from rank-sampled parents. A child identical to its parent is re-mutated
/// once, then accepted as-is.
pub fn evolve_step(
    population: &Population,
    scores: &[f64],
    config: &EvolutionConfig,
    gateway: &crate::gateway::Gateway,
    generation: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Population, EvolutionError> {
    assert_eq!(
        population.prompts.len(),
        scores.len(),
        "scores must align with the population"
    );
    let n = population.prompts.len();
    let elite_count = config.elite_count().min(n);
    let order = ranked_indices(scores);

    let mut next: Vec<Prompt> = order[..elite_count]
        .iter()
        .map(|&i| {
            let mut elite = population.prompts[i].clone();
            elite.fitness = Some(scores[i]);
            elite
        })
        .collect();

    let weights = rank_weights(scores);
    let target = population.target.to_string();
    let mut slot = 0usize;
    while next.len() < n {
        let parent_idx = sample_weighted(rng, &weights);
        let parent = &population.prompts[parent_idx];
        let parent_fitness = scores[parent_idx];

        let mut child_text = mutate(
            gateway,
            &target,
            generation,
            slot,
            1,
            &parent.text,
            parent_fitness,
        )?;
        if child_text == parent.text {
            child_text = mutate(
                gateway,
                &target,
                generation,
                slot,
                2,
                &parent.text,
                parent_fitness,
            )?;
        }
        next.push(Prompt {
            id: format!("g{generation}c{slot}"),
            text: child_text,
            lineage: Some(parent.id.clone()),
            generation,
            fitness: None,
        });
        slot += 1;
    }
    Ok(Population {
        prompts: next,
        target: population.target.clone(),
    })
}

fn mutate(
    gateway: &crate::gateway::Gateway,
    target: &str,
    generation: u32,
    slot: usize,
    attempt: u32,
    parent_text: &str,
    parent_fitness: f64,
) -> Result<String, EvolutionError> {
    let payload = render_mutation_payload(
        target,
        generation,
        slot,
        attempt,
        parent_text,
        parent_fitness,
    );
    let response = gateway.chat(
        ModelRole::Evolution,
        MUTATION_INSTRUCTION_V1,
        &payload,
        "mutation",
    )?;
    let trimmed = strip_fences(response.trim());
    if trimmed.is_empty() {
        // An empty mutation would violate the nonempty-text invariant;
        // keep the parent text (the caller's identical-child rule decides
        // whether to retry).
        Ok(parent_text.to_string())
    } else {
        Ok(trimmed.to_string())
    }
}

fn strip_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(inner) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let inner = inner.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    let inner = inner.strip_prefix('\n').unwrap_or(inner);
    inner.strip_suffix("```").map(str::trim).unwrap_or(trimmed)
}

/// Pads (round-robin) or truncates seed texts to the population size.
pub fn initial_population(
    seed_texts: &[String],
    target: EvolutionTarget,
    n: usize,
) -> Result<Population, EvolutionError> {
    if seed_texts.is_empty() {
        return Err(EvolutionError::NoSeedPrompts);
    }
    let prompts = (0..n)
        .map(|i| Prompt::seed(i, seed_texts[i % seed_texts.len()].clone()))
        .collect();
    Ok(Population {
        prompts,
        target,
    })
}

/// The generation loop shared by both stages: evaluate, evolve, track the
/// per-generation best, then pick the tracked best with the highest
/// validation fitness (earliest generation wins ties).
pub fn run_evolution<F, V>(
    config: &EvolutionConfig,
    seed_texts: &[String],
    target: EvolutionTarget,
    gateway: &crate::gateway::Gateway,
    rng_seed: u64,
    mut train_fitness: F,
    mut val_fitness: V,
) -> Result<(Prompt, EvolutionRecord), EvolutionError>
where
    F: FnMut(&Prompt) -> Result<f64, EvolutionError>,
    V: FnMut(&Prompt) -> Result<f64, EvolutionError>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut population = initial_population(seed_texts, target.clone(), config.population)?;

    let mut generations: Vec<GenerationRecord> = Vec::new();
    let mut tracked_bests: Vec<Prompt> = Vec::new();
    for generation in 1..=config.iterations {
        let mut scores = Vec::with_capacity(population.prompts.len());
        for prompt in &mut population.prompts {
            let fitness = train_fitness(prompt)?;
            prompt.fitness = Some(fitness);
            scores.push(fitness);
        }
        let best_idx = ranked_indices(&scores)[0];
        let best = &population.prompts[best_idx];
        generations.push(GenerationRecord {
            generation,
            best_prompt_id: best.id.clone(),
            best_text: best.text.clone(),
            best_fitness: scores[best_idx],
            population_fitness: scores.clone(),
        });
        tracked_bests.push(best.clone());

        if generation < config.iterations {
            population = evolve_step(&population, &scores, config, gateway, generation, &mut rng)?;
        }
    }

    // Final selection on validation: only the tracked per-generation bests
    // compete, never the whole final population.
    let mut selected = 0usize;
    let mut selected_fitness = f64::NEG_INFINITY;
    for (i, best) in tracked_bests.iter().enumerate() {
        let fitness = val_fitness(best)?;
        if fitness > selected_fitness {
            selected_fitness = fitness;
            selected = i;
        }
    }
    let record = EvolutionRecord {
        target: target.to_string(),
        generations,
        selected_generation: (selected + 1) as u32,
        validation_fitness: selected_fitness,
    };
    debug_assert!(record.best_fitness_is_monotone());
    let mut winner = tracked_bests[selected].clone();
    winner.fitness = Some(selected_fitness);
    Ok((winner, record))
}

// ---------------------------------------------------------------------------
// Fitness functions
// ---------------------------------------------------------------------------

/// Router fitness: the fraction of vulnerable samples whose gold category
/// appears in the top-k routed list. Benign samples carry no signal for
/// Recall@k, so only vulnerable samples are routed and counted. Every
/// retrieval runs under a leakage guard for the sample itself.
pub fn router_fitness(
    prompt: &Prompt,
    ctx: &PipelineContext,
    samples: &[CodeSample],
    k: usize,
) -> Result<f64, EvolutionError> {
    let taxonomy = ctx.kb.taxonomy();
    let vulnerable: Vec<&CodeSample> = samples
        .iter()
        .filter(|s| !taxonomy.is_benign(&s.label))
        .collect();
    if vulnerable.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = crate::par::map_slice(&vulnerable, |sample| {
        let gold_category = taxonomy
            .category_of(&sample.label)
            .map(|c| c.id.clone())
            .expect("vulnerable labels are validated");
        let guard = ctx.kb.leakage_guard(&sample.id);
        ctx.route(sample, k, prompt, Some(guard.exclude_id()))
            .map(|routing| routing.ranked_categories.contains(&gold_category))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / vulnerable.len() as f64)
}

/// Detector fitness: binary F1 over the category dataset. A sample is
/// predicted positive iff the detector claims any type in the category;
/// gold positive iff its label belongs to the category. F1 is 0 when there
/// are no true positives.
pub fn detector_fitness(
    prompt: &Prompt,
    ctx: &PipelineContext,
    category_id: &str,
    samples: &[CodeSample],
) -> Result<f64, EvolutionError> {
    let taxonomy = ctx.kb.taxonomy();
    let outcomes: Vec<(bool, bool)> = crate::par::map_slice(samples, |sample| {
        let guard = ctx.kb.leakage_guard(&sample.id);
        ctx.detect_category(sample, category_id, prompt, Some(guard.exclude_id()))
            .map(|output| {
                let predicted = !output.predicted_types.is_empty();
                let gold = taxonomy
                    .category_of(&sample.label)
                    .map(|c| c.id == category_id)
                    .unwrap_or(false);
                (predicted, gold)
            })
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let tp = outcomes.iter().filter(|&&(p, g)| p && g).count() as f64;
    let fp = outcomes.iter().filter(|&&(p, g)| p && !g).count() as f64;
    let fn_count = outcomes.iter().filter(|&&(p, g)| !p && g).count() as f64;
    Ok(binary_f1(tp, fp, fn_count))
}

pub fn binary_f1(tp: f64, fp: f64, fn_count: f64) -> f64 {
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_count);
    2.0 * precision * recall / (precision + recall)
}

/// Seeded subsample of at most `cap` samples (0 = keep all), preserving
/// dataset order.
fn subsample(samples: Vec<CodeSample>, cap: usize, seed: u64) -> Vec<CodeSample> {
    if cap == 0 || samples.len() <= cap {
        return samples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    indices.truncate(cap);
    indices.sort_unstable();
    let mut samples = samples;
    let mut keep = 0usize;
    let mut kept = Vec::with_capacity(cap);
    for (i, sample) in samples.drain(..).enumerate() {
        if keep < indices.len() && indices[keep] == i {
            kept.push(sample);
            keep += 1;
        }
    }
    kept
}

/// Stage 1: evolve the router prompt against Recall@k on the training
/// subsample, then select on validation.
pub fn run_stage1(
    ctx: &PipelineContext,
    config: &EvolutionConfig,
    data_tr: &LabeledDataset,
    data_val: &LabeledDataset,
    seed_texts: &[String],
) -> Result<(Prompt, EvolutionRecord), EvolutionError> {
    // Only vulnerable samples carry Recall@k signal; subsample those.
    let taxonomy = ctx.kb.taxonomy();
    let train_pool: Vec<CodeSample> = data_tr
        .samples
        .iter()
        .filter(|s| !taxonomy.is_benign(&s.label))
        .cloned()
        .collect();
    let train_eval = subsample(train_pool, config.eval_subsample, config.seed ^ 0x51a6e1);
    let val_eval: Vec<CodeSample> = data_val.samples.clone();

    run_evolution(
        config,
        seed_texts,
        EvolutionTarget::Router,
        &ctx.gateway,
        config.seed,
        |prompt| router_fitness(prompt, ctx, &train_eval, config.k),
        |prompt| router_fitness(prompt, ctx, &val_eval, config.k),
    )
}

/// Stage 2 outcome: evolved prompts per category plus skip reports for
/// categories without positives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub evolved: BTreeMap<String, (Prompt, EvolutionRecord)>,
    pub skipped: BTreeMap<String, String>,
}

type CategoryResult = (String, Result<(Prompt, EvolutionRecord), EvolutionError>);

/// Stage 2: evolve one detector prompt per category, independently. Each
/// category run derives its own RNG stream from (seed, category id), so
/// results do not depend on evaluation order and categories may run in
/// parallel.
pub fn run_stage2(
    ctx: &PipelineContext,
    config: &EvolutionConfig,
    datasets: &BTreeMap<String, (CategoryDataset, CategoryDataset)>,
    seeds_per_category: &BTreeMap<String, Vec<String>>,
) -> Result<Stage2Outcome, EvolutionError> {
    config.validate()?;
    let categories: Vec<&String> = datasets.keys().collect();
    let results: Vec<CategoryResult> = crate::par::map_slice(&categories, |&category_id| {
        let (train, val) = &datasets[category_id];
        (
            category_id.clone(),
            run_stage2_category(ctx, config, category_id, train, val, seeds_per_category),
        )
    });

    let mut outcome = Stage2Outcome {
        evolved: BTreeMap::new(),
        skipped: BTreeMap::new(),
    };
    for (category_id, result) in results {
        match result {
            Ok(pair) => {
                outcome.evolved.insert(category_id, pair);
            }
            Err(EvolutionError::NoPositives(c)) => {
                outcome
                    .skipped
                    .insert(category_id, format!("no positive samples for {c}"));
            }
            Err(other) => return Err(other),
        }
    }
    if outcome.evolved.is_empty() {
        return Err(EvolutionError::AllCategoriesEmpty);
    }
    Ok(outcome)
}

fn run_stage2_category(
    ctx: &PipelineContext,
    config: &EvolutionConfig,
    category_id: &str,
    train: &CategoryDataset,
    val: &CategoryDataset,
    seeds_per_category: &BTreeMap<String, Vec<String>>,
) -> Result<(Prompt, EvolutionRecord), EvolutionError> {
    if train.positives.is_empty() || val.positives.is_empty() {
        return Err(EvolutionError::NoPositives(category_id.to_string()));
    }
    let seed_texts = seeds_per_category
        .get(category_id)
        .ok_or(EvolutionError::NoSeedPrompts)?;
    let category_seed = config.seed ^ fnv1a(category_id.as_bytes());

    let train_all: Vec<CodeSample> = train.all_samples().cloned().collect();
    let train_eval = subsample(train_all, config.eval_subsample, category_seed ^ 0x7e57);
    let val_eval: Vec<CodeSample> = val.all_samples().cloned().collect();

    run_evolution(
        config,
        seed_texts,
        EvolutionTarget::Detector(category_id.to_string()),
        &ctx.gateway,
        category_seed,
        |prompt| detector_fitness(prompt, ctx, category_id, &train_eval),
        |prompt| detector_fitness(prompt, ctx, category_id, &val_eval),
    )
}
