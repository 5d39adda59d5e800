//! Versioned seed templates and the mutation instruction. These are
//! artifact content, not runtime tunables: reproducing a run must not
//! depend on prompt text supplied out of band.

use crate::taxonomy::{Category, Taxonomy};

/// Seed router instructions. `{categories}`, `{k}`, and `{benign}` are
/// filled at render time.
pub const ROUTER_SEED_TEMPLATES_V1: &[&str] = &[
    "You are a security analyst triaging code for weakness categories.\n\
     Rank the {k} most likely vulnerability categories for the target code, most likely first.\n\
     Compare the code against the retrieved evidence examples before deciding.\n\
     Categories:\n{categories}\n\
     If nothing matches a known pattern, predict {benign}.\n\
     Reply with one JSON object only:\n\
     {\"predictions\": [{\"category\": \"<category id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}",
    "Classify the target code into up to {k} coarse weakness categories, ordered by likelihood.\n\
     Ground every choice in the evidence blocks; do not speculate beyond them.\n\
     Known categories:\n{categories}\n\
     Use {benign} when no category applies.\n\
     Output strictly as JSON: {\"predictions\": [{\"category\": \"<category id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}",
    "Act as a triage router for a vulnerability detection pipeline.\n\
     Study the evidence, then emit a ranked list (length at most {k}) of candidate categories for the target code.\n\
     Categories:\n{categories}\n\
     Reply with JSON only: {\"predictions\": [{\"category\": \"<category id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}",
];

/// Seed detector instructions. `{category}`, `{types}`, and `{benign}` are
/// filled at render time.
pub const DETECTOR_SEED_TEMPLATES_V1: &[&str] = &[
    "You are a specialist for the {category} weakness category.\n\
     Decide which of these exact types, if any, the target code exhibits:\n{types}\n\
     The evidence mixes confirmed {category} samples (pool: positive), clean code (pool: clean), \
     and vulnerabilities from other categories (pool: hard_negative). Claim a type only when the \
     code matches a positive pattern and differs from the clean and hard-negative patterns.\n\
     If no type applies, reply with an empty predictions list.\n\
     Reply with one JSON object only:\n\
     {\"predictions\": [{\"type\": \"<type id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}",
    "Identify the exact {category} vulnerability types present in the target code.\n\
     Allowed types:\n{types}\n\
     Do NOT report types outside this list. Do NOT infer flaws the evidence does not support; \
     prefer an empty prediction over a guess.\n\
     Output strictly as JSON: {\"predictions\": [{\"type\": \"<type id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}",
];

/// The flat single-agent instruction used by the no-agents run mode.
/// `{types}` and `{benign}` are filled at render time.
pub const FLAT_TEMPLATE_V1: &str =
    "You are a security analyst. Identify every vulnerability type present in the target code, \
     choosing only from this list:\n{types}\n\
     Use the evidence examples for grounding. If the code is not vulnerable, reply with an empty \
     predictions list (it will be recorded as {benign}).\n\
     Reply with one JSON object only:\n\
     {\"predictions\": [{\"type\": \"<type id>\", \"confidence\": 0.0, \"reason\": \"...\"}]}";

/// Fixed instruction for the evolution model's mutation calls.
pub const MUTATION_INSTRUCTION_V1: &str =
    "You refine instructions for a code-security agent. Below is a parent instruction and the \
     fitness score it achieved (0 to 1, higher is better). Produce ONE improved variant: rephrase \
     for precision, add or sharpen constraints (including negative constraints such as what NOT \
     to report), disambiguate commonly confused cases, or tighten the decision rules. Keep the \
     same output-format section verbatim so replies stay machine-parseable. Reply with the new \
     instruction text only, no commentary.";

/// Marker separating mutation metadata from the parent prompt body.
pub const PARENT_PROMPT_MARKER: &str = "--- parent prompt ---";

fn category_lines(taxonomy: &Taxonomy) -> String {
    taxonomy
        .categories()
        .iter()
        .map(|c| {
            let types: Vec<&str> = c.types.iter().map(|t| t.id.as_str()).collect();
            format!("- {} ({}): {}", c.id, c.name, types.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn type_lines(category: &Category) -> String {
    category
        .types
        .iter()
        .map(|t| format!("- {} ({})", t.id, t.name))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_router_seeds(taxonomy: &Taxonomy, k: usize) -> Vec<String> {
    let categories = category_lines(taxonomy);
    ROUTER_SEED_TEMPLATES_V1
        .iter()
        .map(|t| {
            t.replace("{categories}", &categories)
                .replace("{k}", &k.to_string())
                .replace("{benign}", taxonomy.benign_label())
        })
        .collect()
}

pub fn render_detector_seeds(taxonomy: &Taxonomy, category_id: &str) -> Vec<String> {
    let Some(category) = taxonomy.category(category_id) else {
        return Vec::new();
    };
    let types = type_lines(category);
    DETECTOR_SEED_TEMPLATES_V1
        .iter()
        .map(|t| {
            t.replace("{category}", &category.name)
                .replace("{types}", &types)
                .replace("{benign}", taxonomy.benign_label())
        })
        .collect()
}

pub fn render_flat_prompt(taxonomy: &Taxonomy) -> String {
    let types = taxonomy
        .categories()
        .iter()
        .flat_map(|c| c.types.iter())
        .map(|t| format!("- {} ({})", t.id, t.name))
        .collect::<Vec<_>>()
        .join("\n");
    FLAT_TEMPLATE_V1
        .replace("{types}", &types)
        .replace("{benign}", taxonomy.benign_label())
}

/// Payload for one mutation call. The nonce fields (generation, slot,
/// attempt) keep distinct mutation calls from collapsing into one cache
/// entry while staying fully deterministic.
pub fn render_mutation_payload(
    target: &str,
    generation: u32,
    slot: usize,
    attempt: u32,
    parent_text: &str,
    parent_fitness: f64,
) -> String {
    format!(
        "target: {target}\ngeneration: {generation}\nslot: {slot}\nattempt: {attempt}\n\
         parent_fitness: {parent_fitness:.6}\n{PARENT_PROMPT_MARKER}\n{parent_text}",
    )
}

/// Extracts the parent prompt body from a mutation payload; the inverse of
/// [`render_mutation_payload`], used by scripted mutators in tests.
pub fn parent_text_from_mutation_payload(payload: &str) -> Option<&str> {
    let idx = payload.find(PARENT_PROMPT_MARKER)?;
    Some(payload[idx + PARENT_PROMPT_MARKER.len()..].trim_start_matches('\n'))
}
