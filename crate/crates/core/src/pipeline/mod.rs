//! Online coarse-to-fine detection: route a snippet to its top-k candidate
//! categories, run only those categories' detectors with contrastive
//! evidence, and aggregate by union with a benign default. Detectors are
//! isolated: no detector ever sees another detector's output.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CodeSample;
use crate::evolution::Prompt;
use crate::gateway::{Gateway, GatewayError, ModelRole};
use crate::kb::{BudgetUsed, BundleKind, EvidenceBundle, KbError, KnowledgeBase};
use crate::structuring::{Structurer, StructuringError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no evolved prompt for category {0}")]
    MissingDetectorPrompt(String),
    #[error(transparent)]
    Structuring(#[from] StructuringError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Ranked category predictions for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingResult {
    pub prompt_id: String,
    pub ranked_categories: Vec<String>,
    pub confidences: Vec<f64>,
    pub evidence_used: EvidenceBundle,
    pub raw_response: String,
    /// Labels the router emitted that were invalid or duplicated.
    pub dropped_labels: Vec<String>,
}

/// One detector's finding, restricted to its own category's types.
/// Confidences are trace data only; aggregation is a pure union.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub category_id: String,
    pub prompt_id: String,
    pub predicted_types: BTreeSet<String>,
    pub explanations: BTreeMap<String, String>,
    #[serde(default)]
    pub confidences: BTreeMap<String, f64>,
    pub evidence_used: EvidenceBundle,
    /// Out-of-category labels the model emitted, dropped per the category
    /// restriction.
    pub filtered_labels: Vec<String>,
    pub raw_response: String,
    pub failed: Option<String>,
}

/// Single flat-prompt output (the no-agents run mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatOutput {
    pub prompt_id: String,
    pub predicted_types: BTreeSet<String>,
    pub evidence_used: EvidenceBundle,
    pub filtered_labels: Vec<String>,
    pub raw_response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    Agents,
    Flat,
}

/// Full execution trace for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionTrace {
    pub mode: DetectionMode,
    pub retrieval_enabled: bool,
    pub routing: Option<RoutingResult>,
    pub routing_failed: Option<String>,
    pub detectors: Vec<DetectorOutput>,
    pub flat: Option<FlatOutput>,
    /// Routed categories skipped because no detector prompt exists.
    pub skipped_categories: Vec<String>,
    pub elapsed_ms: u64,
}

/// The aggregated prediction for one sample. `final_labels` is never empty:
/// it is exactly the benign sentinel when every detector abstains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub sample_id: String,
    pub final_labels: BTreeSet<String>,
    pub evidence: BTreeMap<String, String>,
    pub trace: DetectionTrace,
}

impl DetectionReport {
    pub fn failed(&self) -> bool {
        self.trace.routing_failed.is_some()
    }
}

/// The evolved (or manual) prompts the pipeline runs with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSet {
    pub router: Prompt,
    pub detectors: BTreeMap<String, Prompt>,
    #[serde(default)]
    pub flat: Option<Prompt>,
}

/// Immutable pipeline state shared by every sample; safe to use from many
/// worker threads at once.
pub struct PipelineContext {
    pub kb: Arc<KnowledgeBase>,
    pub gateway: Arc<Gateway>,
    pub structurer: Arc<Structurer>,
    /// Retrieval budget per agent call.
    pub r: usize,
    /// When false (the no-retrieval run mode) agents are called with empty
    /// evidence blocks.
    pub retrieval_enabled: bool,
}

impl PipelineContext {
    pub fn new(
        kb: Arc<KnowledgeBase>,
        gateway: Arc<Gateway>,
        structurer: Arc<Structurer>,
        r: usize,
    ) -> Self {
        PipelineContext {
            kb,
            gateway,
            structurer,
            r,
            retrieval_enabled: true,
        }
    }

    pub fn with_retrieval(mut self, enabled: bool) -> Self {
        self.retrieval_enabled = enabled;
        self
    }

    /// Phase I: structure the snippet, retrieve global evidence, and ask
    /// the execution model for a ranked category list. Invalid categories
    /// are dropped, duplicates deduplicated, and the list truncated to `k`.
    pub fn route(
        &self,
        sample: &CodeSample,
        k: usize,
        router_prompt: &Prompt,
        exclude: Option<&str>,
    ) -> Result<RoutingResult, PipelineError> {
        let representation = self.structurer.structure(&sample.id, &sample.code)?;
        let evidence = if self.retrieval_enabled {
            self.kb
                .retrieve_global(&self.gateway, &representation, self.r, exclude)?
        } else {
            EvidenceBundle::empty(BundleKind::Global, BudgetUsed::Global { r: 0 })
        };
        let payload = render_agent_payload(&sample.code, &evidence);

        let taxonomy = self.kb.taxonomy();
        let mut allowed: HashSet<String> = HashSet::new();
        for category in taxonomy.categories() {
            allowed.insert(category.id.clone());
            allowed.insert(category.name.clone());
        }
        let (parsed, raw_response) = self.gateway.chat_structured(
            ModelRole::Execution,
            &router_prompt.text,
            &payload,
            "router",
            &allowed,
        )?;

        let mut ranked_categories = Vec::new();
        let mut confidences = Vec::new();
        let mut dropped_labels = parsed.dropped_labels.clone();
        for entry in &parsed.entries {
            // Accept either the category id or its display name.
            let id = match taxonomy.category(&entry.label) {
                Some(c) => c.id.clone(),
                None => match taxonomy.categories().iter().find(|c| c.name == entry.label) {
                    Some(c) => c.id.clone(),
                    None => {
                        dropped_labels.push(entry.label.clone());
                        continue;
                    }
                },
            };
            if ranked_categories.contains(&id) {
                dropped_labels.push(entry.label.clone());
                continue;
            }
            if ranked_categories.len() < k {
                ranked_categories.push(id);
                confidences.push(entry.confidence);
            }
        }
        Ok(RoutingResult {
            prompt_id: router_prompt.id.clone(),
            ranked_categories,
            confidences,
            evidence_used: evidence,
            raw_response,
            dropped_labels,
        })
    }

    /// Phase II for one category: retrieve contrastive evidence and ask the
    /// execution model for type predictions, filtered to the category's own
    /// type set.
    pub fn detect_category(
        &self,
        sample: &CodeSample,
        category_id: &str,
        prompt: &Prompt,
        exclude: Option<&str>,
    ) -> Result<DetectorOutput, PipelineError> {
        let taxonomy = Arc::clone(self.kb.taxonomy());
        let category = taxonomy
            .category(category_id)
            .ok_or_else(|| KbError::UnknownCategory(category_id.to_string()))?;
        let representation = self.structurer.structure(&sample.id, &sample.code)?;
        let evidence = if self.retrieval_enabled {
            self.kb.retrieve_contrastive(
                &self.gateway,
                &representation,
                category_id,
                self.r,
                exclude,
            )?
        } else {
            EvidenceBundle::empty(
                BundleKind::Contrastive,
                BudgetUsed::Contrastive {
                    r_pos: 0,
                    r_neg: 0,
                    r_hard: 0,
                },
            )
        };
        let payload = render_agent_payload(&sample.code, &evidence);
        let allowed: HashSet<String> = category.type_ids().map(str::to_string).collect();
        let purpose = format!("detector:{category_id}");
        let (parsed, raw_response) = self.gateway.chat_structured(
            ModelRole::Execution,
            &prompt.text,
            &payload,
            &purpose,
            &allowed,
        )?;

        let mut predicted_types = BTreeSet::new();
        let mut explanations = BTreeMap::new();
        let mut confidences = BTreeMap::new();
        for entry in &parsed.entries {
            predicted_types.insert(entry.label.clone());
            explanations
                .entry(entry.label.clone())
                .or_insert_with(|| entry.rationale.clone());
            confidences
                .entry(entry.label.clone())
                .or_insert(entry.confidence);
        }
        Ok(DetectorOutput {
            category_id: category_id.to_string(),
            prompt_id: prompt.id.clone(),
            predicted_types,
            explanations,
            confidences,
            evidence_used: evidence,
            filtered_labels: parsed.dropped_labels,
            raw_response,
            failed: None,
        })
    }

    /// Full per-sample pipeline. Routing failure degrades to a
    /// benign-labeled report with a failure flag rather than an error, so
    /// batches never abort on one sample.
    pub fn detect(&self, sample: &CodeSample, k: usize, prompts: &PromptSet) -> DetectionReport {
        let started = Instant::now();
        let mut trace = DetectionTrace {
            mode: DetectionMode::Agents,
            retrieval_enabled: self.retrieval_enabled,
            routing: None,
            routing_failed: None,
            detectors: Vec::new(),
            flat: None,
            skipped_categories: Vec::new(),
            elapsed_ms: 0,
        };
        let benign = self.kb.taxonomy().benign_label().to_string();

        let routing = match self.route(sample, k, &prompts.router, None) {
            Ok(routing) => routing,
            Err(e) => {
                log::warn!("routing failed for {}: {e}", sample.id);
                trace.routing_failed = Some(e.to_string());
                trace.elapsed_ms = started.elapsed().as_millis() as u64;
                return DetectionReport {
                    sample_id: sample.id.clone(),
                    final_labels: BTreeSet::from([benign]),
                    evidence: BTreeMap::new(),
                    trace,
                };
            }
        };

        // Only routed categories are ever detected; detectors receive no
        // other detector's output.
        for category_id in routing.ranked_categories.clone() {
            let Some(prompt) = prompts.detectors.get(&category_id) else {
                log::warn!("no detector prompt for {category_id}, skipping");
                trace.skipped_categories.push(category_id);
                continue;
            };
            match self.detect_category(sample, &category_id, prompt, None) {
                Ok(output) => trace.detectors.push(output),
                Err(e) => {
                    log::warn!("detector {category_id} failed for {}: {e}", sample.id);
                    trace.detectors.push(DetectorOutput {
                        category_id: category_id.clone(),
                        prompt_id: prompt.id.clone(),
                        predicted_types: BTreeSet::new(),
                        explanations: BTreeMap::new(),
                        confidences: BTreeMap::new(),
                        evidence_used: EvidenceBundle::empty(
                            BundleKind::Contrastive,
                            BudgetUsed::Contrastive {
                                r_pos: 0,
                                r_neg: 0,
                                r_hard: 0,
                            },
                        ),
                        filtered_labels: Vec::new(),
                        raw_response: String::new(),
                        failed: Some(e.to_string()),
                    });
                }
            }
        }
        trace.routing = Some(routing);

        let mut final_labels: BTreeSet<String> = BTreeSet::new();
        let mut evidence: BTreeMap<String, String> = BTreeMap::new();
        for output in &trace.detectors {
            final_labels.extend(output.predicted_types.iter().cloned());
            for (ty, why) in &output.explanations {
                evidence.entry(ty.clone()).or_insert_with(|| why.clone());
            }
        }
        if final_labels.is_empty() {
            final_labels.insert(benign);
        }
        trace.elapsed_ms = started.elapsed().as_millis() as u64;
        DetectionReport {
            sample_id: sample.id.clone(),
            final_labels,
            evidence,
            trace,
        }
    }

    /// The no-agents run mode: one flat prompt over the full type universe,
    /// no routing and no per-category detectors.
    pub fn detect_flat(&self, sample: &CodeSample, flat_prompt: &Prompt) -> DetectionReport {
        let started = Instant::now();
        let benign = self.kb.taxonomy().benign_label().to_string();
        let mut trace = DetectionTrace {
            mode: DetectionMode::Flat,
            retrieval_enabled: self.retrieval_enabled,
            routing: None,
            routing_failed: None,
            detectors: Vec::new(),
            flat: None,
            skipped_categories: Vec::new(),
            elapsed_ms: 0,
        };

        let outcome = (|| -> Result<FlatOutput, PipelineError> {
            let representation = self.structurer.structure(&sample.id, &sample.code)?;
            let evidence = if self.retrieval_enabled {
                self.kb
                    .retrieve_global(&self.gateway, &representation, self.r, None)?
            } else {
                EvidenceBundle::empty(BundleKind::Global, BudgetUsed::Global { r: 0 })
            };
            let payload = render_agent_payload(&sample.code, &evidence);
            let allowed: HashSet<String> =
                self.kb.taxonomy().type_ids().map(str::to_string).collect();
            let (parsed, raw_response) = self.gateway.chat_structured(
                ModelRole::Execution,
                &flat_prompt.text,
                &payload,
                "flat",
                &allowed,
            )?;
            Ok(FlatOutput {
                prompt_id: flat_prompt.id.clone(),
                predicted_types: parsed.labels().map(str::to_string).collect(),
                evidence_used: evidence,
                filtered_labels: parsed.dropped_labels,
                raw_response,
            })
        })();

        let mut final_labels: BTreeSet<String> = BTreeSet::new();
        match outcome {
            Ok(flat) => {
                final_labels.extend(flat.predicted_types.iter().cloned());
                trace.flat = Some(flat);
            }
            Err(e) => {
                log::warn!("flat detection failed for {}: {e}", sample.id);
                trace.routing_failed = Some(e.to_string());
            }
        }
        if final_labels.is_empty() {
            final_labels.insert(benign);
        }
        trace.elapsed_ms = started.elapsed().as_millis() as u64;
        DetectionReport {
            sample_id: sample.id.clone(),
            final_labels,
            evidence: BTreeMap::new(),
            trace,
        }
    }

    /// Batch detection. Per-sample work fans out over `parallelism` worker
    /// threads; output order always matches input order, and results are
    /// identical to sequential execution under deterministic providers.
    pub fn detect_batch(
        &self,
        samples: &[CodeSample],
        k: usize,
        prompts: &PromptSet,
        parallelism: usize,
    ) -> Vec<DetectionReport> {
        crate::par::map_slice_with_threads(samples, parallelism.max(1), |sample| {
            self.detect(sample, k, prompts)
        })
    }

    pub fn detect_batch_flat(
        &self,
        samples: &[CodeSample],
        flat_prompt: &Prompt,
        parallelism: usize,
    ) -> Vec<DetectionReport> {
        crate::par::map_slice_with_threads(samples, parallelism.max(1), |sample| {
            self.detect_flat(sample, flat_prompt)
        })
    }
}

/// Renders the agent payload: the raw snippet, then each evidence item as a
/// fenced block tagged with label, pool of origin, and similarity.
/// Contrastive bundles arrive positives-first and stay that way.
pub fn render_agent_payload(code: &str, evidence: &EvidenceBundle) -> String {
    let mut out = String::new();
    out.push_str("Target code:\n```\n");
    out.push_str(code);
    if !code.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n\nEvidence:\n");
    if evidence.items.is_empty() {
        out.push_str("(none)\n");
        return out;
    }
    for (i, item) in evidence.items.iter().enumerate() {
        let origin = match item.origin {
            crate::kb::EvidenceOrigin::Global => "global",
            crate::kb::EvidenceOrigin::Positive => "positive",
            crate::kb::EvidenceOrigin::Clean => "clean",
            crate::kb::EvidenceOrigin::HardNegative => "hard_negative",
        };
        out.push_str(&format!(
            "### Evidence {} (label: {}, pool: {}, similarity: {:.4})\n```\n{}\n```\n",
            i + 1,
            item.label,
            origin,
            item.similarity,
            item.text.trim_end(),
        ));
    }
    out
}
