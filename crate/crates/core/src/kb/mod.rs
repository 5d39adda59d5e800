//! The embedded evidence store: structured samples partitioned into a clean
//! pool and per-category pools, with exact cosine nearest-neighbor retrieval
//! for the router (global) and the detectors (contrastive three-pool).

pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledDataset;
use crate::gateway::{Gateway, GatewayError};
use crate::structuring::{StructuredRepresentation, Structurer, StructuringError};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbeddingDimensionMismatch { expected: usize, got: usize },
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("retrieval budget {got} below minimum {min}")]
    InvalidBudget { got: usize, min: usize },
    #[error("sample {0} embedded to the zero vector")]
    ZeroEmbedding(String),
    #[error("store already exists at {0}; pass force to overwrite")]
    StoreExists(String),
    #[error("store version {found} unsupported (expected {expected})")]
    StoreVersionMismatch { found: u8, expected: u8 },
    #[error("store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("store label {0} not in taxonomy")]
    LabelNotInTaxonomy(String),
    #[error(transparent)]
    Structuring(#[from] StructuringError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
}

/// One indexed sample. The embedding lives in the base's matrix, row-aligned
/// with the entry index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbEntry {
    pub sample_id: String,
    pub label: String,
    pub representation: StructuredRepresentation,
}

/// Unit-norm embeddings, row-major.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len() % dim, 0);
        EmbeddingMatrix { dim, data }
    }

    pub fn push(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

/// Which pool an evidence item was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceOrigin {
    Global,
    Positive,
    Clean,
    HardNegative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub sample_id: String,
    pub label: String,
    pub text: String,
    pub similarity: f64,
    pub origin: EvidenceOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Global,
    Contrastive,
}

/// Budget actually allocated for a retrieval call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUsed {
    Global { r: usize },
    Contrastive { r_pos: usize, r_neg: usize, r_hard: usize },
}

/// Ranked evidence for one query. Contrastive bundles order positives
/// first, then clean, then hard negatives, each sub-pool sorted by
/// descending similarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub kind: BundleKind,
    pub items: Vec<EvidenceItem>,
    pub budget_used: BudgetUsed,
}

impl EvidenceBundle {
    pub fn empty(kind: BundleKind, budget_used: BudgetUsed) -> Self {
        EvidenceBundle {
            kind,
            items: Vec::new(),
            budget_used,
        }
    }
}

/// Exclusion token preventing a training sample from retrieving itself.
/// Tokens for ids absent from the base are no-ops by construction.
#[derive(Debug, Clone)]
pub struct LeakageGuard {
    exclude_id: String,
}

impl LeakageGuard {
    pub fn exclude_id(&self) -> &str {
        &self.exclude_id
    }
}

/// Minimum rows per parallel task in similarity scans.
#[cfg(feature = "parallel")]
const SCAN_MIN_CHUNK: usize = 1024;

/// Budget split for contrastive retrieval: positives and clean each get
/// `r / 3` (floored); hard negatives take the remainder.
pub fn contrastive_budget(r: usize) -> (usize, usize, usize) {
    let r_pos = r / 3;
    let r_neg = r / 3;
    (r_pos, r_neg, r - r_pos - r_neg)
}

/// Immutable after build; retrieval is read-only and safe under unlimited
/// concurrency.
#[derive(Debug)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    matrix: EmbeddingMatrix,
    clean_pool: Vec<usize>,
    category_pools: BTreeMap<String, Vec<usize>>,
    id_index: HashMap<String, usize>,
    taxonomy: Arc<Taxonomy>,
}

impl KnowledgeBase {
    /// Structures, embeds, and normalizes every sample, then assigns each
    /// to exactly one pool via the taxonomy.
    pub fn build(
        dataset: &LabeledDataset,
        structurer: &Structurer,
        gateway: &Gateway,
    ) -> Result<Self, KbError> {
        if dataset.is_empty() {
            return Err(KbError::EmptyKnowledgeBase);
        }
        let representations: Vec<StructuredRepresentation> =
            crate::par::map_slice(&dataset.samples, |s| structurer.structure(&s.id, &s.code))
                .into_iter()
                .collect::<Result<_, _>>()?;
        let texts: Vec<&str> = representations.iter().map(|r| r.text.as_str()).collect();
        let raw = gateway.embed(&texts).map_err(|e| match e {
            GatewayError::DimensionDrift { expected, got } => {
                KbError::EmbeddingDimensionMismatch { expected, got }
            }
            other => KbError::Gateway(other),
        })?;

        let dim = raw[0].len();
        let mut matrix = EmbeddingMatrix::new(dim);
        for (sample, vector) in dataset.samples.iter().zip(&raw) {
            let unit = l2_normalize(vector).ok_or_else(|| KbError::ZeroEmbedding(sample.id.clone()))?;
            matrix.push(&unit);
        }

        let entries: Vec<KbEntry> = dataset
            .samples
            .iter()
            .zip(representations)
            .map(|(s, representation)| KbEntry {
                sample_id: s.id.clone(),
                label: s.label.clone(),
                representation,
            })
            .collect();
        Self::assemble(entries, matrix, Arc::clone(&dataset.taxonomy))
    }

    /// Builds the pool partition and id index over prepared entries.
    pub(crate) fn assemble(
        entries: Vec<KbEntry>,
        matrix: EmbeddingMatrix,
        taxonomy: Arc<Taxonomy>,
    ) -> Result<Self, KbError> {
        let mut clean_pool = Vec::new();
        let mut category_pools: BTreeMap<String, Vec<usize>> = taxonomy
            .categories()
            .iter()
            .map(|c| (c.id.clone(), Vec::new()))
            .collect();
        let mut id_index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if taxonomy.is_benign(&entry.label) {
                clean_pool.push(i);
            } else {
                let category = taxonomy
                    .category_of(&entry.label)
                    .ok_or_else(|| KbError::LabelNotInTaxonomy(entry.label.clone()))?;
                category_pools
                    .get_mut(&category.id)
                    .expect("pools prebuilt for all categories")
                    .push(i);
            }
            id_index.insert(entry.sample_id.clone(), i);
        }
        Ok(KnowledgeBase {
            entries,
            matrix,
            clean_pool,
            category_pools,
            id_index,
            taxonomy,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn clean_pool_len(&self) -> usize {
        self.clean_pool.len()
    }

    pub fn category_pool_len(&self, category_id: &str) -> Option<usize> {
        self.category_pools.get(category_id).map(Vec::len)
    }

    pub fn contains_id(&self, sample_id: &str) -> bool {
        self.id_index.contains_key(sample_id)
    }

    /// Exclusion token for both retrieval ops; see [`LeakageGuard`].
    pub fn leakage_guard(&self, training_sample_id: &str) -> LeakageGuard {
        if !self.contains_id(training_sample_id) {
            log::debug!("leakage guard for id absent from base: {training_sample_id}");
        }
        LeakageGuard {
            exclude_id: training_sample_id.to_string(),
        }
    }

    /// Embeds and unit-normalizes a query representation, checking the
    /// dimension against the base.
    pub fn embed_query(
        &self,
        gateway: &Gateway,
        query: &StructuredRepresentation,
    ) -> Result<Vec<f32>, KbError> {
        let mut vectors = gateway.embed(&[query.text.as_str()])?;
        let raw = vectors.pop().expect("one vector per text");
        if raw.len() != self.dim() {
            return Err(KbError::EmbeddingDimensionMismatch {
                expected: self.dim(),
                got: raw.len(),
            });
        }
        l2_normalize(&raw).ok_or_else(|| KbError::ZeroEmbedding(query.source_id.clone()))
    }

    /// Top-`r` entries over all pools by cosine similarity.
    pub fn retrieve_global(
        &self,
        gateway: &Gateway,
        query: &StructuredRepresentation,
        r: usize,
        exclude: Option<&str>,
    ) -> Result<EvidenceBundle, KbError> {
        let query_vec = self.embed_query(gateway, query)?;
        self.retrieve_global_vec(&query_vec, r, exclude)
    }

    pub fn retrieve_global_vec(
        &self,
        query_vec: &[f32],
        r: usize,
        exclude: Option<&str>,
    ) -> Result<EvidenceBundle, KbError> {
        if r < 1 {
            return Err(KbError::InvalidBudget { got: r, min: 1 });
        }
        if self.is_empty() {
            return Err(KbError::EmptyKnowledgeBase);
        }
        let all: Vec<usize> = (0..self.entries.len()).collect();
        let items = self.top_in_pool(&all, query_vec, r, exclude, EvidenceOrigin::Global);
        Ok(EvidenceBundle {
            kind: BundleKind::Global,
            items,
            budget_used: BudgetUsed::Global { r },
        })
    }

    /// Three-pool contrastive retrieval for one category: nearest
    /// in-category positives, clean samples, and out-of-category hard
    /// negatives. Shortfall in a pool is reported via the bundle size, not
    /// rebalanced onto other pools.
    pub fn retrieve_contrastive(
        &self,
        gateway: &Gateway,
        query: &StructuredRepresentation,
        category_id: &str,
        r: usize,
        exclude: Option<&str>,
    ) -> Result<EvidenceBundle, KbError> {
        let query_vec = self.embed_query(gateway, query)?;
        self.retrieve_contrastive_vec(&query_vec, category_id, r, exclude)
    }

    pub fn retrieve_contrastive_vec(
        &self,
        query_vec: &[f32],
        category_id: &str,
        r: usize,
        exclude: Option<&str>,
    ) -> Result<EvidenceBundle, KbError> {
        if r < 3 {
            return Err(KbError::InvalidBudget { got: r, min: 3 });
        }
        let positive_pool = self
            .category_pools
            .get(category_id)
            .ok_or_else(|| KbError::UnknownCategory(category_id.to_string()))?;
        let (r_pos, r_neg, r_hard) = contrastive_budget(r);

        // K_not_m is derived on demand, never stored.
        let hard_pool: Vec<usize> = self
            .category_pools
            .iter()
            .filter(|(id, _)| id.as_str() != category_id)
            .flat_map(|(_, pool)| pool.iter().copied())
            .collect();

        let mut items =
            self.top_in_pool(positive_pool, query_vec, r_pos, exclude, EvidenceOrigin::Positive);
        items.extend(self.top_in_pool(
            &self.clean_pool,
            query_vec,
            r_neg,
            exclude,
            EvidenceOrigin::Clean,
        ));
        items.extend(self.top_in_pool(
            &hard_pool,
            query_vec,
            r_hard,
            exclude,
            EvidenceOrigin::HardNegative,
        ));
        Ok(EvidenceBundle {
            kind: BundleKind::Contrastive,
            items,
            budget_used: BudgetUsed::Contrastive { r_pos, r_neg, r_hard },
        })
    }

    /// Exact scan of one pool: cosine similarities, sorted by descending
    /// similarity with ties broken by ascending sample id.
    fn top_in_pool(
        &self,
        pool: &[usize],
        query_vec: &[f32],
        take: usize,
        exclude: Option<&str>,
        origin: EvidenceOrigin,
    ) -> Vec<EvidenceItem> {
        if take == 0 || pool.is_empty() {
            return Vec::new();
        }
        let scores = self.pool_similarities(pool, query_vec);
        let mut ranked: Vec<(usize, f64)> = pool
            .iter()
            .copied()
            .zip(scores)
            .filter(|(idx, _)| exclude != Some(self.entries[*idx].sample_id.as_str()))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].sample_id.cmp(&self.entries[b.0].sample_id))
        });
        ranked
            .into_iter()
            .take(take)
            .map(|(idx, similarity)| {
                let entry = &self.entries[idx];
                EvidenceItem {
                    sample_id: entry.sample_id.clone(),
                    label: entry.label.clone(),
                    text: entry.representation.text.clone(),
                    similarity,
                    origin,
                }
            })
            .collect()
    }

    /// Cosine scores for a pool of row indices (feature-dispatched). A
    /// single row is only ~dim FLOPs, so the parallel path splits the pool
    /// in coarse chunks to amortize task overhead.
    #[cfg(feature = "parallel")]
    pub fn pool_similarities(&self, pool: &[usize], query_vec: &[f32]) -> Vec<f64> {
        use rayon::prelude::*;
        pool.par_iter()
            .with_min_len(SCAN_MIN_CHUNK)
            .map(|&idx| cosine(self.matrix.row(idx), query_vec))
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn pool_similarities(&self, pool: &[usize], query_vec: &[f32]) -> Vec<f64> {
        pool.iter()
            .map(|&idx| cosine(self.matrix.row(idx), query_vec))
            .collect()
    }

    /// Sequential scan over all rows; the reference path for benches.
    pub fn similarities_seq(&self, query_vec: &[f32]) -> Vec<f64> {
        (0..self.matrix.count())
            .map(|idx| cosine(self.matrix.row(idx), query_vec))
            .collect()
    }

    /// Parallel scan over all rows.
    #[cfg(feature = "parallel")]
    pub fn similarities_par(&self, query_vec: &[f32]) -> Vec<f64> {
        use rayon::prelude::*;
        (0..self.matrix.count())
            .into_par_iter()
            .with_min_len(SCAN_MIN_CHUNK)
            .map(|idx| cosine(self.matrix.row(idx), query_vec))
            .collect()
    }

    /// Asserts the pool partition: disjoint and exhaustive over entries.
    pub fn validate_partition(&self) -> bool {
        let mut seen = vec![false; self.entries.len()];
        for &idx in self
            .clean_pool
            .iter()
            .chain(self.category_pools.values().flatten())
        {
            if seen[idx] {
                return false;
            }
            seen[idx] = true;
        }
        seen.into_iter().all(|covered| covered)
    }
}

/// Dot product with f64 accumulation; inputs are unit vectors so this is
/// the cosine similarity.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Returns the unit-norm copy of `v`, or `None` for the zero vector.
pub fn l2_normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}
