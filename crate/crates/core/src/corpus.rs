//! Labeled code corpus: loading, deterministic stratified splits, and the
//! per-category datasets (positives / clean / hard negatives) that detector
//! optimization trains on.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {0} has a label unknown to the taxonomy: {1}")]
    UnknownLabel(String, String),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split fractions must be positive and sum to 1 (got {0}, {1}, {2})")]
    InvalidFractions(f64, f64, f64),
    #[error("category {0} has no positive samples")]
    NoPositives(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
}

/// One labeled code snippet. The label is either a type id from the taxonomy
/// or the benign sentinel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    pub code: String,
    pub label: String,
}

impl CodeSample {
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: impl Into<String>) -> Self {
        CodeSample {
            id: id.into(),
            code: code.into(),
            label: label.into(),
        }
    }
}

/// A validated set of samples tied to the taxonomy they were checked against.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<CodeSample>,
    pub taxonomy: Arc<Taxonomy>,
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, CorpusError> {
        let sum = train + val + test;
        if train <= 0.0 || val < 0.0 || test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidFractions(train, val, test));
        }
        Ok(SplitFractions { train, val, test })
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Detector training material for one category: in-category positives, clean
/// (benign) samples, and vulnerable samples from other categories.
#[derive(Debug, Clone)]
pub struct CategoryDataset {
    pub category_id: String,
    pub positives: Vec<CodeSample>,
    pub clean: Vec<CodeSample>,
    pub hard_negatives: Vec<CodeSample>,
}

impl CategoryDataset {
    pub fn len(&self) -> usize {
        self.positives.len() + self.clean.len() + self.hard_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples in a fixed order: positives, clean, hard negatives.
    pub fn all_samples(&self) -> impl Iterator<Item = &CodeSample> {
        self.positives
            .iter()
            .chain(self.clean.iter())
            .chain(self.hard_negatives.iter())
    }
}

/// Multipliers on |positives| for how many clean / hard-negative samples to
/// draw into a [`CategoryDataset`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NegativeRatios {
    pub clean: f64,
    pub hard: f64,
}

impl Default for NegativeRatios {
    fn default() -> Self {
        NegativeRatios {
            clean: 1.0,
            hard: 1.0,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    code: String,
    label: String,
}

impl LabeledDataset {
    /// Loads a line-delimited record file: one JSON object per line with
    /// fields `id`, `code`, `label`. Lines starting with `#` are ignored.
    pub fn load(path: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text, taxonomy)
    }

    pub fn from_jsonl(text: &str, taxonomy: Arc<Taxonomy>) -> Result<Self, CorpusError> {
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let record: RawRecord = serde_json::from_str(trimmed).map_err(|e| {
                CorpusError::MalformedRecord {
                    line: lineno + 1,
                    reason: e.to_string(),
                }
            })?;
            if record.code.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: lineno + 1,
                    reason: "empty code field".into(),
                });
            }
            samples.push(CodeSample::new(record.id, record.code, record.label));
        }
        Self::from_samples(samples, taxonomy)
    }

    pub fn from_samples(
        samples: Vec<CodeSample>,
        taxonomy: Arc<Taxonomy>,
    ) -> Result<Self, CorpusError> {
        let mut seen: HashSet<&str> = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(&s.id) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
            if !taxonomy.is_known_label(&s.label) {
                return Err(CorpusError::UnknownLabel(s.id.clone(), s.label.clone()));
            }
        }
        Ok(LabeledDataset { samples, taxonomy })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Option<&CodeSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples whose label is a vulnerability type (not benign).
    pub fn vulnerable(&self) -> impl Iterator<Item = &CodeSample> {
        self.samples
            .iter()
            .filter(|s| !self.taxonomy.is_benign(&s.label))
    }

    fn subset(&self, indices: impl IntoIterator<Item = usize>) -> LabeledDataset {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        LabeledDataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            taxonomy: Arc::clone(&self.taxonomy),
        }
    }

    /// Deterministic stratified split. Labels with at least 3 samples are
    /// apportioned per label by largest remainder; labels with fewer go
    /// entirely to train. The result is an exact partition of the input.
    pub fn split(
        &self,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CorpusError> {
        if self.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }
        // Re-validate in case the value was built without the constructor.
        let fractions = SplitFractions::new(fractions.train, fractions.val, fractions.test)?;

        // Group sample indices by label, in first-occurrence order.
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.label.as_str()).or_default().push(i);
        }

        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for (label, mut indices) in groups {
            if indices.len() < 3 {
                train.extend(indices);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()));
            indices.shuffle(&mut rng);
            let counts = apportion(
                indices.len(),
                &[fractions.train, fractions.val, fractions.test],
            );
            let mut cursor = indices.into_iter();
            train.extend(cursor.by_ref().take(counts[0]));
            val.extend(cursor.by_ref().take(counts[1]));
            test.extend(cursor);
        }
        Ok((self.subset(train), self.subset(val), self.subset(test)))
    }

    /// Builds the detector dataset for one category: all in-category
    /// positives, plus clean and hard-negative samples drawn without
    /// replacement up to `ratio * |positives|` (clamped to availability).
    pub fn build_category_dataset(
        &self,
        category_id: &str,
        ratios: NegativeRatios,
        seed: u64,
    ) -> Result<CategoryDataset, CorpusError> {
        if self.taxonomy.category(category_id).is_none() {
            return Err(CorpusError::UnknownCategory(category_id.to_string()));
        }

        let mut positives = Vec::new();
        let mut clean_pool = Vec::new();
        let mut hard_pool = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if self.taxonomy.is_benign(&s.label) {
                clean_pool.push(i);
            } else {
                match self.taxonomy.category_of(&s.label) {
                    Some(cat) if cat.id == category_id => positives.push(i),
                    Some(_) => hard_pool.push(i),
                    None => unreachable!("dataset labels are validated at load"),
                }
            }
        }
        if positives.is_empty() {
            return Err(CorpusError::NoPositives(category_id.to_string()));
        }

        let want_clean = (ratios.clean * positives.len() as f64).round() as usize;
        let want_hard = (ratios.hard * positives.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(category_id.as_bytes()));
        let clean = draw_without_replacement(&mut rng, clean_pool, want_clean);
        let hard = draw_without_replacement(&mut rng, hard_pool, want_hard);

        let take = |idx: Vec<usize>| -> Vec<CodeSample> {
            idx.iter().map(|&i| self.samples[i].clone()).collect()
        };
        Ok(CategoryDataset {
            category_id: category_id.to_string(),
            positives: take(positives),
            clean: take(clean),
            hard_negatives: take(hard),
        })
    }

    /// Buckets per-type sample counts into the long-tail tiers and reports
    /// the number of types and samples in each.
    pub fn tier_report(&self) -> TierReport {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.samples {
            if !self.taxonomy.is_benign(&s.label) {
                *counts.entry(s.label.as_str()).or_default() += 1;
            }
        }
        let mut tiers = TIER_EDGES
            .iter()
            .map(|&(name, lo, hi)| TierBucket {
                name: name.to_string(),
                min_samples: lo,
                max_samples: hi,
                cwe_count: 0,
                sample_count: 0,
            })
            .collect::<Vec<_>>();
        for (_, n) in counts {
            let tier = tiers
                .iter_mut()
                .find(|t| n >= t.min_samples && t.max_samples.is_none_or(|hi| n <= hi))
                .expect("tier edges cover all counts");
            tier.cwe_count += 1;
            tier.sample_count += n;
        }
        TierReport { tiers }
    }
}

/// Tier edges, from head to tail: >=5000, 1000-4999, 100-999, 50-99, 10-49, <10.
const TIER_EDGES: &[(&str, usize, Option<usize>)] = &[
    (">=5000", 5000, None),
    ("1000-4999", 1000, Some(4999)),
    ("100-999", 100, Some(999)),
    ("50-99", 50, Some(99)),
    ("10-49", 10, Some(49)),
    ("<10", 1, Some(9)),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierBucket {
    pub name: String,
    pub min_samples: usize,
    pub max_samples: Option<usize>,
    pub cwe_count: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierReport {
    pub tiers: Vec<TierBucket>,
}

impl TierReport {
    pub fn tier(&self, name: &str) -> Option<&TierBucket> {
        self.tiers.iter().find(|t| t.name == name)
    }
}

/// Largest-remainder apportionment of `n` into parts proportional to
/// `fractions`; ties go to the earlier part.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * n as f64 - (f * n as f64).floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    counts
}

/// Shuffles the pool and takes up to `want` indices, returned in their
/// original dataset order.
fn draw_without_replacement(rng: &mut ChaCha8Rng, mut pool: Vec<usize>, want: usize) -> Vec<usize> {
    pool.shuffle(rng);
    pool.truncate(want);
    pool.sort_unstable();
    pool
}

/// FNV-1a over bytes; used to derive per-label and per-category RNG streams
/// so results do not depend on iteration order.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
