//! Evaluation: macro precision/recall/F1 at type and category level
//! (set-valued predictions scored one-vs-rest), router Recall@k, the Gini
//! coefficient of the per-label F1 distribution, and the few-shot tail
//! report.
//!
//! The benign sentinel never enters macro averaging: it is not a
//! vulnerability type. It still participates in counting, since predicting
//! benign on a vulnerable sample is a false negative for the gold label.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledDataset;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold record for prediction id {0}")]
    MissingGold(String),
    #[error("empty input")]
    EmptyInput,
}

/// A prediction set for one sample, decoupled from the pipeline's full
/// report so externally produced report files evaluate the same way.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub labels: BTreeSet<String>,
}

/// A ranked category list for one sample, for Recall@k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub sample_id: String,
    pub ranked_categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricLevel {
    Type,
    Category,
}

/// One-vs-rest counts and derived scores for a single label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelStats {
    fn from_counts(label: String, tp: usize, fp: usize, fn_count: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_count);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LabelStats {
            label,
            tp,
            fp,
            fn_count,
            precision,
            recall,
            f1,
        }
    }

    /// Gold occurrences of this label in the evaluated set.
    pub fn support(&self) -> usize {
        self.tp + self.fn_count
    }
}

fn ratio(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: MetricLevel,
    pub per_label: BTreeMap<String, LabelStats>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Few-shot tail statistics over a type-level report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotReport {
    /// Mean F1 over labels with fewer than `tail_boundary` gold samples.
    pub tail_f1: f64,
    /// Minimum gold-sample count among labels that achieved F1 > 0;
    /// absent when no label did.
    pub fail_threshold: Option<usize>,
    /// Fraction of tail labels with F1 above `coverage_threshold`.
    pub coverage: f64,
    /// Gini coefficient of the per-label F1 distribution (all labels).
    pub gini: f64,
    pub tail_boundary: usize,
    pub coverage_threshold: f64,
    pub tail_label_count: usize,
}

/// Which labels form the evaluation universe for macro averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Universe {
    /// Labels present in the gold records (the default).
    GoldPresent,
    /// Every label of the taxonomy at the chosen level, including labels
    /// with zero gold support.
    FullTaxonomy,
}

/// Projects a label to the chosen level. Benign stays benign; unknown
/// labels map to `None` and are ignored.
fn project(label: &str, level: MetricLevel, taxonomy: &Taxonomy) -> Option<String> {
    if taxonomy.is_benign(label) {
        return Some(label.to_string());
    }
    match level {
        MetricLevel::Type => taxonomy.contains_type(label).then(|| label.to_string()),
        MetricLevel::Category => taxonomy.category_of(label).map(|c| c.id.clone()),
    }
}

/// Set-valued one-vs-rest macro metrics. For each label in the universe:
/// tp counts samples where the label is predicted and gold, fp predicted
/// but not gold, fn gold but not predicted. Category-level evaluation
/// projects both gold and predictions through the taxonomy first.
pub fn macro_metrics(
    predictions: &[Prediction],
    golds: &LabeledDataset,
    level: MetricLevel,
    universe: Universe,
) -> Result<MetricsReport, EvalError> {
    let taxonomy = &golds.taxonomy;
    let gold_by_id: HashMap<&str, &str> = golds
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.label.as_str()))
        .collect();

    let mut pairs: Vec<(String, BTreeSet<String>)> = Vec::with_capacity(predictions.len());
    for prediction in predictions {
        let gold_label = gold_by_id
            .get(prediction.sample_id.as_str())
            .ok_or_else(|| EvalError::MissingGold(prediction.sample_id.clone()))?;
        let gold = project(gold_label, level, taxonomy)
            .expect("gold labels are validated against the taxonomy");
        let predicted: BTreeSet<String> = prediction
            .labels
            .iter()
            .filter_map(|l| {
                let projected = project(l, level, taxonomy);
                if projected.is_none() {
                    log::warn!("prediction label {l} unknown to taxonomy, ignored");
                }
                projected
            })
            .collect();
        pairs.push((gold, predicted));
    }

    let mut labels: BTreeSet<String> = match universe {
        Universe::GoldPresent => pairs.iter().map(|(gold, _)| gold.clone()).collect(),
        Universe::FullTaxonomy => match level {
            MetricLevel::Type => taxonomy.type_ids().map(str::to_string).collect(),
            MetricLevel::Category => taxonomy
                .categories()
                .iter()
                .map(|c| c.id.clone())
                .collect(),
        },
    };
    // The benign sentinel is not a vulnerability label; it never enters
    // the macro universe.
    labels.remove(taxonomy.benign_label());

    let mut per_label = BTreeMap::new();
    for label in &labels {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_count = 0;
        for (gold, predicted) in &pairs {
            let is_gold = gold == label;
            let is_predicted = predicted.contains(label);
            match (is_predicted, is_gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_count += 1,
                (false, false) => {}
            }
        }
        per_label.insert(
            label.clone(),
            LabelStats::from_counts(label.clone(), tp, fp, fn_count),
        );
    }

    let count = per_label.len().max(1) as f64;
    let macro_precision = per_label.values().map(|s| s.precision).sum::<f64>() / count;
    let macro_recall = per_label.values().map(|s| s.recall).sum::<f64>() / count;
    let macro_f1 = per_label.values().map(|s| s.f1).sum::<f64>() / count;
    Ok(MetricsReport {
        level,
        per_label,
        macro_precision,
        macro_recall,
        macro_f1,
    })
}

/// Fraction of vulnerable gold samples whose gold category appears within
/// the first min(k, |ranked|) routed categories. Benign gold samples are
/// excluded from the denominator.
pub fn recall_at_k(
    routings: &[RoutingRecord],
    golds: &LabeledDataset,
    k: usize,
) -> Result<f64, EvalError> {
    let taxonomy = &golds.taxonomy;
    let gold_by_id: HashMap<&str, &str> = golds
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.label.as_str()))
        .collect();
    let mut vulnerable = 0usize;
    let mut hits = 0usize;
    for routing in routings {
        let gold_label = gold_by_id
            .get(routing.sample_id.as_str())
            .ok_or_else(|| EvalError::MissingGold(routing.sample_id.clone()))?;
        let Some(category) = taxonomy.category_of(gold_label) else {
            continue;
        };
        vulnerable += 1;
        let depth = k.min(routing.ranked_categories.len());
        if routing.ranked_categories[..depth]
            .iter()
            .any(|c| c == &category.id)
        {
            hits += 1;
        }
    }
    Ok(ratio(hits, vulnerable))
}

/// Gini coefficient by mean absolute difference:
/// `G = sum_ij |v_i - v_j| / (2 n^2 mean)`, defined as 0 for an all-zero
/// input. Scale- and permutation-invariant.
pub fn gini(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    debug_assert!(values.iter().all(|&v| v >= 0.0));
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let abs_diff_sum: f64 = values
        .iter()
        .flat_map(|&a| values.iter().map(move |&b| (a - b).abs()))
        .sum();
    Ok(abs_diff_sum / (2.0 * n * n * mean))
}

/// Few-shot tail statistics from a type-level metrics report. Support (gold
/// count per label) is recomputed from the gold dataset at the same level.
pub fn fewshot_report(
    metrics: &MetricsReport,
    golds: &LabeledDataset,
    tail_boundary: usize,
    coverage_threshold: f64,
) -> FewShotReport {
    let mut support: HashMap<&str, usize> = HashMap::new();
    for sample in &golds.samples {
        *support.entry(sample.label.as_str()).or_default() += 1;
    }
    let support_of = |label: &str| -> usize {
        support.get(label).copied().unwrap_or(0)
    };

    let tail: Vec<&LabelStats> = metrics
        .per_label
        .values()
        .filter(|s| support_of(&s.label) < tail_boundary)
        .collect();
    let tail_f1 = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|s| s.f1).sum::<f64>() / tail.len() as f64
    };
    let coverage = if tail.is_empty() {
        0.0
    } else {
        tail.iter().filter(|s| s.f1 > coverage_threshold).count() as f64 / tail.len() as f64
    };
    let fail_threshold = metrics
        .per_label
        .values()
        .filter(|s| s.f1 > 0.0)
        .map(|s| support_of(&s.label))
        .min();
    let f1_values: Vec<f64> = metrics.per_label.values().map(|s| s.f1).collect();
    let gini_value = if f1_values.is_empty() {
        0.0
    } else {
        gini(&f1_values).expect("nonempty checked")
    };
    FewShotReport {
        tail_f1,
        fail_threshold,
        coverage,
        gini: gini_value,
        tail_boundary,
        coverage_threshold,
        tail_label_count: tail.len(),
    }
}

/// Plain-text table: macro rows plus per-label details, fixed-width.
pub fn render_table(reports: &[&MetricsReport], fewshot: Option<&FewShotReport>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>15} {:>12} {:>8}\n",
        "Level", "Macro-Precision", "Macro-Recall", "Macro-F1"
    ));
    for report in reports {
        let level = match report.level {
            MetricLevel::Type => "type",
            MetricLevel::Category => "category",
        };
        out.push_str(&format!(
            "{:<12} {:>15.2} {:>12.2} {:>8.2}\n",
            level,
            report.macro_precision * 100.0,
            report.macro_recall * 100.0,
            report.macro_f1 * 100.0
        ));
    }
    if let Some(fs) = fewshot {
        out.push('\n');
        out.push_str(&format!(
            "Tail F1 (support < {}): {:.3}\n",
            fs.tail_boundary, fs.tail_f1
        ));
        match fs.fail_threshold {
            Some(threshold) => {
                out.push_str(&format!("Fail threshold: {threshold}\n"));
            }
            None => out.push_str("Fail threshold: n/a (no label with F1 > 0)\n"),
        }
        out.push_str(&format!(
            "Tail coverage (F1 > {:.1}): {:.1}%\n",
            fs.coverage_threshold,
            fs.coverage * 100.0
        ));
        out.push_str(&format!("Gini coefficient: {:.3}\n", fs.gini));
    }
    out
}
