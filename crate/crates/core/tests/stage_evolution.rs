//! Integration: both evolution stages running over the real pipeline
//! (corpus split, knowledge base, retrieval, scripted providers), plus the
//! end-to-end detect-and-score path at library level.

use std::collections::BTreeMap;
use std::sync::Arc;

use cwe_scout::corpus::{CodeSample, LabeledDataset, NegativeRatios, SplitFractions};
use cwe_scout::evolution::{
    parent_text_from_mutation_payload, render_detector_seeds, render_router_seeds, run_stage1,
    run_stage2, EvolutionConfig, EvolutionError,
};
use cwe_scout::gateway::{CallbackProvider, Gateway, HashEmbedder, Limiter, ModelRole};
use cwe_scout::kb::KnowledgeBase;
use cwe_scout::metrics::{macro_metrics, MetricLevel, Prediction, Universe};
use cwe_scout::pipeline::{PipelineContext, PromptSet};
use cwe_scout::structuring::Structurer;
use cwe_scout::test_support::three_category_taxonomy;

const CATEGORY_OF_MARKER: [(&str, &str, &str); 3] = [
    ("sig_mem", "memory", "CWE-119"),
    ("sig_inj", "injection", "CWE-79"),
    ("sig_log", "logic", "CWE-20"),
];

/// Execution model keyed on marker tokens in the target section; evolution
/// model mutates by echoing the parent with a version suffix.
fn scripted_gateway() -> Arc<Gateway> {
    let execution = CallbackProvider::new("marker-exec", |req| {
        let target = req.payload.split("Evidence:").next().unwrap_or(req.payload);
        if req.instruction.contains("\"category\": \"<category id>\"") {
            // Router: rank the marker's category first, the rest after.
            for (marker, category, _) in CATEGORY_OF_MARKER {
                if target.contains(marker) {
                    let rest: Vec<String> = CATEGORY_OF_MARKER
                        .iter()
                        .filter(|(m, _, _)| *m != marker)
                        .map(|(_, c, _)| format!("{{\"category\": \"{c}\", \"confidence\": 0.3}}"))
                        .collect();
                    return Ok(format!(
                        "{{\"predictions\": [{{\"category\": \"{category}\", \"confidence\": 0.9}}, {}]}}",
                        rest.join(", ")
                    ));
                }
            }
            Ok(r#"{"predictions": []}"#.into())
        } else {
            // Detector or flat: name the marker's exact type; the caller's
            // category filter drops out-of-category answers.
            for (marker, _, cwe) in CATEGORY_OF_MARKER {
                if target.contains(marker) {
                    return Ok(format!(
                        "{{\"predictions\": [{{\"type\": \"{cwe}\", \"confidence\": 0.9}}]}}"
                    ));
                }
            }
            Ok(r#"{"predictions": []}"#.into())
        }
    });
    let evolution = CallbackProvider::new("suffix-mutator", |req| {
        let parent = parent_text_from_mutation_payload(req.payload).unwrap_or("");
        Ok(format!("{parent}\nrefinement-note"))
    });
    Arc::new(
        Gateway::builder()
            .chat_role(
                ModelRole::Execution,
                Arc::new(execution),
                0.0,
                Limiter::unlimited(),
            )
            .chat_role(
                ModelRole::Evolution,
                Arc::new(evolution),
                0.8,
                Limiter::unlimited(),
            )
            .embedder(Arc::new(HashEmbedder::new(48)), Limiter::unlimited())
            .build(),
    )
}

fn corpus(per_type: usize, benign: usize) -> LabeledDataset {
    let taxonomy = three_category_taxonomy();
    let mut samples = Vec::new();
    for (marker, category, cwe) in CATEGORY_OF_MARKER {
        for i in 0..per_type {
            samples.push(CodeSample::new(
                format!("{category}-{i}"),
                format!("static int {category}_case{i}(ctx_t *c) {{\n    if (c->n > {i}) {{ {marker}(c, {i}); }}\n    return 0;\n}}"),
                cwe,
            ));
        }
    }
    for i in 0..benign {
        samples.push(CodeSample::new(
            format!("benign-{i}"),
            format!("static int ok_case{i}(ctx_t *c) {{ return c->n + {i}; }}"),
            "BENIGN",
        ));
    }
    LabeledDataset::from_samples(samples, taxonomy).unwrap()
}

fn context(dataset: &LabeledDataset) -> PipelineContext {
    let gateway = scripted_gateway();
    let kb = Arc::new(KnowledgeBase::build(dataset, &Structurer::rules(), &gateway).unwrap());
    PipelineContext::new(kb, gateway, Arc::new(Structurer::rules()), 9)
}

fn config(seed: u64) -> EvolutionConfig {
    EvolutionConfig {
        population: 4,
        iterations: 2,
        elite_ratio: 0.25,
        k: 2,
        eval_subsample: 9,
        seed,
    }
}

#[test]
fn stage1_router_reaches_full_recall_on_scripted_landscape() {
    let dataset = corpus(8, 8);
    let (train, val, _) = dataset.split(SplitFractions::default(), 5).unwrap();
    let ctx = context(&train);
    let seeds = render_router_seeds(ctx.kb.taxonomy(), 2);
    let (winner, record) = run_stage1(&ctx, &config(5), &train, &val, &seeds).unwrap();
    assert_eq!(record.generations.len(), 2);
    assert!(record.best_fitness_is_monotone());
    assert_eq!(record.validation_fitness, 1.0);
    assert_eq!(winner.fitness, Some(1.0));
}

type CategorySplits = BTreeMap<String, (cwe_scout::CategoryDataset, cwe_scout::CategoryDataset)>;

fn stage2_datasets(
    train: &LabeledDataset,
    val: &LabeledDataset,
    categories: &[&str],
) -> (CategorySplits, BTreeMap<String, Vec<String>>) {
    let taxonomy = Arc::clone(&train.taxonomy);
    let mut datasets = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    for &category in categories {
        let tr = train
            .build_category_dataset(category, NegativeRatios::default(), 11)
            .unwrap();
        let va = val
            .build_category_dataset(category, NegativeRatios::default(), 13)
            .unwrap();
        datasets.insert(category.to_string(), (tr, va));
        seeds.insert(category.to_string(), render_detector_seeds(&taxonomy, category));
    }
    (datasets, seeds)
}

#[test]
fn stage2_evolves_every_category_independently() {
    let dataset = corpus(8, 8);
    let (train, val, _) = dataset.split(SplitFractions::default(), 5).unwrap();
    let ctx = context(&train);
    let (datasets, seeds) = stage2_datasets(&train, &val, &["memory", "injection", "logic"]);

    let outcome = run_stage2(&ctx, &config(5), &datasets, &seeds).unwrap();
    assert_eq!(outcome.evolved.len(), 3);
    assert!(outcome.skipped.is_empty());
    for (category, (prompt, record)) in &outcome.evolved {
        assert_eq!(record.validation_fitness, 1.0, "{category}");
        assert!(record.best_fitness_is_monotone(), "{category}");
        assert!(prompt.fitness.is_some());
    }

    // Independence: evolving each category alone selects the same prompts
    // as the joint (parallel) run.
    for category in ["memory", "injection", "logic"] {
        let (single_data, single_seeds) = stage2_datasets(&train, &val, &[category]);
        let single = run_stage2(&ctx, &config(5), &single_data, &single_seeds).unwrap();
        let (joint_prompt, _) = &outcome.evolved[category];
        let (single_prompt, _) = &single.evolved[category];
        assert_eq!(joint_prompt.text, single_prompt.text, "{category}");
        assert_eq!(joint_prompt.id, single_prompt.id, "{category}");
    }
}

#[test]
fn stage2_skips_categories_without_positives() {
    // Corpus with no logic samples at all.
    let taxonomy = three_category_taxonomy();
    let mut samples = Vec::new();
    for (marker, category, cwe) in &CATEGORY_OF_MARKER[..2] {
        for i in 0..6 {
            samples.push(CodeSample::new(
                format!("{category}-{i}"),
                format!("void {category}{i}() {{ {marker}(x{i}); }}"),
                *cwe,
            ));
        }
    }
    for i in 0..6 {
        samples.push(CodeSample::new(
            format!("benign-{i}"),
            format!("void quiet{i}() {{ noop({i}); }}"),
            "BENIGN",
        ));
    }
    let dataset = LabeledDataset::from_samples(samples, Arc::clone(&taxonomy)).unwrap();
    let ctx = context(&dataset);

    // The category dataset for "logic" cannot even be built; model the
    // caller's skip by feeding an empty positives set through run_stage2's
    // own guard instead.
    let (mut datasets, mut seeds) = stage2_datasets(&dataset, &dataset, &["memory", "injection"]);
    let empty = cwe_scout::CategoryDataset {
        category_id: "logic".into(),
        positives: vec![],
        clean: vec![],
        hard_negatives: vec![],
    };
    datasets.insert("logic".into(), (empty.clone(), empty));
    seeds.insert("logic".into(), render_detector_seeds(&taxonomy, "logic"));

    let outcome = run_stage2(&ctx, &config(3), &datasets, &seeds).unwrap();
    assert_eq!(outcome.evolved.len(), 2);
    assert_eq!(outcome.skipped.len(), 1);
    assert!(outcome.skipped.contains_key("logic"));
}

#[test]
fn stage2_all_empty_is_an_error() {
    let dataset = corpus(4, 4);
    let ctx = context(&dataset);
    let empty = cwe_scout::CategoryDataset {
        category_id: "memory".into(),
        positives: vec![],
        clean: vec![],
        hard_negatives: vec![],
    };
    let datasets = BTreeMap::from([("memory".to_string(), (empty.clone(), empty))]);
    let seeds = BTreeMap::from([(
        "memory".to_string(),
        render_detector_seeds(&dataset.taxonomy, "memory"),
    )]);
    assert!(matches!(
        run_stage2(&ctx, &config(1), &datasets, &seeds),
        Err(EvolutionError::AllCategoriesEmpty)
    ));
}

#[test]
fn evolved_prompts_drive_perfect_detection_on_held_out_split() {
    let dataset = corpus(10, 10);
    let (train, val, test) = dataset.split(SplitFractions::default(), 9).unwrap();
    assert!(!test.is_empty());
    let ctx = context(&train);

    let router_seeds = render_router_seeds(ctx.kb.taxonomy(), 3);
    let (router, _) = run_stage1(&ctx, &config(9), &train, &val, &router_seeds).unwrap();
    let (datasets, seeds) = stage2_datasets(&train, &val, &["memory", "injection", "logic"]);
    let outcome = run_stage2(&ctx, &config(9), &datasets, &seeds).unwrap();

    let prompts = PromptSet {
        router,
        detectors: outcome
            .evolved
            .into_iter()
            .map(|(category, (prompt, _))| (category, prompt))
            .collect(),
        flat: None,
    };
    let reports = ctx.detect_batch(&test.samples, 3, &prompts, 2);
    let predictions: Vec<Prediction> = reports
        .iter()
        .map(|r| Prediction {
            sample_id: r.sample_id.clone(),
            labels: r.final_labels.clone(),
        })
        .collect();
    let metrics =
        macro_metrics(&predictions, &test, MetricLevel::Type, Universe::GoldPresent).unwrap();
    assert_eq!(metrics.macro_f1, 1.0);
}
