//! `evolve`: stage 1 optimizes the router prompt, stage 2 one detector
//! prompt per category. Both stages are resumable: existing documents in
//! the prompt store are kept, and stage 2 writes each category's result as
//! soon as it completes so an interrupted run loses at most one category.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use cwe_scout::corpus::CorpusError;
use cwe_scout::evolution::{render_detector_seeds, render_router_seeds, run_stage1, run_stage2};
use cwe_scout::kb::KnowledgeBase;
use cwe_scout::pipeline::PipelineContext;

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::store::{detector_path, router_path, skipped_path, write_stored_prompt, StoredPrompt};

const VAL_SPLIT_SALT: u64 = 0x7a11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    All,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "all" => Ok(Stage::All),
            other => Err(format!("unknown stage {other} (expected 1, 2, or all)")),
        }
    }
}

pub fn run(config: &RunConfig, providers: Option<&Path>, stage: Stage) -> Result<(), CliError> {
    let taxonomy = commands::load_taxonomy(config)?;
    let dataset = commands::load_dataset(config, Arc::clone(&taxonomy))?;
    let (train, val, _) = dataset.split(config.split, config.seed)?;

    config.require_dir(&config.kb_store, "knowledge-base store")?;
    let kb = Arc::new(KnowledgeBase::load(&config.kb_store, Arc::clone(&taxonomy))?);
    let gateway = commands::build_gateway(providers)?;
    let structurer = commands::build_structurer(config, &gateway);
    let ctx = PipelineContext::new(kb, gateway, structurer, config.r);

    std::fs::create_dir_all(&config.prompt_store)?;

    if matches!(stage, Stage::One | Stage::All) {
        let router_file = router_path(&config.prompt_store);
        if router_file.is_file() {
            println!(
                "stage 1: router prompt already present at {}, skipping (delete to re-run)",
                router_file.display()
            );
        } else {
            let seeds = render_router_seeds(&taxonomy, config.k);
            let (prompt, record) = run_stage1(&ctx, &config.evolution, &train, &val, &seeds)?;
            println!(
                "stage 1: selected generation {} with validation Recall@{} = {:.4}",
                record.selected_generation, config.k, record.validation_fitness
            );
            write_stored_prompt(
                &router_file,
                &StoredPrompt {
                    target: "router".into(),
                    prompt,
                    record,
                },
            )?;
        }
    }

    if matches!(stage, Stage::Two | Stage::All) {
        let router_file = router_path(&config.prompt_store);
        if !router_file.is_file() {
            return Err(CliError::config(
                "stage 2 requires stage 1 output; run `evolve --stage 1` first",
            ));
        }
        let mut skipped: BTreeMap<String, String> = BTreeMap::new();
        let mut evolved = 0usize;
        for category in taxonomy.categories() {
            let path = detector_path(&config.prompt_store, &category.id);
            if path.is_file() {
                println!("stage 2: {} already evolved, skipping", category.id);
                evolved += 1;
                continue;
            }
            // Category datasets come from the same deterministic splits;
            // a category without positives in either split is skipped and
            // reported, never fatal.
            let train_set =
                match train.build_category_dataset(&category.id, config.ratios, config.seed) {
                    Ok(set) => set,
                    Err(CorpusError::NoPositives(c)) => {
                        skipped.insert(category.id.clone(), format!("no training positives for {c}"));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
            let val_set = match val.build_category_dataset(
                &category.id,
                config.ratios,
                config.seed ^ VAL_SPLIT_SALT,
            ) {
                Ok(set) => set,
                Err(CorpusError::NoPositives(c)) => {
                    skipped.insert(category.id.clone(), format!("no validation positives for {c}"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };

            let datasets = BTreeMap::from([(category.id.clone(), (train_set, val_set))]);
            let seeds = BTreeMap::from([(
                category.id.clone(),
                render_detector_seeds(&taxonomy, &category.id),
            )]);
            let outcome = run_stage2(&ctx, &config.evolution, &datasets, &seeds)?;
            for (category_id, (prompt, record)) in outcome.evolved {
                println!(
                    "stage 2: {category_id} selected generation {} with validation F1 = {:.4}",
                    record.selected_generation, record.validation_fitness
                );
                write_stored_prompt(
                    &path,
                    &StoredPrompt {
                        target: format!("detector:{category_id}"),
                        prompt,
                        record,
                    },
                )?;
                evolved += 1;
            }
            for (category_id, reason) in outcome.skipped {
                skipped.insert(category_id, reason);
            }
        }
        if !skipped.is_empty() {
            let json = serde_json::to_string_pretty(&skipped)
                .map_err(|e| CliError::config(e.to_string()))?;
            std::fs::write(skipped_path(&config.prompt_store), json)?;
            for (category, reason) in &skipped {
                println!("stage 2: skipped {category}: {reason}");
            }
        }
        println!(
            "stage 2: {evolved} detector prompt(s) in store, {} skipped",
            skipped.len()
        );
    }
    Ok(())
}
