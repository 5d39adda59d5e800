//! `build-kb`: structure, embed, and index the training split, then persist
//! the store.

use std::path::Path;

use cwe_scout::kb::{store::write_summary, KnowledgeBase};

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;

pub fn run(config: &RunConfig, providers: Option<&Path>, force: bool) -> Result<(), CliError> {
    let taxonomy = commands::load_taxonomy(config)?;
    let dataset = commands::load_dataset(config, taxonomy)?;
    let (train, _, _) = dataset.split(config.split, config.seed)?;
    log::info!(
        "indexing {} training samples of {} total",
        train.len(),
        dataset.len()
    );

    let gateway = commands::build_gateway(providers)?;
    let structurer = commands::build_structurer(config, &gateway);
    let kb = KnowledgeBase::build(&train, &structurer, &gateway)?;
    kb.save(&config.kb_store, force)?;

    println!("knowledge base written to {}", config.kb_store.display());
    let mut summary = Vec::new();
    write_summary(&kb, &mut summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    Ok(())
}
