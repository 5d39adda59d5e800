//! `detect`: batch detection over an input file, with the run-mode toggles
//! (`--no-retrieval`, `--no-agents`, `--manual-prompts`) that mirror the
//! pipeline's component ablations.

use std::path::Path;
use std::sync::Arc;

use cwe_scout::evolution::{render_flat_prompt, Prompt};
use cwe_scout::kb::KnowledgeBase;
use cwe_scout::pipeline::PipelineContext;

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::store::{load_detect_input, load_manual_prompt_set, load_prompt_set, write_reports};

pub struct DetectArgs<'a> {
    pub input: &'a Path,
    pub k: Option<usize>,
    pub no_retrieval: bool,
    pub no_agents: bool,
    pub manual_prompts: Option<&'a Path>,
    pub parallelism: usize,
}

pub fn run(
    config: &RunConfig,
    providers: Option<&Path>,
    args: &DetectArgs<'_>,
) -> Result<(), CliError> {
    let taxonomy = commands::load_taxonomy(config)?;
    config.require_file(args.input, "detect input")?;
    config.require_dir(&config.kb_store, "knowledge-base store")?;

    let samples = load_detect_input(args.input, taxonomy.benign_label())?;
    std::fs::create_dir_all(&config.output_dir)?;
    if samples.is_empty() {
        write_reports(&config.output_dir, &[])?;
        println!("0 samples in {}; nothing to detect", args.input.display());
        return Ok(());
    }

    let kb = Arc::new(KnowledgeBase::load(&config.kb_store, Arc::clone(&taxonomy))?);
    let gateway = commands::build_gateway(providers)?;
    let structurer = commands::build_structurer(config, &gateway);
    let ctx = PipelineContext::new(kb, gateway, structurer, config.r)
        .with_retrieval(!args.no_retrieval);
    let k = args.k.unwrap_or(config.k);

    let reports = if args.no_agents {
        // Single flat prompt over the whole type universe; no routing.
        let flat_prompt = match args.manual_prompts {
            Some(dir) => load_manual_prompt_set(dir, &taxonomy)?.flat,
            None => None,
        }
        .unwrap_or_else(|| Prompt {
            id: "flat-v1".into(),
            text: render_flat_prompt(&taxonomy),
            lineage: None,
            generation: 0,
            fitness: None,
        });
        ctx.detect_batch_flat(&samples, &flat_prompt, args.parallelism)
    } else {
        let prompts = match args.manual_prompts {
            Some(dir) => load_manual_prompt_set(dir, &taxonomy)?,
            None => load_prompt_set(&config.prompt_store, &taxonomy)?,
        };
        ctx.detect_batch(&samples, k, &prompts, args.parallelism)
    };

    let failures = reports.iter().filter(|r| r.failed()).count();
    let reports_path = write_reports(&config.output_dir, &reports)?;
    println!(
        "{} samples detected ({} failed), reports at {}",
        reports.len(),
        failures,
        reports_path.display()
    );
    if failures == reports.len() {
        return Err(CliError::provider(format!(
            "all {failures} samples failed detection"
        )));
    }
    Ok(())
}
