//! On-disk formats owned by the CLI: the prompt store (one structured
//! document per agent role, evolution history embedded), detection report
//! files with trace sidecars, and the lenient detect-input loader.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cwe_scout::corpus::CodeSample;
use cwe_scout::evolution::{EvolutionRecord, Prompt};
use cwe_scout::pipeline::{DetectionReport, PromptSet};
use cwe_scout::taxonomy::Taxonomy;

use crate::error::CliError;

/// One prompt-store document: the selected prompt plus its full evolution
/// record.
#[derive(Debug, Serialize, Deserialize)]
pub struct StoredPrompt {
    pub target: String,
    pub prompt: Prompt,
    pub record: EvolutionRecord,
}

pub fn router_path(store: &Path) -> PathBuf {
    store.join("router.json")
}

pub fn detector_path(store: &Path, category_id: &str) -> PathBuf {
    store.join(format!("detector-{}.json", sanitize(category_id)))
}

pub fn skipped_path(store: &Path) -> PathBuf {
    store.join("skipped.json")
}

pub fn write_stored_prompt(path: &Path, stored: &StoredPrompt) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(stored)
        .map_err(|e| CliError::config(format!("serialize prompt store: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_stored_prompt(path: &Path) -> Result<StoredPrompt, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("parse {}: {e}", path.display())))
}

/// Loads the evolved prompt set for detection. The router document must
/// exist; detector documents are optional per category (missing ones are
/// skipped at detection time with a warning).
pub fn load_prompt_set(store: &Path, taxonomy: &Taxonomy) -> Result<PromptSet, CliError> {
    let router_file = router_path(store);
    if !router_file.is_file() {
        return Err(CliError::config(format!(
            "prompt store has no router prompt at {} (run `evolve` first)",
            router_file.display()
        )));
    }
    let router = read_stored_prompt(&router_file)?.prompt;
    let mut detectors = BTreeMap::new();
    for category in taxonomy.categories() {
        let path = detector_path(store, &category.id);
        if path.is_file() {
            detectors.insert(category.id.clone(), read_stored_prompt(&path)?.prompt);
        }
    }
    Ok(PromptSet {
        router,
        detectors,
        flat: None,
    })
}

/// Loads a manual (unevolved) prompt set from a directory of plain-text
/// files: `router.txt`, `detector-<category>.txt`, optional `flat.txt`.
pub fn load_manual_prompt_set(dir: &Path, taxonomy: &Taxonomy) -> Result<PromptSet, CliError> {
    let manual = |name: &str, path: &Path| -> Result<Prompt, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("read {}: {e}", path.display())))?;
        Ok(Prompt {
            id: format!("manual-{name}"),
            text,
            lineage: None,
            generation: 0,
            fitness: None,
        })
    };
    let router_file = dir.join("router.txt");
    if !router_file.is_file() {
        return Err(CliError::config(format!(
            "manual prompt dir is missing router.txt: {}",
            dir.display()
        )));
    }
    let router = manual("router", &router_file)?;
    let mut detectors = BTreeMap::new();
    for category in taxonomy.categories() {
        let path = dir.join(format!("detector-{}.txt", sanitize(&category.id)));
        if path.is_file() {
            detectors.insert(
                category.id.clone(),
                manual(&format!("detector-{}", category.id), &path)?,
            );
        }
    }
    let flat_file = dir.join("flat.txt");
    let flat = if flat_file.is_file() {
        Some(manual("flat", &flat_file)?)
    } else {
        None
    };
    Ok(PromptSet {
        router,
        detectors,
        flat,
    })
}

/// Report line: `{"id": ..., "labels": [...], "trace_ref": ...}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportLine {
    pub id: String,
    pub labels: Vec<String>,
    pub trace_ref: String,
}

/// Writes reports.jsonl plus one trace document per sample under traces/.
pub fn write_reports(
    output_dir: &Path,
    reports: &[DetectionReport],
) -> Result<PathBuf, CliError> {
    let traces_dir = output_dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let mut lines = String::new();
    for report in reports {
        let trace_name = format!("{}.json", sanitize(&report.sample_id));
        let trace_ref = format!("traces/{trace_name}");
        let line = ReportLine {
            id: report.sample_id.clone(),
            labels: report.final_labels.iter().cloned().collect(),
            trace_ref: trace_ref.clone(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("report line serializes"));
        lines.push('\n');
        let trace_json = serde_json::to_string_pretty(report).expect("trace serializes");
        std::fs::write(traces_dir.join(trace_name), trace_json)?;
    }
    let reports_path = output_dir.join("reports.jsonl");
    std::fs::write(&reports_path, lines)?;
    Ok(reports_path)
}

pub fn read_report_lines(path: &Path) -> Result<Vec<ReportLine>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(line).map_err(|e| {
            CliError::config(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(parsed);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct DetectInputRecord {
    id: String,
    code: String,
    #[serde(default)]
    label: Option<String>,
}

/// Loads detection input: line-delimited records with `id` and `code`;
/// a `label` field is accepted and ignored. `#` lines are comments.
pub fn load_detect_input(path: &Path, benign_label: &str) -> Result<Vec<CodeSample>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: DetectInputRecord = serde_json::from_str(trimmed).map_err(|e| {
            CliError::config(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        samples.push(CodeSample::new(
            record.id,
            record.code,
            record.label.unwrap_or_else(|| benign_label.to_string()),
        ));
    }
    Ok(samples)
}

/// Filesystem-safe name: keeps [A-Za-z0-9._-], replaces the rest, and
/// appends a short hash when anything was replaced so distinct ids cannot
/// collide.
pub fn sanitize(id: &str) -> String {
    let mut out: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if out != id {
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in id.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        out.push_str(&format!("-{hash:08x}"));
    }
    out
}
