//! `evaluate`: macro metrics at both levels, router Recall@k when traces
//! carry routing, and the few-shot tail report. Pure post-processing; no
//! providers involved.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use cwe_scout::corpus::LabeledDataset;
use cwe_scout::metrics::{
    fewshot_report, macro_metrics, recall_at_k, render_table, FewShotReport, MetricLevel,
    MetricsReport, Prediction, RoutingRecord, Universe,
};
use cwe_scout::pipeline::DetectionReport;

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::store::read_report_lines;

pub struct EvaluateArgs<'a> {
    pub reports: &'a Path,
    pub golds: &'a Path,
    pub allow_missing: usize,
    pub full_universe: bool,
    pub tail_boundary: usize,
    pub coverage_threshold: f64,
}

#[derive(Serialize)]
struct RecallAtK {
    k: usize,
    score: f64,
    routed_samples: usize,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    type_level: &'a MetricsReport,
    category_level: &'a MetricsReport,
    recall_at_k: Option<&'a RecallAtK>,
    fewshot: &'a FewShotReport,
    evaluated_samples: usize,
    missing_report_ids: &'a [String],
}

#[derive(Serialize)]
struct PerLabelLine<'a> {
    level: &'a str,
    label: &'a str,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_count: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    support: usize,
}

pub fn run(config: &RunConfig, args: &EvaluateArgs<'_>) -> Result<(), CliError> {
    let taxonomy = commands::load_taxonomy(config)?;
    config.require_file(args.golds, "gold dataset")?;
    config.require_file(args.reports, "reports file")?;
    let golds = LabeledDataset::load(args.golds, taxonomy)?;

    let lines = read_report_lines(args.reports)?;
    let predictions: Vec<Prediction> = lines
        .iter()
        .map(|line| Prediction {
            sample_id: line.id.clone(),
            labels: line.labels.iter().cloned().collect(),
        })
        .collect();

    // Alignment: every report needs a gold; golds without reports are
    // tolerated up to --allow-missing.
    let predicted_ids: BTreeSet<&str> = predictions.iter().map(|p| p.sample_id.as_str()).collect();
    let missing: Vec<String> = golds
        .samples
        .iter()
        .filter(|s| !predicted_ids.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if missing.len() > args.allow_missing {
        return Err(CliError::config(format!(
            "{} gold sample(s) have no report (allowed: {}); first missing: {}",
            missing.len(),
            args.allow_missing,
            missing.first().map(String::as_str).unwrap_or("-")
        )));
    }

    let universe = if args.full_universe {
        Universe::FullTaxonomy
    } else {
        Universe::GoldPresent
    };
    let type_level = macro_metrics(&predictions, &golds, MetricLevel::Type, universe)?;
    let category_level = macro_metrics(&predictions, &golds, MetricLevel::Category, universe)?;
    let fewshot = fewshot_report(
        &type_level,
        &golds,
        args.tail_boundary,
        args.coverage_threshold,
    );

    // Recall@k from trace sidecars, when the traces carry routing.
    let trace_base = args.reports.parent().unwrap_or(Path::new("."));
    let mut routings: Vec<RoutingRecord> = Vec::new();
    for line in &lines {
        let trace_path = trace_base.join(&line.trace_ref);
        if !trace_path.is_file() {
            continue;
        }
        let Ok(text) = std::fs::read_to_string(&trace_path) else {
            continue;
        };
        let Ok(report) = serde_json::from_str::<DetectionReport>(&text) else {
            log::warn!("unreadable trace {}, skipped", trace_path.display());
            continue;
        };
        if let Some(routing) = report.trace.routing {
            routings.push(RoutingRecord {
                sample_id: line.id.clone(),
                ranked_categories: routing.ranked_categories,
            });
        }
    }
    let recall = if routings.is_empty() {
        None
    } else {
        Some(RecallAtK {
            k: config.k,
            score: recall_at_k(&routings, &golds, config.k)?,
            routed_samples: routings.len(),
        })
    };

    std::fs::create_dir_all(&config.output_dir)?;
    let document = MetricsDocument {
        type_level: &type_level,
        category_level: &category_level,
        recall_at_k: recall.as_ref(),
        fewshot: &fewshot,
        evaluated_samples: predictions.len(),
        missing_report_ids: &missing,
    };
    let metrics_path = config.output_dir.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&document).map_err(|e| CliError::config(e.to_string()))?,
    )?;

    let mut table = render_table(&[&type_level, &category_level], Some(&fewshot));
    if let Some(recall) = &recall {
        table.push_str(&format!(
            "Recall@{} over {} routed samples: {:.2}%\n",
            recall.k,
            recall.routed_samples,
            recall.score * 100.0
        ));
    }
    std::fs::write(config.output_dir.join("metrics.txt"), &table)?;

    let mut per_label = String::new();
    for (level_name, report) in [("type", &type_level), ("category", &category_level)] {
        for stats in report.per_label.values() {
            let line = PerLabelLine {
                level: level_name,
                label: &stats.label,
                tp: stats.tp,
                fp: stats.fp,
                fn_count: stats.fn_count,
                precision: stats.precision,
                recall: stats.recall,
                f1: stats.f1,
                support: stats.support(),
            };
            per_label.push_str(&serde_json::to_string(&line).expect("line serializes"));
            per_label.push('\n');
        }
    }
    std::fs::write(config.output_dir.join("per_label.jsonl"), per_label)?;

    print!("{table}");
    println!("metrics written to {}", metrics_path.display());
    Ok(())
}
