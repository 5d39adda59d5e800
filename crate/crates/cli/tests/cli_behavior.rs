//! CLI contract tests: exit codes (0 success, 2 config/validation, 3
//! provider/transport), store overwrite protection, stage ordering,
//! resumability, and the k-override report nesting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("configs")
        .join("demo")
        .canonicalize()
        .unwrap()
}

fn write_run_config(dir: &Path, dataset: &Path) -> PathBuf {
    let demo = demo_dir();
    let config = format!(
        r#"seed = 7

[paths]
taxonomy = "{taxonomy}"
dataset = "{dataset}"
kb_store = "{out}/kb"
prompt_store = "{out}/prompts"
output_dir = "{out}/reports"

[pipeline]
k = 3
r = 9

[evolution]
population = 4
iterations = 2
elite_ratio = 0.25
eval_subsample = 12
"#,
        taxonomy = demo.join("taxonomy.toml").display(),
        dataset = dataset.display(),
        out = dir.display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn cli(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwe-scout"))
        .arg("--config")
        .arg(config)
        .arg("--providers")
        .arg(demo_dir().join("providers.toml"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn missing_dataset_path_exits_2_with_path_in_message() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nope").join("missing.jsonl");
    let config = write_run_config(dir.path(), &ghost);
    let output = cli(&config, &["build-kb"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(
        stderr(&output).contains("missing.jsonl"),
        "message must name the path: {}",
        stderr(&output)
    );
}

#[test]
fn build_kb_refuses_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    let entries = dir.path().join("kb").join("entries.jsonl");
    let before = std::fs::read(&entries).unwrap();
    let modified_before = std::fs::metadata(&entries).unwrap().modified().unwrap();

    let rerun = cli(&config, &["build-kb"]);
    assert_eq!(rerun.status.code(), Some(2));
    assert_eq!(std::fs::read(&entries).unwrap(), before, "store touched");
    assert_eq!(
        std::fs::metadata(&entries).unwrap().modified().unwrap(),
        modified_before
    );

    assert_eq!(cli(&config, &["build-kb", "--force"]).status.code(), Some(0));
}

#[test]
fn stage2_without_stage1_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    let output = cli(&config, &["evolve", "--stage", "2"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("stage 1"));
}

#[test]
fn evolve_is_resumable_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    assert_eq!(cli(&config, &["evolve"]).status.code(), Some(0));
    let router = dir.path().join("prompts").join("router.json");
    let before = std::fs::read(&router).unwrap();

    let rerun = cli(&config, &["evolve"]);
    assert_eq!(rerun.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&rerun.stdout).into_owned();
    assert!(stdout.contains("skipping"), "rerun should skip: {stdout}");
    assert_eq!(std::fs::read(&router).unwrap(), before);
}

#[test]
fn detect_empty_input_exits_0_with_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    assert_eq!(cli(&config, &["evolve"]).status.code(), Some(0));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "# nothing here\n").unwrap();
    let output = cli(&config, &["detect", "--input", empty.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("0 samples"));
    let reports = dir.path().join("reports").join("reports.jsonl");
    assert_eq!(std::fs::read_to_string(reports).unwrap(), "");
}

#[test]
fn detect_k_override_produces_nested_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    assert_eq!(cli(&config, &["evolve"]).status.code(), Some(0));
    let corpus = demo_dir().join("corpus.jsonl");

    let mut by_k: Vec<BTreeMap<String, BTreeSet<String>>> = Vec::new();
    for k in ["1", "3"] {
        let output = cli(
            &config,
            &["detect", "--input", corpus.to_str().unwrap(), "--k", k],
        );
        assert_eq!(output.status.code(), Some(0));
        let text =
            std::fs::read_to_string(dir.path().join("reports").join("reports.jsonl")).unwrap();
        let mut labels_by_id = BTreeMap::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let id = v["id"].as_str().unwrap().to_string();
            let labels: BTreeSet<String> = v["labels"]
                .as_array()
                .unwrap()
                .iter()
                .map(|l| l.as_str().unwrap().to_string())
                .filter(|l| l != "BENIGN")
                .collect();
            labels_by_id.insert(id, labels);
        }
        by_k.push(labels_by_id);
    }
    for (id, at_k1) in &by_k[0] {
        let at_k3 = &by_k[1][id];
        assert!(at_k1.is_subset(at_k3), "{id}: {at_k1:?} not within {at_k3:?}");
    }
}

#[test]
fn evaluate_rejects_missing_reports_beyond_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));
    assert_eq!(cli(&config, &["evolve"]).status.code(), Some(0));

    // Detect over a 9-sample slice of the corpus, evaluate against a
    // 10-sample gold file.
    let corpus_text = std::fs::read_to_string(demo_dir().join("corpus.jsonl")).unwrap();
    let lines: Vec<&str> = corpus_text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .take(10)
        .collect();
    let golds = dir.path().join("golds.jsonl");
    std::fs::write(&golds, lines.join("\n")).unwrap();
    let partial = dir.path().join("partial.jsonl");
    std::fs::write(&partial, lines[..9].join("\n")).unwrap();

    assert_eq!(
        cli(&config, &["detect", "--input", partial.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let reports = dir.path().join("reports").join("reports.jsonl");
    let strict = cli(
        &config,
        &[
            "evaluate",
            "--reports",
            reports.to_str().unwrap(),
            "--golds",
            golds.to_str().unwrap(),
        ],
    );
    assert_eq!(strict.status.code(), Some(2));
    assert!(stderr(&strict).contains("no report"));

    let tolerant = cli(
        &config,
        &[
            "evaluate",
            "--reports",
            reports.to_str().unwrap(),
            "--golds",
            golds.to_str().unwrap(),
            "--allow-missing",
            "1",
        ],
    );
    assert_eq!(tolerant.status.code(), Some(0));
}

#[test]
fn provider_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), &demo_dir().join("corpus.jsonl"));
    assert_eq!(cli(&config, &["build-kb"]).status.code(), Some(0));

    // A providers config whose scripted fixtures directory has no rules:
    // every chat call fails fatally, which maps to exit 3.
    let broken_fixtures = dir.path().join("broken");
    std::fs::create_dir_all(&broken_fixtures).unwrap();
    let providers = dir.path().join("providers.toml");
    std::fs::write(
        &providers,
        format!(
            "[execution]\nprovider = \"scripted\"\nfixtures_dir = \"{broken}\"\n\n[evolution]\nprovider = \"scripted\"\nfixtures_dir = \"{broken}\"\n\n[embedding]\nprovider = \"hash\"\ndim = 64\n",
            broken = broken_fixtures.display()
        ),
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_cwe-scout"))
        .arg("--config")
        .arg(&config)
        .arg("--providers")
        .arg(&providers)
        .args(["evolve", "--stage", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", stderr(&output));
}
