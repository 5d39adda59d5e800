//! Run configuration: paths, pipeline parameters, split fractions, and the
//! evolution budget. Relative paths resolve against the config file's
//! directory so a run directory stays relocatable.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use cwe_scout::corpus::{NegativeRatios, SplitFractions};
use cwe_scout::evolution::EvolutionConfig;
use cwe_scout::structuring::StructuringBackend;

use crate::error::CliError;

#[derive(Debug, Deserialize)]
struct PathsDoc {
    taxonomy: PathBuf,
    dataset: PathBuf,
    kb_store: PathBuf,
    prompt_store: PathBuf,
    output_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
struct PipelineDoc {
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_r")]
    r: usize,
}

fn default_k() -> usize {
    3
}

fn default_r() -> usize {
    9
}

impl Default for PipelineDoc {
    fn default() -> Self {
        PipelineDoc {
            k: default_k(),
            r: default_r(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct SplitDoc {
    train: f64,
    val: f64,
    test: f64,
}

impl Default for SplitDoc {
    fn default() -> Self {
        SplitDoc {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Deserialize)]
struct EvolutionDoc {
    #[serde(default = "default_population")]
    population: usize,
    #[serde(default = "default_iterations")]
    iterations: u32,
    #[serde(default = "default_elite_ratio")]
    elite_ratio: f64,
    #[serde(default = "default_subsample")]
    eval_subsample: usize,
}

fn default_population() -> usize {
    8
}

fn default_iterations() -> u32 {
    5
}

fn default_elite_ratio() -> f64 {
    0.25
}

fn default_subsample() -> usize {
    32
}

impl Default for EvolutionDoc {
    fn default() -> Self {
        EvolutionDoc {
            population: default_population(),
            iterations: default_iterations(),
            elite_ratio: default_elite_ratio(),
            eval_subsample: default_subsample(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CorpusDoc {
    #[serde(default = "default_ratio")]
    clean_ratio: f64,
    #[serde(default = "default_ratio")]
    hard_negative_ratio: f64,
}

fn default_ratio() -> f64 {
    1.0
}

impl Default for CorpusDoc {
    fn default() -> Self {
        CorpusDoc {
            clean_ratio: default_ratio(),
            hard_negative_ratio: default_ratio(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct StructuringDoc {
    #[serde(default)]
    backend: StructuringBackend,
}

#[derive(Debug, Deserialize)]
struct RunConfigDoc {
    #[serde(default)]
    seed: u64,
    paths: PathsDoc,
    #[serde(default)]
    pipeline: PipelineDoc,
    #[serde(default)]
    split: Option<SplitDoc>,
    #[serde(default)]
    evolution: EvolutionDoc,
    #[serde(default)]
    corpus: CorpusDoc,
    #[serde(default)]
    structuring: StructuringDoc,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub taxonomy_path: PathBuf,
    pub dataset_path: PathBuf,
    pub kb_store: PathBuf,
    pub prompt_store: PathBuf,
    pub output_dir: PathBuf,
    pub k: usize,
    pub r: usize,
    pub split: SplitFractions,
    pub evolution: EvolutionConfig,
    pub ratios: NegativeRatios,
    pub structuring_backend: StructuringBackend,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("read config {}: {e}", path.display())))?;
        let doc: RunConfigDoc = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("parse config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let split_doc = doc.split.unwrap_or_default();
        let split = SplitFractions::new(split_doc.train, split_doc.val, split_doc.test)
            .map_err(|e| CliError::config(e.to_string()))?;
        let seed = seed_override.unwrap_or(doc.seed);

        let config = RunConfig {
            seed,
            taxonomy_path: resolve(&doc.paths.taxonomy),
            dataset_path: resolve(&doc.paths.dataset),
            kb_store: resolve(&doc.paths.kb_store),
            prompt_store: resolve(&doc.paths.prompt_store),
            output_dir: resolve(&doc.paths.output_dir),
            k: doc.pipeline.k,
            r: doc.pipeline.r,
            split,
            evolution: EvolutionConfig {
                population: doc.evolution.population,
                iterations: doc.evolution.iterations,
                elite_ratio: doc.evolution.elite_ratio,
                k: doc.pipeline.k,
                eval_subsample: doc.evolution.eval_subsample,
                seed,
            },
            ratios: NegativeRatios {
                clean: doc.corpus.clean_ratio,
                hard: doc.corpus.hard_negative_ratio,
            },
            structuring_backend: doc.structuring.backend,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.k < 1 {
            return Err(CliError::config("pipeline.k must be at least 1"));
        }
        if self.r < 3 {
            return Err(CliError::config("pipeline.r must be at least 3"));
        }
        self.evolution
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    /// Input paths must exist before a command starts.
    pub fn require_file(&self, path: &Path, what: &str) -> Result<(), CliError> {
        if !path.is_file() {
            return Err(CliError::config(format!(
                "{what} not found at {}",
                path.display()
            )));
        }
        Ok(())
    }

    pub fn require_dir(&self, path: &Path, what: &str) -> Result<(), CliError> {
        if !path.is_dir() {
            return Err(CliError::config(format!(
                "{what} not found at {}",
                path.display()
            )));
        }
        Ok(())
    }
}
