//! Command implementations and shared setup.

pub mod build_kb;
pub mod detect;
pub mod evaluate;
pub mod evolve;

use std::path::Path;
use std::sync::Arc;

use cwe_scout::corpus::LabeledDataset;
use cwe_scout::gateway::{Gateway, GatewayConfig};
use cwe_scout::structuring::{Structurer, StructuringBackend};
use cwe_scout::taxonomy::Taxonomy;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn load_taxonomy(config: &RunConfig) -> Result<Arc<Taxonomy>, CliError> {
    config.require_file(&config.taxonomy_path, "taxonomy config")?;
    Ok(Arc::new(Taxonomy::load(&config.taxonomy_path)?))
}

pub fn load_dataset(
    config: &RunConfig,
    taxonomy: Arc<Taxonomy>,
) -> Result<LabeledDataset, CliError> {
    config.require_file(&config.dataset_path, "dataset")?;
    Ok(LabeledDataset::load(&config.dataset_path, taxonomy)?)
}

pub fn build_gateway(providers_path: Option<&Path>) -> Result<Arc<Gateway>, CliError> {
    let path = providers_path
        .ok_or_else(|| CliError::config("this command requires --providers <path>"))?;
    if !path.is_file() {
        return Err(CliError::config(format!(
            "providers config not found at {}",
            path.display()
        )));
    }
    let doc = GatewayConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Arc::new(Gateway::from_config(&doc, base)?))
}

pub fn build_structurer(config: &RunConfig, gateway: &Arc<Gateway>) -> Arc<Structurer> {
    match config.structuring_backend {
        StructuringBackend::Rules => Arc::new(Structurer::rules()),
        StructuringBackend::Llm => Arc::new(Structurer::llm(Arc::clone(gateway))),
    }
}
