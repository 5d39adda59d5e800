//! CLI error type carrying the process exit code: 2 for configuration and
//! validation problems, 3 for provider/transport failures.

use cwe_scout::corpus::CorpusError;
use cwe_scout::evolution::EvolutionError;
use cwe_scout::gateway::GatewayError;
use cwe_scout::kb::KbError;
use cwe_scout::metrics::EvalError;
use cwe_scout::pipeline::PipelineError;
use cwe_scout::structuring::StructuringError;
use cwe_scout::taxonomy::TaxonomyError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            code: EXIT_CONFIG,
        }
    }

    pub fn provider(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            code: EXIT_PROVIDER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

fn gateway_code(e: &GatewayError) -> i32 {
    match e {
        GatewayError::ProviderUnavailable { .. } => EXIT_PROVIDER,
        _ => EXIT_CONFIG,
    }
}

fn kb_code(e: &KbError) -> i32 {
    match e {
        KbError::Gateway(g) => gateway_code(g),
        _ => EXIT_CONFIG,
    }
}

fn pipeline_code(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Gateway(g) => gateway_code(g),
        PipelineError::Kb(k) => kb_code(k),
        _ => EXIT_CONFIG,
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError {
            code: gateway_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        CliError {
            code: kb_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError {
            code: pipeline_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<EvolutionError> for CliError {
    fn from(e: EvolutionError) -> Self {
        let code = match &e {
            EvolutionError::Gateway(g) => gateway_code(g),
            EvolutionError::Pipeline(p) => pipeline_code(p),
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<StructuringError> for CliError {
    fn from(e: StructuringError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(e.to_string())
    }
}
