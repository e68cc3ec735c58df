use thiserror::Error;

use temed_core::llm_gateway::GatewayError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input files.
    #[error("{0}")]
    Usage(String),
    /// The provider kept failing after all retries.
    #[error("{0}")]
    ProviderExhausted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::ProviderExhausted(_) => 3,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::ExhaustedRetries { .. } => CliError::ProviderExhausted(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        })*
    };
}

usage_from!(
    std::io::Error,
    temed_core::schema::SchemaError,
    temed_core::rextract::PromptError,
    temed_core::vorc::CorpusError,
    temed_core::dataset::DatasetError,
    temed_core::models::ModelError,
    temed_core::evalkit::EvalError
);
