//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use temed_core::llm_gateway::{configure_provider, Provider, ProviderKind};
use temed_core::vorc::VorcBudget;

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_PARALLELISM: usize = 1;

/// On-disk layout of the `--config` file. Relative paths are taken relative
/// to the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    schema: Option<PathBuf>,
    templates: Option<PathBuf>,
    corpus: Option<PathBuf>,
    shots: Option<PathBuf>,
    budget: Option<u32>,
    parallelism: Option<usize>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    provider: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub shots: Option<PathBuf>,
    pub provider: BTreeMap<String, String>,
    pub budget: VorcBudget,
    pub parallelism: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = RunConfig {
            parallelism: DEFAULT_PARALLELISM,
            seed: DEFAULT_SEED,
            output_dir: PathBuf::from("."),
            ..Default::default()
        };
        let Some(path) = path else { return Ok(cfg) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        cfg.schema = rebase(file.schema);
        cfg.templates = rebase(file.templates);
        cfg.corpus = rebase(file.corpus);
        cfg.shots = rebase(file.shots);
        if let Some(dir) = rebase(file.output_dir) {
            cfg.output_dir = dir;
        }
        if let Some(b) = file.budget {
            cfg.budget = VorcBudget { max_correction_prompts: b };
        }
        if let Some(p) = file.parallelism {
            cfg.parallelism = p;
        }
        if let Some(s) = file.seed {
            cfg.seed = s;
        }
        for (key, value) in file.provider {
            let text = match value {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            cfg.provider.insert(key, text);
        }
        // A replay script path is a file reference like the others.
        if let Some(script) = cfg.provider.get_mut("script") {
            let p = PathBuf::from(&*script);
            if p.is_relative() {
                *script = base.join(p).display().to_string();
            }
        }
        Ok(cfg)
    }

    pub fn replay_override(&mut self, script: Option<PathBuf>) {
        if let Some(script) = script {
            self.provider.clear();
            self.provider.insert("kind".into(), "replay".into());
            self.provider.insert("script".into(), script.display().to_string());
        }
    }

    pub fn provider(&self) -> Result<Provider, CliError> {
        let kind: ProviderKind = self
            .provider
            .get("kind")
            .ok_or_else(|| CliError::Usage("no provider configured (set [provider] kind or pass --replay)".into()))?
            .parse()
            .map_err(CliError::Usage)?;
        let mut settings = self.provider.clone();
        settings.remove("kind");
        configure_provider(kind, &settings).map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Returns `value` if set, failing with the flag name otherwise. The path
/// must exist.
pub fn require_path(value: Option<&PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    let p = value.ok_or_else(|| CliError::Usage(format!("missing {flag} (flag or config key)")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{flag}: {} does not exist", p.display())));
    }
    Ok(p.clone())
}
