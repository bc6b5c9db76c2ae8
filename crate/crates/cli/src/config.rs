//! Pipeline configuration file (TOML) and run sidecars.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use histoatlas_core::atlas_index::BuildOptions;
use histoatlas_core::embedding_io::ExtractorEndpoint;
use histoatlas_core::evaluation::DEFAULT_N_VALUES;
use histoatlas_core::patching::PatchSpec;
use histoatlas_core::projection::TsneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_values: Vec<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            n_values: DEFAULT_N_VALUES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSection {
    /// Number of principal components for the reduced variant.
    pub pca_k: usize,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self { pca_k: 50 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patching: PatchSpec,
    pub embedding: ExtractorEndpoint,
    pub index: BuildOptions,
    pub evaluation: EvaluationSection,
    pub projection: TsneConfig,
    pub analytics: AnalyticsSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Validation(m) => CliError::Validation(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.patching.validate()?;
        self.embedding.validate()?;
        self.projection.validate()?;
        if self.evaluation.n_values.is_empty() || self.evaluation.n_values.contains(&0) {
            return Err(CliError::Validation("evaluation.n_values must be non-empty and positive".into()));
        }
        if self.analytics.pca_k == 0 {
            return Err(CliError::Validation("analytics.pca_k must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Writes `<command>.config.toml` (the resolved config, deterministic) and
/// `<command>.run.json` (timestamp and arguments) into `dir`.
pub fn write_sidecars(dir: &Path, command: &str, cfg: &PipelineConfig, args: &[String]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let write = |name: String, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write(format!("{command}.config.toml"), cfg.to_toml())?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let run = serde_json::json!({
        "command": command,
        "args": args,
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": secs,
    });
    write(format!("{command}.run.json"), serde_json::to_string_pretty(&run).expect("json") + "\n")
}
