//! Service configuration: a TOML file with environment overrides.

use std::path::{Path, PathBuf};

use inpaint_core::backbone::Preset;
use inpaint_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_LISTEN: &str = "INPAINT_LISTEN";
pub const ENV_ARTIFACT_ROOT: &str = "INPAINT_ARTIFACT_ROOT";
pub const ENV_WORKERS: &str = "INPAINT_WORKERS";
pub const ENV_PRESET: &str = "INPAINT_PRESET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub artifact_root: PathBuf,
    /// Concurrent finetune/sampling jobs.
    pub workers: usize,
    pub preset: Preset,
    pub codec_factor: usize,
    pub init_seed: u64,
    /// Upload size limit in bytes.
    pub max_upload: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            artifact_root: PathBuf::from("artifacts"),
            workers: 2,
            preset: Preset::Small,
            codec_factor: 8,
            init_seed: 0,
            max_upload: 64 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`) and applies process environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        base.with_env(std::env::vars())
    }

    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ServiceError> {
        for (key, value) in vars {
            match key.as_str() {
                ENV_LISTEN => self.listen = value,
                ENV_ARTIFACT_ROOT => self.artifact_root = PathBuf::from(value),
                ENV_WORKERS => {
                    self.workers = value
                        .parse()
                        .map_err(|_| ServiceError::Config(format!("{ENV_WORKERS}={value} is not a count")))?
                }
                ENV_PRESET => {
                    self.preset = value
                        .parse()
                        .map_err(|e: inpaint_core::Error| ServiceError::Config(e.to_string()))?
                }
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 {
            return Err(ServiceError::Config("workers must be at least 1".into()));
        }
        self.pipeline().codec().map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            preset: self.preset,
            codec_factor: self.codec_factor,
            init_seed: self.init_seed,
            ..PipelineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env() {
        let cfg = ServiceConfig::from_toml("workers = 3\npreset = \"tiny\"\n").unwrap();
        assert_eq!((cfg.workers, cfg.preset), (3, Preset::Tiny));
        let cfg = cfg
            .with_env([
                (ENV_WORKERS.to_string(), "5".to_string()),
                (ENV_LISTEN.to_string(), "0.0.0.0:9000".to_string()),
                ("UNRELATED".to_string(), "x".to_string()),
            ])
            .unwrap();
        assert_eq!(cfg.workers, 5);
        assert_eq!(cfg.listen, "0.0.0.0:9000");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig::from_toml("bogus = 1").is_err());
        assert!(ServiceConfig::default()
            .with_env([(ENV_WORKERS.to_string(), "0".to_string())])
            .is_err());
        assert!(ServiceConfig::default()
            .with_env([(ENV_PRESET.to_string(), "huge".to_string())])
            .is_err());
    }
}
