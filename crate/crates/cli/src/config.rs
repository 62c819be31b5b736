//! Effective configuration: command-line flags override the config file,
//! which overrides built-in defaults.

use std::path::{Path, PathBuf};

use pvscan_core::autolabel::TriageConfig;
use pvscan_core::finetune::ExportProfile;
use pvscan_core::imagery::fetch::{DEFAULT_BASE_URL, DEFAULT_KEY_ENV};
use pvscan_core::imagery::{DEFAULT_SCENE_SIZE, DEFAULT_ZOOM};
use pvscan_core::inference::BackendConfig;
use pvscan_core::prompting::DEFAULT_SHOTS;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_FILE_NAME: &str = "pvscan.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub endpoint: String,
    pub seed: u64,
    pub timeout_secs: u32,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://overpass-api.de/api/interpreter".into(),
            seed: 0,
            timeout_secs: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagerySettings {
    pub zoom: u8,
    pub size: u32,
    pub base_url: String,
    pub map_type: String,
    pub key_env: String,
}

impl Default for ImagerySettings {
    fn default() -> Self {
        Self {
            zoom: DEFAULT_ZOOM,
            size: DEFAULT_SCENE_SIZE,
            base_url: DEFAULT_BASE_URL.into(),
            map_type: "satellite".into(),
            key_env: DEFAULT_KEY_ENV.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub k: usize,
    pub temperature: f64,
    pub example_images: bool,
    /// JSON template file; the built-in template when unset.
    pub template: Option<PathBuf>,
    /// Example bank (JSON lines); the built-in bank when unset.
    pub examples: Option<PathBuf>,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_SHOTS,
            temperature: 0.0,
            example_images: false,
            template: None,
            examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSettings {
    pub ratio: f64,
    pub seed: u64,
    pub stratified: bool,
    pub profile: ExportProfile,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 0,
            stratified: true,
            profile: ExportProfile::OpenaiChat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub bind: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ingest: IngestSettings,
    pub imagery: ImagerySettings,
    pub prompt: PromptSettings,
    pub backend: BackendConfig,
    pub triage: TriageConfig,
    pub export: ExportSettings,
    pub serve: ServeSettings,
}

impl Config {
    /// Reads `explicit` if given, else `<data_dir>/pvscan.toml` if present,
    /// else defaults.
    pub fn load(explicit: Option<&Path>, data_dir: &Path) -> Result<Self, ConfigError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = data_dir.join(CONFIG_FILE_NAME);
                if !p.exists() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse { path, source })
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Relative paths in the file are resolved against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.prompt.template,
            &mut self.prompt.examples,
            &mut self.backend.fixtures_dir,
            &mut self.serve.static_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.triage
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.export.ratio > 0.0 && self.export.ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "export.ratio {} must lie strictly between 0 and 1",
                self.export.ratio
            )));
        }
        if self.imagery.size == 0 || !self.imagery.size.is_multiple_of(4) {
            return Err(ConfigError::Invalid(format!(
                "imagery.size {} must be positive and divisible by 4",
                self.imagery.size
            )));
        }
        if !(0.0..=2.0).contains(&self.prompt.temperature) {
            return Err(ConfigError::Invalid(format!(
                "prompt.temperature {} is outside [0, 2]",
                self.prompt.temperature
            )));
        }
        if self.backend.parallelism == 0 {
            return Err(ConfigError::Invalid(
                "backend.parallelism must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
