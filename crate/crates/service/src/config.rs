use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "ITERMASK_PORT";
pub const ENV_MODEL_DIR: &str = "ITERMASK_MODEL_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Holds one subdirectory per model id with `main.ckpt`, `init.ckpt`
    /// and optionally `calibration.json`.
    pub model_dir: PathBuf,
    /// Calibration percentile used when a session asks for neither tau nor a percentile.
    pub default_percentile: f64,
    pub max_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            model_dir: PathBuf::from("models"),
            default_percentile: 80.0,
            max_sessions: 256,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> itermask::Result<Self> {
        toml::from_str(text).map_err(|e| itermask::Error::Config(e.to_string()))
    }

    /// Reads the config file (if any), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> itermask::Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| itermask::Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        base.with_overrides(|k| std::env::var(k).ok())
    }

    /// Applies `ITERMASK_PORT` and `ITERMASK_MODEL_DIR` from `lookup`.
    pub fn with_overrides(mut self, lookup: impl Fn(&str) -> Option<String>) -> itermask::Result<Self> {
        if let Some(port) = lookup(ENV_PORT) {
            self.port = port
                .trim()
                .parse()
                .map_err(|_| itermask::Error::Config(format!("{ENV_PORT}={port:?} is not a port")))?;
        }
        if let Some(dir) = lookup(ENV_MODEL_DIR) {
            self.model_dir = PathBuf::from(dir);
        }
        Ok(self)
    }
}
