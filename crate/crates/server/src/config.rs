//! Settings resolved from command-line flags, environment variables and an
//! optional TOML file, in that order of precedence.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

pub const ENV_STORAGE_ROOT: &str = "EXACT_STORAGE_ROOT";
pub const ENV_BIND: &str = "EXACT_BIND";
pub const ENV_DB_PATH: &str = "EXACT_DB_PATH";
pub const ENV_BASE_URL: &str = "EXACT_BASE_URL";
pub const ENV_CONFIG: &str = "EXACT_CONFIG";

pub const DEFAULT_BIND: &str = "127.0.0.1:8000";
pub const DEFAULT_STORAGE_ROOT: &str = "exact-data";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid bind address {0:?}")]
    Bind(String),
}

/// Contents of the config file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub storage_root: Option<PathBuf>,
    pub bind: Option<String>,
    pub db_path: Option<PathBuf>,
    pub base_url: Option<String>,
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub storage_root: Option<PathBuf>,
    pub bind: Option<String>,
    pub db_path: Option<PathBuf>,
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub storage_root: PathBuf,
    pub bind: SocketAddr,
    pub db_path: Option<PathBuf>,
    /// Public URL of this instance; derived from the bound address if unset.
    pub base_url: Option<String>,
}

impl Config {
    /// Resolves settings using `env` for variable lookup.
    pub fn resolve(flags: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let path = flags.config.clone().or_else(|| env(ENV_CONFIG).map(PathBuf::from));
        let file = match &path {
            Some(p) => load_file(p)?,
            None => FileConfig::default(),
        };
        let storage_root = flags
            .storage_root
            .clone()
            .or_else(|| env(ENV_STORAGE_ROOT).map(PathBuf::from))
            .or(file.storage_root)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORAGE_ROOT));
        let bind = flags
            .bind
            .clone()
            .or_else(|| env(ENV_BIND))
            .or(file.bind)
            .unwrap_or_else(|| DEFAULT_BIND.to_string());
        let bind = bind.parse().map_err(|_| ConfigError::Bind(bind))?;
        let db_path = flags
            .db_path
            .clone()
            .or_else(|| env(ENV_DB_PATH).map(PathBuf::from))
            .or(file.db_path);
        let base_url = flags.base_url.clone().or_else(|| env(ENV_BASE_URL)).or(file.base_url);
        Ok(Config {
            storage_root,
            bind,
            db_path,
            base_url,
        })
    }

    pub fn from_env(flags: &Overrides) -> Result<Self, ConfigError> {
        Self::resolve(flags, |k| std::env::var(k).ok())
    }

    pub fn instance_config(&self, base_url: &str) -> exact_core::InstanceConfig {
        let mut c = exact_core::InstanceConfig::new(&self.storage_root);
        if let Some(db) = &self.db_path {
            c.db_path = Some(db.clone());
        }
        c.base_url = base_url.trim_end_matches('/').to_string();
        c
    }
}

fn load_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.into(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.into(),
        source,
    })
}
