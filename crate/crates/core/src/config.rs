//! Single TOML configuration file covering every stage.
//!
//! ```toml
//! intimacy_cache = "out/intimacy.bin"
//!
//! [corpus]
//! max_seq_len = 128
//!
//! [train]
//! gamma = 0.5
//! ```
//!
//! Missing tables and keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::link_analysis::LinkConfig;
use crate::pair_miner::SamplingConfig;
use crate::retrieval::RetrievalConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Where to read or write the intimacy matrix; computed fresh when absent.
    pub intimacy_cache: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub link: LinkConfig,
    pub sampling: SamplingConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
