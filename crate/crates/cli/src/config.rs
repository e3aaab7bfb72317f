//! Run and corpus configuration files.
//!
//! Both are TOML. A run config names the corpus directory, the seed, the
//! model and the federation settings:
//!
//! ```toml
//! seed = 1
//! corpus = "corpus"
//!
//! [model]
//! d_model = 32
//! n_heads = 2
//! n_layers = 2
//! d_ff = 64
//! max_seq_len = 32
//! d_patch = 8
//! insertion_mode = "horizontal"
//! patch_kind = "low_rank"
//! n_shared_layers = 2
//!
//! [federation]
//! rounds = 15
//! optimizer = { lr = 1e-3 }
//! ```
//!
//! A corpus config is either a full generator config or a `[desk]` table
//! with `scale` and `seed` selecting the built-in five-participant profile.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use patchfed_core::corpus::CorpusConfig;
use patchfed_core::federation::{ExperimentSpec, FederationConfig};
use patchfed_core::model::config::issues_to_result;
use patchfed_core::model::ModelConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus root. Relative paths resolve against the config file's
    /// directory when loaded from a file.
    pub corpus: PathBuf,
    pub model: ModelConfig,
    pub federation: FederationConfig,
}

impl RunConfig {
    pub fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            seed: self.seed,
            model: self.model.clone(),
            federation: self.federation.clone(),
        }
    }

    /// Every violated constraint as `(field path, message)`. The client
    /// count bounds `sample_size` when known.
    pub fn issues(&self, clients: Option<usize>) -> Vec<(String, String)> {
        let mut out = self.model.issues("model.");
        out.extend(self.federation.issues("federation.", clients));
        out
    }

    pub fn validate(&self, clients: Option<usize>) -> Result<()> {
        Ok(issues_to_result(self.issues(clients))?)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut config: RunConfig = parse_toml(text, origin)?;
        config.corpus = resolve(origin, &config.corpus);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeskFile {
    desk: DeskSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeskSpec {
    scale: f64,
    seed: u64,
}

/// Reads a corpus config: either a `[desk]` table or a full generator config.
pub fn load_corpus_config(path: &Path) -> Result<CorpusConfig> {
    corpus_config_from_toml(&read(path)?, path)
}

pub fn corpus_config_from_toml(text: &str, origin: &Path) -> Result<CorpusConfig> {
    let is_desk = text
        .parse::<toml::Table>()
        .is_ok_and(|t| t.contains_key("desk"));
    if is_desk {
        let d: DeskFile = parse_toml(text, origin)?;
        if !(d.desk.scale > 0.0 && d.desk.scale.is_finite()) {
            return Err(patchfed_core::Error::config("desk.scale", "must be positive").into());
        }
        Ok(CorpusConfig::desk(d.desk.scale, d.desk.seed))
    } else {
        parse_toml(text, origin)
    }
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| patchfed_core::Error::io(path, e).into())
}

/// Deserializes TOML, reporting the dotted path of the offending field.
pub(crate) fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Parse {
            path: origin.to_path_buf(),
            field: if field == "." { "(root)".into() } else { field },
            message: e.into_inner().to_string().trim_end().to_string(),
        }
    })
}

pub(crate) fn resolve(origin: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match origin.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(path),
        _ => path.to_path_buf(),
    }
}
