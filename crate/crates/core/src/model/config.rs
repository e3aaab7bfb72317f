use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where private patches attach to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// No patches: the plain shared backbone (the FedAvg configuration).
    None,
    Inner,
    Outer,
    Vertical,
    Horizontal,
}

impl InsertionMode {
    pub const PATCHED: [InsertionMode; 4] = [
        InsertionMode::Inner,
        InsertionMode::Outer,
        InsertionMode::Vertical,
        InsertionMode::Horizontal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InsertionMode::None => "none",
            InsertionMode::Inner => "inner",
            InsertionMode::Outer => "outer",
            InsertionMode::Vertical => "vertical",
            InsertionMode::Horizontal => "horizontal",
        }
    }

    /// Number of patch instances the mode needs for `n_layers` layers.
    pub fn instance_count(self, n_layers: usize) -> usize {
        match self {
            InsertionMode::None => 0,
            InsertionMode::Inner | InsertionMode::Outer => 2 * n_layers,
            InsertionMode::Horizontal => n_layers,
            InsertionMode::Vertical => 1,
        }
    }
}

impl fmt::Display for InsertionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InsertionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InsertionMode::None,
            "inner" => InsertionMode::Inner,
            "outer" => InsertionMode::Outer,
            "vertical" => InsertionMode::Vertical,
            "horizontal" => InsertionMode::Horizontal,
            other => {
                return Err(Error::config(
                    "model.insertion_mode",
                    format!("unknown mode `{other}`"),
                ))
            }
        })
    }
}

/// The function between a patch's down- and up-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    /// Projected attention layer: multi-head attention in the patch space.
    Pal,
    /// Elementwise activation (bottleneck adapter).
    LowRank,
}

impl PatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchKind::Pal => "pal",
            PatchKind::LowRank => "low_rank",
        }
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pal" => PatchKind::Pal,
            "low_rank" | "lr" => PatchKind::LowRank,
            other => {
                return Err(Error::config(
                    "model.patch_kind",
                    format!("unknown kind `{other}`"),
                ))
            }
        })
    }
}

fn default_pal_heads() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Filled in from the corpus vocabulary when left at 0 in a run config.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_patch: usize,
    pub insertion_mode: InsertionMode,
    pub patch_kind: PatchKind,
    #[serde(default = "default_pal_heads")]
    pub pal_heads: usize,
    pub n_shared_layers: usize,
}

impl ModelConfig {
    /// Small configuration used throughout the tests.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            vocab_size,
            max_seq_len: 16,
            d_patch: 4,
            insertion_mode: InsertionMode::None,
            patch_kind: PatchKind::LowRank,
            pal_heads: 2,
            n_shared_layers: 2,
        }
    }

    pub fn with_patches(mut self, mode: InsertionMode, kind: PatchKind) -> Self {
        self.insertion_mode = mode;
        self.patch_kind = kind;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_fedavg(&self) -> bool {
        self.insertion_mode == InsertionMode::None
    }

    /// Every violated constraint as `(field path, message)`, prefixed by `prefix`.
    pub fn issues(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push((format!("{prefix}{field}"), msg));
        if self.d_model < 2 {
            bad("d_model", "must be at least 2".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bad("n_heads", format!("must divide d_model = {}", self.d_model));
        }
        if self.n_layers == 0 {
            bad("n_layers", "must be at least 1".into());
        }
        if self.d_ff == 0 {
            bad("d_ff", "must be positive".into());
        }
        if self.max_seq_len < 4 {
            bad("max_seq_len", "must fit [CLS] q [SEP] a [SEP]".into());
        }
        if self.n_shared_layers > self.n_layers {
            bad(
                "n_shared_layers",
                format!("must be within [0, {}]", self.n_layers),
            );
        }
        if self.insertion_mode != InsertionMode::None {
            if self.d_patch == 0 || self.d_patch >= self.d_model {
                bad("d_patch", format!("must be in [1, {})", self.d_model));
            }
            if self.patch_kind == PatchKind::Pal
                && (self.pal_heads == 0 || !self.d_patch.is_multiple_of(self.pal_heads))
            {
                bad(
                    "pal_heads",
                    format!("must divide d_patch = {}", self.d_patch),
                );
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = self.issues("model.");
        if self.vocab_size < 5 {
            issues.push((
                "model.vocab_size".into(),
                "must cover the 4 reserved ids plus words".into(),
            ));
        }
        issues_to_result(issues)
    }
}

/// Collapses a list of `(path, message)` issues into one config error that
/// names every offending field.
pub fn issues_to_result(issues: Vec<(String, String)>) -> Result<()> {
    let Some((first, _)) = issues.first() else {
        return Ok(());
    };
    let path = first.clone();
    let message = issues
        .iter()
        .map(|(p, m)| format!("{p}: {m}"))
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::Config { path, message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_validates() {
        ModelConfig::toy(20).validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_all_reported() {
        let mut c = ModelConfig::toy(20).with_patches(InsertionMode::Outer, PatchKind::Pal);
        c.n_heads = 3;
        c.d_patch = 8;
        c.n_shared_layers = 5;
        let err = c.validate().unwrap_err().to_string();
        for field in ["model.n_heads", "model.d_patch", "model.n_shared_layers"] {
            assert!(err.contains(field), "{err}");
        }
    }

    #[test]
    fn pal_heads_must_divide_patch_size() {
        let mut c = ModelConfig::toy(20).with_patches(InsertionMode::Inner, PatchKind::Pal);
        c.d_patch = 3;
        c.pal_heads = 2;
        assert!(c.validate().is_err());
        c.patch_kind = PatchKind::LowRank;
        c.validate().unwrap();
    }

    #[test]
    fn instance_counts() {
        assert_eq!(InsertionMode::Inner.instance_count(3), 6);
        assert_eq!(InsertionMode::Outer.instance_count(3), 6);
        assert_eq!(InsertionMode::Horizontal.instance_count(3), 3);
        assert_eq!(InsertionMode::Vertical.instance_count(3), 1);
        assert_eq!(InsertionMode::None.instance_count(3), 0);
    }
}
