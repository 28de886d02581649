use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl AttentionMode {
    pub fn is_causal(self) -> bool {
        self == AttentionMode::Causal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "bidirectional" | "bi" => Ok(AttentionMode::Bidirectional),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Shape of the transformer backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size including the special tokens.
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub precision: Precision,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 96,
            patch_dim: 16,
            max_len: 128,
            attention_mode: AttentionMode::Bidirectional,
            precision: Precision::F32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("patch_dim", self.patch_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= super::sequence::NUM_SPECIAL as usize {
            return Err(Error::Config("vocab_size must exceed the special-token count".into()));
        }
        Ok(())
    }

    /// Key-value pairs in a fixed order, as stored in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("patch_dim".into(), self.patch_dim.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("attention_mode".into(), self.attention_mode.as_str().into()),
            ("precision".into(), self.precision.as_str().into()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("config key {key} is not an integer")))
        };
        let cfg = Self {
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            vocab_size: num("vocab_size")?,
            patch_dim: num("patch_dim")?,
            max_len: num("max_len")?,
            attention_mode: get("attention_mode")?.parse()?,
            precision: get("precision")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Human-readable list of differing fields, empty when shapes agree.
    pub fn shape_diff(&self, other: &BackboneConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|((k, _), _)| k != "attention_mode" && k != "precision")
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k}: {a} != {b}"))
            .collect()
    }
}
