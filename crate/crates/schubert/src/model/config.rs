use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};

fn default_segment_types() -> usize {
    2
}

fn default_layer_norm_eps() -> Real {
    1e-12
}

/// The full architecture vector: layer count, hidden size, and one entry per
/// layer for head count, key/query size, value size and feed-forward size.
/// Every design dimension is lower-bounded by one; layers need not be alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: Vec<usize>,
    pub key_size: Vec<usize>,
    pub value_size: Vec<usize>,
    pub ff_size: Vec<usize>,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_segment_types")]
    pub segment_types: usize,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: Real,
}

impl ArchConfig {
    /// Same dimensions in every layer.
    pub fn uniform(
        layers: usize,
        hidden_size: usize,
        heads: usize,
        key_size: usize,
        value_size: usize,
        ff_size: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Self {
        ArchConfig {
            layers,
            hidden_size,
            heads: vec![heads; layers],
            key_size: vec![key_size; layers],
            value_size: vec![value_size; layers],
            ff_size: vec![ff_size; layers],
            vocab_size,
            max_positions,
            segment_types: default_segment_types(),
            layer_norm_eps: default_layer_norm_eps(),
        }
    }

    /// The classic base encoder: 12 layers, hidden 768, 12 heads,
    /// key = value = 64, feed-forward 3072, WordPiece vocab 30522.
    pub fn bert_base() -> Self {
        ArchConfig::uniform(12, 768, 12, 64, 64, 3072, 30522, 512)
    }

    /// Minutes-scale configuration used throughout the test suites.
    pub fn toy() -> Self {
        ArchConfig::uniform(4, 64, 4, 16, 16, 256, 512, 64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers < 1 {
            return fail("layers must be >= 1".into());
        }
        if self.hidden_size < 1 {
            return fail("hidden_size must be >= 1".into());
        }
        for (name, v) in [
            ("heads", &self.heads),
            ("key_size", &self.key_size),
            ("value_size", &self.value_size),
            ("ff_size", &self.ff_size),
        ] {
            if v.len() != self.layers {
                return fail(format!(
                    "{name} has {} entries but layers = {}",
                    v.len(),
                    self.layers
                ));
            }
            if let Some(i) = v.iter().position(|&x| x < 1) {
                return fail(format!("{name}[{i}] must be >= 1 (design dimensions are lower bounded by one)"));
            }
        }
        if self.vocab_size < 1 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.max_positions < 1 {
            return fail("max_positions must be >= 1".into());
        }
        if self.segment_types < 1 {
            return fail("segment_types must be >= 1".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ArchConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ArchConfig serializes")
    }
}
