//! The four-stage pyramid classifier.
//!
//! A stride-4 convolutional stem turns an `[h,w,3]` image into the first
//! stage's patch grid. Each stage runs a string of residual blocks (hyper-
//! graph convolution then a convolutional FFN, both pre-norm), and a
//! stride-2 conv halves the grid between stages. Global average pooling
//! and a linear map produce the logits.
//!
//! All learnable state lives in a [`ParamStore`], a name-ordered map of
//! tensors, so saving, loading, counting and tape-watching are uniform over
//! every architecture variant.

mod model;
mod params;

pub use model::{mult_adds, stage_grid_sizes, CapturedHead, Model};
pub use params::{count_params_for, init_params, ParamStore};

use serde::{Deserialize, Serialize};

use crate::hypergraph::HypergraphConfig;
use crate::{Error, Result};

/// Architecture hyperparameters. Serialized as JSON for the CLI; the
/// presets below mirror the published tiny/small/medium/base ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Stage widths.
    pub channels: [usize; 4],
    /// Blocks per stage.
    pub blocks: [usize; 4],
    /// Heads per stage.
    pub heads: [usize; 4],
    /// Per-head width.
    pub d_head: usize,
    /// Hypergraph window side.
    pub window: usize,
    /// Cluster edges per window.
    pub centroids: usize,
    /// Dilated lattice side.
    pub kernel: usize,
    /// Dilation rates.
    pub rates: Vec<usize>,
    /// FFN expansion factor.
    pub ffn_ratio: usize,
    pub classes: usize,
    /// Cosine norm floor.
    pub eps: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            channels: [48, 96, 240, 480],
            blocks: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            d_head: 24,
            ..Self::defaults()
        }
    }

    pub fn small() -> Self {
        Self {
            name: "small".into(),
            channels: [64, 128, 320, 640],
            blocks: [3, 3, 9, 3],
            heads: [4, 8, 16, 32],
            d_head: 32,
            ..Self::defaults()
        }
    }

    pub fn medium() -> Self {
        Self {
            name: "medium".into(),
            channels: [96, 192, 384, 768],
            blocks: [4, 4, 14, 4],
            heads: [4, 8, 16, 32],
            d_head: 32,
            ..Self::defaults()
        }
    }

    pub fn base() -> Self {
        Self {
            name: "base".into(),
            channels: [96, 192, 384, 768],
            blocks: [6, 6, 24, 6],
            heads: [5, 10, 20, 40],
            d_head: 32,
            ..Self::defaults()
        }
    }

    /// Small enough for finite-difference checks: two thin stages on a
    /// 28x28 input, ten classes.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            channels: [6, 8, 8, 8],
            blocks: [1, 1, 0, 0],
            heads: [2, 2, 2, 2],
            d_head: 4,
            ffn_ratio: 2,
            classes: 10,
            ..Self::defaults()
        }
    }

    fn defaults() -> Self {
        Self {
            name: String::new(),
            channels: [0; 4],
            blocks: [0; 4],
            heads: [0; 4],
            d_head: 0,
            window: 7,
            centroids: 4,
            kernel: 3,
            rates: vec![1, 2, 3],
            ffn_ratio: 4,
            classes: 1000,
            eps: 1e-12,
            seed: 0,
        }
    }

    /// Look a preset up by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "medium" => Some(Self::medium()),
            "base" => Some(Self::base()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// The hypergraph knobs shared by every stage.
    pub fn hypergraph(&self) -> HypergraphConfig {
        HypergraphConfig {
            window: self.window,
            centroids: self.centroids,
            kernel: self.kernel,
            rates: self.rates.clone(),
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hypergraph().validate()?;
        if self.kernel < 3 {
            return Err(Error::Config("dilated kernel must be at least 3".into()));
        }
        for (s, &ch) in self.channels.iter().enumerate() {
            if ch == 0 || ch % 2 != 0 {
                // the stem's intermediate width is channels[0]/2, and even
                // widths keep every stage's halves aligned
                return Err(Error::Config(format!(
                    "stage {s} width {ch} must be positive and even"
                )));
            }
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 && self.blocks[s] > 0 {
                return Err(Error::Config(format!("stage {s} has blocks but no heads")));
            }
        }
        if self.blocks.iter().all(|&b| b == 0) {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.d_head == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("d_head and ffn_ratio must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Parse a config from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["tiny", "small", "medium", "base", "toy"] {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, name);
        }
        assert!(ModelConfig::preset("giant").is_none());
    }

    #[test]
    fn json_round_trips() {
        let cfg = ModelConfig::tiny();
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rejects_broken_configs() {
        let mut odd = ModelConfig::tiny();
        odd.channels[2] = 241;
        assert!(odd.validate().is_err());

        let mut empty = ModelConfig::tiny();
        empty.blocks = [0; 4];
        assert!(empty.validate().is_err());

        let mut no_rates = ModelConfig::tiny();
        no_rates.rates.clear();
        assert!(no_rates.validate().is_err());

        let mut one_class = ModelConfig::tiny();
        one_class.classes = 1;
        assert!(one_class.validate().is_err());

        assert!(ModelConfig::from_json("{\"name\":3}").is_err());
    }
}
