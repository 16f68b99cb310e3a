use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ShareConfig;
use crate::error::{Error, Result};

/// Full architecture description.
///
/// JSON form: `{vocab, d, l, h, d_k, m, g, max_seq, d_ff}` where `d_ff` is a
/// scalar (same width every layer) or a list of `l` widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub max_seq: usize,
    pub share: ShareConfig,
    pub d_ff: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Widths {
    Uniform(usize),
    PerLayer(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    vocab: usize,
    d: usize,
    l: usize,
    h: usize,
    d_k: usize,
    m: usize,
    g: usize,
    max_seq: usize,
    d_ff: Widths,
}

impl TryFrom<RawConfig> for ModelConfig {
    type Error = Error;

    fn try_from(r: RawConfig) -> Result<Self> {
        let share = ShareConfig::new(r.l, r.h, r.m, r.g, r.d_k)?;
        let d_ff = match r.d_ff {
            Widths::Uniform(w) => vec![w; r.l],
            Widths::PerLayer(v) => v,
        };
        let cfg = ModelConfig {
            vocab: r.vocab,
            d_model: r.d,
            max_seq: r.max_seq,
            share,
            d_ff,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ModelConfig> for RawConfig {
    fn from(c: ModelConfig) -> Self {
        let uniform = c.d_ff.windows(2).all(|w| w[0] == w[1]);
        RawConfig {
            vocab: c.vocab,
            d: c.d_model,
            l: c.share.layers(),
            h: c.share.heads(),
            d_k: c.share.head_dim(),
            m: c.share.kv_layers(),
            g: c.share.kv_groups(),
            max_seq: c.max_seq,
            d_ff: if uniform && !c.d_ff.is_empty() {
                Widths::Uniform(c.d_ff[0])
            } else {
                Widths::PerLayer(c.d_ff)
            },
        }
    }
}

impl ModelConfig {
    /// Config with the same MLP width in every layer.
    pub fn uniform(vocab: usize, max_seq: usize, share: ShareConfig, d_ff: usize) -> Result<Self> {
        let cfg = Self {
            vocab,
            d_model: share.heads() * share.head_dim(),
            max_seq,
            share,
            d_ff: vec![d_ff; share.layers()],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The Pythia-160M shape: 50304-token vocab, d = 768, 12 layers of 12
    /// heads, MLP width 3072, context 2048.
    pub fn pythia_160m() -> Self {
        let share = ShareConfig::mha(12, 12, 64).expect("valid shape");
        Self::uniform(50_304, 2048, share, 3072).expect("valid shape")
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::config("vocab", "must be at least 1"));
        }
        if self.d_model != self.share.heads() * self.share.head_dim() {
            return Err(Error::config(
                "d",
                format!(
                    "must equal h·d_k = {}·{} (got {})",
                    self.share.heads(),
                    self.share.head_dim(),
                    self.d_model
                ),
            ));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq", "must be at least 1"));
        }
        if self.d_ff.len() != self.share.layers() {
            return Err(Error::config(
                "d_ff",
                format!(
                    "expected {} widths, got {}",
                    self.share.layers(),
                    self.d_ff.len()
                ),
            ));
        }
        if let Some((n, w)) = self
            .d_ff
            .iter()
            .enumerate()
            .find(|(_, &w)| w < self.d_model)
        {
            return Err(Error::config(
                "d_ff",
                format!("layer {n} width {w} is below d = {}", self.d_model),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.share.layers()
    }

    /// Same architecture with a different sharing scheme (MLP widths kept).
    pub fn with_share(&self, share: ShareConfig) -> Result<Self> {
        if share.layers() != self.share.layers()
            || share.heads() != self.share.heads()
            || share.head_dim() != self.share.head_dim()
        {
            return Err(Error::config(
                "share",
                format!(
                    "target scheme {share} changes l, h or d_k of {}",
                    self.share
                ),
            ));
        }
        Ok(Self {
            share,
            ..self.clone()
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
