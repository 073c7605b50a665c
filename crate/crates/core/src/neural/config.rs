use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::Vocabulary;

/// Decoder-only transformer hyperparameters.
///
/// `acoustic_groups == 0` builds a token model with one output head over the
/// semantic vocabulary. `acoustic_groups == K > 0` builds a frame model whose
/// acoustic positions embed `K` group codes of width `d_model / K` each and
/// whose `K` output heads each predict one group code (plus eos).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub context_len: usize,
    pub semantic_vocab: Vocabulary,
    pub n_output_heads: usize,
    pub acoustic_groups: usize,
    /// Content codes per group; the group vocabulary appends one eos code.
    pub group_codebook: usize,
    /// Standard deviation of the normal weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub pos_init: PosInit,
    /// Rotary relative-position encoding of queries and keys, on top of the
    /// learned absolute positions.
    #[serde(default)]
    pub rotary: bool,
    /// Each separator token restarts position counting at zero, so the
    /// segments on either side share position ids.
    #[serde(default)]
    pub position_reset: bool,
}

/// Starting values of the learned position table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosInit {
    Normal,
    #[default]
    Sinusoidal,
}

fn default_init_std() -> f64 {
    0.05
}

impl ModelConfig {
    /// Desk-scale token model: 2 layers, 4 heads, width 64.
    pub fn converter(semantic_content: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout: 0.0,
            context_len: 512,
            semantic_vocab: Vocabulary::semantic(semantic_content),
            n_output_heads: 1,
            acoustic_groups: 0,
            group_codebook: 0,
            init_std: default_init_std(),
            pos_init: PosInit::default(),
            rotary: true,
            position_reset: true,
        }
    }

    /// Desk-scale frame model with `groups` heads over `codebook` codes.
    pub fn speaker(semantic_content: usize, groups: usize, codebook: usize) -> Self {
        ModelConfig {
            n_output_heads: groups,
            acoustic_groups: groups,
            group_codebook: codebook,
            ..ModelConfig::converter(semantic_content)
        }
    }

    /// The large configuration: 12 layers, 16 heads, width 1024, 16 groups of
    /// 1024 codes for the frame model.
    pub fn paper_scale(semantic_content: usize, speaker: bool) -> Self {
        let base = ModelConfig {
            n_layers: 12,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            dropout: 0.1,
            context_len: 4096,
            ..ModelConfig::converter(semantic_content)
        };
        if speaker {
            ModelConfig {
                n_output_heads: 16,
                acoustic_groups: 16,
                group_codebook: 1024,
                ..base
            }
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2".into());
        }
        if self.semantic_vocab.separator().is_none() || self.semantic_vocab.eos().is_none() {
            return bad("semantic vocabulary needs separator and eos ids".into());
        }
        if self.acoustic_groups == 0 {
            if self.n_output_heads != 1 {
                return bad("a token model has exactly one output head".into());
            }
        } else {
            if self.d_model % self.acoustic_groups != 0 {
                return bad(format!(
                    "d_model {} not divisible by {} groups",
                    self.d_model, self.acoustic_groups
                ));
            }
            if self.n_output_heads != self.acoustic_groups {
                return bad("a frame model has one output head per group".into());
            }
            if self.group_codebook == 0 {
                return bad("group_codebook must be positive".into());
            }
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn is_acoustic(&self) -> bool {
        self.acoustic_groups > 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn group_embed_dim(&self) -> usize {
        if self.acoustic_groups == 0 {
            0
        } else {
            self.d_model / self.acoustic_groups
        }
    }

    pub fn group_vocab(&self) -> Option<Vocabulary> {
        self.is_acoustic()
            .then(|| Vocabulary::acoustic_group(self.group_codebook))
    }

    /// Logit count of every output head.
    pub fn head_vocab(&self) -> usize {
        if self.is_acoustic() {
            self.group_codebook + 1
        } else {
            self.semantic_vocab.size()
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        let per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
        let group_tables = if self.is_acoustic() {
            self.acoustic_groups * (self.group_codebook + 1) * self.group_embed_dim()
        } else {
            0
        };
        self.semantic_vocab.size() * d
            + group_tables
            + self.context_len * d
            + self.n_layers * per_layer
            + 2 * d
            + self.n_output_heads * (d * self.head_vocab() + self.head_vocab())
    }
}
