use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Post-norm BERT layer.
    Classic,
    /// Widen to `h_intra` inside the block (teacher side).
    InvertedBottleneck,
    /// Narrow to `h_intra` inside the block; attention reads the wide map.
    Bottleneck,
    /// Bottleneck whose attention reads the narrowed map.
    BottleneckTiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    NoOp,
    Conv3Factorized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    NoNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Gelu,
    Relu,
}

/// Complete description of one encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_layers: usize,
    pub h_embedding: usize,
    /// Width of the feature maps passed between blocks.
    pub h_inter: usize,
    /// Width inside a block; equals `h_inter` for classic blocks.
    pub h_intra: usize,
    pub num_heads: usize,
    pub h_ffn: usize,
    /// Feed-forward networks per block.
    pub ffn_stack: usize,
    pub block_kind: BlockKind,
    pub embedding_kind: EmbeddingKind,
    pub norm_kind: NormKind,
    pub activation_kind: ActivationKind,
}

pub const BERT_VOCAB: usize = 30522;
pub const BERT_POSITIONS: usize = 512;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_layers", self.num_layers),
            ("h_embedding", self.h_embedding),
            ("h_inter", self.h_inter),
            ("h_intra", self.h_intra),
            ("num_heads", self.num_heads),
            ("h_ffn", self.h_ffn),
            ("ffn_stack", self.ffn_stack),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.h_intra.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "h_intra ({}) must be divisible by num_heads ({})",
                self.h_intra, self.num_heads
            )));
        }
        if self.block_kind == BlockKind::Classic && self.h_intra != self.h_inter {
            return Err(Error::Config(format!(
                "classic blocks need h_intra == h_inter, got {} vs {}",
                self.h_intra, self.h_inter
            )));
        }
        match self.embedding_kind {
            EmbeddingKind::Conv3Factorized if self.h_embedding >= self.h_inter => {
                Err(Error::Config(format!(
                    "conv3_factorized embedding needs h_embedding < h_inter, got {} vs {}",
                    self.h_embedding, self.h_inter
                )))
            }
            EmbeddingKind::NoOp if self.h_embedding != self.h_inter => Err(Error::Config(format!(
                "no_op embedding needs h_embedding == h_inter, got {} vs {}",
                self.h_embedding, self.h_inter
            ))),
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.h_intra / self.num_heads
    }

    /// Width of the map the attention projections read from.
    pub fn attention_input(&self) -> usize {
        match self.block_kind {
            BlockKind::BottleneckTiny => self.h_intra,
            _ => self.h_inter,
        }
    }

    pub fn has_bottleneck(&self) -> bool {
        self.block_kind != BlockKind::Classic
    }

    pub fn with_variant(&self, norm: NormKind, activation: ActivationKind) -> Self {
        ModelConfig {
            norm_kind: norm,
            activation_kind: activation,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn classic(layers: usize, hidden: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: BERT_VOCAB,
        max_positions: BERT_POSITIONS,
        num_layers: layers,
        h_embedding: hidden,
        h_inter: hidden,
        h_intra: hidden,
        num_heads: heads,
        h_ffn: 4 * hidden,
        ffn_stack: 1,
        block_kind: BlockKind::Classic,
        embedding_kind: EmbeddingKind::NoOp,
        norm_kind: NormKind::LayerNorm,
        activation_kind: ActivationKind::Gelu,
    }
}

fn inverted(h_inter: usize, h_intra: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: BERT_VOCAB,
        max_positions: BERT_POSITIONS,
        num_layers: 24,
        h_embedding: 128,
        h_inter,
        h_intra,
        num_heads: heads,
        h_ffn: 4 * h_intra,
        ffn_stack: 1,
        block_kind: BlockKind::InvertedBottleneck,
        embedding_kind: EmbeddingKind::Conv3Factorized,
        norm_kind: NormKind::LayerNorm,
        activation_kind: ActivationKind::Gelu,
    }
}

fn student(h_intra: usize, heads: usize, ffn_stack: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: BERT_VOCAB,
        max_positions: BERT_POSITIONS,
        num_layers: 24,
        h_embedding: 128,
        h_inter: 512,
        h_intra,
        num_heads: heads,
        h_ffn: 4 * h_intra,
        ffn_stack,
        block_kind: BlockKind::Bottleneck,
        embedding_kind: EmbeddingKind::Conv3Factorized,
        norm_kind: NormKind::NoNorm,
        activation_kind: ActivationKind::Relu,
    }
}

/// Vocabulary of the synthetic corpus used by the desk-scale presets.
pub const DESK_VOCAB: usize = 128;
pub const DESK_POSITIONS: usize = 64;

/// Teacher search rows: (label, h_inter, h_intra, heads).
const TABLE2: [(&str, usize, usize, usize); 9] = [
    ("a", 1024, 1024, 16),
    ("b", 768, 1024, 16),
    ("c", 512, 1024, 16),
    ("d", 384, 1024, 16),
    ("e", 256, 1024, 16),
    ("f", 512, 1024, 4),
    ("g", 512, 512, 4),
    ("h", 512, 256, 4),
    ("i", 512, 128, 4),
];

/// Student search rows: (h_intra, heads, stacked FFNs).
const TABLE3: [(usize, usize, usize); 4] = [(192, 6, 1), (160, 5, 2), (128, 4, 4), (96, 3, 8)];

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "bert_large",
        "bert_base",
        "ib_bert_large",
        "mobilebert",
        "mobilebert_tiny",
        "desk_teacher",
        "desk_student",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(TABLE2.iter().map(|(l, ..)| format!("table2_{l}")));
    names.extend(TABLE3.iter().map(|(h, ..)| format!("table3_{h}")));
    names
}

/// Looks up a named configuration.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "bert_large" => classic(24, 1024, 16),
        "bert_base" => classic(12, 768, 12),
        "ib_bert_large" => inverted(512, 1024, 4),
        "mobilebert" => student(128, 4, 4),
        "mobilebert_tiny" => ModelConfig {
            ffn_stack: 2,
            block_kind: BlockKind::BottleneckTiny,
            ..student(128, 4, 4)
        },
        "desk_teacher" => ModelConfig {
            vocab_size: DESK_VOCAB,
            max_positions: DESK_POSITIONS,
            num_layers: 4,
            h_embedding: 32,
            h_inter: 64,
            h_intra: 128,
            num_heads: 4,
            h_ffn: 256,
            ffn_stack: 1,
            block_kind: BlockKind::InvertedBottleneck,
            embedding_kind: EmbeddingKind::Conv3Factorized,
            norm_kind: NormKind::LayerNorm,
            activation_kind: ActivationKind::Gelu,
        },
        "desk_student" => ModelConfig {
            vocab_size: DESK_VOCAB,
            max_positions: DESK_POSITIONS,
            num_layers: 4,
            h_embedding: 32,
            h_inter: 64,
            h_intra: 32,
            num_heads: 4,
            h_ffn: 128,
            ffn_stack: 4,
            block_kind: BlockKind::Bottleneck,
            embedding_kind: EmbeddingKind::Conv3Factorized,
            norm_kind: NormKind::NoNorm,
            activation_kind: ActivationKind::Relu,
        },
        other => {
            if let Some(label) = other.strip_prefix("table2_") {
                if let Some(&(_, inter, intra, heads)) = TABLE2.iter().find(|r| r.0 == label) {
                    return Ok(inverted(inter, intra, heads));
                }
            }
            if let Some(h) = other.strip_prefix("table3_").and_then(|s| s.parse::<usize>().ok()) {
                return table3_row(h);
            }
            return Err(Error::Lookup {
                kind: "preset",
                name: name.to_string(),
                valid: preset_names(),
            });
        }
    };
    Ok(cfg)
}

/// Student configuration with the given intra-block size from the
/// MHA/FFN balance search.
pub fn table3_row(h_intra: usize) -> Result<ModelConfig> {
    TABLE3
        .iter()
        .find(|r| r.0 == h_intra)
        .map(|&(h, heads, stack)| student(h, heads, stack))
        .ok_or_else(|| Error::Lookup {
            kind: "table3 row",
            name: h_intra.to_string(),
            valid: TABLE3.iter().map(|r| r.0.to_string()).collect(),
        })
}
