use serde::Serialize;

use super::config::{BlockKind, EmbeddingKind, ModelConfig};

/// Parameters of one block, split by sub-module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    /// Entry/exit linears plus the block-level norm (zero for classic blocks).
    pub bottleneck: usize,
    /// Q/K/V/output projections with biases and the attention norm.
    pub mha: usize,
    /// All stacked feed-forward networks with biases and norms.
    pub ffn: usize,
    /// Weight-matrix entries only (no biases, no norms).
    pub mha_matrix: usize,
    pub ffn_matrix: usize,
}

impl LayerParams {
    pub fn total(&self) -> usize {
        self.bottleneck + self.mha + self.ffn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HeadParams {
    pub pooler: usize,
    pub nsp: usize,
    /// Transform linear, its norm and the output bias; the decoder matrix is
    /// tied to the token table and not counted again.
    pub mlm: usize,
}

impl HeadParams {
    pub fn total(&self) -> usize {
        self.pooler + self.nsp + self.mlm
    }
}

/// Closed-form parameter breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub embedding: usize,
    pub layers: Vec<LayerParams>,
    pub heads: HeadParams,
    pub total: usize,
}

impl ParamReport {
    pub fn body(&self) -> usize {
        self.layers.iter().map(LayerParams::total).sum()
    }

    pub fn mha(&self) -> usize {
        self.layers.iter().map(|l| l.mha).sum()
    }

    pub fn ffn(&self) -> usize {
        self.layers.iter().map(|l| l.ffn).sum()
    }

    /// Encoder without the pre-training heads (pooler, NSP, MLM); this is
    /// the quantity published model sizes are compared against.
    pub fn encoder(&self) -> usize {
        self.embedding + self.body()
    }

    pub fn breakdown_sum(&self) -> usize {
        self.encoder() + self.heads.total()
    }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Counts every scalar `build` allocates for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let (hi, ha, f, he) = (cfg.h_inter, cfg.h_intra, cfg.h_ffn, cfg.h_embedding);
    let norm = |n: usize| 2 * n;

    let mut embedding = cfg.vocab_size * he + cfg.max_positions * hi + 2 * hi + norm(hi);
    if cfg.embedding_kind == EmbeddingKind::Conv3Factorized {
        embedding += 3 * he * hi + hi;
    }

    let src = cfg.attention_input();
    let layer = LayerParams {
        bottleneck: match cfg.block_kind {
            BlockKind::Classic => 0,
            _ => linear(hi, ha) + linear(ha, hi) + norm(hi),
        },
        mha: 3 * linear(src, ha) + linear(ha, ha) + norm(ha),
        ffn: cfg.ffn_stack * (linear(ha, f) + linear(f, ha) + norm(ha)),
        mha_matrix: 3 * src * ha + ha * ha,
        ffn_matrix: cfg.ffn_stack * 2 * ha * f,
    };

    let heads = HeadParams {
        pooler: linear(hi, hi),
        nsp: linear(hi, 2),
        mlm: linear(hi, he) + norm(he) + cfg.vocab_size,
    };

    let layers = vec![layer; cfg.num_layers];
    let total = embedding + cfg.num_layers * layer.total() + heads.total();
    ParamReport {
        embedding,
        layers,
        heads,
        total,
    }
}
