use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ActivationKind, BlockKind, EmbeddingKind, ModelConfig, NormKind};
use crate::archive::Archive;
use crate::autograd::{AttnShape, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameters in allocation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(t));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &*self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.tensors[i])
    }

    /// Copy-on-write access; clones the buffer only if a tape still holds it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn set(&mut self, i: usize, t: Tensor<F>) {
        self.tensors[i] = Arc::new(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-layer intermediate maps captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Block outputs, `[rows, h_inter]` each.
    pub feature_maps: Vec<Tensor>,
    /// Attention distributions, `[heads, T, T]` for one sequence or
    /// `[batch, heads, T, T]` for a batch.
    pub attentions: Vec<Tensor>,
}

/// Output of a single-sequence forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// MLM logits `[T, vocab]`.
    pub logits: Tensor,
    /// NSP logits `[2]`.
    pub nsp_logits: Tensor,
    pub trace: LayerTrace,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(Spec { name, shape, init });
    let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize| {
        add(format!("{p}.weight"), vec![i, o], Init::Normal);
        add(format!("{p}.bias"), vec![o], Init::Zeros);
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, n: usize| {
        add(format!("{p}.gamma"), vec![n], Init::Ones);
        add(format!("{p}.beta"), vec![n], Init::Zeros);
    };
    let (hi, ha, he) = (cfg.h_inter, cfg.h_intra, cfg.h_embedding);

    add("embeddings.token".into(), vec![cfg.vocab_size, he], Init::Normal);
    if cfg.embedding_kind == EmbeddingKind::Conv3Factorized {
        add("embeddings.conv.kernel".into(), vec![3, he, hi], Init::Normal);
        add("embeddings.conv.bias".into(), vec![hi], Init::Zeros);
    }
    add("embeddings.position".into(), vec![cfg.max_positions, hi], Init::Normal);
    add("embeddings.segment".into(), vec![2, hi], Init::Normal);
    norm(&mut add, "embeddings.norm", hi);

    let src = cfg.attention_input();
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        if cfg.has_bottleneck() {
            linear(&mut add, &format!("{p}.entry"), hi, ha);
        }
        for proj in ["query", "key", "value"] {
            linear(&mut add, &format!("{p}.attention.{proj}"), src, ha);
        }
        linear(&mut add, &format!("{p}.attention.output"), ha, ha);
        norm(&mut add, &format!("{p}.attention.norm"), ha);
        for j in 0..cfg.ffn_stack {
            linear(&mut add, &format!("{p}.ffn.{j}.inner"), ha, cfg.h_ffn);
            linear(&mut add, &format!("{p}.ffn.{j}.outer"), cfg.h_ffn, ha);
            norm(&mut add, &format!("{p}.ffn.{j}.norm"), ha);
        }
        if cfg.has_bottleneck() {
            linear(&mut add, &format!("{p}.exit"), ha, hi);
            norm(&mut add, &format!("{p}.norm"), hi);
        }
    }

    linear(&mut add, "pooler", hi, hi);
    linear(&mut add, "nsp", hi, 2);
    linear(&mut add, "mlm.transform", hi, he);
    norm(&mut add, "mlm.norm", he);
    add("mlm.bias".into(), vec![cfg.vocab_size], Init::Zeros);
    specs
}

/// Truncated normal at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

/// Which layer a parameter belongs to: `Some(l)` for `layers.{l}.*`.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

pub fn is_embedding_param(name: &str) -> bool {
    name.starts_with("embeddings.")
}

pub fn is_head_param(name: &str) -> bool {
    ["pooler.", "nsp.", "mlm."].iter().any(|p| name.starts_with(p))
}

impl Model<f64> {
    /// Allocates and initializes every parameter; deterministic under `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for spec in param_specs(config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Normal => truncated_normal(&mut rng, n),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (name, t) in self.params.iter() {
            a.push_tensor(name, t)?;
        }
        Ok(a)
    }

    /// Rebuilds a model from an archive, checking every expected tensor.
    pub fn from_archive(config: &ModelConfig, archive: &Archive) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        for spec in param_specs(config) {
            let t = archive.tensor(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("checkpoint", t.shape(), &spec.shape));
            }
            params.insert(spec.name, t);
        }
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    /// Runs one sequence through the encoder with dropout disabled.
    pub fn forward(&self, token_ids: &[usize], segment_ids: &[usize]) -> Result<ForwardOutput> {
        let t = token_ids.len();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = EncoderInput {
            token_ids,
            segment_ids,
            batch: 1,
            len: t,
            key_mask: None,
        };
        let enc = encode(&mut tape, &self.config, &bound, &input, &mut NoDropout)?;
        let rows: Vec<usize> = (0..t).collect();
        let logits = mlm_logits(&mut tape, &self.config, &bound, enc.hidden, &rows)?;
        let nsp = nsp_logits(&mut tape, &self.config, &bound, enc.hidden, 1, t)?;
        let trace = enc.trace(&tape, true);
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            nsp_logits: tape.value(nsp).clone().reshape([2])?,
            trace,
        })
    }
}

impl<F: Scalar> Model<F> {
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound {
            vars: (0..self.params.len())
                .map(|i| tape.leaf_shared(self.params.shared(i), trainable))
                .collect(),
            index: Arc::new(self.params.index.clone()),
        }
    }

    /// Binds pre-made tape variables (one per parameter, allocation order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len());
        Bound {
            vars,
            index: Arc::new(self.params.index.clone()),
        }
    }
}

/// Tape handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }
}

/// A batch of equal-length sequences laid out row-major as `[batch, len]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [usize],
    pub segment_ids: &'a [usize],
    pub batch: usize,
    pub len: usize,
    /// Valid (non-padding) positions, `[batch, len]`.
    pub key_mask: Option<&'a [bool]>,
}

/// Source of dropout masks; [`NoDropout`] for deterministic evaluation.
pub trait DropoutSource<F: Scalar> {
    fn apply(&mut self, tape: &mut Tape<F>, x: Var) -> Var;
}

pub struct NoDropout;

impl<F: Scalar> DropoutSource<F> for NoDropout {
    fn apply(&mut self, _tape: &mut Tape<F>, x: Var) -> Var {
        x
    }
}

pub struct Dropout<R> {
    pub p: f64,
    pub rng: R,
}

impl<F: Scalar, R: rand::Rng> DropoutSource<F> for Dropout<R> {
    fn apply(&mut self, tape: &mut Tape<F>, x: Var) -> Var {
        tape.dropout(x, self.p, &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// Block output `[batch * len, h_inter]`.
    pub feature: Var,
    /// Attention distributions `[batch, heads, len, len]`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub embeddings: Var,
    pub layers: Vec<LayerVars>,
    pub hidden: Var,
}

impl EncoderOutput {
    /// Copies the traced maps off the tape. `single` drops the batch axis of
    /// the attentions (valid when the batch has one sequence).
    pub fn trace<F: Scalar>(&self, tape: &Tape<F>, single: bool) -> LayerTrace {
        LayerTrace {
            feature_maps: self.layers.iter().map(|l| tape.value(l.feature).cast()).collect(),
            attentions: self
                .layers
                .iter()
                .map(|l| {
                    let a: Tensor = tape.value(l.attention).cast();
                    if single {
                        let s = a.shape()[1..].to_vec();
                        a.reshape(s).expect("same element count")
                    } else {
                        a
                    }
                })
                .collect(),
        }
    }
}

fn norm<F: Scalar>(tape: &mut Tape<F>, cfg: &ModelConfig, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"));
    let beta = p.get(&format!("{prefix}.beta"));
    match cfg.norm_kind {
        NormKind::LayerNorm => tape.layer_norm(x, gamma, beta, F::from_f64(LAYER_NORM_EPS)),
        NormKind::NoNorm => tape.affine(x, gamma, beta),
    }
}

fn activation<F: Scalar>(tape: &mut Tape<F>, cfg: &ModelConfig, x: Var) -> Var {
    match cfg.activation_kind {
        ActivationKind::Gelu => tape.gelu(x),
        ActivationKind::Relu => tape.relu(x),
    }
}

fn linear<F: Scalar>(tape: &mut Tape<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"));
    let b = p.get(&format!("{prefix}.bias"));
    tape.linear(x, w, b)
}

/// Token path, position and segment embeddings, then norm.
pub fn embed<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    input: &EncoderInput<'_>,
    dropout: &mut dyn DropoutSource<F>,
) -> Result<Var> {
    let (b, t) = (input.batch, input.len);
    if t > cfg.max_positions {
        return Err(Error::Length {
            len: t,
            max: cfg.max_positions,
        });
    }
    if input.token_ids.len() != b * t || input.segment_ids.len() != b * t {
        return Err(Error::shape(
            "encoder input",
            &[input.token_ids.len(), input.segment_ids.len()],
            &[b, t],
        ));
    }
    let tokens = tape.gather(p.get("embeddings.token"), input.token_ids)?;
    let tokens = match cfg.embedding_kind {
        EmbeddingKind::NoOp => tokens,
        EmbeddingKind::Conv3Factorized => tape.conv3(
            tokens,
            p.get("embeddings.conv.kernel"),
            p.get("embeddings.conv.bias"),
            b,
            t,
        )?,
    };
    let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let pos = tape.gather(p.get("embeddings.position"), &positions)?;
    let seg = tape.gather(p.get("embeddings.segment"), input.segment_ids)?;
    let x = tape.add(tokens, pos)?;
    let x = tape.add(x, seg)?;
    let x = norm(tape, cfg, p, x, "embeddings.norm")?;
    Ok(dropout.apply(tape, x))
}

/// One encoder block; returns `(output, attention_probs)`.
pub fn block<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    layer: usize,
    x: Var,
    shape: &AttnShape,
    dropout: &mut dyn DropoutSource<F>,
) -> Result<(Var, Var)> {
    let pre = format!("layers.{layer}");
    // Hidden state at h_intra that the attention residual joins.
    let inner = if cfg.has_bottleneck() {
        linear(tape, p, x, &format!("{pre}.entry"))?
    } else {
        x
    };
    let attn_src = match cfg.block_kind {
        BlockKind::BottleneckTiny => inner,
        _ => x,
    };
    let q = linear(tape, p, attn_src, &format!("{pre}.attention.query"))?;
    let k = linear(tape, p, attn_src, &format!("{pre}.attention.key"))?;
    let v = linear(tape, p, attn_src, &format!("{pre}.attention.value"))?;
    let probs = tape.attention_probs(q, k, shape.clone())?;
    let dropped = dropout.apply(tape, probs);
    let ctx = tape.attention_context(dropped, v, shape.clone())?;
    let attn = linear(tape, p, ctx, &format!("{pre}.attention.output"))?;
    let attn = dropout.apply(tape, attn);
    let sum = tape.add(inner, attn)?;
    let mut h = norm(tape, cfg, p, sum, &format!("{pre}.attention.norm"))?;

    for j in 0..cfg.ffn_stack {
        let f = format!("{pre}.ffn.{j}");
        let up = linear(tape, p, h, &format!("{f}.inner"))?;
        let up = activation(tape, cfg, up);
        let down = linear(tape, p, up, &format!("{f}.outer"))?;
        let down = dropout.apply(tape, down);
        let sum = tape.add(h, down)?;
        h = norm(tape, cfg, p, sum, &format!("{f}.norm"))?;
    }

    if !cfg.has_bottleneck() {
        return Ok((h, probs));
    }
    let out = linear(tape, p, h, &format!("{pre}.exit"))?;
    let out = dropout.apply(tape, out);
    let sum = tape.add(x, out)?;
    Ok((norm(tape, cfg, p, sum, &format!("{pre}.norm"))?, probs))
}

/// Embeddings followed by every block.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    input: &EncoderInput<'_>,
    dropout: &mut dyn DropoutSource<F>,
) -> Result<EncoderOutput> {
    encode_until(tape, cfg, p, input, dropout, cfg.num_layers)
}

/// Like [`encode`] but stops after `depth` blocks.
pub fn encode_until<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    input: &EncoderInput<'_>,
    dropout: &mut dyn DropoutSource<F>,
    depth: usize,
) -> Result<EncoderOutput> {
    let embeddings = embed(tape, cfg, p, input, dropout)?;
    let shape = AttnShape {
        batch: input.batch,
        len: input.len,
        heads: cfg.num_heads,
        key_mask: input.key_mask.map(<[bool]>::to_vec),
    };
    let mut x = embeddings;
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth.min(cfg.num_layers) {
        let (out, attention) = block(tape, cfg, p, l, x, &shape, dropout)?;
        layers.push(LayerVars {
            feature: out,
            attention,
        });
        x = out;
    }
    Ok(EncoderOutput {
        embeddings,
        layers,
        hidden: x,
    })
}

/// MLM logits for the selected rows: transform to `h_embedding`, then decode
/// against the tied token table.
pub fn mlm_logits<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    hidden: Var,
    rows: &[usize],
) -> Result<Var> {
    let h = tape.select_rows(hidden, rows)?;
    let h = linear(tape, p, h, "mlm.transform")?;
    let h = activation(tape, cfg, h);
    let h = norm(tape, cfg, p, h, "mlm.norm")?;
    let logits = tape.matmul_bt(h, p.get("embeddings.token"))?;
    tape.add_bias(logits, p.get("mlm.bias"))
}

/// Tanh pooler over each sequence's first token, then a two-way classifier.
pub fn pooled<F: Scalar>(tape: &mut Tape<F>, p: &Bound, hidden: Var, batch: usize, len: usize) -> Result<Var> {
    let first: Vec<usize> = (0..batch).map(|b| b * len).collect();
    let cls = tape.select_rows(hidden, &first)?;
    let pooled = linear(tape, p, cls, "pooler")?;
    Ok(tape.tanh(pooled))
}

pub fn nsp_logits<F: Scalar>(
    tape: &mut Tape<F>,
    _cfg: &ModelConfig,
    p: &Bound,
    hidden: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let pooled = pooled(tape, p, hidden, batch, len)?;
    linear(tape, p, pooled, "nsp")
}

/// Elementwise `gamma * h + beta` along the trailing axis.
pub fn nonorm(h: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(h.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.affine(x, g, b)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::config::{preset, EmbeddingKind};
    use crate::arch::params::count_params;
    use proptest::prelude::*;

    fn tiny(block: BlockKind) -> ModelConfig {
        let (h_inter, h_intra) = match block {
            BlockKind::Classic => (8, 8),
            BlockKind::InvertedBottleneck => (8, 12),
            _ => (8, 4),
        };
        ModelConfig {
            vocab_size: 20,
            max_positions: 10,
            num_layers: 2,
            h_embedding: if block == BlockKind::Classic { 8 } else { 6 },
            h_inter,
            h_intra,
            num_heads: 2,
            h_ffn: 10,
            ffn_stack: 2,
            block_kind: block,
            embedding_kind: if block == BlockKind::Classic {
                EmbeddingKind::NoOp
            } else {
                EmbeddingKind::Conv3Factorized
            },
            norm_kind: NormKind::NoNorm,
            activation_kind: ActivationKind::Relu,
        }
    }

    const BLOCKS: [BlockKind; 4] = [
        BlockKind::Classic,
        BlockKind::InvertedBottleneck,
        BlockKind::Bottleneck,
        BlockKind::BottleneckTiny,
    ];

    #[test]
    fn smallest_classic_forward() {
        let cfg = ModelConfig {
            vocab_size: 10,
            max_positions: 8,
            num_layers: 1,
            h_embedding: 8,
            h_inter: 8,
            h_intra: 8,
            num_heads: 2,
            h_ffn: 32,
            ffn_stack: 1,
            block_kind: BlockKind::Classic,
            embedding_kind: EmbeddingKind::NoOp,
            norm_kind: NormKind::LayerNorm,
            activation_kind: ActivationKind::Gelu,
        };
        let out = Model::build(&cfg, 0).unwrap().forward(&[1, 2, 3], &[0, 0, 1]).unwrap();
        assert_eq!(out.logits.shape(), &[3, 10]);
        assert_eq!(out.nsp_logits.shape(), &[2]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = tiny(BlockKind::Bottleneck);
        cfg.h_intra = 6;
        cfg.num_heads = 4;
        assert!(matches!(Model::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny(BlockKind::Bottleneck);
        let (a, b) = (Model::build(&cfg, 7).unwrap(), Model::build(&cfg, 7).unwrap());
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = Model::build(&cfg, 8).unwrap();
        assert_ne!(a.params.get("embeddings.token"), c.params.get("embeddings.token"));
    }

    #[test]
    fn init_statistics() {
        let m = Model::build(&tiny(BlockKind::Bottleneck), 1).unwrap();
        let w = m.params.get("embeddings.token").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(m.params.get("layers.0.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.params.get("layers.1.exit.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_shapes_and_stochastic_rows() {
        for block in BLOCKS {
            let cfg = tiny(block);
            let out = Model::build(&cfg, 3).unwrap().forward(&[5, 6, 7, 8], &[0, 0, 1, 1]).unwrap();
            assert_eq!(out.trace.feature_maps.len(), cfg.num_layers);
            for (h, a) in out.trace.feature_maps.iter().zip(&out.trace.attentions) {
                assert_eq!(h.shape(), &[4, cfg.h_inter]);
                assert_eq!(a.shape(), &[cfg.num_heads, 4, 4]);
                for row in a.data().chunks(4) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::build(&tiny(BlockKind::BottleneckTiny), 4).unwrap();
        let a = m.forward(&[1, 2, 3], &[0, 0, 0]).unwrap();
        let b = m.forward(&[1, 2, 3], &[0, 0, 0]).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn too_long_input_is_a_length_error() {
        let m = Model::build(&tiny(BlockKind::Classic), 0).unwrap();
        let ids = vec![1; 11];
        assert!(matches!(m.forward(&ids, &[0; 11]), Err(Error::Length { len: 11, max: 10 })));
    }

    #[test]
    fn count_matches_allocation_for_presets() {
        // The full-size presets are counted without allocating: the spec list
        // is exactly what `build` allocates.
        for name in crate::arch::config::preset_names() {
            let cfg = preset(&name).unwrap();
            let allocated: usize = param_specs(&cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(count_params(&cfg).total, allocated, "{name}");
        }
        for block in BLOCKS {
            let cfg = tiny(block);
            assert_eq!(Model::build(&cfg, 0).unwrap().params.num_scalars(), count_params(&cfg).total);
        }
    }

    fn legal_config() -> impl Strategy<Value = ModelConfig> {
        (
            0usize..4,
            1usize..4,
            1usize..4,
            1usize..4,
            1usize..5,
            1usize..6,
            1usize..4,
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(b, layers, heads, dh, inter_mul, ffn, stack, nonorm, relu)| {
                let block = BLOCKS[b];
                let h_intra = heads * dh * 2;
                let h_inter = if block == BlockKind::Classic { h_intra } else { 2 * inter_mul + 2 };
                let conv = block != BlockKind::Classic && h_inter > 2;
                ModelConfig {
                    vocab_size: 11,
                    max_positions: 6,
                    num_layers: layers,
                    h_embedding: if conv { h_inter - 2 } else { h_inter },
                    h_inter,
                    h_intra,
                    num_heads: heads,
                    h_ffn: ffn * 3,
                    ffn_stack: stack,
                    block_kind: block,
                    embedding_kind: if conv {
                        EmbeddingKind::Conv3Factorized
                    } else {
                        EmbeddingKind::NoOp
                    },
                    norm_kind: if nonorm { NormKind::NoNorm } else { NormKind::LayerNorm },
                    activation_kind: if relu { ActivationKind::Relu } else { ActivationKind::Gelu },
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn count_matches_allocation_random(cfg in legal_config()) {
            let m = Model::build(&cfg, 0).unwrap();
            prop_assert_eq!(m.params.num_scalars(), count_params(&cfg).total);
            let out = m.forward(&[1, 2, 3], &[0, 1, 1]).unwrap();
            prop_assert_eq!(out.trace.feature_maps[0].shape(), &[3, cfg.h_inter]);
        }
    }

    #[test]
    fn variants_share_shapes_and_counts() {
        let base = tiny(BlockKind::Bottleneck);
        let r0 = count_params(&base).total;
        for norm in [NormKind::LayerNorm, NormKind::NoNorm] {
            for act in [ActivationKind::Gelu, ActivationKind::Relu] {
                let cfg = base.with_variant(norm, act);
                assert_eq!(count_params(&cfg).total, r0);
                let out = Model::build(&cfg, 0).unwrap().forward(&[1, 2], &[0, 0]).unwrap();
                assert_eq!(out.trace.feature_maps[1].shape(), &[2, base.h_inter]);
            }
        }
    }

    #[test]
    fn nonorm_examples() {
        let h = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::new([2], vec![2.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        assert_eq!(nonorm(&h, &g, &b).unwrap().data(), &[7.0, 7.0]);
        let x = Tensor::from_fn([3, 2], |i| i as f64 - 2.5);
        assert_eq!(nonorm(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2])).unwrap(), x);
        assert!(nonorm(&x, &Tensor::full([3], 1.0), &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn nonorm_is_local_and_homogeneous() {
        let g = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let zero = Tensor::zeros([3]);
        let h = Tensor::from_fn([4, 3], |i| (i as f64 * 0.7).sin());
        let mut bumped = h.clone();
        bumped.data_mut()[4] += 10.0;
        let (a, b) = (nonorm(&h, &g, &zero).unwrap(), nonorm(&bumped, &g, &zero).unwrap());
        for t in [0, 2, 3] {
            assert_eq!(a.data()[t * 3..t * 3 + 3], b.data()[t * 3..t * 3 + 3]);
        }
        let scaled = nonorm(&h.map(|v| 3.0 * v), &g, &zero).unwrap();
        assert!(scaled.max_abs_diff(&a.map(|v| 3.0 * v)) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = tiny(BlockKind::InvertedBottleneck);
        let m = Model::build(&cfg, 2).unwrap();
        let bytes = m.to_archive().unwrap().to_bytes();
        let back = Model::from_archive(&cfg, &Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert!(Model::from_archive(&tiny(BlockKind::Bottleneck), &Archive::from_bytes(&bytes).unwrap()).is_err());
    }
}
