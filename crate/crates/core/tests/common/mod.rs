#![allow(dead_code)]

use mbkit::arch::{
    block, embed, encode, mlm_logits, nsp_logits, ActivationKind, BlockKind, EmbeddingKind, EncoderInput,
    Model, ModelConfig, NoDropout, NormKind,
};
use mbkit::autograd::{AttnShape, GradCheckReport, GradChecker, Tape, Target, Var};
use mbkit::objectives::{at_loss_var, fmt_loss_var, layer_kt_loss_var, pd_loss_var, raw_fmt_loss_var, TransferWeights};
use mbkit::tensor::Tensor;
use mbkit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Contracts `x` against fixed random weights so every coordinate of the
/// gradient is generic.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform(tape.shape(x), seed, -1.0, 1.0));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn check(op: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCheckReport {
    GradChecker::with_tolerance(GRAD_TOL)
        .check(op, f, inputs)
        .unwrap_or_else(|e| panic!("{op}: {e}"))
}

/// Every differentiable tape primitive.
pub fn op_checks() -> Vec<GradCheckReport> {
    let u = |shape: &[usize], seed| uniform(shape, seed, -1.0, 1.0);
    // Bounded away from the relu kink.
    let away = |shape: &[usize], seed| {
        uniform(shape, seed, 0.1, 1.0).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v })
    };
    let attn = |mask: Option<Vec<bool>>| AttnShape {
        batch: 2,
        len: 3,
        heads: 2,
        key_mask: mask,
    };
    let mut out = vec![
        check("matmul", &[u(&[3, 4], 1), u(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 9)
        }),
        check("matmul_bt", &[u(&[3, 4], 3), u(&[5, 4], 4)], |t, v| {
            let y = t.matmul_bt(v[0], v[1])?;
            project(t, y, 9)
        }),
        check("add_bias", &[u(&[3, 4], 5), u(&[4], 6)], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 9)
        }),
        check("add/sub/mul", &[u(&[2, 3], 7), u(&[2, 3], 8)], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(a, s)?;
            project(t, m, 9)
        }),
        check("square/scale", &[u(&[2, 3], 10)], |t, v| {
            let s = t.square(v[0]);
            let s = t.scale(s, -2.5);
            project(t, s, 9)
        }),
        check("nonorm", &[u(&[3, 4], 11), u(&[4], 12), u(&[4], 13)], |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            project(t, y, 9)
        }),
        check("standardize", &[u(&[3, 5], 14)], |t, v| {
            let y = t.standardize(v[0], 1e-6);
            project(t, y, 9)
        }),
        check("layer_norm", &[u(&[3, 5], 15), u(&[5], 16), u(&[5], 17)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            project(t, y, 9)
        }),
        check("row_mean/row_var", &[u(&[3, 5], 18)], |t, v| {
            let m = t.row_mean(v[0]);
            let s = t.row_var(v[0]);
            let y = t.mul(m, s)?;
            project(t, y, 9)
        }),
        check("gelu", &[u(&[3, 4], 19).map(|v| 3.0 * v)], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 9)
        }),
        check("relu", &[away(&[3, 4], 20)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 9)
        }),
        check("tanh", &[u(&[3, 4], 21)], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 9)
        }),
        check("softmax", &[u(&[3, 4], 22)], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 9)
        }),
        check("attention_context", &[u(&[2, 2, 3, 3], 26), u(&[6, 4], 27)], move |t, v| {
            let y = t.attention_context(v[0], v[1], attn(None))?;
            project(t, y, 9)
        }),
        check("gather", &[u(&[5, 3], 28)], |t, v| {
            let y = t.gather(v[0], &[4, 0, 4, 2])?;
            project(t, y, 9)
        }),
        check("conv3", &[u(&[6, 2], 29), u(&[3, 2, 3], 30), u(&[3], 31)], |t, v| {
            let y = t.conv3(v[0], v[1], v[2], 2, 3)?;
            project(t, y, 9)
        }),
        check("select_rows", &[u(&[4, 3], 32)], |t, v| {
            let y = t.select_rows(v[0], &[3, 1, 3])?;
            project(t, y, 9)
        }),
        check("dropout", &[u(&[4, 3], 33)], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = t.dropout(v[0], 0.3, &mut rng);
            project(t, y, 9)
        }),
        check("softmax_xent_hard", &[u(&[3, 5], 34)], |t, v| {
            t.softmax_cross_entropy(v[0], Target::Hard(vec![0, 4, 2]))
        }),
        check("softmax_xent_soft", &[u(&[2, 3], 35)], |t, v| {
            t.softmax_cross_entropy(v[0], Target::Soft(vec![0.2, 0.5, 0.3, 0.0, 0.9, 0.1]))
        }),
        check("kl_div", &[u(&[2, 3], 36)], |t, v| {
            let q = t.softmax(v[0])?;
            t.kl_div(&[0.2, 0.5, 0.3, 0.6, 0.3, 0.1], q, 1e-12, 2.0)
        }),
        check("mean", &[u(&[2, 3], 37)], |t, v| {
            let s = t.square(v[0]);
            Ok(t.mean(s))
        }),
    ];
    for (name, mask) in [
        ("attention_probs", None),
        ("attention_probs_masked", Some(vec![true, true, false, true, false, true])),
    ] {
        out.push(check(name, &[u(&[6, 4], 23), u(&[6, 4], 24)], move |t, v| {
            let y = t.attention_probs(v[0], v[1], attn(mask.clone()))?;
            project(t, y, 25)
        }));
    }
    out
}

pub fn small_config(block: BlockKind, norm: NormKind, act: ActivationKind) -> ModelConfig {
    let (h_inter, h_intra, emb, kind) = match block {
        BlockKind::Classic => (6, 6, 6, EmbeddingKind::NoOp),
        BlockKind::InvertedBottleneck => (6, 8, 4, EmbeddingKind::Conv3Factorized),
        _ => (8, 4, 4, EmbeddingKind::Conv3Factorized),
    };
    ModelConfig {
        vocab_size: 9,
        max_positions: 5,
        num_layers: 2,
        h_embedding: emb,
        h_inter,
        h_intra,
        num_heads: 2,
        h_ffn: 6,
        ffn_stack: 2,
        block_kind: block,
        embedding_kind: kind,
        norm_kind: norm,
        activation_kind: act,
    }
}

/// Replaces the tiny init with O(1) values so no gradient is vanishingly
/// small relative to finite-difference noise.
pub fn spread(model: &Model, seed: u64) -> Vec<Tensor> {
    model
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let s = seed * 1000 + i as u64;
            if name.ends_with(".gamma") {
                uniform(t.shape(), s, 0.6, 1.4)
            } else {
                uniform(t.shape(), s, -0.6, 0.6)
            }
        })
        .collect()
}

/// Key biases add the same score to every key of a query row, which the
/// softmax cancels: their gradient is identically zero and a central
/// difference only sees round-off. They stay constant in the checks and
/// [`key_bias_gradients`] asserts the zero directly.
pub fn is_key_bias(name: &str) -> bool {
    name.ends_with("attention.key.bias")
}

/// Splits `params` into checked inputs and held-constant key biases.
fn checked(model: &Model, params: Vec<Tensor>) -> (Vec<Tensor>, Vec<(usize, Tensor)>) {
    let mut inputs = Vec::new();
    let mut held = Vec::new();
    for (i, (name, t)) in model.params.names().iter().zip(params).enumerate() {
        if is_key_bias(name) {
            held.push((i, t));
        } else {
            inputs.push(t);
        }
    }
    (inputs, held)
}

/// Rebuilds the full parameter list from checked vars plus constants.
fn rebind(tape: &mut Tape, model: &Model, vars: &[Var], held: &[(usize, Tensor)]) -> mbkit::arch::Bound {
    let mut it = vars.iter();
    let mut all = Vec::with_capacity(model.params.len());
    let mut h = held.iter().peekable();
    for i in 0..model.params.len() {
        match h.peek() {
            Some((j, t)) if *j == i => {
                all.push(tape.constant(t.clone()));
                h.next();
            }
            _ => all.push(*it.next().expect("one var per checked parameter")),
        }
    }
    model.bind_vars(all)
}

fn block_check(label: &str, cfg: &ModelConfig) -> GradCheckReport {
    let model = Model::build(cfg, 1).unwrap();
    let (b, t) = (2, 3);
    let (params, held) = checked(&model, spread(&model, 2));
    let mut inputs = vec![uniform(&[b * t, cfg.h_inter], 40, -1.0, 1.0)];
    inputs.extend(params);
    let shape = AttnShape {
        batch: b,
        len: t,
        heads: cfg.num_heads,
        key_mask: Some(vec![true, true, true, true, true, false]),
    };
    check(label, &inputs, |tape, v| {
        let bound = rebind(tape, &model, &v[1..], &held);
        let (out, probs) = block(tape, cfg, &bound, 0, v[0], &shape, &mut NoDropout)?;
        let a = project(tape, out, 41)?;
        let p = project(tape, probs, 42)?;
        tape.add(a, p)
    })
}

/// Every block wiring, both norms and both activations, the conv embedding
/// and the heads.
pub fn layer_checks() -> Vec<GradCheckReport> {
    use ActivationKind::*;
    use BlockKind::*;
    use NormKind::*;
    let mut out = vec![
        block_check("block classic", &small_config(Classic, LayerNorm, Gelu)),
        block_check("block inverted_bottleneck", &small_config(InvertedBottleneck, LayerNorm, Gelu)),
        block_check("block bottleneck", &small_config(Bottleneck, NoNorm, Gelu)),
        block_check("block bottleneck relu", &small_config(Bottleneck, NoNorm, Relu)),
        block_check("block bottleneck_tiny", &small_config(BottleneckTiny, NoNorm, Relu)),
        block_check("block tiny layer_norm", &small_config(BottleneckTiny, LayerNorm, Gelu)),
    ];

    let cfg = small_config(Bottleneck, NoNorm, Relu);
    let model = Model::build(&cfg, 3).unwrap();
    let tokens = [1, 5, 8, 0, 2, 2];
    let segments = [0, 0, 1, 0, 1, 1];
    let input = EncoderInput {
        token_ids: &tokens,
        segment_ids: &segments,
        batch: 2,
        len: 3,
        key_mask: None,
    };
    let (params, held) = checked(&model, spread(&model, 4));
    out.push(check("conv embedding", &params, |tape, v| {
        let bound = rebind(tape, &model, v, &held);
        let e = embed(tape, &cfg, &bound, &input, &mut NoDropout)?;
        project(tape, e, 43)
    }));
    out.push(check("encoder with heads", &params, |tape, v| {
        let bound = rebind(tape, &model, v, &held);
        let enc = encode(tape, &cfg, &bound, &input, &mut NoDropout)?;
        let m = mlm_logits(tape, &cfg, &bound, enc.hidden, &[1, 4])?;
        let n = nsp_logits(tape, &cfg, &bound, enc.hidden, 2, 3)?;
        let a = project(tape, m, 44)?;
        let b = project(tape, n, 45)?;
        tape.add(a, b)
    }));
    out
}

/// Every loss with respect to the student side.
pub fn loss_checks() -> Vec<GradCheckReport> {
    let h_tr = uniform(&[3, 5], 50, -1.0, 1.0);
    let a_tr = mbkit::tensor::softmax(&uniform(&[2, 3, 3], 51, -2.0, 2.0), 2).unwrap();
    let logits = || uniform(&[2, 3, 3], 52, -2.0, 2.0);
    let weights = TransferWeights::default();
    let h_tr2 = h_tr.clone();
    let a_tr2 = a_tr.clone();
    vec![
        check("fmt_loss", &[uniform(&[3, 5], 53, -1.0, 1.0)], |t, v| {
            fmt_loss_var(t, &h_tr, v[0], 1.0)
        }),
        check("raw_fmt_loss", &[uniform(&[3, 5], 54, -1.0, 1.0)], |t, v| {
            raw_fmt_loss_var(t, &h_tr, v[0])
        }),
        check("at_loss", &[logits()], |t, v| {
            let a = t.softmax(v[0])?;
            at_loss_var(t, &a_tr, a)
        }),
        check("layer_kt_loss", &[uniform(&[3, 5], 55, -1.0, 1.0), logits()], move |t, v| {
            let a = t.softmax(v[1])?;
            layer_kt_loss_var(t, &h_tr2, &a_tr2, v[0], a, &weights)
        }),
        check("pd_loss", &[uniform(&[3, 6], 56, -2.0, 2.0), uniform(&[2, 2], 57, -1.0, 1.0)], |t, v| {
            let teacher = mbkit::tensor::softmax(&uniform(&[3, 6], 58, -2.0, 2.0), 1).unwrap();
            Ok(pd_loss_var(t, v[0], &[1, 5, 0], teacher.data(), v[1], &[1, 0], 0.5)?.total)
        }),
    ]
}

/// Largest analytic key-bias gradient over every block wiring.
pub fn key_bias_gradients() -> f64 {
    let mut worst = 0.0f64;
    for block in [BlockKind::Classic, BlockKind::InvertedBottleneck, BlockKind::Bottleneck, BlockKind::BottleneckTiny] {
        let cfg = small_config(block, NormKind::LayerNorm, ActivationKind::Gelu);
        let model = Model::build(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = spread(&model, 2).into_iter().map(|t| tape.param(t)).collect();
        let bound = model.bind_vars(vars.clone());
        let tokens = [1, 5, 8, 0, 2, 2];
        let input = EncoderInput {
            token_ids: &tokens,
            segment_ids: &[0, 0, 1, 0, 1, 1],
            batch: 2,
            len: 3,
            key_mask: Some(&[true, true, false, true, true, true]),
        };
        let enc = encode(&mut tape, &cfg, &bound, &input, &mut NoDropout).unwrap();
        let loss = project(&mut tape, enc.hidden, 46).unwrap();
        let g = tape.backward(loss).unwrap();
        for (name, v) in model.params.names().iter().zip(&vars) {
            if is_key_bias(name) {
                worst = g.slice(*v).unwrap().iter().fold(worst, |m, x| m.max(x.abs()));
            }
        }
    }
    worst
}
