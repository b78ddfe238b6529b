//! Weight-only int8 quantization, FLOPs estimates and the norm/activation
//! latency benchmark.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::arch::{
    encode_until, is_embedding_param, pooled, ActivationKind, EmbeddingKind, EncoderInput, Model, ModelConfig,
    NoDropout, NormKind,
};
use crate::archive::{Archive, Entry, Payload};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const QMAX: f64 = 127.0;

/// Symmetric int8 tensor with one scale per channel along `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub axis: usize,
    pub data: Vec<i8>,
    pub scales: Vec<f64>,
}

fn channel_of(shape: &[usize], axis: usize, flat: usize) -> usize {
    let inner: usize = shape[axis + 1..].iter().product();
    (flat / inner) % shape[axis]
}

impl QuantizedTensor {
    /// Scale per channel is `max|w| / 127`; an all-zero channel gets 1.0.
    pub fn quantize(t: &Tensor, axis: usize) -> Result<Self> {
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "quantization axis",
                index: axis,
                len: shape.len(),
            });
        }
        let mut absmax = vec![0.0f64; shape[axis]];
        for (i, &v) in t.data().iter().enumerate() {
            let c = channel_of(&shape, axis, i);
            absmax[c] = absmax[c].max(v.abs());
        }
        let scales: Vec<f64> = absmax.iter().map(|&m| if m > 0.0 { m / QMAX } else { 1.0 }).collect();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v / scales[channel_of(&shape, axis, i)]).round().clamp(-QMAX, QMAX) as i8)
            .collect();
        Ok(QuantizedTensor {
            shape,
            axis,
            data,
            scales,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::from_fn(self.shape.clone(), |i| {
            self.data[i] as f64 * self.scales[channel_of(&self.shape, self.axis, i)]
        })
    }

    /// Scales laid out with unit extents everywhere except `axis`, so the
    /// axis survives serialization.
    fn scale_shape(&self) -> Vec<usize> {
        (0..self.shape.len())
            .map(|d| if d == self.axis { self.shape[d] } else { 1 })
            .collect()
    }
}

/// Which parameters are quantized and along which axis. Embedding tables
/// are looked up by row, so each row is a channel; every other matrix or
/// kernel is quantized per output column (its last axis).
pub fn quant_axis(name: &str, shape: &[usize]) -> Option<usize> {
    if shape.len() < 2 {
        return None;
    }
    if is_embedding_param(name) && shape.len() == 2 {
        Some(0)
    } else {
        Some(shape.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantParam {
    Float(Tensor),
    Int8(QuantizedTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub params: Vec<(String, QuantParam)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    /// Archive bytes with every parameter stored as f32.
    pub float32_bytes: usize,
    pub quantized_bytes: usize,
    pub ratio: f64,
    pub quantized_params: usize,
    pub float_params: usize,
}

pub const SCALES_SUFFIX: &str = ".scales";

impl QuantizedModel {
    /// Float model with every weight dequantized.
    pub fn dequantize(&self) -> Result<Model> {
        let mut archive = Archive::new();
        for (name, p) in &self.params {
            match p {
                QuantParam::Float(t) => archive.push_tensor(name, t)?,
                QuantParam::Int8(q) => archive.push_tensor(name, &q.dequantize())?,
            }
        }
        Model::from_archive(&self.config, &archive)
    }

    /// int8 payloads with an f32 scales tensor per entry; other parameters
    /// in f32.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (name, p) in &self.params {
            match p {
                QuantParam::Float(t) => a.push_tensor::<f32>(name, &t.cast())?,
                QuantParam::Int8(q) => {
                    a.push(Entry {
                        name: name.clone(),
                        shape: q.shape.clone(),
                        payload: Payload::I8(q.data.clone()),
                    })?;
                    let scales = Tensor::new(q.scale_shape(), q.scales.clone())?;
                    a.push_tensor::<f32>(&format!("{name}{SCALES_SUFFIX}"), &scales.cast())?;
                }
            }
        }
        Ok(a)
    }

    pub fn from_archive(config: &ModelConfig, archive: &Archive) -> Result<Self> {
        let mut params = Vec::new();
        for e in archive.entries() {
            if e.name.ends_with(SCALES_SUFFIX) {
                continue;
            }
            let p = match &e.payload {
                Payload::I8(data) => {
                    let scales = archive.tensor(&format!("{}{SCALES_SUFFIX}", e.name))?;
                    let axis = scales
                        .shape()
                        .iter()
                        .zip(&e.shape)
                        .position(|(s, d)| s == d && (*s != 1 || e.shape.len() == 1))
                        .unwrap_or(0);
                    QuantParam::Int8(QuantizedTensor {
                        shape: e.shape.clone(),
                        axis,
                        data: data.clone(),
                        scales: scales.into_data(),
                    })
                }
                _ => QuantParam::Float(e.to_f64()?),
            };
            params.push((e.name.clone(), p));
        }
        let q = QuantizedModel {
            config: config.clone(),
            params,
        };
        q.dequantize()?;
        Ok(q)
    }
}

fn float32_archive(model: &Model) -> Result<Archive> {
    let mut a = Archive::new();
    for (name, t) in model.params.iter() {
        a.push_tensor::<f32>(name, &t.cast())?;
    }
    Ok(a)
}

/// Quantizes every weight matrix and kernel; biases and norm parameters
/// stay floating point.
pub fn quantize_model(model: &Model) -> Result<(QuantizedModel, SizeReport)> {
    let mut params = Vec::with_capacity(model.params.len());
    let (mut nq, mut nf) = (0, 0);
    for (name, t) in model.params.iter() {
        let p = match quant_axis(name, t.shape()) {
            Some(axis) => {
                nq += t.len();
                QuantParam::Int8(QuantizedTensor::quantize(t, axis)?)
            }
            None => {
                nf += t.len();
                QuantParam::Float(t.clone())
            }
        };
        params.push((name.to_string(), p));
    }
    let q = QuantizedModel {
        config: model.config.clone(),
        params,
    };
    let float32_bytes = float32_archive(model)?.encoded_len();
    let quantized_bytes = q.to_archive()?.encoded_len();
    Ok((
        q,
        SizeReport {
            float32_bytes,
            quantized_bytes,
            ratio: float32_bytes as f64 / quantized_bytes as f64,
            quantized_params: nq,
            float_params: nf,
        },
    ))
}

/// FLOPs of one encoder pass, broken down by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub embedding: u64,
    /// Per block.
    pub bottleneck: u64,
    pub attention: u64,
    pub ffn: u64,
    pub layers: u64,
    pub total: u64,
}

/// Twice the multiply-accumulates of every matrix product, convolution and
/// attention score/context product in the encoder at length `t`. Softmax,
/// norms, activations and the pre-training heads are not counted.
pub fn flop_report(cfg: &ModelConfig, t: usize) -> FlopReport {
    let t = t as u64;
    let (hi, ha, he, f) = (cfg.h_inter as u64, cfg.h_intra as u64, cfg.h_embedding as u64, cfg.h_ffn as u64);
    let src = cfg.attention_input() as u64;
    let embedding = match cfg.embedding_kind {
        EmbeddingKind::Conv3Factorized => 2 * t * 3 * he * hi,
        EmbeddingKind::NoOp => 0,
    };
    let bottleneck = if cfg.has_bottleneck() { 2 * t * 2 * hi * ha } else { 0 };
    let attention = 2 * (t * 3 * src * ha + 2 * t * t * ha + t * ha * ha);
    let ffn = 2 * cfg.ffn_stack as u64 * t * 2 * ha * f;
    let per_layer = bottleneck + attention + ffn;
    let layers = cfg.num_layers as u64;
    FlopReport {
        embedding,
        bottleneck,
        attention,
        ffn,
        layers,
        total: embedding + layers * per_layer,
    }
}

pub fn estimate_flops(cfg: &ModelConfig, t: usize) -> Result<u64> {
    if t == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    Ok(flop_report(cfg, t).total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantTiming {
    pub variant: String,
    pub norm: NormKind,
    pub activation: ActivationKind,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub variants: Vec<VariantTiming>,
    pub environment: String,
    pub seq_len: usize,
    pub repeats: usize,
}

impl BenchReport {
    pub fn get(&self, norm: NormKind, activation: ActivationKind) -> Option<&VariantTiming> {
        self.variants.iter().find(|v| v.norm == norm && v.activation == activation)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,norm,activation,median_s,p10_s,p90_s,flops\n");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{:.9},{:.9},{}",
                v.variant,
                norm_name(v.norm),
                act_name(v.activation),
                v.median_s,
                v.p10_s,
                v.p90_s,
                v.flops
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::LayerNorm => "layer_norm",
        NormKind::NoNorm => "no_norm",
    }
}

fn act_name(a: ActivationKind) -> &'static str {
    match a {
        ActivationKind::Gelu => "gelu",
        ActivationKind::Relu => "relu",
    }
}

pub const VARIANTS: [(NormKind, ActivationKind); 4] = [
    (NormKind::LayerNorm, ActivationKind::Gelu),
    (NormKind::LayerNorm, ActivationKind::Relu),
    (NormKind::NoNorm, ActivationKind::Gelu),
    (NormKind::NoNorm, ActivationKind::Relu),
];

pub const WARMUP_RUNS: usize = 3;
const MIN_REPEATS: usize = 30;

/// One single-precision encoder pass plus the pooler.
fn forward_f32(model: &Model<f32>, tokens: &[usize], segments: &[usize]) -> Result<f32> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = model.bind(&mut tape, false);
    let cfg = &model.config;
    let input = EncoderInput {
        token_ids: tokens,
        segment_ids: segments,
        batch: 1,
        len: tokens.len(),
        key_mask: None,
    };
    let enc = encode_until(&mut tape, cfg, &bound, &input, &mut NoDropout, cfg.num_layers)?;
    let p = pooled(&mut tape, &bound, enc.hidden, 1, tokens.len())?;
    Ok(tape.value(p).data()[0])
}

fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn environment() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{} {} / {cpu} / 1 thread / f32", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times the four norm/activation variants on identical weights and input.
/// Runs are interleaved across variants so slow drift affects all equally.
pub fn bench_op_variants(cfg: &ModelConfig, t: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Bench(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    if t > cfg.max_positions {
        return Err(Error::Length {
            len: t,
            max: cfg.max_positions,
        });
    }
    let base = Model::build(cfg, seed)?;
    let models: Vec<Model<f32>> = VARIANTS
        .iter()
        .map(|&(n, a)| {
            let mut m = base.clone();
            m.config = cfg.with_variant(n, a);
            m.cast()
        })
        .collect();
    let tokens: Vec<usize> = (0..t).map(|i| (7 + 31 * i) % cfg.vocab_size).collect();
    let segments: Vec<usize> = (0..t).map(|i| usize::from(i >= t / 2)).collect();

    let mut sink = 0.0f32;
    for _ in 0..WARMUP_RUNS {
        for m in &models {
            sink += forward_f32(m, &tokens, &segments)?;
        }
    }
    let mut times = vec![Vec::with_capacity(repeats); models.len()];
    for r in 0..repeats {
        // Rotate the starting variant so none always runs first.
        for k in 0..models.len() {
            let i = (r + k) % models.len();
            let start = Instant::now();
            sink += forward_f32(&models[i], &tokens, &segments)?;
            times[i].push(start.elapsed().as_secs_f64());
        }
    }
    std::hint::black_box(sink);

    let resolution = timer_resolution().as_secs_f64();
    let flops = estimate_flops(cfg, t)?;
    let mut variants = Vec::new();
    for (&(norm, activation), mut ts) in VARIANTS.iter().zip(times) {
        ts.sort_by(f64::total_cmp);
        let median = quantile(&ts, 0.5);
        if median < 100.0 * resolution {
            return Err(Error::Bench(format!(
                "median {median:.3e}s is within 100x of the timer resolution {resolution:.1e}s; use a longer sequence or a larger config"
            )));
        }
        variants.push(VariantTiming {
            variant: format!("{}+{}", norm_name(norm), act_name(activation)),
            norm,
            activation,
            median_s: median,
            p10_s: quantile(&ts, 0.1),
            p90_s: quantile(&ts, 0.9),
            flops,
        });
    }
    Ok(BenchReport {
        variants,
        environment: environment(),
        seq_len: t,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{preset, BlockKind};

    #[test]
    fn extremal_values_map_exactly() {
        // One output channel holding (-1, 0, 1).
        let w = Tensor::new([3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = QuantizedTensor::quantize(&w, 1).unwrap();
        assert_eq!(q.data, vec![-127, 0, 127]);
        assert_eq!(q.scales, vec![1.0 / 127.0]);
        assert!(q.dequantize().max_abs_diff(&w) < 1e-15);
    }

    #[test]
    fn zero_channel_gets_unit_scale() {
        let w = Tensor::new([2, 2], vec![0.0, 0.5, 0.0, -0.25]).unwrap();
        let q = QuantizedTensor::quantize(&w, 1).unwrap();
        assert_eq!(q.scales[0], 1.0);
        assert_eq!(q.data, vec![0, 127, 0, -64]);
    }

    #[test]
    fn toy_flops_by_hand() {
        // L=1 classic, h=2, one head, h_ffn=8, T=3:
        //   q,k,v   3 * (3x2 @ 2x2) = 36 MAC
        //   scores  3x2 @ 2x3      = 18 MAC
        //   context 3x3 @ 3x2      = 18 MAC
        //   output  3x2 @ 2x2      = 12 MAC
        //   ffn     3x2 @ 2x8 + 3x8 @ 8x2 = 96 MAC
        // 180 MAC -> 360 FLOPs.
        let cfg = ModelConfig {
            vocab_size: 10,
            max_positions: 8,
            num_layers: 1,
            h_embedding: 2,
            h_inter: 2,
            h_intra: 2,
            num_heads: 1,
            h_ffn: 8,
            ffn_stack: 1,
            block_kind: BlockKind::Classic,
            embedding_kind: EmbeddingKind::NoOp,
            norm_kind: NormKind::LayerNorm,
            activation_kind: ActivationKind::Gelu,
        };
        assert_eq!(estimate_flops(&cfg, 3).unwrap(), 360);
        assert!(estimate_flops(&cfg, 0).is_err());
    }

    #[test]
    fn flops_linear_in_depth() {
        let mut c = preset("mobilebert").unwrap();
        c.num_layers = 6;
        let one = flop_report(&c, 128);
        c.num_layers = 12;
        assert_eq!(flop_report(&c, 128).total, 2 * one.total - one.embedding);
    }

    #[test]
    fn archive_roundtrip_keeps_axes() {
        let cfg = crate::arch::preset("desk_student").unwrap();
        let m = Model::build(&cfg, 1).unwrap();
        let (q, report) = quantize_model(&m).unwrap();
        let bytes = q.to_archive().unwrap().to_bytes();
        assert_eq!(bytes.len(), report.quantized_bytes);
        let back = QuantizedModel::from_archive(&cfg, &Archive::from_bytes(&bytes).unwrap()).unwrap();
        for ((n, a), (_, b)) in q.params.iter().zip(&back.params) {
            match (a, b) {
                (QuantParam::Int8(x), QuantParam::Int8(y)) => {
                    assert_eq!((x.axis, &x.data), (y.axis, &y.data), "{n}");
                    for (s, t) in x.scales.iter().zip(&y.scales) {
                        assert!((s - t).abs() <= s * 1e-6);
                    }
                }
                (QuantParam::Float(x), QuantParam::Float(y)) => assert!(x.max_abs_diff(y) < 1e-6),
                _ => panic!("{n} changed kind"),
            }
        }
    }

    #[test]
    fn too_few_repeats() {
        let cfg = preset("desk_student").unwrap();
        assert!(matches!(bench_op_variants(&cfg, 16, 29, 0), Err(Error::Bench(_))));
    }
}
