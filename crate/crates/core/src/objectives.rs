//! Layer-wise knowledge-transfer and distillation losses.
//!
//! Each loss has a tape form, used for training with the teacher side held
//! constant, and a value form over plain tensors.

use serde::{Deserialize, Serialize};

use crate::arch::LayerTrace;
use crate::autograd::{Tape, Target, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor used when standardizing feature maps.
pub const FMT_EPS: f64 = 1e-6;
/// Probability floor inside the attention-transfer logarithm.
pub const AT_FLOOR: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferWeights {
    pub fmt_weight: f64,
    pub at_weight: f64,
    pub alpha: f64,
    pub fmt_stats_weight: f64,
}

impl Default for TransferWeights {
    fn default() -> Self {
        TransferWeights {
            fmt_weight: 1.0,
            at_weight: 1.0,
            alpha: 0.5,
            fmt_stats_weight: 1.0,
        }
    }
}

impl TransferWeights {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        for (name, w) in [
            ("fmt_weight", self.fmt_weight),
            ("at_weight", self.at_weight),
            ("fmt_stats_weight", self.fmt_stats_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie strictly inside (0, 1), got {alpha}")))
    }
}

fn check_maps(tape: &Tape, h_tr: &Tensor, h_st: Var) -> Result<()> {
    if h_tr.shape() != tape.shape(h_st) {
        return Err(Error::shape(
            "feature map transfer (teacher and student need the same inter-block size)",
            h_tr.shape(),
            tape.shape(h_st),
        ));
    }
    Ok(())
}

/// Mean squared difference of the raw maps.
pub fn raw_fmt_loss_var(tape: &mut Tape, h_tr: &Tensor, h_st: Var) -> Result<Var> {
    check_maps(tape, h_tr, h_st)?;
    let t = tape.constant(h_tr.clone());
    let d = tape.sub(h_st, t)?;
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// Standardized-map MSE plus `stats_weight` times the per-token mean and
/// variance discrepancies.
pub fn fmt_loss_var(tape: &mut Tape, h_tr: &Tensor, h_st: Var, stats_weight: f64) -> Result<Var> {
    check_maps(tape, h_tr, h_st)?;
    let t = tape.constant(h_tr.clone());
    let zt = tape.standardize(t, FMT_EPS);
    let zs = tape.standardize(h_st, FMT_EPS);
    let d = tape.sub(zs, zt)?;
    let d2 = tape.square(d);
    let base = tape.mean(d2);
    if stats_weight == 0.0 {
        return Ok(base);
    }
    let mut stats = Vec::with_capacity(2);
    for moment in [Tape::row_mean, Tape::row_var] {
        let (mt, ms) = (moment(tape, t), moment(tape, h_st));
        let d = tape.sub(ms, mt)?;
        let d2 = tape.square(d);
        stats.push(tape.mean(d2));
    }
    let stats = tape.add_all(&stats)?;
    let stats = tape.scale(stats, stats_weight);
    tape.add(base, stats)
}

fn check_stochastic(what: &str, a: &Tensor) -> Result<()> {
    let t = a.last_dim();
    for (i, row) in a.data().chunks(t).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::Domain(format!("{what} row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// `KL(teacher || student)` summed over heads and query positions, divided
/// by the number of (head, position) rows.
pub fn at_loss_var(tape: &mut Tape, a_tr: &Tensor, a_st: Var) -> Result<Var> {
    if a_tr.shape() != tape.shape(a_st) {
        return Err(Error::shape("attention transfer", a_tr.shape(), tape.shape(a_st)));
    }
    check_stochastic("teacher attention", a_tr)?;
    let rows = a_tr.rows() as f64;
    tape.kl_div(a_tr.data(), a_st, AT_FLOOR, rows)
}

pub fn raw_fmt_loss(h_tr: &Tensor, h_st: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(h_st.clone());
    let l = raw_fmt_loss_var(&mut tape, h_tr, s)?;
    Ok(tape.scalar(l))
}

pub fn fmt_loss(h_tr: &Tensor, h_st: &Tensor, stats_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(h_st.clone());
    let l = fmt_loss_var(&mut tape, h_tr, s, stats_weight)?;
    Ok(tape.scalar(l))
}

pub fn at_loss(a_tr: &Tensor, a_st: &Tensor) -> Result<f64> {
    check_stochastic("student attention", a_st)?;
    let mut tape = Tape::new();
    let s = tape.constant(a_st.clone());
    let l = at_loss_var(&mut tape, a_tr, s)?;
    Ok(tape.scalar(l))
}

/// `fmt_weight * FMT + at_weight * AT` at layer `layer`.
pub fn layer_kt_loss(
    trace_tr: &LayerTrace,
    trace_st: &LayerTrace,
    layer: usize,
    weights: &TransferWeights,
) -> Result<f64> {
    let n = trace_tr.feature_maps.len().min(trace_st.feature_maps.len());
    if layer >= n {
        return Err(Error::Index {
            what: "trace layers",
            index: layer,
            len: n,
        });
    }
    let mut total = 0.0;
    if weights.fmt_weight != 0.0 {
        let f = fmt_loss(
            &trace_tr.feature_maps[layer],
            &trace_st.feature_maps[layer],
            weights.fmt_stats_weight,
        )?;
        total += weights.fmt_weight * f;
    }
    if weights.at_weight != 0.0 {
        total += weights.at_weight * at_loss(&trace_tr.attentions[layer], &trace_st.attentions[layer])?;
    }
    Ok(total)
}

/// Tape form of [`layer_kt_loss`] with the student's layer on the tape.
pub fn layer_kt_loss_var(
    tape: &mut Tape,
    h_tr: &Tensor,
    a_tr: &Tensor,
    h_st: Var,
    a_st: Var,
    weights: &TransferWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if weights.fmt_weight != 0.0 {
        let f = fmt_loss_var(tape, h_tr, h_st, weights.fmt_stats_weight)?;
        terms.push(tape.scale(f, weights.fmt_weight));
    }
    if weights.at_weight != 0.0 {
        let a = at_loss_var(tape, a_tr, a_st)?;
        terms.push(tape.scale(a, weights.at_weight));
    }
    if terms.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    tape.add_all(&terms)
}

/// Components of the pre-training distillation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdLoss {
    pub mlm: f64,
    pub kd: f64,
    pub nsp: f64,
    pub total: f64,
}

/// `alpha * mlm + (1 - alpha) * kd + nsp`.
pub fn combine_pd(mlm: f64, kd: f64, nsp: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * mlm + (1.0 - alpha) * kd + nsp)
}

#[derive(Clone, Copy, Debug)]
pub struct PdVars {
    pub mlm: Var,
    pub kd: Var,
    pub nsp: Var,
    pub total: Var,
}

/// Distillation loss over the masked rows already selected into
/// `mlm_logits: [M, vocab]`. `teacher_probs` holds `M * vocab` teacher
/// probabilities; `nsp_logits: [B, 2]`.
pub fn pd_loss_var(
    tape: &mut Tape,
    mlm_logits: Var,
    mlm_labels: &[usize],
    teacher_probs: &[f64],
    nsp_logits: Var,
    nsp_labels: &[usize],
    alpha: f64,
) -> Result<PdVars> {
    check_alpha(alpha)?;
    if mlm_labels.is_empty() {
        return Err(Error::Contract("distillation loss needs at least one masked position".into()));
    }
    let mlm = tape.softmax_cross_entropy(mlm_logits, Target::Hard(mlm_labels.to_vec()))?;
    let kd = tape.softmax_cross_entropy(mlm_logits, Target::Soft(teacher_probs.to_vec()))?;
    let nsp = tape.softmax_cross_entropy(nsp_logits, Target::Hard(nsp_labels.to_vec()))?;
    let a = tape.scale(mlm, alpha);
    let b = tape.scale(kd, 1.0 - alpha);
    let total = tape.add_all(&[a, b, nsp])?;
    Ok(PdVars { mlm, kd, nsp, total })
}

/// Value form of [`pd_loss_var`].
pub fn pd_loss(
    mlm_logits: &Tensor,
    mlm_labels: &[usize],
    teacher_probs: &Tensor,
    nsp_logits: &Tensor,
    nsp_labels: &[usize],
    alpha: f64,
) -> Result<PdLoss> {
    if teacher_probs.shape() != mlm_logits.shape() {
        return Err(Error::shape("distillation targets", teacher_probs.shape(), mlm_logits.shape()));
    }
    let mut tape = Tape::new();
    let m = tape.constant(mlm_logits.clone());
    let n = tape.constant(nsp_logits.clone());
    let v = pd_loss_var(&mut tape, m, mlm_labels, teacher_probs.data(), n, nsp_labels, alpha)?;
    Ok(PdLoss {
        mlm: tape.scalar(v.mlm),
        kd: tape.scalar(v.kd),
        nsp: tape.scalar(v.nsp),
        total: tape.scalar(v.total),
    })
}
