//! Teacher pre-training and the three knowledge-transfer strategies.
//!
//! A [`StagePlan`] is an ordered list of stages. Each stage names its loss,
//! which parameters train, per-prefix learning-rate multipliers and a step
//! budget. [`run`] executes a plan with Adam and records one loss row per
//! step.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    encode_until, is_embedding_param, is_head_param, layer_of, mlm_logits, nsp_logits, BlockKind, Bound, Dropout,
    DropoutSource, EncoderInput, LayerTrace, Model, ModelConfig, NoDropout,
};
use crate::archive::Archive;
use crate::autograd::{Tape, Target, Var};
use crate::data::{make_batch, Corpus, PretrainBatch};
use crate::error::{Error, Result};
use crate::objectives::{layer_kt_loss_var, pd_loss_var, TransferWeights};
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Akt,
    Jkt,
    Pkt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Akt, Strategy::Jkt, Strategy::Pkt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Akt => "akt",
            Strategy::Jkt => "jkt",
            Strategy::Pkt => "pkt",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "strategy",
                name: s.to_string(),
                valid: Strategy::ALL.iter().map(|s| s.to_string()).collect(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    /// Masked LM plus next-sentence prediction against hard labels.
    Mlm,
    /// Sum of per-layer transfer losses over the listed layers.
    KtLayers(Vec<usize>),
    /// Pre-training distillation.
    Pd,
    /// Every layer's transfer loss plus distillation.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Encoder blocks only.
    Blocks,
    /// Embeddings and blocks `0..=l`.
    UpTo(usize),
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match *self {
            Trainable::All => true,
            Trainable::Blocks => layer_of(name).is_some(),
            Trainable::UpTo(l) => is_embedding_param(name) || layer_of(name).is_some_and(|k| k <= l),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub loss: LossKind,
    pub trainable: Trainable,
    /// Name prefix to learning-rate multiplier; the longest match wins.
    pub lr_multipliers: Vec<(String, f64)>,
    pub steps: usize,
}

impl Stage {
    /// Effective multiplier; zero for parameters outside the trainable set.
    pub fn multiplier(&self, name: &str) -> f64 {
        if !self.trainable.contains(name) {
            return 0.0;
        }
        self.lr_multipliers
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(1.0, |&(_, m)| m)
    }

    /// Highest block index the loss reads, `None` when it needs the heads.
    fn depth(&self) -> Option<usize> {
        match &self.loss {
            LossKind::KtLayers(ls) => ls.iter().max().map(|l| l + 1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 {
                return Err(Error::Config(format!("stage `{}` has an empty step budget", s.name)));
            }
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate stage name `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// `(stage index, step within stage)` for a global step.
    pub fn locate(&self, step: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if step < start + s.steps {
                return Some((i, step - start));
            }
            start += s.steps;
        }
        None
    }
}

pub const SOFT_FREEZE: f64 = 0.1;

/// Stage plan for a strategy over `layers` blocks.
pub fn plan(strategy: Strategy, layers: usize, kt_steps: usize, pd_steps: usize, freeze: f64) -> Result<StagePlan> {
    if layers == 0 || kt_steps == 0 || pd_steps == 0 {
        return Err(Error::Config(format!(
            "plan needs positive layers and budgets, got L={layers}, kt={kt_steps}, pd={pd_steps}"
        )));
    }
    if !(0.0..=1.0).contains(&freeze) {
        return Err(Error::Config(format!("freeze multiplier must lie in [0, 1], got {freeze}")));
    }
    let pd = Stage {
        name: "pd".into(),
        loss: LossKind::Pd,
        trainable: Trainable::All,
        lr_multipliers: Vec::new(),
        steps: pd_steps,
    };
    let stages = match strategy {
        Strategy::Akt => vec![Stage {
            name: "akt".into(),
            loss: LossKind::Combined,
            trainable: Trainable::All,
            lr_multipliers: Vec::new(),
            steps: kt_steps + pd_steps,
        }],
        Strategy::Jkt => vec![
            Stage {
                name: "jkt".into(),
                loss: LossKind::KtLayers((0..layers).collect()),
                trainable: Trainable::Blocks,
                lr_multipliers: Vec::new(),
                steps: kt_steps,
            },
            pd,
        ],
        Strategy::Pkt => {
            if kt_steps < layers {
                return Err(Error::Config(format!(
                    "progressive transfer needs at least one step per layer ({kt_steps} < {layers})"
                )));
            }
            let per = kt_steps / layers;
            let mut stages: Vec<Stage> = (0..layers)
                .map(|l| {
                    let mut mult = vec![("embeddings.".to_string(), freeze)];
                    mult.extend((0..l).map(|k| (format!("layers.{k}."), freeze)));
                    Stage {
                        name: format!("pkt-{l}"),
                        loss: LossKind::KtLayers(vec![l]),
                        trainable: Trainable::UpTo(l),
                        lr_multipliers: mult,
                        steps: per,
                    }
                })
                .collect();
            stages.last_mut().expect("layers >= 1").steps += kt_steps - per * layers;
            stages.push(pd);
            stages
        }
    };
    let plan = StagePlan { stages };
    plan.validate()?;
    Ok(plan)
}

/// Teacher objective over `steps` steps.
pub fn teacher_plan(steps: usize) -> StagePlan {
    StagePlan {
        stages: vec![Stage {
            name: "teacher".into(),
            loss: LossKind::Mlm,
            trainable: Trainable::All,
            lr_multipliers: Vec::new(),
            steps,
        }],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of each stage spent ramping the rate up linearly.
    pub warmup_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
        }
    }
}

impl AdamConfig {
    /// Rate at `step` (0-based) of a stage with `steps` steps.
    pub fn rate(&self, step: usize, steps: usize) -> f64 {
        let warm = (self.warmup_frac * steps as f64).ceil() as usize;
        if warm == 0 || step >= warm {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warm as f64
        }
    }
}

/// Everything a training run reads besides the models and corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub teacher_steps: usize,
    pub kt_steps: usize,
    pub pd_steps: usize,
    pub weights: TransferWeights,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
    /// Learning-rate multiplier below the active progressive stage.
    pub freeze_multiplier: f64,
    pub seed: u64,
    /// Run the teacher forward for the next batch on a second thread.
    pub pipeline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Pkt,
            teacher_steps: 2000,
            kt_steps: 400,
            pd_steps: 400,
            weights: TransferWeights::default(),
            optimizer: AdamConfig::default(),
            batch_size: 16,
            seq_len: 64,
            dropout: 0.1,
            freeze_multiplier: SOFT_FREEZE,
            seed: 0,
            pipeline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.seq_len < 8 {
            return Err(Error::Config("batch_size must be positive and seq_len at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn plan(&self, layers: usize) -> Result<StagePlan> {
        plan(self.strategy, layers, self.kt_steps, self.pd_steps, self.freeze_multiplier)
    }
}

/// Named random sub-streams derived from one seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const PROBE: u64 = 4;

    /// SplitMix64 finalizer over `(seed, stream, index)`.
    pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
        let mut z = seed
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Adam moments and per-parameter update counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Global steps completed.
    pub step: usize,
    pub stage: usize,
    pub seed: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl TrainState {
    pub fn fresh(model: &Model, seed: u64) -> Self {
        let zeros = |_| model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        TrainState {
            step: 0,
            stage: 0,
            seed,
            m: zeros(()),
            v: zeros(()),
            t: vec![0; model.params.len()],
        }
    }

    pub fn to_archive(&self, model: &Model) -> Result<Archive> {
        let mut a = Archive::new();
        let words = [
            self.step as u64,
            self.stage as u64,
            self.seed >> 32,
            self.seed & 0xFFFF_FFFF,
        ];
        a.push_tensor("state.meta", &Tensor::new([4], words.iter().map(|&w| w as f64).collect())?)?;
        a.push_tensor("state.t", &Tensor::new([self.t.len()], self.t.iter().map(|&t| t as f64).collect())?)?;
        for (i, (name, t)) in model.params.iter().enumerate() {
            a.push_tensor(&format!("adam.m.{name}"), &Tensor::new(t.shape(), self.m[i].clone())?)?;
            a.push_tensor(&format!("adam.v.{name}"), &Tensor::new(t.shape(), self.v[i].clone())?)?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive, model: &Model) -> Result<Self> {
        let meta = archive.tensor("state.meta")?;
        let w: Vec<u64> = meta.data().iter().map(|&v| v as u64).collect();
        if w.len() != 4 {
            return Err(Error::Format("state.meta must hold 4 words".into()));
        }
        let t = archive.tensor("state.t")?.data().iter().map(|&v| v as u64).collect::<Vec<_>>();
        if t.len() != model.params.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in model.params.iter() {
            for (dst, kind) in [(&mut m, "m"), (&mut v, "v")] {
                let x = archive.tensor(&format!("adam.{kind}.{name}"))?;
                if x.shape() != p.shape() {
                    return Err(Error::shape("optimizer state", x.shape(), p.shape()));
                }
                dst.push(x.into_data());
            }
        }
        Ok(TrainState {
            step: w[0] as usize,
            stage: w[1] as usize,
            seed: (w[2] << 32) | w[3],
            m,
            v,
            t,
        })
    }
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    /// Summed layer transfer loss, when the stage has one.
    pub kt: Option<f64>,
    pub mlm: Option<f64>,
    pub kd: Option<f64>,
    pub nsp: Option<f64>,
}

pub fn write_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub name: String,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub struct RunOutput {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub state: TrainState,
}

impl RunOutput {
    /// First and last loss of every stage present in the history.
    pub fn summaries(&self) -> Vec<StageSummary> {
        let mut out: Vec<StageSummary> = Vec::new();
        for r in &self.history {
            match out.last_mut() {
                Some(s) if s.name == r.stage => {
                    s.steps += 1;
                    s.last_loss = r.loss;
                }
                _ => out.push(StageSummary {
                    name: r.stage.clone(),
                    steps: 1,
                    first_loss: r.loss,
                    last_loss: r.loss,
                }),
            }
        }
        out
    }
}

/// Teacher quantities for one batch, computed without gradients.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub trace: LayerTrace,
    /// Softmax of the teacher's MLM logits at the masked positions.
    pub mlm_probs: Tensor,
}

fn encoder_input(batch: &PretrainBatch) -> EncoderInput<'_> {
    EncoderInput {
        token_ids: &batch.token_ids,
        segment_ids: &batch.segment_ids,
        batch: batch.batch,
        len: batch.len,
        key_mask: Some(&batch.attention_mask),
    }
}

/// Batched layer trace: feature maps `[B*T, h_inter]`, attentions
/// `[B, A, T, T]`.
pub fn batch_trace(model: &Model, batch: &PretrainBatch) -> Result<LayerTrace> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let enc = encode_until(
        &mut tape,
        &model.config,
        &bound,
        &encoder_input(batch),
        &mut NoDropout,
        model.config.num_layers,
    )?;
    Ok(enc.trace(&tape, false))
}

pub fn teacher_targets(teacher: &Model, batch: &PretrainBatch) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let cfg = &teacher.config;
    let enc = encode_until(&mut tape, cfg, &bound, &encoder_input(batch), &mut NoDropout, cfg.num_layers)?;
    let logits = mlm_logits(&mut tape, cfg, &bound, enc.hidden, &batch.mlm_positions)?;
    Ok(TeacherTargets {
        trace: enc.trace(&tape, false),
        mlm_probs: softmax(tape.value(logits), 1)?,
    })
}

/// Student-side loss nodes for one step.
struct StepLoss {
    total: Var,
    kt: Option<Var>,
    mlm: Option<Var>,
    kd: Option<Var>,
    nsp: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    batch: &PretrainBatch,
    teacher: Option<&TeacherTargets>,
    stage: &Stage,
    weights: &TransferWeights,
    dropout: &mut dyn DropoutSource<f64>,
) -> Result<StepLoss> {
    let depth = stage.depth().unwrap_or(cfg.num_layers);
    let enc = encode_until(tape, cfg, bound, &encoder_input(batch), dropout, depth)?;
    let kt_layers: Vec<usize> = match &stage.loss {
        LossKind::KtLayers(ls) => ls.clone(),
        LossKind::Combined => (0..cfg.num_layers).collect(),
        _ => Vec::new(),
    };
    let need_teacher = || {
        teacher.ok_or_else(|| Error::Contract(format!("stage `{}` needs teacher targets", stage.name)))
    };
    let kt = if kt_layers.is_empty() {
        None
    } else {
        let t = need_teacher()?;
        let mut terms = Vec::with_capacity(kt_layers.len());
        for &l in &kt_layers {
            let lv = enc.layers.get(l).ok_or(Error::Index {
                what: "student layers",
                index: l,
                len: enc.layers.len(),
            })?;
            terms.push(layer_kt_loss_var(
                tape,
                &t.trace.feature_maps[l],
                &t.trace.attentions[l],
                lv.feature,
                lv.attention,
                weights,
            )?);
        }
        Some(tape.add_all(&terms)?)
    };

    let mut out = StepLoss {
        total: match kt {
            Some(k) => k,
            None => tape.constant(Tensor::scalar(0.0)),
        },
        kt,
        mlm: None,
        kd: None,
        nsp: None,
    };
    match stage.loss {
        LossKind::Mlm => {
            let logits = mlm_logits(tape, cfg, bound, enc.hidden, &batch.mlm_positions)?;
            let nsp = nsp_logits(tape, cfg, bound, enc.hidden, batch.batch, batch.len)?;
            let mlm = tape.softmax_cross_entropy(logits, Target::Hard(batch.mlm_labels.clone()))?;
            let nsp = tape.softmax_cross_entropy(nsp, Target::Hard(batch.nsp_labels.clone()))?;
            out.total = tape.add(mlm, nsp)?;
            out.mlm = Some(mlm);
            out.nsp = Some(nsp);
        }
        LossKind::Pd | LossKind::Combined => {
            let t = need_teacher()?;
            let logits = mlm_logits(tape, cfg, bound, enc.hidden, &batch.mlm_positions)?;
            let nsp = nsp_logits(tape, cfg, bound, enc.hidden, batch.batch, batch.len)?;
            let pd = pd_loss_var(
                tape,
                logits,
                &batch.mlm_labels,
                t.mlm_probs.data(),
                nsp,
                &batch.nsp_labels,
                weights.alpha,
            )?;
            out.total = match kt {
                Some(k) => tape.add(k, pd.total)?,
                None => pd.total,
            };
            out.mlm = Some(pd.mlm);
            out.kd = Some(pd.kd);
            out.nsp = Some(pd.nsp);
        }
        LossKind::KtLayers(_) => {}
    }
    Ok(out)
}

/// Inputs shared by every step of a run.
pub struct Run<'a> {
    pub plan: &'a StagePlan,
    pub teacher: Option<&'a Model>,
    pub corpus: &'a Corpus,
    pub weights: TransferWeights,
    pub config: &'a TrainConfig,
    /// Stop after this many global steps (for checkpointing and resume).
    pub stop_after: Option<usize>,
}

impl Run<'_> {
    fn batch(&self, step: usize) -> Result<PretrainBatch> {
        let seed = stream::derive(self.config.seed, stream::DATA, step as u64);
        make_batch(self.corpus, self.config.batch_size, self.config.seq_len, seed)
    }

    fn prepare(&self, step: usize) -> Result<(PretrainBatch, Option<TeacherTargets>)> {
        let batch = self.batch(step)?;
        let (stage, _) = self.plan.locate(step).expect("step inside plan");
        let needs = !matches!(self.plan.stages[stage].loss, LossKind::Mlm);
        let targets = match (self.teacher, needs) {
            (Some(t), true) => Some(teacher_targets(t, &batch)?),
            _ => None,
        };
        Ok((batch, targets))
    }

    fn check_pair(&self, student: &Model) -> Result<()> {
        let Some(teacher) = self.teacher else {
            if self.plan.stages.iter().any(|s| s.loss != LossKind::Mlm) {
                return Err(Error::Config("transfer and distillation stages need a teacher".into()));
            }
            return Ok(());
        };
        let (t, s) = (&teacher.config, &student.config);
        if t.num_layers != s.num_layers {
            return Err(Error::Config(format!(
                "teacher has {} layers but student has {}",
                t.num_layers, s.num_layers
            )));
        }
        if t.h_inter != s.h_inter || t.num_heads != s.num_heads {
            return Err(Error::Config(format!(
                "teacher and student must share h_inter and heads ({}x{} vs {}x{})",
                t.h_inter, t.num_heads, s.h_inter, s.num_heads
            )));
        }
        if t.vocab_size != s.vocab_size {
            return Err(Error::Config("teacher and student vocabularies differ".into()));
        }
        Ok(())
    }

    /// Executes the plan from `state` (or from scratch).
    pub fn execute(&self, mut student: Model, state: Option<TrainState>) -> Result<RunOutput> {
        self.plan.validate()?;
        self.config.validate()?;
        self.weights.validate()?;
        self.check_pair(&student)?;
        let mut state = state.unwrap_or_else(|| TrainState::fresh(&student, self.config.seed));
        if state.t.len() != student.params.len() {
            return Err(Error::Config("optimizer state does not match the student".into()));
        }
        let total = self.plan.total_steps();
        let end = self.stop_after.map_or(total, |s| s.min(total));
        let mut history = Vec::with_capacity(end.saturating_sub(state.step));
        let mut next: Option<(PretrainBatch, Option<TeacherTargets>)> = None;

        while state.step < end {
            let step = state.step;
            let (batch, targets) = match next.take() {
                Some(p) => p,
                None => self.prepare(step)?,
            };
            let record = if self.config.pipeline && step + 1 < end {
                let (record, upcoming) = std::thread::scope(|sc| {
                    let h = sc.spawn(|| self.prepare(step + 1));
                    let r = self.step(&mut student, &mut state, &batch, targets.as_ref());
                    (r, h.join().expect("teacher worker panicked"))
                });
                next = Some(upcoming?);
                record?
            } else {
                self.step(&mut student, &mut state, &batch, targets.as_ref())?
            };
            history.push(record);
        }
        Ok(RunOutput {
            model: student,
            history,
            state,
        })
    }

    fn step(
        &self,
        student: &mut Model,
        state: &mut TrainState,
        batch: &PretrainBatch,
        targets: Option<&TeacherTargets>,
    ) -> Result<LossRecord> {
        let step = state.step;
        let (si, within) = self.plan.locate(step).expect("step inside plan");
        let stage = &self.plan.stages[si];
        let mults: Vec<f64> = student.params.names().iter().map(|n| stage.multiplier(n)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..student.params.len())
            .map(|i| tape.leaf_shared(student.params.shared(i), mults[i] > 0.0))
            .collect();
        let bound = student.bind_vars(vars.clone());
        let mut dropout = Dropout {
            p: self.config.dropout,
            rng: ChaCha8Rng::seed_from_u64(stream::derive(self.config.seed, stream::DROPOUT, step as u64)),
        };
        let loss = build_loss(
            &mut tape,
            &student.config,
            &bound,
            batch,
            targets,
            stage,
            &self.weights,
            &mut dropout,
        )
        .map_err(|e| match e {
            // Forward-pass domain errors only come from non-finite values.
            Error::Domain(detail) => Error::NonFinite {
                stage: stage.name.clone(),
                step,
                detail,
            },
            e => e,
        })?;
        let value = |v: Option<Var>| v.map(|v| tape.scalar(v));
        let record = LossRecord {
            step,
            stage: stage.name.clone(),
            loss: tape.scalar(loss.total),
            kt: value(loss.kt),
            mlm: value(loss.mlm),
            kd: value(loss.kd),
            nsp: value(loss.nsp),
        };
        if !record.loss.is_finite() {
            return Err(Error::NonFinite {
                stage: stage.name.clone(),
                step,
                detail: format!("loss is {}", record.loss),
            });
        }
        let mut grads = tape.backward(loss.total)?;
        let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();
        drop(tape);

        let opt = &self.config.optimizer;
        let lr = opt.rate(within, stage.steps);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if mults[i] == 0.0 {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    stage: stage.name.clone(),
                    step,
                    detail: format!("gradient of `{}` is not finite", student.params.names()[i]),
                });
            }
            state.t[i] += 1;
            let t = state.t[i] as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            let step_size = lr * mults[i];
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let p = student.params.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
                p[j] -= step_size * (m[j] / c1) / ((v[j] / c2).sqrt() + opt.eps);
            }
        }
        state.step += 1;
        state.stage = self.plan.locate(state.step).map_or(self.plan.stages.len(), |(s, _)| s);
        Ok(record)
    }
}

/// Transfers layer knowledge from `teacher` into `student` following `plan`.
pub fn run(
    plan: &StagePlan,
    teacher: &Model,
    student: Model,
    corpus: &Corpus,
    weights: &TransferWeights,
    config: &TrainConfig,
) -> Result<RunOutput> {
    Run {
        plan,
        teacher: Some(teacher),
        corpus,
        weights: *weights,
        config,
        stop_after: None,
    }
    .execute(student, None)
}

/// Builds and trains a teacher with the masked-LM and next-sentence
/// objective; `steps == 0` returns the initialized model.
pub fn pretrain_teacher(model_config: &ModelConfig, corpus: &Corpus, steps: usize, config: &TrainConfig) -> Result<RunOutput> {
    if !matches!(model_config.block_kind, BlockKind::Classic | BlockKind::InvertedBottleneck) {
        return Err(Error::Config(format!(
            "a teacher must use classic or inverted_bottleneck blocks, got {:?}",
            model_config.block_kind
        )));
    }
    let model = Model::build(model_config, stream::derive(config.seed, stream::INIT, 0))?;
    let plan = teacher_plan(steps);
    if steps == 0 {
        let state = TrainState::fresh(&model, config.seed);
        return Ok(RunOutput {
            model,
            history: Vec::new(),
            state,
        });
    }
    Run {
        plan: &plan,
        teacher: None,
        corpus,
        weights: config.weights,
        config,
        stop_after: None,
    }
    .execute(model, None)
}

/// Copies the embedding stack and the pre-training heads from teacher to
/// student, bitwise.
pub fn copy_embedding_and_classifier(teacher: &Model, student: &mut Model) -> Result<()> {
    let mut mismatched = Vec::new();
    let mut copies = Vec::new();
    for (i, name) in student.params.names().iter().enumerate() {
        if !(is_embedding_param(name) || is_head_param(name)) {
            continue;
        }
        let dst = student.params.tensor(i);
        match teacher.params.get(name) {
            None => mismatched.push(format!("{name}: missing in teacher")),
            Some(src) if src.shape() != dst.shape() => {
                mismatched.push(format!("{name}: teacher {:?} vs student {:?}", src.shape(), dst.shape()))
            }
            Some(src) => copies.push((i, src.clone())),
        }
    }
    if let Some(name) = teacher
        .params
        .names()
        .iter()
        .find(|n| (is_embedding_param(n) || is_head_param(n)) && student.params.position(n).is_none())
    {
        mismatched.push(format!("{name}: missing in student"));
    }
    if !mismatched.is_empty() {
        return Err(Error::Copy { mismatched });
    }
    for (i, t) in copies {
        student.params.set(i, t);
    }
    Ok(())
}

/// Mean over layers of the transfer loss on one batch.
pub fn mean_kt_loss(teacher: &Model, student: &Model, batch: &PretrainBatch, weights: &TransferWeights) -> Result<f64> {
    let (t, s) = (batch_trace(teacher, batch)?, batch_trace(student, batch)?);
    let l = t.feature_maps.len();
    let mut sum = 0.0;
    for layer in 0..l {
        sum += crate::objectives::layer_kt_loss(&t, &s, layer, weights)?;
    }
    Ok(sum / l as f64)
}

/// Fraction of masked positions whose argmax prediction is the label.
pub fn masked_accuracy(model: &Model, batches: &[PretrainBatch]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let cfg = &model.config;
        let enc = encode_until(&mut tape, cfg, &bound, &encoder_input(batch), &mut NoDropout, cfg.num_layers)?;
        let logits = mlm_logits(&mut tape, cfg, &bound, enc.hidden, &batch.mlm_positions)?;
        let v = tape.value(logits);
        for (row, &label) in v.data().chunks(v.last_dim()).zip(&batch.mlm_labels) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0;
            hit += usize::from(arg == label);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Held-out probe batches drawn from a dedicated stream.
pub fn probe_batches(corpus: &Corpus, config: &TrainConfig, count: usize) -> Result<Vec<PretrainBatch>> {
    (0..count)
        .map(|i| {
            make_batch(
                corpus,
                config.batch_size,
                config.seq_len,
                stream::derive(config.seed, stream::PROBE, i as u64),
            )
        })
        .collect()
}
