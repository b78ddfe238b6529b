use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha1::{Digest, Sha1};

use mbkit::arch::{count_params, preset, Model, ModelConfig};
use mbkit::archive::Archive;
use mbkit::data::Corpus;
use mbkit::efficiency::{bench_op_variants, quantize_model};
use mbkit::train::{
    copy_embedding_and_classifier, pretrain_teacher, stream, write_history, LossKind, RunOutput, Stage, StagePlan,
    Strategy, TrainConfig, Trainable,
};

#[derive(Parser)]
#[command(name = "mbkit", version, about = "Bottleneck transformer encoders and layer-wise knowledge transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter breakdown of a model configuration.
    Params(ModelArg),
    /// Pre-train a teacher with masked-LM and next-sentence objectives.
    TrainTeacher(TeacherArgs),
    /// Layer-wise knowledge transfer followed by pre-training distillation.
    Transfer(TransferArgs),
    /// Pre-training distillation only.
    Distill(DistillArgs),
    /// Time the four norm/activation variants of a configuration.
    Bench(BenchArgs),
    /// Quantize a checkpoint's weights to int8.
    Quantize(QuantizeArgs),
    /// Write the attention maps of every layer for one input.
    DumpAttention(DumpArgs),
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Named preset, e.g. mobilebert or table2_c.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Model configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Documents in the generated corpus.
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TransferArgs {
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student model; defaults to the desk_student preset.
    #[command(flatten)]
    student: ModelArg,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Overrides the student's depth; must match the teacher.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kt_steps: Option<usize>,
    #[arg(long)]
    pd_steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint to continue from; otherwise a fresh desk_student
    /// (or --preset/--config) with copied embeddings and heads.
    #[arg(long)]
    student_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    student: ModelArg,
    #[arg(long)]
    pd_steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    tokens: Vec<usize>,
    /// Comma-separated segment ids; all zero when omitted.
    #[arg(long, value_delimiter = ',')]
    segments: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with the process exit code attached.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<mbkit::Error>() {
            Some(mbkit::Error::NonFinite { .. }) => 3,
            _ => 2,
        };
        Failure { code, error }
    }
}

type CmdResult = Result<(), Failure>;

const MODEL_FILE: &str = "model.bin";
const CONFIG_FILE: &str = "config.json";

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    seed: u64,
    input_hash: String,
    outputs: Vec<String>,
}

/// Git blob hash over the concatenated inputs.
fn content_hash(parts: &[&[u8]]) -> String {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut h = Sha1::new();
    h.update(format!("blob {len}\0").as_bytes());
    for p in parts {
        h.update(p);
    }
    format!("{:x}", h.finalize())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&[u8]],
    outputs: &[&str],
) -> anyhow::Result<()> {
    let canonical = serde_json::to_vec(&config)?;
    let mut parts: Vec<&[u8]> = vec![command.as_bytes(), &canonical];
    parts.extend_from_slice(inputs);
    let m = RunManifest {
        command,
        config,
        seed,
        input_hash: content_hash(&parts),
        outputs: outputs.iter().map(|o| out.join(o).display().to_string()).collect(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn resolve_model(arg: &ModelArg, default: &str) -> anyhow::Result<ModelConfig> {
    let cfg = match (&arg.preset, &arg.config) {
        (_, Some(path)) => ModelConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (Some(name), None) => preset(name)?,
        (None, None) => preset(default)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train(c: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &c.train_config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = c.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = c.seq_len {
        cfg.seq_len = t;
    }
    if let Some(lr) = c.lr {
        cfg.optimizer.lr = lr;
    }
    Ok(cfg)
}

struct Checkpoint {
    model: Model,
    bytes: Vec<u8>,
    config_text: String,
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<Checkpoint> {
    let config_path = dir.join(CONFIG_FILE);
    let model_path = dir.join(MODEL_FILE);
    if !model_path.is_file() || !config_path.is_file() {
        bail!("no checkpoint at {} (expected {MODEL_FILE} and {CONFIG_FILE})", dir.display());
    }
    let config_text = fs::read_to_string(&config_path)?;
    let cfg = ModelConfig::from_json(&config_text)?;
    let bytes = fs::read(&model_path)?;
    let model = Model::from_archive(&cfg, &Archive::from_bytes(&bytes)?)?;
    Ok(Checkpoint {
        model,
        bytes,
        config_text,
    })
}

fn save_model(dir: &Path, model: &Model) -> anyhow::Result<()> {
    model.to_archive()?.save(dir.join(MODEL_FILE))?;
    model.config.save(dir.join(CONFIG_FILE))?;
    Ok(())
}

fn save_run(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    save_model(dir, &out.model)?;
    write_history(dir.join("history.csv"), &out.history)?;
    out.state.to_archive(&out.model)?.save(dir.join("state.bin"))?;
    Ok(())
}

fn print_summaries(out: &RunOutput) {
    for s in out.summaries() {
        println!(
            "stage {:<8} steps {:>5}  loss {:.4} -> {:.4}",
            s.name, s.steps, s.first_loss, s.last_loss
        );
    }
}

fn corpus_for(cfg: &ModelConfig, train: &TrainConfig, docs: usize) -> anyhow::Result<Corpus> {
    Ok(Corpus::generate(
        stream::derive(train.seed, stream::DATA, u64::MAX),
        cfg.vocab_size,
        docs,
    )?)
}

fn cmd_params(arg: &ModelArg) -> CmdResult {
    let cfg = resolve_model(arg, "mobilebert")?;
    let r = count_params(&cfg);
    let m = |n: usize| format!("{:>12} ({:.2}M)", n, n as f64 / 1e6);
    println!("embedding      {}", m(r.embedding));
    println!("blocks x{:<5}  {}", r.layers.len(), m(r.body()));
    println!("  mha          {}", m(r.mha()));
    println!("  ffn          {}", m(r.ffn()));
    println!("  bottleneck   {}", m(r.body() - r.mha() - r.ffn()));
    println!("encoder        {}", m(r.encoder()));
    println!("heads          {}", m(r.heads.total()));
    println!("total          {}", m(r.total));
    Ok(())
}

fn cmd_train_teacher(a: &TeacherArgs) -> CmdResult {
    let cfg = resolve_model(&a.model, "desk_teacher")?;
    let mut train = resolve_train(&a.common)?;
    if let Some(s) = a.steps {
        train.teacher_steps = s;
    }
    train.validate()?;
    let corpus = corpus_for(&cfg, &train, a.common.docs)?;
    fs::create_dir_all(&a.common.out)?;
    let out = pretrain_teacher(&cfg, &corpus, train.teacher_steps, &train)?;
    print_summaries(&out);
    save_run(&a.common.out, &out)?;
    write_manifest(
        &a.common.out,
        "train-teacher",
        serde_json::json!({ "model": cfg, "train": train, "docs": a.common.docs }),
        train.seed,
        &[],
        &[MODEL_FILE, CONFIG_FILE, "history.csv", "state.bin"],
    )?;
    Ok(())
}

fn fresh_student(cfg: &ModelConfig, teacher: &Model, seed: u64) -> anyhow::Result<Model> {
    let mut s = Model::build(cfg, stream::derive(seed, stream::INIT, 1))?;
    copy_embedding_and_classifier(teacher, &mut s)?;
    Ok(s)
}

fn run_with_teacher(
    command: &str,
    teacher_dir: Option<&PathBuf>,
    student_cfg: ModelConfig,
    student_ckpt: Option<Checkpoint>,
    train: TrainConfig,
    plan: StagePlan,
    common: &Common,
) -> CmdResult {
    let teacher_dir = teacher_dir.ok_or_else(|| anyhow!("`{command}` needs --teacher <DIR>"))?;
    let teacher = load_checkpoint(teacher_dir)?;
    let (student, student_bytes) = match student_ckpt {
        Some(c) => (c.model, c.bytes),
        None => (fresh_student(&student_cfg, &teacher.model, train.seed)?, Vec::new()),
    };
    let corpus = corpus_for(&student.config, &train, common.docs)?;
    fs::create_dir_all(&common.out)?;
    let out = mbkit::train::Run {
        plan: &plan,
        teacher: Some(&teacher.model),
        corpus: &corpus,
        weights: train.weights,
        config: &train,
        stop_after: None,
    }
    .execute(student, None)?;
    print_summaries(&out);
    save_run(&common.out, &out)?;
    write_manifest(
        &common.out,
        command,
        serde_json::json!({ "student": out.model.config, "train": train, "docs": common.docs }),
        train.seed,
        &[teacher.config_text.as_bytes(), &teacher.bytes, &student_bytes],
        &[MODEL_FILE, CONFIG_FILE, "history.csv", "state.bin"],
    )?;
    Ok(())
}

fn cmd_transfer(a: &TransferArgs) -> CmdResult {
    let mut cfg = resolve_model(&a.student, "desk_student")?;
    if let Some(l) = a.layers {
        cfg.num_layers = l;
        cfg.validate()?;
    }
    let mut train = resolve_train(&a.common)?;
    if let Some(s) = a.strategy {
        train.strategy = s;
    }
    if let Some(k) = a.kt_steps {
        train.kt_steps = k;
    }
    if let Some(p) = a.pd_steps {
        train.pd_steps = p;
    }
    train.validate()?;
    let plan = train.plan(cfg.num_layers)?;
    run_with_teacher("transfer", a.teacher.as_ref(), cfg, None, train, plan, &a.common)
}

fn cmd_distill(a: &DistillArgs) -> CmdResult {
    let mut train = resolve_train(&a.common)?;
    if let Some(p) = a.pd_steps {
        train.pd_steps = p;
    }
    train.validate()?;
    let ckpt = a.student_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = match &ckpt {
        Some(c) => c.model.config.clone(),
        None => resolve_model(&a.student, "desk_student")?,
    };
    let plan = StagePlan {
        stages: vec![Stage {
            name: "pd".into(),
            loss: LossKind::Pd,
            trainable: Trainable::All,
            lr_multipliers: Vec::new(),
            steps: train.pd_steps,
        }],
    };
    run_with_teacher("distill", a.teacher.as_ref(), cfg, ckpt, train, plan, &a.common)
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    let cfg = resolve_model(&a.model, "mobilebert")?;
    let report = bench_op_variants(&cfg, a.seq_len, a.repeats, a.seed)?;
    fs::create_dir_all(&a.out)?;
    report.write_csv(a.out.join("bench.csv"))?;
    print!("{}", report.to_csv());
    println!("# {}", report.environment);
    write_manifest(
        &a.out,
        "bench",
        serde_json::json!({ "model": cfg, "seq_len": a.seq_len, "repeats": a.repeats }),
        a.seed,
        &[],
        &["bench.csv"],
    )?;
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (q, report) = quantize_model(&ckpt.model)?;
    fs::create_dir_all(&a.out)?;
    q.to_archive()?.save(a.out.join("model.int8.bin"))?;
    ckpt.model.config.save(a.out.join(CONFIG_FILE))?;
    println!(
        "size ratio {:.3} ({} f32 bytes -> {} bytes; {} int8 weights, {} float)",
        report.ratio, report.float32_bytes, report.quantized_bytes, report.quantized_params, report.float_params
    );
    write_manifest(
        &a.out,
        "quantize",
        serde_json::json!({ "model": ckpt.model.config, "size": report }),
        0,
        &[ckpt.config_text.as_bytes(), &ckpt.bytes],
        &["model.int8.bin", CONFIG_FILE],
    )?;
    Ok(())
}

fn cmd_dump_attention(a: &DumpArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let segments = if a.segments.is_empty() {
        vec![0; a.tokens.len()]
    } else {
        a.segments.clone()
    };
    if segments.len() != a.tokens.len() {
        return Err(anyhow!("{} tokens but {} segment ids", a.tokens.len(), segments.len()).into());
    }
    let out = ckpt.model.forward(&a.tokens, &segments)?;
    let mut archive = Archive::new();
    for (l, att) in out.trace.attentions.iter().enumerate() {
        archive.push_tensor(&format!("layers.{l}.attention"), att)?;
    }
    fs::create_dir_all(&a.out)?;
    archive.save(a.out.join("attention.bin"))?;
    println!("wrote {} attention maps of shape {:?}", out.trace.attentions.len(), out.trace.attentions[0].shape());
    write_manifest(
        &a.out,
        "dump-attention",
        serde_json::json!({ "model": ckpt.model.config, "tokens": a.tokens, "segments": segments }),
        0,
        &[ckpt.config_text.as_bytes(), &ckpt.bytes],
        &["attention.bin"],
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Params(a) => cmd_params(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::DumpAttention(a) => cmd_dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
