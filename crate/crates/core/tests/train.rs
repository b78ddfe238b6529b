use mbkit::arch::{encode_until, mlm_logits, nsp_logits, preset, EncoderInput, Model, NoDropout};
use mbkit::autograd::Tape;
use mbkit::data::{make_batch, Corpus};
use mbkit::objectives::{layer_kt_loss, pd_loss, TransferWeights};
use mbkit::train::*;
use mbkit::Error;

fn corpus() -> Corpus {
    Corpus::generate(3, 128, 60).unwrap()
}

fn config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        kt_steps: 8,
        pd_steps: 4,
        batch_size: 2,
        seq_len: 16,
        dropout: 0.0,
        seed: 11,
        ..Default::default()
    }
}

fn pair() -> (Model, Model) {
    let teacher = Model::build(&preset("desk_teacher").unwrap(), 1).unwrap();
    let mut student = Model::build(&preset("desk_student").unwrap(), 2).unwrap();
    copy_embedding_and_classifier(&teacher, &mut student).unwrap();
    (teacher, student)
}

fn same_bits(a: &Model, b: &Model, name: &str) -> bool {
    let (x, y) = (a.params.get(name).unwrap(), b.params.get(name).unwrap());
    x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

#[test]
fn identical_student_has_zero_transfer_loss() {
    let (teacher, _) = pair();
    let c = corpus();
    let batch = make_batch(&c, 2, 16, 5).unwrap();
    let loss = mean_kt_loss(&teacher, &teacher.clone(), &batch, &TransferWeights::default()).unwrap();
    assert!(loss.abs() < 1e-10, "{loss}");
}

#[test]
fn hard_freeze_is_bitwise() {
    let (teacher, student) = pair();
    let c = corpus();
    let cfg = TrainConfig {
        freeze_multiplier: 0.0,
        ..config(Strategy::Pkt)
    };
    let plan = cfg.plan(4).unwrap();
    assert_eq!(plan.stages[1].name, "pkt-1");
    let upto = |stop| {
        Run {
            plan: &plan,
            teacher: Some(&teacher),
            corpus: &c,
            weights: cfg.weights,
            config: &cfg,
            stop_after: Some(stop),
        }
        .execute(student.clone(), None)
        .unwrap()
        .model
    };
    let after0 = upto(plan.stages[0].steps);
    let after1 = upto(plan.stages[0].steps + plan.stages[1].steps);
    let mut moved = 0;
    for name in student.params.names() {
        if name.starts_with("embeddings.") || name.starts_with("layers.0.") {
            assert!(same_bits(&after0, &after1, name), "{name} moved while frozen");
        } else if name.starts_with("layers.1.") {
            moved += usize::from(!same_bits(&after0, &after1, name));
        } else {
            assert!(same_bits(&student, &after1, name), "{name} trained too early");
        }
    }
    assert!(moved > 0, "layer 1 never trained");
}

#[test]
fn teacher_is_left_alone() {
    let (teacher, student) = pair();
    let before = teacher.clone();
    let cfg = config(Strategy::Akt);
    run(&cfg.plan(4).unwrap(), &teacher, student, &corpus(), &cfg.weights, &cfg).unwrap();
    assert_eq!(before.params, teacher.params);
}

#[test]
fn first_combined_loss_matches_independent_sum() {
    let (teacher, student) = pair();
    let c = corpus();
    let cfg = config(Strategy::Akt);
    let out = run(&cfg.plan(4).unwrap(), &teacher, student.clone(), &c, &cfg.weights, &cfg).unwrap();

    let batch = make_batch(&c, 2, 16, stream::derive(cfg.seed, stream::DATA, 0)).unwrap();
    let (tr, st) = (batch_trace(&teacher, &batch).unwrap(), batch_trace(&student, &batch).unwrap());
    let kt: f64 = (0..4).map(|l| layer_kt_loss(&tr, &st, l, &cfg.weights).unwrap()).sum();

    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, false);
    let sc = &student.config;
    let input = EncoderInput {
        token_ids: &batch.token_ids,
        segment_ids: &batch.segment_ids,
        batch: batch.batch,
        len: batch.len,
        key_mask: Some(&batch.attention_mask),
    };
    let enc = encode_until(&mut tape, sc, &bound, &input, &mut NoDropout, 4).unwrap();
    let logits = mlm_logits(&mut tape, sc, &bound, enc.hidden, &batch.mlm_positions).unwrap();
    let nsp = nsp_logits(&mut tape, sc, &bound, enc.hidden, batch.batch, batch.len).unwrap();
    let targets = teacher_targets(&teacher, &batch).unwrap();
    let pd = pd_loss(
        tape.value(logits),
        &batch.mlm_labels,
        &targets.mlm_probs,
        tape.value(nsp),
        &batch.nsp_labels,
        cfg.weights.alpha,
    )
    .unwrap();

    let got = out.history[0].loss;
    assert!((got - (kt + pd.total)).abs() < 1e-10, "{got} vs {}", kt + pd.total);
}

#[test]
fn history_covers_every_budgeted_step() {
    let (teacher, student) = pair();
    let c = corpus();
    for s in Strategy::ALL {
        let cfg = config(s);
        let out = run(&cfg.plan(4).unwrap(), &teacher, student.clone(), &c, &cfg.weights, &cfg).unwrap();
        assert_eq!(out.history.len(), cfg.kt_steps + cfg.pd_steps, "{s}");
        let summed: usize = out.summaries().iter().map(|x| x.steps).sum();
        assert_eq!(summed, out.history.len());
    }
}

#[test]
fn resume_reproduces_the_loss_sequence() {
    let (teacher, student) = pair();
    let c = corpus();
    let cfg = TrainConfig {
        dropout: 0.1,
        ..config(Strategy::Pkt)
    };
    let plan = cfg.plan(4).unwrap();
    let full = run(&plan, &teacher, student.clone(), &c, &cfg.weights, &cfg).unwrap();

    let mk = |stop| Run {
        plan: &plan,
        teacher: Some(&teacher),
        corpus: &c,
        weights: cfg.weights,
        config: &cfg,
        stop_after: stop,
    };
    let first = mk(Some(5)).execute(student, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (mp, sp) = (dir.path().join("model.bin"), dir.path().join("state.bin"));
    first.model.to_archive().unwrap().save(&mp).unwrap();
    first.state.to_archive(&first.model).unwrap().save(&sp).unwrap();

    let model = Model::from_archive(&preset("desk_student").unwrap(), &mbkit::archive::Archive::load(&mp).unwrap()).unwrap();
    let state = TrainState::from_archive(&mbkit::archive::Archive::load(&sp).unwrap(), &model).unwrap();
    let rest = mk(None).execute(model, Some(state)).unwrap();

    let joined: Vec<f64> = first.history.iter().chain(&rest.history).map(|r| r.loss).collect();
    let whole: Vec<f64> = full.history.iter().map(|r| r.loss).collect();
    assert_eq!(joined, whole);
    assert_eq!(rest.model.params, full.model.params);
}

#[test]
fn pipelined_teacher_changes_nothing() {
    let (teacher, student) = pair();
    let c = corpus();
    let cfg = config(Strategy::Jkt);
    let plan = cfg.plan(4).unwrap();
    let a = run(&plan, &teacher, student.clone(), &c, &cfg.weights, &cfg).unwrap();
    let piped = TrainConfig { pipeline: true, ..cfg.clone() };
    let b = run(&plan, &teacher, student, &c, &cfg.weights, &piped).unwrap();
    assert_eq!(a.history, b.history);
}

#[test]
fn zero_step_teacher_is_its_initialization() {
    let cfg = config(Strategy::Pkt);
    let mc = preset("desk_teacher").unwrap();
    let out = pretrain_teacher(&mc, &corpus(), 0, &cfg).unwrap();
    assert!(out.history.is_empty());
    let init = Model::build(&mc, stream::derive(cfg.seed, stream::INIT, 0)).unwrap();
    assert_eq!(out.model.params, init.params);
}

#[test]
fn teacher_pretraining_is_deterministic() {
    let cfg = config(Strategy::Pkt);
    let mc = preset("desk_teacher").unwrap();
    let c = corpus();
    let a = pretrain_teacher(&mc, &c, 3, &cfg).unwrap();
    let b = pretrain_teacher(&mc, &c, 3, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert!(a.history.iter().all(|r| r.mlm.is_some() && r.nsp.is_some()));
}

#[test]
fn student_blocks_cannot_be_teachers() {
    let cfg = config(Strategy::Pkt);
    let r = pretrain_teacher(&preset("desk_student").unwrap(), &corpus(), 1, &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn copy_is_exact_and_checks_shapes() {
    let (teacher, student) = pair();
    for name in student.params.names() {
        if name.starts_with("embeddings.") || !name.starts_with("layers.") {
            assert!(same_bits(&teacher, &student, name), "{name}");
        }
    }
    let mut small = preset("desk_student").unwrap();
    small.h_embedding = 16;
    let mut other = Model::build(&small, 0).unwrap();
    match copy_embedding_and_classifier(&teacher, &mut other) {
        Err(Error::Copy { mismatched }) => assert!(!mismatched.is_empty()),
        r => panic!("expected a copy error, got {r:?}"),
    }
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (teacher, mut student) = pair();
    let i = student.params.position("layers.2.exit.weight").unwrap();
    student.params.tensor_mut(i).data_mut()[0] = f64::NAN;
    let cfg = config(Strategy::Akt);
    match run(&cfg.plan(4).unwrap(), &teacher, student, &corpus(), &cfg.weights, &cfg) {
        Err(Error::NonFinite { stage, step, .. }) => assert_eq!((stage.as_str(), step), ("akt", 0)),
        r => panic!("expected a numeric failure, got {:?}", r.map(|o| o.history.len())),
    }
}
