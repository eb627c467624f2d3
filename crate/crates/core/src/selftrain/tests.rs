use super::*;
use crate::data::{greedy_kshot_split, synth_corpus, GeneratorSettings, LabelScheme};
use crate::model::{Checkpoint, HeadKind};

fn small_split(seed: u64) -> CorpusSplit {
    let settings = GeneratorSettings {
        num_classes: 2,
        vocab_size: 40,
        corpus_size: 60,
        lexicon_size: 5,
        ..Default::default()
    };
    let (scheme, corpus) = synth_corpus(&settings, seed).unwrap();
    greedy_kshot_split(&corpus, &scheme, 3, seed).unwrap()
}

fn fast_config() -> TrainingConfig {
    TrainingConfig {
        emb_dim: 8,
        hidden: 6,
        teacher_epochs: 3,
        student_epochs: 1,
        t_passes: 3,
        max_iterations: 2,
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let split = small_split(1);
    let cfg = TrainingConfig { learning_rate: 0.0, teacher_epochs: 1, ..fast_config() };
    let base = initial_model::<f64>(&split, &cfg).unwrap();
    let out = train_supervised(base.clone(), &split.labeled, &split.validation, &cfg, RunSeeds::new(1)).unwrap();
    assert_eq!(out.model.params(), base.params());
}

#[test]
fn separable_toy_task_is_learned() {
    let scheme = LabelScheme::new(["X".to_string()]).unwrap();
    let s = |w: &[&str], t: &[usize]| Sentence::new(w.iter().map(|x| x.to_string()).collect(), Some(t.to_vec())).unwrap();
    let data = vec![
        s(&["a", "x", "b"], &[0, 1, 0]),
        s(&["x", "a"], &[1, 0]),
        s(&["b", "b", "x"], &[0, 0, 1]),
        s(&["x", "x"], &[1, 1]),
        s(&["a", "b"], &[0, 0]),
    ];
    for head in [HeadKind::Softmax, HeadKind::Crf] {
        let cfg = TrainingConfig { head, teacher_epochs: 50, batch_size: 1, emb_dim: 8, hidden: 8, ..Default::default() };
        let vocab = Vocab::build(&data);
        let base = SequenceLabeler::<f64>::new(cfg.model_config(), scheme.clone(), vocab, 3).unwrap();
        let out = train_supervised(base, &data, &data, &cfg, RunSeeds::new(2)).unwrap();
        assert_eq!(evaluate_model(&out.model, &data).f1, 1.0, "{head:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let split = small_split(2);
    let cfg = fast_config();
    let run = || {
        let base = initial_model::<f64>(&split, &cfg).unwrap();
        let out = train_supervised(base, &split.labeled, &split.validation, &cfg, RunSeeds::new(5)).unwrap();
        Checkpoint::from_model(&out.model).to_json()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_student_epochs_return_base() {
    let split = small_split(3);
    let cfg = TrainingConfig { student_epochs: 0, ..fast_config() };
    let base = initial_model::<f64>(&split, &cfg).unwrap();
    let teacher = train_supervised(base.clone(), &split.labeled, &split.validation, &cfg, RunSeeds::new(1)).unwrap();
    let round = student_round(&base, &teacher.model, &split.unlabeled, &split.labeled, &split.validation, &cfg, RunSeeds::new(2)).unwrap();
    assert_eq!(round.student.model, base);
    assert_eq!(round.reports.len(), split.unlabeled.len());
}

#[test]
fn loop_shapes() {
    let split = small_split(4);
    let cfg = TrainingConfig { max_iterations: 0, ..fast_config() };
    let base = initial_model::<f64>(&split, &cfg).unwrap();
    let out = self_train(&base, &split, &cfg, None).unwrap();
    assert_eq!(out.records.len(), 1);

    let cfg = TrainingConfig { mode: Mode::SupervisedOnly, ..fast_config() };
    let out = self_train(&base, &split, &cfg, None).unwrap();
    let direct = train_supervised(base.clone(), &split.labeled, &split.validation, &cfg, RunSeeds::new(cfg.seed).child(0)).unwrap();
    assert_eq!(out.model, direct.model);

    let cfg = TrainingConfig { patience: 5, ..fast_config() };
    let out = self_train(&base, &split, &cfg, None).unwrap();
    assert_eq!(out.records.len(), 3);
    let best = out.records.iter().map(|r| r.validation_f1).fold(f64::MIN, f64::max);
    assert_eq!(out.records[out.best_iteration].validation_f1, best);
    assert!(out.records.windows(2).all(|w| w[0].iteration + 1 == w[1].iteration));
}

#[test]
fn sst_reduction_small() {
    let split = small_split(5);
    let reduced = TrainingConfig {
        dropout: 0.0,
        rho: 1.0,
        loss: crate::losses::LossKind::CrossEntropy,
        lambda: 0.0,
        max_iterations: 1,
        ..fast_config()
    };
    let base = initial_model::<f64>(&split, &reduced).unwrap();
    let a = self_train(&base, &split, &reduced, None).unwrap();
    let sst = TrainingConfig { mode: Mode::Sst, ..reduced.clone() };
    let b = self_train(&base, &split, &sst, None).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn run_directory_layout() {
    let split = small_split(6);
    let cfg = TrainingConfig { max_iterations: 1, ..fast_config() };
    let base = initial_model::<f64>(&split, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = self_train(&base, &split, &cfg, Some(dir.path())).unwrap();
    let root = dir.path();
    assert_eq!(TrainingConfig::from_toml(&fs::read_to_string(root.join("config.toml")).unwrap()).unwrap(), cfg);
    let lines: Vec<IterationRecord> = fs::read_to_string(root.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.records);
    for r in &lines {
        let ck = r.checkpoint.as_ref().unwrap();
        let m: SequenceLabeler<f64> = crate::model::load_checkpoint(&root.join(ck)).unwrap();
        assert_eq!(evaluate_model(&m, &split.validation).f1, r.validation_f1);
    }
    let sel = fs::read_to_string(root.join("selection/iter_1.jsonl")).unwrap();
    let tokens: usize = split.unlabeled.iter().map(Sentence::len).sum();
    assert_eq!(sel.lines().count(), tokens);
}
