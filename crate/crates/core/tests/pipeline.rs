use selftag::data::{greedy_kshot_split, parse_conll, synth_corpus, write_conll, CorpusSplit, GeneratorSettings};
use selftag::eval::{evaluate_model, selection_error_rate};
use selftag::model::{load_checkpoint, SequenceLabeler};
use selftag::numerics::RunSeeds;
use selftag::selftrain::{initial_model, pseudo_label, self_train, train_supervised, IterationRecord, Mode, TrainingConfig};
use selftag::uncertainty::{SelectionMode, Strategy};
use tempfile::TempDir;

fn split(seed: u64) -> CorpusSplit {
    let settings = GeneratorSettings {
        corpus_size: 250,
        ..Default::default()
    };
    let (scheme, corpus) = synth_corpus(&settings, seed).unwrap();
    greedy_kshot_split(&corpus, &scheme, 5, seed).unwrap()
}

fn quick(mode: Mode) -> TrainingConfig {
    TrainingConfig {
        mode,
        seed: 3,
        teacher_epochs: 4,
        student_epochs: 1,
        t_passes: 4,
        max_iterations: 2,
        patience: 5,
        ..Default::default()
    }
}

#[test]
fn split_survives_disk_round_trip() {
    let s = split(1);
    let dir = TempDir::new().unwrap();
    s.save(dir.path()).unwrap();
    let back = CorpusSplit::load(dir.path(), 64).unwrap();
    assert_eq!(back.labeled, s.labeled);
    assert_eq!(back.validation, s.validation);
    assert_eq!(back.unlabeled, s.unlabeled);
    assert_eq!(back.gold_for_analysis(), s.gold_for_analysis());
    assert_eq!(back.manifest, s.manifest);

    let text = write_conll(&s.labeled, s.scheme()).unwrap();
    assert_eq!(parse_conll(&text, s.scheme(), 64).unwrap().sentences, s.labeled);
}

#[test]
fn self_training_run_directory_is_consistent() {
    let s = split(2);
    let cfg = quick(Mode::Sequst);
    let dir = TempDir::new().unwrap();
    let base = initial_model::<f64>(&s, &cfg).unwrap();
    let out = self_train(&base, &s, &cfg, Some(dir.path())).unwrap();

    let lines = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    let records: Vec<IterationRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.records);
    let best = out.records.iter().map(|r| r.validation_f1).fold(f64::MIN, f64::max);
    assert_eq!(out.records[out.best_iteration].validation_f1, best);

    // The returned model is exactly the stored checkpoint of its iteration.
    let ckpt = out.records[out.best_iteration].checkpoint.as_ref().unwrap();
    let stored: SequenceLabeler<f64> = load_checkpoint(&dir.path().join(ckpt)).unwrap();
    assert_eq!(stored.flat_params().values(), out.model.flat_params().values());
    assert_eq!(evaluate_model(&stored, &s.validation).f1, best);

    let config_text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(TrainingConfig::from_toml(&config_text).unwrap(), cfg);
}

#[test]
fn supervised_only_mode_matches_direct_training() {
    let s = split(4);
    let cfg = quick(Mode::SupervisedOnly);
    let base = initial_model::<f64>(&s, &cfg).unwrap();
    let loop_out = self_train(&base, &s, &cfg, None).unwrap();
    let direct = train_supervised(base, &s.labeled, &s.validation, &cfg, RunSeeds::new(cfg.seed).child(0)).unwrap();
    assert_eq!(loop_out.records.len(), 1);
    assert_eq!(loop_out.model.flat_params().values(), direct.model.flat_params().values());
}

#[test]
fn none_strategy_covers_every_token_regardless_of_budget() {
    let s = split(6);
    let cfg = quick(Mode::Sequst);
    let base = initial_model::<f64>(&s, &cfg).unwrap();
    let teacher = train_supervised(base, &s.labeled, &s.validation, &cfg, RunSeeds::new(1)).unwrap();
    let reports = pseudo_label(&teacher.model, &s.unlabeled, &cfg, RunSeeds::new(1));
    let rates = selection_error_rate(&reports, s.gold_for_analysis(), 0.5, 1, SelectionMode::Weighted);
    let none = rates.iter().find(|r| r.strategy == Strategy::None).unwrap();
    let total: usize = s.unlabeled.iter().map(|x| x.len()).sum();
    assert_eq!(none.selected, total);
    // Rate of `none` ignores rho and the selection seed.
    let again = selection_error_rate(&reports, s.gold_for_analysis(), 0.2, 99, SelectionMode::Top);
    assert_eq!(again.iter().find(|r| r.strategy == Strategy::None).unwrap(), none);
}
