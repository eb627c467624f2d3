//! Teacher fine-tuning, pseudo labeling with token selection, student
//! training, and the iterated self-training loop.

mod config;
mod optim;

pub use config::{Mode, TrainingConfig};
pub use optim::{schedule, AdamW};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CorpusSplit, DataError, Sentence};
use crate::eval::evaluate_model;
use crate::losses::{combined_objective, supervised_objective, LossError, MaskedSentence, ObjectiveValue};
use crate::model::{save_checkpoint, ModelError, SequenceLabeler, Vocab};
use crate::numerics::{RunSeeds, Stream, Tensor};
use crate::uncertainty::{mc_predict, write_reports_jsonl, McPredictions, SelectionReport, Strategy};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config field {field} = {value}: {constraint}")]
    Config {
        field: &'static str,
        value: String,
        constraint: &'static str,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("labeled set is empty")]
    EmptyLabeled,
    #[error("unlabeled set is empty")]
    EmptyUnlabeled,
    #[error("labeled sentence {0} has no gold tags")]
    MissingGold(usize),
    #[error("teacher selected no token in any sentence")]
    EmptySelection,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A trained model with its epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: SequenceLabeler<T>,
    /// Latest epoch with the highest validation F1; 0 only without epochs.
    pub best_epoch: usize,
    pub validation_f1: f64,
    /// Mean per-sentence loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Fresh parameters `W_0` over the vocabulary of every split part.
pub fn initial_model<T: Scalar>(split: &CorpusSplit, config: &TrainingConfig) -> Result<SequenceLabeler<T>, TrainError> {
    let vocab = Vocab::build(split.labeled.iter().chain(&split.validation).chain(&split.unlabeled));
    let seed = RunSeeds::new(config.seed).seed(Stream::Init, 0);
    Ok(SequenceLabeler::new(config.model_config(), split.scheme().clone(), vocab, seed)?)
}

fn validation_f1<T: Scalar>(model: &SequenceLabeler<T>, validation: &[Sentence]) -> f64 {
    if validation.is_empty() {
        0.0
    } else {
        evaluate_model(model, validation).f1
    }
}

/// Shared epoch loop: shuffles `n` items per epoch, steps AdamW on the
/// objective of each batch, keeps the best validation epoch (the later one
/// on ties).
fn fit<T, F>(
    mut model: SequenceLabeler<T>,
    n: usize,
    epochs: usize,
    validation: &[Sentence],
    config: &TrainingConfig,
    seeds: RunSeeds,
    mut objective: F,
) -> Result<TrainOutcome<T>, TrainError>
where
    T: Scalar,
    F: FnMut(&SequenceLabeler<T>, &[usize], u64) -> Result<ObjectiveValue<T>, TrainError>,
{
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let mut opt = AdamW::new(&model, config.learning_rate, config.weight_decay, config.warmup_rate, epochs * batches_per_epoch);
    let mut best = (if epochs == 0 { validation_f1(&model, validation) } else { f64::NEG_INFINITY }, 0usize, model.clone());
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds.rng(Stream::Data, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let step_seed = seeds.seed(Stream::Dropout, opt.steps_taken() as u64);
            let value = objective(&model, batch, step_seed)?;
            total += value.loss.as_f64();
            opt.step(&mut model, &value.grads);
        }
        curve.push(total / n.max(1) as f64);
        if validation.is_empty() {
            best = (0.0, epoch, model.clone());
            continue;
        }
        let f1 = validation_f1(&model, validation);
        if f1 >= best.0 {
            best = (f1, epoch, model.clone());
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        best_epoch: best.1,
        validation_f1: best.0,
        loss_curve: curve,
    })
}

fn check_labeled(labeled: &[Sentence]) -> Result<(), TrainError> {
    if labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    if let Some(i) = labeled.iter().position(|s| s.gold_tags.is_none()) {
        return Err(TrainError::MissingGold(i));
    }
    Ok(())
}

/// Minimizes the supervised negative log-likelihood on `labeled`; returns
/// the parameters of the best validation epoch.
pub fn train_supervised<T: Scalar>(
    model: SequenceLabeler<T>,
    labeled: &[Sentence],
    validation: &[Sentence],
    config: &TrainingConfig,
    seeds: RunSeeds,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    check_labeled(labeled)?;
    fit(model, labeled.len(), config.teacher_epochs, validation, config, seeds, |m, batch, seed| {
        let items: Vec<(u64, &Sentence)> = batch.iter().map(|&i| (i as u64, &labeled[i])).collect();
        Ok(supervised_objective(&items, m, seed, true)?)
    })
}

/// Aggregates over the pseudo-labeled corpus of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub sentences: usize,
    pub tokens_total: usize,
    pub tokens_selected: usize,
    pub mean_bald: f64,
    pub mean_confidence: f64,
}

impl SelectionStats {
    pub fn from_reports(reports: &[SelectionReport]) -> Self {
        let tokens_total: usize = reports.iter().map(SelectionReport::len).sum();
        let mean = |f: fn(&SelectionReport) -> &Vec<f64>| {
            let mut m = 0.0;
            let mut k = 0usize;
            for r in reports {
                for &v in f(r) {
                    k += 1;
                    m += (v - m) / k as f64;
                }
            }
            m
        };
        Self {
            sentences: reports.len(),
            tokens_total,
            tokens_selected: reports.iter().map(SelectionReport::selected).sum(),
            mean_bald: mean(|r| &r.bald),
            mean_confidence: mean(|r| &r.confidence),
        }
    }
}

/// Teacher distributions for one sentence: `T` dropout passes, or a single
/// deterministic pass in plain self-training.
pub fn teacher_predictions<T: Scalar>(
    teacher: &SequenceLabeler<T>,
    sentence: &Sentence,
    config: &TrainingConfig,
    seed: u64,
) -> McPredictions<T> {
    match config.mode {
        Mode::Sst => {
            let probs: Tensor<T> = teacher.encode(sentence, false, 0).probs;
            McPredictions::new(vec![probs], vec![0]).expect("model rows are distributions")
        }
        _ => mc_predict(teacher, sentence, config.t_passes, seed),
    }
}

/// Pseudo labels, scores and masks for every unlabeled sentence.
pub fn pseudo_label<T: Scalar>(
    teacher: &SequenceLabeler<T>,
    unlabeled: &[Sentence],
    config: &TrainingConfig,
    seeds: RunSeeds,
) -> Vec<SelectionReport> {
    let strategy = if config.mode == Mode::Sst { Strategy::None } else { Strategy::Both };
    unlabeled
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mc = teacher_predictions(teacher, s, config, seeds.seed(Stream::McDropout, i as u64));
            SelectionReport::build(i, &mc, strategy, config.rho, seeds.seed(Stream::Selection, i as u64), config.selection)
        })
        .collect()
}

/// Result of one teacher → student round.
#[derive(Clone, Debug)]
pub struct StudentRound<T: Scalar> {
    pub student: TrainOutcome<T>,
    pub reports: Vec<SelectionReport>,
    pub stats: SelectionStats,
}

/// Restarts from `base`, pseudo-labels `unlabeled` once with the frozen
/// teacher, then trains the student on the masked corpus.
#[allow(clippy::too_many_arguments)]
pub fn student_round<T: Scalar>(
    base: &SequenceLabeler<T>,
    teacher: &SequenceLabeler<T>,
    unlabeled: &[Sentence],
    labeled: &[Sentence],
    validation: &[Sentence],
    config: &TrainingConfig,
    seeds: RunSeeds,
) -> Result<StudentRound<T>, TrainError> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(TrainError::EmptyUnlabeled);
    }
    let reports = pseudo_label(teacher, unlabeled, config, seeds);
    if reports.iter().all(|r| r.selected() == 0) {
        return Err(TrainError::EmptySelection);
    }
    let stats = SelectionStats::from_reports(&reports);
    let corpus: Vec<MaskedSentence> = reports
        .iter()
        .zip(unlabeled)
        .map(|(r, s)| MaskedSentence {
            id: r.sentence as u64,
            sentence: s.clone(),
            pseudo: r.pseudo.clone(),
            mask: r.mask.clone(),
        })
        .collect();
    let mut loss_cfg = config.loss_config();
    if config.mode == Mode::Sst {
        loss_cfg.loss_kind = crate::losses::LossKind::CrossEntropy;
        loss_cfg.lambda = 0.0;
    }
    let labeled_batches: Vec<Vec<usize>> = if config.student_labeled {
        check_labeled(labeled)?;
        (0..labeled.len()).collect::<Vec<_>>().chunks(config.batch_size).map(<[usize]>::to_vec).collect()
    } else {
        Vec::new()
    };
    let mut step = 0usize;
    let student = fit(base.clone(), corpus.len(), config.student_epochs, validation, config, seeds, |m, batch, seed| {
        let items: Vec<MaskedSentence> = batch.iter().map(|&i| corpus[i].clone()).collect();
        let mut value = combined_objective(&items, m, &loss_cfg, seed, true)?;
        if !labeled_batches.is_empty() {
            let lb = &labeled_batches[step % labeled_batches.len()];
            let pairs: Vec<(u64, &Sentence)> = lb.iter().map(|&i| (i as u64 | 1 << 63, &labeled[i])).collect();
            let sup = supervised_objective(&pairs, m, seed, true)?;
            value.loss += sup.loss;
            for (a, b) in value.grads.grads.iter_mut().zip(&sup.grads.grads) {
                a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
            }
        }
        step += 1;
        Ok(value)
    })?;
    Ok(StudentRound { student, reports, stats })
}

/// One entry per completed iteration; iteration 0 is the fine-tuned teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub validation_f1: f64,
    /// Validation F1 of the teacher after labeled fine-tuning, before it
    /// pseudo-labeled this round.
    pub teacher_f1: Option<f64>,
    pub selection: Option<SelectionStats>,
    pub loss_curve: Vec<f64>,
    /// Relative to the run directory.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome<T: Scalar> {
    /// Model of the best validation iteration.
    pub model: SequenceLabeler<T>,
    pub best_iteration: usize,
    pub records: Vec<IterationRecord>,
}

struct RunDir<'a> {
    root: Option<&'a Path>,
}

impl RunDir<'_> {
    fn persist<T: Scalar>(
        &self,
        record: &mut IterationRecord,
        model: &SequenceLabeler<T>,
        reports: Option<(&[SelectionReport], &[Sentence])>,
    ) -> Result<(), TrainError> {
        let Some(root) = self.root else { return Ok(()) };
        let rel = format!("checkpoints/iter_{}.json", record.iteration);
        save_checkpoint(model, &root.join(&rel))?;
        record.checkpoint = Some(rel);
        if let Some((reports, sentences)) = reports {
            let dir = root.join("selection");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let path = dir.join(format!("iter_{}.jsonl", record.iteration));
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            write_reports_jsonl(&mut f, reports, sentences, model.scheme()).map_err(io_err(&path))?;
            f.flush().map_err(io_err(&path))?;
        }
        let path = root.join("records.jsonl");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(io_err(&path))?;
        Ok(())
    }
}

/// The full loop: fine-tune the teacher on the labeled set, then repeat
/// student rounds (teacher ← student, fine-tuned again on the labeled set
/// before it labels the next round) until validation F1 stalls for
/// `patience` iterations or `max_iterations` is reached.
///
/// With `run_dir`, the resolved config, every checkpoint, the selection
/// reports and `records.jsonl` are written there before the next iteration.
pub fn self_train<T: Scalar>(
    base: &SequenceLabeler<T>,
    split: &CorpusSplit,
    config: &TrainingConfig,
    run_dir: Option<&Path>,
) -> Result<SelfTrainOutcome<T>, TrainError> {
    config.check()?;
    if let Some(root) = run_dir {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join("config.toml");
        fs::write(&path, config.to_toml()).map_err(io_err(&path))?;
        let records = root.join("records.jsonl");
        if records.exists() {
            fs::remove_file(&records).map_err(io_err(&records))?;
        }
    }
    let dir = RunDir { root: run_dir };
    let seeds = RunSeeds::new(config.seed);
    let (labeled, validation, unlabeled) = (&split.labeled, &split.validation, &split.unlabeled);

    let teacher = train_supervised(base.clone(), labeled, validation, config, seeds.child(0))?;
    let mut record = IterationRecord {
        iteration: 0,
        validation_f1: teacher.validation_f1,
        teacher_f1: None,
        selection: None,
        loss_curve: teacher.loss_curve.clone(),
        checkpoint: None,
    };
    dir.persist(&mut record, &teacher.model, None)?;
    let mut records = vec![record];
    let mut best = (teacher.validation_f1, 0usize, teacher.model.clone());
    if config.mode == Mode::SupervisedOnly {
        return Ok(SelfTrainOutcome {
            model: best.2,
            best_iteration: 0,
            records,
        });
    }

    let mut current = teacher;
    let mut stale = 0usize;
    for iteration in 1..=config.max_iterations {
        let round_seeds = seeds.child(iteration as u64);
        let teacher_f1 = if iteration > 1 {
            current = train_supervised(current.model, labeled, validation, config, round_seeds.child(0))?;
            Some(current.validation_f1)
        } else {
            None
        };
        let round = student_round(base, &current.model, unlabeled, labeled, validation, config, round_seeds.child(1))?;
        let mut record = IterationRecord {
            iteration,
            validation_f1: round.student.validation_f1,
            teacher_f1,
            selection: Some(round.stats.clone()),
            loss_curve: round.student.loss_curve.clone(),
            checkpoint: None,
        };
        dir.persist(&mut record, &round.student.model, Some((&round.reports, unlabeled)))?;
        log::info!(
            "iteration {iteration}: validation F1 {:.4}, {} of {} tokens selected",
            record.validation_f1,
            round.stats.tokens_selected,
            round.stats.tokens_total
        );
        records.push(record);
        current = round.student;
        if current.validation_f1 > best.0 {
            best = (current.validation_f1, iteration, current.model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(SelfTrainOutcome {
        model: best.2,
        best_iteration: best.1,
        records,
    })
}

#[cfg(test)]
mod tests;
