use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{decode_spans, EntitySpan};
use crate::data::LabelScheme;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl ClassScore {
    fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            gold,
            predicted,
            correct,
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Exact-match entity scores. Values are fractions in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<String, ClassScore>,
    pub gold_entities: usize,
    pub predicted_entities: usize,
    pub correct_entities: usize,
    pub tokens: usize,
}

/// Micro-averaged exact-match F1; a span counts only if boundaries and class agree.
pub fn entity_f1(gold: &[EntitySpan], pred: &[EntitySpan], scheme: &LabelScheme) -> MetricsReport {
    let gold_set: HashSet<&EntitySpan> = gold.iter().collect();
    let pred_set: HashSet<&EntitySpan> = pred.iter().collect();
    let correct: Vec<&EntitySpan> = pred_set.intersection(&gold_set).copied().collect();
    let total = ClassScore::from_counts(gold_set.len(), pred_set.len(), correct.len());
    let mut per_class = BTreeMap::new();
    for (c, name) in scheme.classes().iter().enumerate() {
        let g = gold_set.iter().filter(|s| s.class == c).count();
        let p = pred_set.iter().filter(|s| s.class == c).count();
        let k = correct.iter().filter(|s| s.class == c).count();
        per_class.insert(name.clone(), ClassScore::from_counts(g, p, k));
    }
    MetricsReport {
        precision: total.precision,
        recall: total.recall,
        f1: total.f1,
        per_class,
        gold_entities: total.gold,
        predicted_entities: total.predicted,
        correct_entities: total.correct,
        tokens: 0,
    }
}

/// Decodes gold and predicted tag sequences sentence by sentence and scores them.
pub fn evaluate_tags(gold: &[Vec<usize>], pred: &[Vec<usize>], scheme: &LabelScheme) -> MetricsReport {
    assert_eq!(gold.len(), pred.len(), "sentence counts differ");
    let mut g = Vec::new();
    let mut p = Vec::new();
    let mut tokens = 0;
    for (i, (gt, pt)) in gold.iter().zip(pred).enumerate() {
        assert_eq!(gt.len(), pt.len(), "sentence {i} lengths differ");
        tokens += gt.len();
        g.extend(decode_spans(i, gt, scheme).spans);
        p.extend(decode_spans(i, pt, scheme).spans);
    }
    let mut report = entity_f1(&g, &p, scheme);
    report.tokens = tokens;
    report
}
