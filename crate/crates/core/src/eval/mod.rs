//! Entity-level evaluation and selection analysis.

mod analysis;
mod metrics;
mod spans;

pub use analysis::{selection_error_rate, StrategyErrorRate};
pub use metrics::{entity_f1, evaluate_tags, f1_score, ClassScore, MetricsReport};
pub use spans::{decode_spans, encode_spans, DecodedSpans, EntitySpan};

use crate::data::Sentence;
use crate::model::SequenceLabeler;
use crate::Scalar;

/// Entity-level scores of deterministic predictions on gold-tagged sentences.
///
/// # Panics
/// If a sentence lacks gold tags.
pub fn evaluate_model<T: Scalar>(model: &SequenceLabeler<T>, sentences: &[Sentence]) -> MetricsReport {
    let gold: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.gold_tags.clone().expect("evaluation sentences carry gold tags"))
        .collect();
    let pred: Vec<Vec<usize>> = sentences.iter().map(|s| model.predict_tags(s)).collect();
    evaluate_tags(&gold, &pred, model.scheme())
}
