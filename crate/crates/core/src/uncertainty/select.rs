use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bald_score, certainty_score, confidence_score, pseudo_annotate, McPredictions};
use crate::data::{LabelScheme, Sentence};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Draw without replacement proportionally to the weights.
    Weighted,
    /// Take the largest weights, lowest index first on ties.
    Top,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "top" => Ok(Self::Top),
            other => Err(format!("unknown selection mode {other:?} (expected weighted or top)")),
        }
    }
}

/// Which scores enter the sampling weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every token is kept.
    None,
    Confidence,
    Certainty,
    Both,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Confidence, Strategy::Certainty, Strategy::Both];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Confidence => "confidence",
            Strategy::Certainty => "certainty",
            Strategy::Both => "both",
        }
    }
}

/// Normalized products `confidence * certainty`; uniform when they sum to 0.
pub fn sampling_weights<T: Scalar>(rows: &[(T, T)]) -> Vec<T> {
    if rows.is_empty() {
        return Vec::new();
    }
    let products: Vec<T> = rows.iter().map(|&(cf, ct)| cf * ct).collect();
    let total: T = products.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        log::warn!("all sampling weights are zero; falling back to uniform");
        let u = T::one() / T::of(rows.len() as f64);
        return vec![u; rows.len()];
    }
    products.into_iter().map(|p| p / total).collect()
}

/// `ceil(rho * len)`, at least 1 and at most `len`.
pub fn selection_count(rho: f64, len: usize) -> usize {
    assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    if len == 0 {
        return 0;
    }
    (((rho * len as f64) - 1e-9).ceil() as usize).clamp(1, len)
}

/// Selects `ceil(rho * L)` tokens; returns the mask row.
pub fn select_tokens<T: Scalar>(weights: &[T], rho: f64, seed: u64, mode: SelectionMode) -> Vec<bool> {
    let n = selection_count(rho, weights.len());
    let mut mask = vec![false; weights.len()];
    if n == weights.len() {
        mask.iter_mut().for_each(|m| *m = true);
        return mask;
    }
    match mode {
        SelectionMode::Top => {
            let mut order: Vec<usize> = (0..weights.len()).collect();
            order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            for &i in &order[..n] {
                mask[i] = true;
            }
        }
        SelectionMode::Weighted => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = weights.iter().map(|v| v.as_f64().max(0.0)).collect();
            for _ in 0..n {
                let remaining: Vec<usize> = (0..w.len()).filter(|&i| !mask[i]).collect();
                let total: f64 = remaining.iter().map(|&i| w[i]).sum();
                let pick = if total > 0.0 {
                    let mut u = rng.gen::<f64>() * total;
                    let mut chosen = *remaining.iter().rev().find(|&&i| w[i] > 0.0).unwrap();
                    for &i in &remaining {
                        if w[i] > 0.0 && u < w[i] {
                            chosen = i;
                            break;
                        }
                        u -= w[i];
                    }
                    chosen
                } else {
                    remaining[rng.gen_range(0..remaining.len())]
                };
                mask[pick] = true;
            }
        }
    }
    mask
}

/// Audit row for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sentence: usize,
    pub position: usize,
    pub token: String,
    pub pseudo_tag: String,
    pub bald: f64,
    pub confidence: f64,
    pub certainty: f64,
    pub weight: f64,
    pub selected: bool,
}

/// Pseudo labels, scores, weights and the mask row of one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub sentence: usize,
    pub pseudo: Vec<usize>,
    pub bald: Vec<f64>,
    pub confidence: Vec<f64>,
    pub certainty: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SelectionReport {
    /// Scores every token of `mc` and selects under `strategy`.
    pub fn build<T: Scalar>(
        sentence: usize,
        mc: &McPredictions<T>,
        strategy: Strategy,
        rho: f64,
        seed: u64,
        mode: SelectionMode,
    ) -> Self {
        let pseudo = pseudo_annotate(mc);
        let y = mc.num_classes();
        let mut bald = Vec::with_capacity(mc.len());
        let mut rows = Vec::with_capacity(mc.len());
        for (j, &p) in pseudo.iter().enumerate() {
            let b = bald_score(mc, j);
            bald.push(b);
            rows.push((confidence_score(mc, j, p), certainty_score(b, y)));
        }
        let mut report = Self {
            sentence,
            pseudo,
            bald: bald.iter().map(|v| v.as_f64()).collect(),
            confidence: rows.iter().map(|r| r.0.as_f64()).collect(),
            certainty: rows.iter().map(|r| r.1.as_f64()).collect(),
            weights: Vec::new(),
            mask: Vec::new(),
        };
        report.reselect(strategy, rho, seed, mode);
        report
    }

    /// Recomputes weights and mask from the stored scores.
    pub fn reselect(&mut self, strategy: Strategy, rho: f64, seed: u64, mode: SelectionMode) {
        let one = 1.0;
        let rows: Vec<(f64, f64)> = match strategy {
            Strategy::None => self.confidence.iter().map(|_| (one, one)).collect(),
            Strategy::Confidence => self.confidence.iter().map(|&c| (c, one)).collect(),
            Strategy::Certainty => self.certainty.iter().map(|&c| (one, c)).collect(),
            Strategy::Both => self.confidence.iter().zip(&self.certainty).map(|(&a, &b)| (a, b)).collect(),
        };
        self.weights = sampling_weights(&rows);
        self.mask = if strategy == Strategy::None {
            vec![true; rows.len()]
        } else {
            select_tokens(&self.weights, rho, seed, mode)
        };
    }

    pub fn len(&self) -> usize {
        self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn records(&self, sentence: &Sentence, scheme: &LabelScheme) -> Vec<TokenRecord> {
        (0..self.len())
            .map(|j| TokenRecord {
                sentence: self.sentence,
                position: j,
                token: sentence.tokens[j].clone(),
                pseudo_tag: scheme.tag_name(self.pseudo[j]).to_owned(),
                bald: self.bald[j],
                confidence: self.confidence[j],
                certainty: self.certainty[j],
                weight: self.weights[j],
                selected: self.mask[j],
            })
            .collect()
    }
}

/// One JSON object per token.
pub fn write_reports_jsonl<W: Write>(
    out: &mut W,
    reports: &[SelectionReport],
    sentences: &[Sentence],
    scheme: &LabelScheme,
) -> std::io::Result<()> {
    for r in reports {
        for rec in r.records(&sentences[r.sentence], scheme) {
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
