use serde::{Deserialize, Serialize};

use crate::numerics::derive_seed;
use crate::uncertainty::{SelectionMode, SelectionReport, Strategy};

/// Pseudo-label error rate among the tokens one strategy selects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyErrorRate {
    pub strategy: Strategy,
    pub selected: usize,
    pub errors: usize,
    /// `errors / selected`, 0 when nothing is selected.
    pub rate: f64,
}

/// Re-selects every report under each strategy from the same scores and
/// counts selected tokens whose pseudo label differs from gold. Reports
/// without gold tags are skipped.
pub fn selection_error_rate(
    reports: &[SelectionReport],
    gold: &[Option<Vec<usize>>],
    rho: f64,
    seed: u64,
    mode: SelectionMode,
) -> Vec<StrategyErrorRate> {
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let (mut selected, mut errors) = (0usize, 0usize);
            for r in reports {
                let Some(Some(g)) = gold.get(r.sentence) else { continue };
                let mut r = r.clone();
                r.reselect(strategy, rho, derive_seed(seed, 0, r.sentence as u64), mode);
                for ((&m, &p), &t) in r.mask.iter().zip(&r.pseudo).zip(g) {
                    if m {
                        selected += 1;
                        errors += usize::from(p != t);
                    }
                }
            }
            StrategyErrorRate {
                strategy,
                selected,
                errors,
                rate: if selected == 0 { 0.0 } else { errors as f64 / selected as f64 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(sentence: usize, pseudo: Vec<usize>, confidence: Vec<f64>, certainty: Vec<f64>) -> SelectionReport {
        let n = pseudo.len();
        SelectionReport {
            sentence,
            pseudo,
            bald: vec![0.0; n],
            confidence,
            certainty,
            weights: vec![],
            mask: vec![],
        }
    }

    #[test]
    fn correct_labels_give_zero_everywhere() {
        let reports = vec![report(0, vec![1, 0, 2], vec![0.9, 0.5, 0.7], vec![0.3, 1.0, 0.8])];
        let gold = vec![Some(vec![1, 0, 2])];
        for r in selection_error_rate(&reports, &gold, 0.5, 3, SelectionMode::Weighted) {
            assert_eq!(r.rate, 0.0);
        }
    }

    #[test]
    fn none_is_plain_error_rate_and_ignores_rho() {
        let reports = vec![
            report(0, vec![1, 0, 2, 0], vec![0.9, 0.5, 0.7, 0.4], vec![0.3, 1.0, 0.8, 0.2]),
            report(1, vec![0, 0], vec![0.6, 0.9], vec![0.9, 0.9]),
        ];
        let gold = vec![Some(vec![1, 1, 2, 1]), Some(vec![0, 3])];
        for (rho, seed) in [(0.2, 1), (0.9, 7)] {
            let rates = selection_error_rate(&reports, &gold, rho, seed, SelectionMode::Weighted);
            assert_eq!(rates[0].strategy, Strategy::None);
            assert_eq!((rates[0].selected, rates[0].errors), (6, 3));
        }
    }

    #[test]
    fn targeted_scores_avoid_errors() {
        let reports = vec![report(0, vec![0, 1, 1, 0], vec![0.9, 0.2, 0.3, 0.8], vec![0.95, 0.1, 0.2, 0.9])];
        let gold = vec![Some(vec![0, 0, 0, 0])];
        let rates = selection_error_rate(&reports, &gold, 0.5, 0, SelectionMode::Top);
        assert_eq!(rates[0].rate, 0.5);
        assert!(rates[1..].iter().all(|r| r.rate == 0.0));
    }
}
