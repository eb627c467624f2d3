use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parse_conll, write_conll, DataError, LabelScheme, Sentence};
use crate::eval::decode_spans;

/// Provenance of a split, written next to the three corpus files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub k: usize,
    pub scheme: LabelScheme,
    pub labeled_counts: BTreeMap<String, usize>,
    pub validation_counts: BTreeMap<String, usize>,
    pub labeled_size: usize,
    pub validation_size: usize,
    pub unlabeled_size: usize,
    /// Indices into the input corpus, per part.
    pub labeled_origin: Vec<usize>,
    pub validation_origin: Vec<usize>,
    pub unlabeled_origin: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Labeled, validation and unlabeled parts. Gold tags of the unlabeled
/// part are kept apart and only reachable through
/// [`CorpusSplit::gold_for_analysis`].
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub labeled: Vec<Sentence>,
    pub validation: Vec<Sentence>,
    pub unlabeled: Vec<Sentence>,
    unlabeled_gold: Vec<Option<Vec<usize>>>,
    pub manifest: SplitManifest,
}

pub const LABELED_FILE: &str = "labeled.conll";
pub const VALIDATION_FILE: &str = "validation.conll";
pub const UNLABELED_FILE: &str = "unlabeled.conll";
pub const MANIFEST_FILE: &str = "manifest.json";

fn class_counts(tags: &[usize], scheme: &LabelScheme) -> Vec<usize> {
    let mut counts = vec![0; scheme.num_classes()];
    for span in decode_spans(0, tags, scheme).spans {
        counts[span.class] += 1;
    }
    counts
}

/// One greedy pass: admit a sentence if it holds an entity of an
/// under-filled class and no class would exceed `k`.
fn greedy_pick(
    order: &[usize],
    counts_of: &[Vec<usize>],
    taken: &mut [bool],
    k: usize,
) -> (Vec<usize>, Vec<usize>) {
    let classes = counts_of.first().map_or(0, Vec::len);
    let mut totals = vec![0usize; classes];
    let mut picked = Vec::new();
    for &i in order {
        if totals.iter().all(|&c| c >= k) {
            break;
        }
        if taken[i] {
            continue;
        }
        let c = &counts_of[i];
        let helps = c.iter().zip(&totals).any(|(&n, &t)| n > 0 && t < k);
        let fits = c.iter().zip(&totals).all(|(&n, &t)| t + n <= k);
        if helps && fits {
            for (t, &n) in totals.iter_mut().zip(c) {
                *t += n;
            }
            taken[i] = true;
            picked.push(i);
        }
    }
    (picked, totals)
}

fn named(counts: &[usize], scheme: &LabelScheme) -> BTreeMap<String, usize> {
    scheme.classes().iter().cloned().zip(counts.iter().copied()).collect()
}

/// Greedy per-class K-shot split into labeled, validation and unlabeled parts.
pub fn greedy_kshot_split(
    corpus: &[Sentence],
    scheme: &LabelScheme,
    k: usize,
    seed: u64,
) -> Result<CorpusSplit, DataError> {
    if k == 0 {
        return Err(DataError::InvalidK);
    }
    let counts_of = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.gold_tags
                .as_ref()
                .map(|t| class_counts(t, scheme))
                .ok_or(DataError::MissingGold(i))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![false; corpus.len()];
    let (labeled_idx, labeled_counts) = greedy_pick(&order, &counts_of, &mut taken, k);
    let (validation_idx, validation_counts) = greedy_pick(&order, &counts_of, &mut taken, k);
    let unlabeled_idx: Vec<usize> = order.iter().copied().filter(|&i| !taken[i]).collect();
    if labeled_idx.len() > unlabeled_idx.len() {
        return Err(DataError::TooSmall {
            labeled: labeled_idx.len(),
            unlabeled: unlabeled_idx.len(),
        });
    }

    let mut warnings = Vec::new();
    for (part, counts) in [("labeled", &labeled_counts), ("validation", &validation_counts)] {
        for (class, &n) in scheme.classes().iter().zip(counts.iter()) {
            if n < k {
                let msg = format!("{part} split: class {class} has {n} of {k} entities (corpus exhausted)");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    let manifest = SplitManifest {
        seed,
        k,
        scheme: scheme.clone(),
        labeled_counts: named(&labeled_counts, scheme),
        validation_counts: named(&validation_counts, scheme),
        labeled_size: labeled_idx.len(),
        validation_size: validation_idx.len(),
        unlabeled_size: unlabeled_idx.len(),
        labeled_origin: labeled_idx.clone(),
        validation_origin: validation_idx.clone(),
        unlabeled_origin: unlabeled_idx.clone(),
        warnings,
    };
    Ok(CorpusSplit {
        labeled: pick(&labeled_idx),
        validation: pick(&validation_idx),
        unlabeled: unlabeled_idx.iter().map(|&i| corpus[i].without_gold()).collect(),
        unlabeled_gold: unlabeled_idx.iter().map(|&i| corpus[i].gold_tags.clone()).collect(),
        manifest,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl CorpusSplit {
    /// Gold tags of the unlabeled part, for selection error analysis only.
    pub fn gold_for_analysis(&self) -> &[Option<Vec<usize>>] {
        &self.unlabeled_gold
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.manifest.scheme
    }

    /// Writes the three parts and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let scheme = self.scheme();
        let unlabeled: Vec<Sentence> = self
            .unlabeled
            .iter()
            .zip(&self.unlabeled_gold)
            .map(|(s, g)| Sentence {
                tokens: s.tokens.clone(),
                gold_tags: Some(g.clone().unwrap_or_else(|| vec![0; s.len()])),
            })
            .collect();
        for (name, part) in [
            (LABELED_FILE, &self.labeled),
            (VALIDATION_FILE, &self.validation),
            (UNLABELED_FILE, &unlabeled),
        ] {
            let path = dir.join(name);
            fs::write(&path, write_conll(part, scheme)?).map_err(io_err(&path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path, max_length: usize) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: SplitManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        let read = |name: &str| -> Result<Vec<Sentence>, DataError> {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(parse_conll(&text, &manifest.scheme, max_length)?.sentences)
        };
        let labeled = read(LABELED_FILE)?;
        let validation = read(VALIDATION_FILE)?;
        let raw = read(UNLABELED_FILE)?;
        Ok(Self {
            labeled,
            validation,
            unlabeled: raw.iter().map(Sentence::without_gold).collect(),
            unlabeled_gold: raw.into_iter().map(|s| s.gold_tags).collect(),
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, GeneratorSettings};

    fn one_entity_corpus() -> (LabelScheme, Vec<Sentence>) {
        let scheme = LabelScheme::new(["A", "B", "C"]).unwrap();
        let mut corpus = Vec::new();
        for i in 0..30 {
            let class = i % 3;
            corpus.push(
                Sentence::new(
                    vec!["x".into(), format!("e{i}"), "y".into()],
                    Some(vec![0, scheme.begin(class), 0]),
                )
                .unwrap(),
            );
        }
        (scheme, corpus)
    }

    #[test]
    fn single_entity_sentences_fill_exactly() {
        let (scheme, corpus) = one_entity_corpus();
        let split = greedy_kshot_split(&corpus, &scheme, 2, 5).unwrap();
        assert_eq!(split.labeled.len(), 6);
        assert!(split.manifest.labeled_counts.values().all(|&n| n == 2));
        assert_eq!(split.validation.len(), 6);
        assert_eq!(split.unlabeled.len(), 18);
        assert!(split.manifest.warnings.is_empty());
        assert!(split.unlabeled.iter().all(|s| s.gold_tags.is_none()));
    }

    #[test]
    fn exhaustion_caps_and_warns() {
        let (scheme, mut corpus) = one_entity_corpus();
        for _ in 0..40 {
            corpus.push(Sentence::new(vec!["z".into()], Some(vec![0])).unwrap());
        }
        let split = greedy_kshot_split(&corpus, &scheme, 7, 5).unwrap();
        assert!(split.manifest.labeled_counts.values().all(|&n| n == 7));
        // 10 per class in total, 3 left for validation
        assert!(split.manifest.validation_counts.values().all(|&n| n == 3));
        assert_eq!(split.manifest.warnings.len(), 3);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let settings = GeneratorSettings::default();
        let (scheme, corpus) = synth_corpus(&settings, 3).unwrap();
        let a = greedy_kshot_split(&corpus, &scheme, 5, 11).unwrap();
        let b = greedy_kshot_split(&corpus, &scheme, 5, 11).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let m = &a.manifest;
        let mut all: Vec<usize> = m
            .labeled_origin
            .iter()
            .chain(&m.validation_origin)
            .chain(&m.unlabeled_origin)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..corpus.len()).collect::<Vec<_>>());
        assert!(m.labeled_counts.values().all(|&n| n <= 5));
        assert!(m.labeled_size <= m.unlabeled_size);
    }

    #[test]
    fn labeled_may_not_outgrow_unlabeled() {
        let (scheme, corpus) = one_entity_corpus();
        assert!(matches!(
            greedy_kshot_split(&corpus, &scheme, 7, 5),
            Err(DataError::TooSmall { labeled: 21, unlabeled: 0 })
        ));
    }

    #[test]
    fn errors() {
        let (scheme, mut corpus) = one_entity_corpus();
        assert!(matches!(greedy_kshot_split(&corpus, &scheme, 0, 1), Err(DataError::InvalidK)));
        corpus[4].gold_tags = None;
        assert!(matches!(
            greedy_kshot_split(&corpus, &scheme, 1, 1),
            Err(DataError::MissingGold(4))
        ));
    }

    #[test]
    fn save_load_keeps_gold_quarantined() {
        let (scheme, corpus) = one_entity_corpus();
        let split = greedy_kshot_split(&corpus, &scheme, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        split.save(dir.path()).unwrap();
        let back = CorpusSplit::load(dir.path(), 64).unwrap();
        assert_eq!(back.labeled, split.labeled);
        assert_eq!(back.validation, split.validation);
        assert_eq!(back.unlabeled, split.unlabeled);
        assert_eq!(back.gold_for_analysis(), split.gold_for_analysis());
        assert_eq!(back.manifest, split.manifest);
    }
}
