use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{DataError, LabelScheme, Sentence};

/// Settings for the synthetic tagging corpus.
///
/// The vocabulary is partitioned into per-class entity lexicons, per-class
/// cue words that tend to precede an entity of their class, and a shared
/// background vocabulary for everything else. Lexicon and background words
/// are drawn Zipf-distributed, so a small labeled sample sees only the head
/// of each lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub corpus_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Entity words per class.
    pub lexicon_size: usize,
    /// Cue words per class.
    pub cue_size: usize,
    /// Probability that an entity is preceded by one of its class cues.
    pub cue_prob: f64,
    /// Probability that a cue is followed by an entity of a different class.
    pub cue_noise: f64,
    pub max_entities: usize,
    pub zipf_exponent: f64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            num_classes: 5,
            vocab_size: 100,
            corpus_size: 2000,
            min_len: 5,
            max_len: 15,
            lexicon_size: 10,
            cue_size: 2,
            cue_prob: 0.7,
            cue_noise: 0.0,
            max_entities: 2,
            zipf_exponent: 1.0,
        }
    }
}

impl GeneratorSettings {
    pub fn scheme(&self) -> Result<LabelScheme, DataError> {
        LabelScheme::new((0..self.num_classes).map(|c| format!("C{c}")))
    }

    fn background_size(&self) -> usize {
        self.vocab_size
            .saturating_sub(self.num_classes * (self.lexicon_size + self.cue_size))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Generator(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.lexicon_size == 0 {
            return bad("lexicon_size must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range {}..={}", self.min_len, self.max_len));
        }
        let reserved = self.num_classes * (self.lexicon_size + self.cue_size);
        if reserved >= self.vocab_size {
            return bad(format!(
                "lexicons and cues need {reserved} words, vocabulary has {}",
                self.vocab_size
            ));
        }
        for (name, p) in [("cue_prob", self.cue_prob), ("cue_noise", self.cue_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be non-negative".into());
        }
        if self.cue_size == 0 && self.cue_prob > 0.0 {
            return bad("cue_prob > 0 requires cue_size > 0".into());
        }
        Ok(())
    }
}

struct Sampler {
    zipf_lex: Zipf<f64>,
    zipf_bg: Zipf<f64>,
}

impl Sampler {
    fn draw(z: &Zipf<f64>, rng: &mut ChaCha8Rng) -> usize {
        z.sample(rng) as usize - 1
    }
}

fn span_len(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    if u < 0.5 {
        1
    } else if u < 0.85 {
        2
    } else {
        3
    }
}

/// Generates a gold-tagged corpus; returns the scheme alongside.
pub fn synth_corpus(settings: &GeneratorSettings, seed: u64) -> Result<(LabelScheme, Vec<Sentence>), DataError> {
    settings.validate()?;
    let scheme = settings.scheme()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = settings;
    let sampler = Sampler {
        zipf_lex: Zipf::new(s.lexicon_size as u64, s.zipf_exponent).expect("valid zipf"),
        zipf_bg: Zipf::new(s.background_size() as u64, s.zipf_exponent).expect("valid zipf"),
    };
    let lex_word = |c: usize, i: usize| format!("e{c}_{i}");
    let cue_word = |c: usize, i: usize| format!("q{c}_{i}");
    let bg_word = |i: usize| format!("w{i}");

    let mut corpus = Vec::with_capacity(s.corpus_size);
    for _ in 0..s.corpus_size {
        let len = rng.gen_range(s.min_len..=s.max_len);
        let wanted = rng.gen_range(0..=s.max_entities);
        // Entity chunks: optional cue followed by the span.
        let mut chunks: Vec<Vec<(String, usize)>> = Vec::new();
        let mut used = 0usize;
        for _ in 0..wanted {
            let class = rng.gen_range(0..s.num_classes);
            let n = span_len(&mut rng);
            let cue = s.cue_size > 0 && rng.gen_bool(s.cue_prob);
            let need = n + usize::from(cue) + usize::from(!chunks.is_empty());
            if used + need > len {
                break;
            }
            let mut chunk = Vec::new();
            if cue {
                let cue_class = if s.num_classes > 1 && rng.gen_bool(s.cue_noise) {
                    let others: Vec<usize> = (0..s.num_classes).filter(|&c| c != class).collect();
                    *others.choose(&mut rng).unwrap()
                } else {
                    class
                };
                chunk.push((cue_word(cue_class, rng.gen_range(0..s.cue_size)), 0));
            }
            for j in 0..n {
                let tag = if j == 0 { scheme.begin(class) } else { scheme.inside(class) };
                chunk.push((lex_word(class, Sampler::draw(&sampler.zipf_lex, &mut rng)), tag));
            }
            used += need;
            chunks.push(chunk);
        }
        // Distribute background words over the gaps; inner gaps get at least one.
        let chunk_tokens: usize = chunks.iter().map(Vec::len).sum();
        let mut gaps = vec![0usize; chunks.len() + 1];
        for g in gaps.iter_mut().take(chunks.len()).skip(1) {
            *g = 1;
        }
        let mut rest = len - chunk_tokens - gaps.iter().sum::<usize>();
        while rest > 0 {
            let g = rng.gen_range(0..gaps.len());
            gaps[g] += 1;
            rest -= 1;
        }
        let mut tokens = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        for (gi, &g) in gaps.iter().enumerate() {
            for _ in 0..g {
                tokens.push(bg_word(Sampler::draw(&sampler.zipf_bg, &mut rng)));
                tags.push(0);
            }
            if let Some(chunk) = chunks.get(gi) {
                for (tok, tag) in chunk {
                    tokens.push(tok.clone());
                    tags.push(*tag);
                }
            }
        }
        corpus.push(Sentence::new(tokens, Some(tags))?);
    }
    Ok((scheme, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_sized_corpus_is_valid_bio() {
        let settings = GeneratorSettings {
            num_classes: 5,
            vocab_size: 100,
            corpus_size: 2000,
            min_len: 5,
            max_len: 15,
            ..Default::default()
        };
        let (scheme, corpus) = synth_corpus(&settings, 42).unwrap();
        assert_eq!(corpus.len(), 2000);
        let mut vocab = std::collections::BTreeSet::new();
        for s in &corpus {
            assert!((5..=15).contains(&s.len()));
            assert!(scheme.is_valid_bio(s.gold_tags.as_ref().unwrap()));
            vocab.extend(s.tokens.iter().cloned());
        }
        assert!(vocab.len() <= 100);
    }

    #[test]
    fn empty_corpus() {
        let settings = GeneratorSettings {
            corpus_size: 0,
            ..Default::default()
        };
        assert!(synth_corpus(&settings, 1).unwrap().1.is_empty());
    }

    #[test]
    fn seed_determinism() {
        let settings = GeneratorSettings {
            corpus_size: 50,
            ..Default::default()
        };
        let a = synth_corpus(&settings, 1).unwrap().1;
        let b = synth_corpus(&settings, 2).unwrap().1;
        let c = synth_corpus(&settings, 1).unwrap().1;
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn inconsistent_settings() {
        let settings = GeneratorSettings {
            vocab_size: 40,
            lexicon_size: 10,
            ..Default::default()
        };
        assert!(matches!(synth_corpus(&settings, 1), Err(DataError::Generator(_))));
        let settings = GeneratorSettings {
            min_len: 9,
            max_len: 3,
            ..Default::default()
        };
        assert!(settings.validate().is_err());
    }
}
