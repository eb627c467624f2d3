use std::fmt::Write as _;

use super::{DataError, LabelScheme, Sentence};

pub const DEFAULT_MAX_LENGTH: usize = 64;

/// Sentences in file order plus any truncation warnings.
#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub sentences: Vec<Sentence>,
    pub warnings: Vec<String>,
}

/// Parses two-column `token tag` lines with blank-line sentence breaks.
pub fn parse_conll(text: &str, scheme: &LabelScheme, max_length: usize) -> Result<ParsedCorpus, DataError> {
    let mut out = ParsedCorpus::default();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut start_line = 1;

    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<usize>, start: usize, out: &mut ParsedCorpus| {
        if tokens.is_empty() {
            return;
        }
        if tokens.len() > max_length {
            let msg = format!(
                "sentence at line {start}: {} tokens truncated to {max_length}",
                tokens.len()
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            tokens.truncate(max_length);
            tags.truncate(max_length);
        }
        out.sentences.push(Sentence {
            tokens: std::mem::take(tokens),
            gold_tags: Some(std::mem::take(tags)),
        });
    };

    for (n, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols.as_slice() {
            [] => {
                flush(&mut tokens, &mut tags, start_line, &mut out);
                start_line = n + 2;
            }
            [tok, tag] => {
                let id = scheme.tag_id(tag).ok_or_else(|| DataError::UnknownTag {
                    line: n + 1,
                    tag: tag.to_string(),
                })?;
                tokens.push(tok.to_string());
                tags.push(id);
            }
            _ => {
                return Err(DataError::MalformedLine {
                    line: n + 1,
                    columns: cols.len(),
                })
            }
        }
    }
    flush(&mut tokens, &mut tags, start_line, &mut out);
    if out.sentences.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

/// Serializes gold-tagged sentences back to the two-column format.
pub fn write_conll(sentences: &[Sentence], scheme: &LabelScheme) -> Result<String, DataError> {
    let mut s = String::new();
    for (i, sent) in sentences.iter().enumerate() {
        let tags = sent.gold_tags.as_ref().ok_or(DataError::MissingGold(i))?;
        for (tok, &tag) in sent.tokens.iter().zip(tags) {
            writeln!(s, "{tok} {}", scheme.tag_name(tag)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme() -> LabelScheme {
        LabelScheme::new(["ORG", "PER"]).unwrap()
    }

    #[test]
    fn minimal_sentence() {
        let c = parse_conll("EU B-ORG\nrejects O\n\n", &scheme(), 64).unwrap();
        assert_eq!(c.sentences.len(), 1);
        assert_eq!(c.sentences[0].tokens, vec!["EU", "rejects"]);
        assert_eq!(c.sentences[0].gold_tags, Some(vec![1, 0]));
    }

    #[test]
    fn two_blocks() {
        let c = parse_conll("a O\nb B-PER\n\n\nc O\n", &scheme(), 64).unwrap();
        assert_eq!(c.sentences.len(), 2);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_conll("a O\nEU\n", &scheme(), 64).unwrap_err();
        assert!(matches!(err, DataError::MalformedLine { line: 2, columns: 1 }));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn unknown_tag_and_empty_input() {
        assert!(matches!(
            parse_conll("a B-LOC\n", &scheme(), 64),
            Err(DataError::UnknownTag { line: 1, .. })
        ));
        assert!(matches!(parse_conll("\n\n", &scheme(), 64), Err(DataError::Empty)));
    }

    #[test]
    fn truncation_records_warning() {
        let c = parse_conll("a O\nb O\nc O\n", &scheme(), 2).unwrap();
        assert_eq!(c.sentences[0].len(), 2);
        assert_eq!(c.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn round_trip(sents in prop::collection::vec(
            prop::collection::vec(("[a-z]{1,6}", 0usize..5), 1..8), 1..6)) {
            let sc = scheme();
            let sentences: Vec<Sentence> = sents.into_iter().map(|s| {
                let (toks, tags): (Vec<String>, Vec<usize>) = s.into_iter().unzip();
                Sentence::new(toks, Some(tags)).unwrap()
            }).collect();
            let text = write_conll(&sentences, &sc).unwrap();
            let back = parse_conll(&text, &sc, 64).unwrap();
            prop_assert_eq!(back.sentences, sentences);
        }
    }
}
