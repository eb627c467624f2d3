use serde::{Deserialize, Serialize};

use crate::data::LabelScheme;

/// Half-open entity span `[start, end)` within one sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodedSpans {
    pub spans: Vec<EntitySpan>,
    /// Number of `I-X` tags that opened a span without a preceding `B-X`.
    pub lenient: usize,
}

/// CoNLL-style BIO decoding. A stray `I-X` opens a new span.
pub fn decode_spans(sentence: usize, tags: &[usize], scheme: &LabelScheme) -> DecodedSpans {
    let mut out = DecodedSpans::default();
    let mut open: Option<(usize, usize)> = None;
    let close = |open: &mut Option<(usize, usize)>, end: usize, out: &mut DecodedSpans| {
        if let Some((start, class)) = open.take() {
            out.spans.push(EntitySpan {
                sentence,
                start,
                end,
                class,
            });
        }
    };
    for (j, &tag) in tags.iter().enumerate() {
        match scheme.class_of(tag) {
            None => close(&mut open, j, &mut out),
            Some(class) if scheme.is_begin(tag) => {
                close(&mut open, j, &mut out);
                open = Some((j, class));
            }
            Some(class) => {
                if open.map(|(_, c)| c) != Some(class) {
                    close(&mut open, j, &mut out);
                    log::debug!("sentence {sentence}: stray {} at {j}", scheme.tag_name(tag));
                    out.lenient += 1;
                    open = Some((j, class));
                }
            }
        }
    }
    close(&mut open, tags.len(), &mut out);
    out
}

/// Inverse of [`decode_spans`] for non-overlapping spans.
pub fn encode_spans(spans: &[EntitySpan], len: usize, scheme: &LabelScheme) -> Vec<usize> {
    let mut tags = vec![0; len];
    for s in spans {
        tags[s.start] = scheme.begin(s.class);
        for t in &mut tags[s.start + 1..s.end] {
            *t = scheme.inside(s.class);
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme() -> LabelScheme {
        LabelScheme::new(["PER", "LOC"]).unwrap()
    }

    #[test]
    fn examples() {
        let s = scheme();
        let per = |t: &str| s.tag_id(t).unwrap();
        let d = decode_spans(0, &[per("B-PER"), per("I-PER"), 0], &s);
        assert_eq!(d.spans, vec![EntitySpan { sentence: 0, start: 0, end: 2, class: 0 }]);
        assert_eq!(d.lenient, 0);
        assert!(decode_spans(0, &[0, 0, 0], &s).spans.is_empty());
        let d = decode_spans(3, &[per("I-LOC"), 0, per("B-LOC")], &s);
        assert_eq!(
            d.spans,
            vec![
                EntitySpan { sentence: 3, start: 0, end: 1, class: 1 },
                EntitySpan { sentence: 3, start: 2, end: 3, class: 1 },
            ]
        );
        assert_eq!(d.lenient, 1);
    }

    #[test]
    fn class_switch_inside_closes_span() {
        let s = scheme();
        let d = decode_spans(0, &[1, 4], &s);
        assert_eq!(d.spans.len(), 2);
        assert_eq!(d.lenient, 1);
    }

    proptest! {
        #[test]
        fn decode_encode_identity(raw in prop::collection::vec(0usize..5, 0..20)) {
            let s = scheme();
            // Repair into a valid BIO sequence first.
            let mut tags = raw.clone();
            for j in 0..tags.len() {
                if s.is_inside(tags[j]) && (j == 0 || s.class_of(tags[j - 1]) != s.class_of(tags[j])) {
                    tags[j] -= 1;
                }
            }
            prop_assert!(s.is_valid_bio(&tags));
            let d = decode_spans(0, &tags, &s);
            prop_assert_eq!(d.lenient, 0);
            prop_assert_eq!(encode_spans(&d.spans, tags.len(), &s), tags);
        }
    }
}
