use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::DataError;

/// BIO tag inventory: `O` at index 0, then `B-X`, `I-X` per entity class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct LabelScheme {
    classes: Vec<String>,
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    classes: Vec<String>,
}

impl TryFrom<SchemeRepr> for LabelScheme {
    type Error = DataError;
    fn try_from(r: SchemeRepr) -> Result<Self, DataError> {
        LabelScheme::new(r.classes)
    }
}

impl From<LabelScheme> for SchemeRepr {
    fn from(s: LabelScheme) -> Self {
        SchemeRepr { classes: s.classes }
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for c in &classes {
            if c.is_empty() || c == "O" || c.chars().any(char::is_whitespace) || !seen.insert(c) {
                return Err(DataError::Scheme(format!("invalid or duplicate class {c:?}")));
            }
        }
        let mut tags = vec!["O".to_string()];
        for c in &classes {
            tags.push(format!("B-{c}"));
            tags.push(format!("I-{c}"));
        }
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            classes,
            tags,
            index,
        })
    }

    /// Collects entity classes from the tag column of CoNLL text, sorted by name.
    pub fn infer_from_conll(text: &str) -> Result<Self, DataError> {
        let mut classes = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            match cols.as_slice() {
                [] => {}
                [_, tag] => {
                    if *tag != "O" {
                        let class = tag
                            .strip_prefix("B-")
                            .or_else(|| tag.strip_prefix("I-"))
                            .ok_or_else(|| DataError::UnknownTag {
                                line: n + 1,
                                tag: tag.to_string(),
                            })?;
                        classes.insert(class.to_string());
                    }
                }
                _ => {
                    return Err(DataError::MalformedLine {
                        line: n + 1,
                        columns: cols.len(),
                    })
                }
            }
        }
        Self::new(classes)
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag_name(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn begin(&self, class: usize) -> usize {
        1 + 2 * class
    }

    pub fn inside(&self, class: usize) -> usize {
        2 + 2 * class
    }

    /// Entity class of a `B-`/`I-` tag; `None` for `O`.
    pub fn class_of(&self, tag: usize) -> Option<usize> {
        (tag > 0).then(|| (tag - 1) / 2)
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag > 0 && tag % 2 == 1
    }

    pub fn is_inside(&self, tag: usize) -> bool {
        tag > 0 && tag.is_multiple_of(2)
    }

    /// No `I-X` without a preceding `B-X` or `I-X`.
    pub fn is_valid_bio(&self, tags: &[usize]) -> bool {
        let mut prev = 0usize;
        for &t in tags {
            if t >= self.num_tags() {
                return false;
            }
            if self.is_inside(t) && (prev == 0 || self.class_of(prev) != self.class_of(t)) {
                return false;
            }
            prev = t;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let s = LabelScheme::new(["PER", "LOC"]).unwrap();
        assert_eq!(s.num_tags(), 5);
        assert_eq!(s.tags(), &["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]);
        assert_eq!(s.tag_id("I-LOC"), Some(4));
        assert_eq!(s.class_of(4), Some(1));
        assert_eq!(s.class_of(0), None);
        assert!(s.is_begin(3) && s.is_inside(2));
    }

    #[test]
    fn rejects_bad_classes() {
        assert!(LabelScheme::new(["A", "A"]).is_err());
        assert!(LabelScheme::new(["O"]).is_err());
    }

    #[test]
    fn bio_validity() {
        let s = LabelScheme::new(["PER", "LOC"]).unwrap();
        assert!(s.is_valid_bio(&[1, 2, 0, 3, 4, 4]));
        assert!(!s.is_valid_bio(&[2]));
        assert!(!s.is_valid_bio(&[1, 4]));
        assert!(!s.is_valid_bio(&[0, 2]));
    }

    #[test]
    fn infer_sorts_classes() {
        let s = LabelScheme::infer_from_conll("a B-ORG\nb I-ORG\n\nc B-LOC\n").unwrap();
        assert_eq!(s.classes(), &["LOC", "ORG"]);
        assert!(LabelScheme::infer_from_conll("a X-ORG\n").is_err());
    }

    #[test]
    fn serde_round_trip() {
        let s = LabelScheme::new(["PER"]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"classes":["PER"]}"#);
        assert_eq!(serde_json::from_str::<LabelScheme>(&j).unwrap(), s);
    }
}
