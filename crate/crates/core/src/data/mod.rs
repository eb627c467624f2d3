//! Corpora, the BIO label scheme, K-shot splitting and synthetic data.

mod conll;
mod scheme;
mod split;
mod synth;

pub use conll::{parse_conll, write_conll, ParsedCorpus, DEFAULT_MAX_LENGTH};
pub use scheme::LabelScheme;
pub use split::{greedy_kshot_split, CorpusSplit, SplitManifest};
pub use synth::{synth_corpus, GeneratorSettings};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected 2 columns (token, tag), found {columns}")]
    MalformedLine { line: usize, columns: usize },
    #[error("line {line}: tag {tag:?} is not in the label scheme")]
    UnknownTag { line: usize, tag: String },
    #[error("input contains no sentences")]
    Empty,
    #[error("label scheme: {0}")]
    Scheme(String),
    #[error("invalid sentence: {0}")]
    Sentence(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("split leaves {labeled} labeled but only {unlabeled} unlabeled sentences")]
    TooSmall { labeled: usize, unlabeled: usize },
    #[error("sentence {0} has no gold tags")]
    MissingGold(usize),
    #[error("inconsistent generator settings: {0}")]
    Generator(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

/// A whitespace-tokenized sentence with optional gold tag ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub gold_tags: Option<Vec<usize>>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, gold_tags: Option<Vec<usize>>) -> Result<Self, DataError> {
        if tokens.is_empty() {
            return Err(DataError::Sentence("no tokens".into()));
        }
        if let Some(tags) = &gold_tags {
            if tags.len() != tokens.len() {
                return Err(DataError::Sentence(format!(
                    "{} tokens but {} tags",
                    tokens.len(),
                    tags.len()
                )));
            }
        }
        Ok(Self { tokens, gold_tags })
    }

    pub fn unlabeled(tokens: Vec<String>) -> Result<Self, DataError> {
        Self::new(tokens, None)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn without_gold(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            gold_tags: None,
        }
    }
}
