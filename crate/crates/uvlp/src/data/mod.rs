//! Synthetic scene corpus: vocabulary, grammar, scene generation, and
//! dataset serialization.
//!
//! Scenes are attributed geometric objects with noisy feature vectors,
//! captioned and questioned by a small template grammar. Everything is a
//! pure function of (seed, grammar, sizes, noise), which is what makes
//! overfit-and-memorize tests and replay oracles possible.

mod dataset;
mod grammar;
mod scene;

pub use dataset::{apply_answer_vocab, build_answer_vocab, read_dataset, write_dataset, AnswerVocab};
pub use grammar::{GrammarSpec, QuestionKind, QuestionTemplates, Relation, RelationPhrases};
pub use scene::{generate_scene, QaPair, Region, SceneExample};

use std::collections::HashMap;
use std::fmt;

/// Errors from generation, tokenization, and dataset I/O.
#[derive(Debug)]
pub enum DataError {
    /// A size or grammar constraint is violated; the message names it.
    Config(String),
    /// Filesystem failure while reading or writing a dataset.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A dataset line failed to parse; 1-based line number included.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Config(msg) => write!(f, "invalid data configuration: {msg}"),
            DataError::Io { path, source } => write!(f, "dataset I/O on {path}: {source}"),
            DataError::Parse {
                path,
                line,
                message,
            } => write!(f, "dataset parse error at {path}:{line}: {message}"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Reserved token ids, fixed ahead of all grammar words.
pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const STOP: usize = 2;
pub const MASK: usize = 3;
pub const PAD: usize = 4;
pub const UNK: usize = 5;
/// Number of reserved ids; word ids start here.
pub const RESERVED: usize = 6;

const RESERVED_FORMS: [&str; RESERVED] = ["[CLS]", "[SEP]", "[STOP]", "[MASK]", "[PAD]", "[UNK]"];

/// Closed vocabulary derived deterministically from a grammar: the six
/// reserved ids, then every word the grammar can emit, sorted.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Collects every word any template, class, attribute, relation, or
    /// number word can produce. Sorting makes the id assignment independent
    /// of declaration order inside the grammar file.
    pub fn from_grammar(grammar: &GrammarSpec) -> Vocab {
        let mut seen: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            let w = w.to_lowercase();
            if !w.is_empty() && !seen.contains(&w) {
                seen.push(w);
            }
        };
        for source in grammar.word_sources() {
            for w in source.split_whitespace() {
                // Template slot markers are not words.
                if !w.starts_with('{') {
                    push(w);
                }
            }
        }
        seen.sort();
        let mut words: Vec<String> = RESERVED_FORMS.iter().map(|s| s.to_string()).collect();
        words.extend(seen);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a word, if it is in the vocabulary.
    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Word form of an id; panics on out-of-range ids.
    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED
    }

    /// Ids of ordinary words (everything that may appear in text), used for
    /// random corruption replacements.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        RESERVED..self.words.len()
    }
}

/// Lowercases, splits on whitespace, maps through the vocabulary (unknown
/// words become `[UNK]`), trims to `t`, and right-pads with `[PAD]`.
/// Returns the padded ids and the true (post-trim) token count.
pub fn tokenize(text: &str, vocab: &Vocab, t: usize) -> (Vec<usize>, usize) {
    assert!(t >= 1, "window length must be at least 1");
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect();
    ids.truncate(t);
    let len = ids.len();
    ids.resize(t, PAD);
    (ids, len)
}

/// Inverse of [`tokenize`] for display and scoring: reserved ids are
/// dropped, everything else maps back to its word form.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| !Vocab::is_reserved(id))
        .map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}
