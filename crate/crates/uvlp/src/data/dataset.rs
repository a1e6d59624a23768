//! Dataset serialization (one JSON object per line) and the answer
//! vocabulary built over a dataset's QA pairs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::SceneExample;
use super::DataError;

/// Closed set of answer words for the QA head, ordered by descending corpus
/// frequency (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
}

impl AnswerVocab {
    pub fn from_answers(answers: Vec<String>) -> AnswerVocab {
        AnswerVocab { answers }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// Writes one JSON record per line. Fields and their order are fixed by the
/// `SceneExample` type; reals round-trip exactly.
pub fn write_dataset(examples: &[SceneExample], path: &Path) -> Result<(), DataError> {
    let io_err = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("serialization failed: {e}"),
        })?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a line-delimited dataset back. A malformed or truncated line fails
/// with its 1-based line number; an empty file is an empty dataset.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneExample>, DataError> {
    let io_err = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SceneExample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Builds the top-`k` answer vocabulary by corpus frequency (ties broken
/// lexicographically, smaller word first) and fills in `answer_id` and a
/// one-hot `soft_labels` vector on every QA pair. Answers outside the top
/// `k` get no id and an all-zero label vector. Fewer than `k` distinct
/// answers is allowed — all of them are used and a warning is printed.
pub fn build_answer_vocab(examples: &mut [SceneExample], k: usize) -> AnswerVocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples.iter() {
        for qa in &ex.qa {
            *counts.entry(qa.answer.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if ranked.len() < k {
        eprintln!(
            "warning: only {} distinct answers for a vocabulary of {k}; using all of them",
            ranked.len()
        );
    }
    ranked.truncate(k);
    let vocab = AnswerVocab {
        answers: ranked.into_iter().map(|(w, _)| w.to_string()).collect(),
    };
    apply_answer_vocab(examples, &vocab);
    vocab
}

/// Labels a dataset against an existing answer vocabulary (e.g. a validation
/// split against the vocabulary built over the training split, or a dataset
/// against the vocabulary stored in a checkpoint).
pub fn apply_answer_vocab(examples: &mut [SceneExample], vocab: &AnswerVocab) {
    for ex in examples.iter_mut() {
        for qa in &mut ex.qa {
            qa.answer_id = vocab.id(&qa.answer);
            let mut labels = vec![0.0; vocab.len()];
            if let Some(id) = qa.answer_id {
                labels[id] = 1.0;
            }
            qa.soft_labels = labels;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GrammarSpec, QaPair};

    fn scene_with_answers(scene_id: u64, answers: &[&str]) -> SceneExample {
        SceneExample {
            scene_id,
            regions: Vec::new(),
            caption: vec![7, 8, 9],
            qa: answers
                .iter()
                .map(|a| QaPair {
                    question: vec![10, 11],
                    answer: a.to_string(),
                    answer_id: None,
                    soft_labels: Vec::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let g = GrammarSpec::default();
        let mut examples: Vec<SceneExample> = (0..100)
            .map(|seed| generate_scene(seed, &g, 8, 0.1).unwrap())
            .collect();
        build_answer_vocab(&mut examples, 32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        write_dataset(&examples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(examples, back);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_final_line_errors_with_line_number() {
        let g = GrammarSpec::default();
        let examples = vec![generate_scene(1, &g, 8, 0.1).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.jsonl");
        write_dataset(&examples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().next().unwrap();
        let truncated = &line[..line.len() - 40];
        let path2 = dir.path().join("cut2.jsonl");
        std::fs::write(&path2, format!("{line}\n{truncated}")).unwrap();
        let err = read_dataset(&path2).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error_naming_path() {
        let err = read_dataset(Path::new("/nonexistent/nope.jsonl")).unwrap_err();
        assert!(err.to_string().contains("nope.jsonl"), "got {err}");
    }

    #[test]
    fn answer_vocab_orders_by_frequency() {
        let mut examples = vec![
            scene_with_answers(0, &["red", "red", "blue"]),
            scene_with_answers(1, &["red", "red", "red", "blue", "blue", "two"]),
        ];
        let vocab = build_answer_vocab(&mut examples, 2);
        assert_eq!(vocab.answers(), ["red".to_string(), "blue".to_string()]);
        assert_eq!(examples[0].qa[0].answer_id, Some(0));
        assert_eq!(examples[0].qa[2].answer_id, Some(1));
        // "two" fell outside the top k: no id, all-zero labels.
        assert_eq!(examples[1].qa[5].answer_id, None);
        assert!(examples[1].qa[5].soft_labels.iter().all(|&x| x == 0.0));
        assert_eq!(examples[0].qa[0].soft_labels, vec![1.0, 0.0]);
    }

    #[test]
    fn answer_vocab_breaks_ties_lexicographically() {
        let mut examples = vec![scene_with_answers(0, &["red", "blue", "red", "blue"])];
        let vocab = build_answer_vocab(&mut examples, 1);
        assert_eq!(vocab.answers(), ["blue".to_string()]);
    }

    #[test]
    fn answer_vocab_smaller_than_k_uses_all() {
        let mut examples = vec![scene_with_answers(0, &["red", "blue"])];
        let vocab = build_answer_vocab(&mut examples, 32);
        assert_eq!(vocab.len(), 2);
        assert!(examples[0].qa.iter().all(|qa| qa.answer_id.is_some()));
        assert!(examples[0]
            .qa
            .iter()
            .all(|qa| qa.soft_labels.len() == 2));
    }
}
