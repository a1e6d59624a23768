//! Corpus BLEU@4, QA accuracy, and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum MetricsError {
    /// No examples to score.
    EmptyCorpus,
    /// Hypothesis and reference lists differ in length.
    Misaligned { hypotheses: usize, references: usize },
    /// A hypothesis has no tokens.
    EmptyHypothesis { index: usize },
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyCorpus => write!(f, "cannot score an empty corpus"),
            MetricsError::Misaligned {
                hypotheses,
                references,
            } => write!(
                f,
                "{hypotheses} hypotheses but {references} reference sets"
            ),
            MetricsError::EmptyHypothesis { index } => {
                write!(f, "hypothesis {index} is empty")
            }
            MetricsError::Io { path, source } => {
                write!(f, "report io error at {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for MetricsError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MetricsError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU@4 over whitespace-tokenized sentences. Clipped n-gram
/// matches and totals are pooled over the corpus for n = 1..4; any
/// precision whose match count is zero is smoothed by adding 1 to both its
/// numerator and denominator; the geometric mean is multiplied by the
/// brevity penalty exp(1 − r/c) when the hypothesis corpus is shorter than
/// the reference length r (per sentence, the reference length closest to
/// the hypothesis, ties to the shorter).
pub fn bleu4(hypotheses: &[String], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(MetricsError::Misaligned {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }

    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut c = 0usize;
    let mut r = 0usize;
    for (idx, (hyp, refs)) in hypotheses.iter().zip(references).enumerate() {
        let hyp_tokens: Vec<&str> = hyp.split_whitespace().collect();
        if hyp_tokens.is_empty() {
            return Err(MetricsError::EmptyHypothesis { index: idx });
        }
        if refs.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let ref_tokens: Vec<Vec<&str>> =
            refs.iter().map(|r| r.split_whitespace().collect()).collect();

        c += hyp_tokens.len();
        r += ref_tokens
            .iter()
            .map(|t| t.len())
            .min_by_key(|&len| {
                let dist = len.abs_diff(hyp_tokens.len());
                (dist, len)
            })
            .expect("nonempty refs");

        for n in 1..=4 {
            let hyp_ngrams = ngram_counts(&hyp_tokens, n);
            totals[n - 1] += hyp_ngrams.values().sum::<usize>();
            for (gram, &count) in &hyp_ngrams {
                let best_ref = ref_tokens
                    .iter()
                    .map(|t| ngram_counts(t, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matches[n - 1] += count.min(best_ref);
            }
        }
    }

    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if matches[n] == 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let geo = (log_sum / 4.0).exp();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(bp * geo)
}

/// Mean gold soft-label value at each example's top-1 predicted answer.
/// Reduces to exact-match accuracy when the labels are one-hot.
pub fn qa_accuracy(top1: &[usize], gold: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if top1.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if top1.len() != gold.len() {
        return Err(MetricsError::Misaligned {
            hypotheses: top1.len(),
            references: gold.len(),
        });
    }
    let sum: f64 = top1
        .iter()
        .zip(gold)
        .map(|(&t, labels)| labels.get(t).copied().unwrap_or(0.0))
        .sum();
    Ok(sum / top1.len() as f64)
}

/// One scored example in a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub reference: String,
    pub hypothesis: String,
    pub score: f64,
}

/// Evaluation summary: the metric table plus per-example records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metrics: BTreeMap<String, f64>,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>) -> EvalReport {
        EvalReport {
            dataset: dataset.into(),
            metrics: BTreeMap::new(),
            examples: Vec::new(),
        }
    }

    /// Writes the whole report as JSON (atomically, via a sibling tmp file).
    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&tmp, body).map_err(|source| MetricsError::Io {
            path: tmp.clone(),
            source,
        })?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Writes `reference,hypothesis,score` rows for the examples.
    pub fn write_examples_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp).map_err(|source| MetricsError::Io {
                path: tmp.clone(),
                source,
            })?;
            let mut out = std::io::BufWriter::new(file);
            writeln!(out, "reference,hypothesis,score").map_err(io)?;
            for e in &self.examples {
                writeln!(out, "{},{},{}", e.reference, e.hypothesis, e.score).map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    #[test]
    fn identity_hypothesis_scores_one() {
        let hyp = vec![s("a large circle left of a tiny square")];
        let refs = vec![vec![s("a large circle left of a tiny square")]];
        let b = bleu4(&hyp, &refs).unwrap();
        assert!((b - 1.0).abs() < 1e-12, "{b}");
    }

    #[test]
    fn all_zero_matches_hit_the_smoothed_closed_form() {
        let hyp = vec![s("a b c d")];
        let refs = vec![vec![s("e f g h")]];
        let b = bleu4(&hyp, &refs).unwrap();
        // Smoothed precisions 1/5, 1/4, 1/3, 1/2; same lengths, no brevity
        // penalty: BLEU = (1/120)^(1/4).
        let want = (1.0f64 / 120.0).powf(0.25);
        assert!((b - want).abs() < 1e-12, "{b} vs {want}");
    }

    #[test]
    fn unigram_clipping_counts_each_reference_token_once() {
        let hyp = vec![s("a a a a")];
        let refs = vec![vec![s("a b c d")]];
        // Clipped 1-gram matches: 1 of 4. Higher orders all smooth.
        let b = bleu4(&hyp, &refs).unwrap();
        let want = (0.25f64 * (1.0 / 4.0) * (1.0 / 3.0) * (1.0 / 2.0)).powf(0.25);
        assert!((b - want).abs() < 1e-12, "{b} vs {want}");
    }

    #[test]
    fn brevity_penalty_applies_only_when_short() {
        let hyp = vec![s("a b")];
        let refs = vec![vec![s("a b c d")]];
        let b = bleu4(&hyp, &refs).unwrap();
        // 1-gram 2/2, 2-gram 1/1(= "a b"), higher orders smoothed 1/1;
        // penalty exp(1 - 4/2).
        let want = (-1.0f64).exp();
        assert!((b - want).abs() < 1e-12, "{b} vs {want}");
    }

    #[test]
    fn closest_reference_length_ties_go_shorter() {
        // Hyp length 3; refs lengths 2 and 4 — both distance 1, take 2, so
        // c=3 ≥ r=2 and no penalty fires.
        let hyp = vec![s("a b c")];
        let refs = vec![vec![s("a b"), s("a b c d")]];
        let with_tie = bleu4(&hyp, &refs).unwrap();
        let only_long = bleu4(&hyp, &[vec![s("a b c d")]]).unwrap();
        assert!(with_tie > only_long, "{with_tie} vs {only_long}");
    }

    #[test]
    fn corpus_order_is_irrelevant() {
        let hyp = vec![
            s("a big cat on a red mat today"),
            s("the quick brown fox jumps over things"),
        ];
        let refs = vec![
            vec![s("a big cat sat on a red mat")],
            vec![s("the quick brown fox jumps over the dog")],
        ];
        let forward = bleu4(&hyp, &refs).unwrap();
        let hyp_rev: Vec<String> = hyp.iter().rev().cloned().collect();
        let refs_rev: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
        let backward = bleu4(&hyp_rev, &refs_rev).unwrap();
        assert_eq!(forward.to_bits(), backward.to_bits());
    }

    #[test]
    fn adding_the_hypothesis_as_a_reference_saturates() {
        let hyp = vec![s("one two three four five")];
        let refs = vec![vec![s("six seven eight nine ten"), hyp[0].clone()]];
        let b = bleu4(&hyp, &refs).unwrap();
        assert!((b - 1.0).abs() < 1e-12, "{b}");
    }

    #[test]
    fn degenerate_corpora_error() {
        assert!(matches!(bleu4(&[], &[]), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(
            bleu4(&[s("a")], &[]),
            Err(MetricsError::Misaligned { .. })
        ));
        assert!(matches!(
            bleu4(&[s("")], &[vec![s("a b")]]),
            Err(MetricsError::EmptyHypothesis { index: 0 })
        ));
    }

    #[test]
    fn qa_accuracy_reads_gold_labels_at_top1() {
        let top1 = vec![0, 2, 1];
        let gold = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.6],
            vec![0.0, 0.0, 1.0],
        ];
        let acc = qa_accuracy(&top1, &gold).unwrap();
        assert!((acc - (1.0 + 0.6 + 0.0) / 3.0).abs() < 1e-12);
        assert!(matches!(
            qa_accuracy(&top1, &gold[..2]),
            Err(MetricsError::Misaligned { .. })
        ));
    }

    #[test]
    fn random_predictor_lands_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let k = 32;
        let n = 200_000;
        let mut top1 = Vec::with_capacity(n);
        let mut gold = Vec::with_capacity(n);
        for _ in 0..n {
            top1.push(rng.random_range(0..k));
            let mut labels = vec![0.0; k];
            labels[rng.random_range(0..k)] = 1.0;
            gold.push(labels);
        }
        let acc = qa_accuracy(&top1, &gold).unwrap();
        assert!((acc - 1.0 / k as f64).abs() < 0.01, "{acc}");
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::new("toy");
        report.metrics.insert("bleu4".into(), 0.5);
        report.examples.push(ExampleRecord {
            reference: s("a b"),
            hypothesis: s("a b"),
            score: 1.0,
        });
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.dataset, "toy");
        assert_eq!(back.metrics["bleu4"], 0.5);
        assert_eq!(back.examples.len(), 1);

        let csv_path = dir.path().join("examples.csv");
        report.write_examples_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("reference,hypothesis,score\n"));
        assert!(text.lines().count() == 2);
    }
}
