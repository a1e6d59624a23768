//! Decoding and answer prediction.
//!
//! Captions are generated by the iterative mask-append procedure: the text
//! window holds the committed tokens plus one trailing [MASK], the rest is
//! [PAD]; the model runs under the seq2seq mask, the [MASK] position's
//! logits pick the next token, and the loop stops at [STOP] or the length
//! budget. Greedy and beam search share one [`TokenScorer`] abstraction, so
//! the search logic can be exercised against hand-built score tables as
//! well as the real model.

use std::collections::HashMap;
use std::fmt;

use crate::data::{Region, SceneExample, CLS, MASK, PAD, SEP, STOP, UNK};
use crate::embed::assemble_input;
use crate::mask::Objective;
use crate::model::{forward, lm_logits, DropoutMode};
use crate::tensor::TensorError;
use crate::train::{prepare_regions, vqa_score_logits, ModelWeights};

#[derive(Debug)]
pub enum InferError {
    Config(String),
    Tensor(TensorError),
}

impl fmt::Display for InferError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferError::Config(msg) => write!(f, "invalid decode setup: {msg}"),
            InferError::Tensor(e) => write!(f, "tensor error during decode: {e}"),
        }
    }
}

impl std::error::Error for InferError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            InferError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for InferError {
    fn from(e: TensorError) -> Self {
        InferError::Tensor(e)
    }
}

/// Anything that can score the next token position given the committed
/// prefix. Returns log-probabilities over the full vocabulary.
pub trait TokenScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, InferError>;
}

/// Whether a decoder may emit this id: real words and [STOP] only. The
/// other reserved ids ([CLS], [SEP], [MASK], [PAD], [UNK]) never leave a
/// decoder.
fn emittable(id: usize) -> bool {
    id == STOP || !matches!(id, CLS | SEP | MASK | PAD | UNK)
}

/// Log-softmax over a logit slice.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

/// The real model behind the [`TokenScorer`] interface: one forward pass
/// per query, prefix + [MASK] + padding under the seq2seq mask.
pub struct ModelScorer<'a> {
    weights: &'a ModelWeights,
    regions: Vec<Region>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(weights: &'a ModelWeights, regions: &[Region]) -> Result<ModelScorer<'a>, InferError> {
        if regions.len() != weights.config.n {
            return Err(InferError::Config(format!(
                "scene has {} regions, model expects {}",
                regions.len(),
                weights.config.n
            )));
        }
        Ok(ModelScorer {
            weights,
            regions: prepare_regions(&weights.config, regions),
        })
    }
}

impl TokenScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, InferError> {
        let config = &self.weights.config;
        if prefix.len() + 1 > config.t {
            return Err(InferError::Config(format!(
                "prefix of {} tokens leaves no room for [MASK] in a {}-token window",
                prefix.len(),
                config.t
            )));
        }
        let mut window = vec![PAD; config.t];
        window[..prefix.len()].copy_from_slice(prefix);
        window[prefix.len()] = MASK;
        let text_len = prefix.len() + 1;

        let mut tape = crate::tensor::Tape::new();
        let bind = self.weights.store.bind(&mut tape);
        let input = assemble_input(
            &mut tape,
            &bind,
            &self.weights.tables,
            &self.regions,
            &window,
            Objective::Seq2Seq,
            config.region_positional,
        )?;
        let mask = Objective::Seq2Seq.build_mask(input.layout, text_len);
        let trace = forward(
            &mut tape,
            &bind,
            &input,
            &mask,
            &self.weights.layers,
            config,
            &mut DropoutMode::Inference,
        )?;
        let col = input.layout.text(prefix.len());
        let logits = lm_logits(
            &mut tape,
            &bind,
            trace.h_final,
            &[col],
            &self.weights.lm_head,
            &self.weights.tables,
        )?;
        Ok(log_softmax(tape.value(logits)))
    }
}

/// A scorer backed by an explicit prefix → log-probability table. Exists so
/// search behavior can be verified against exhaustive enumeration without a
/// trained model in the loop.
pub struct TableScorer {
    rows: HashMap<Vec<usize>, Vec<f64>>,
}

impl TableScorer {
    pub fn new(rows: HashMap<Vec<usize>, Vec<f64>>) -> TableScorer {
        TableScorer { rows }
    }
}

impl TokenScorer for TableScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, InferError> {
        self.rows
            .get(prefix)
            .cloned()
            .ok_or_else(|| InferError::Config(format!("prefix {prefix:?} not in score table")))
    }
}

/// Greedy mask-append decoding: at every step commit the highest
/// log-probability emittable token; stop at [STOP] or after `max_len`
/// committed tokens. Returns the committed tokens without specials.
pub fn greedy_decode(
    scorer: &mut dyn TokenScorer,
    max_len: usize,
) -> Result<Vec<usize>, InferError> {
    let mut tokens: Vec<usize> = Vec::new();
    while tokens.len() < max_len {
        let lp = scorer.next_log_probs(&tokens)?;
        let mut best: Option<usize> = None;
        for (id, &l) in lp.iter().enumerate() {
            if !emittable(id) {
                continue;
            }
            if best.is_none_or(|b| l > lp[b]) {
                best = Some(id);
            }
        }
        let choice = best.ok_or_else(|| {
            InferError::Config("vocabulary has no emittable tokens".into())
        })?;
        if choice == STOP {
            break;
        }
        tokens.push(choice);
    }
    Ok(tokens)
}

/// One beam-search hypothesis. `tokens` includes the terminal [STOP] once
/// finished; `log_prob` is the sum of the log-probabilities of every
/// emission, [STOP] included.
#[derive(Debug, Clone)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    /// Committed caption tokens, specials stripped.
    fn caption(&self) -> Vec<usize> {
        self.tokens.iter().copied().filter(|&t| t != STOP).collect()
    }

    /// Comparison score under length normalization `alpha` (0 = raw total).
    fn score(&self, alpha: f64) -> f64 {
        let len = self.caption().len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }
}

/// Length-synchronized beam search over a [`TokenScorer`]. Every live beam
/// is expanded by its top-`beam` emittable tokens; the global top-`beam`
/// unfinished candidates survive; beams that choose [STOP] freeze and
/// compete at the end by `log_prob / len^alpha`. With `beam` = 1 and
/// `alpha` = 0 this reduces exactly to greedy decoding.
pub fn beam_search(
    scorer: &mut dyn TokenScorer,
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<usize>, InferError> {
    if beam == 0 {
        return Err(InferError::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Beam> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for b in &live {
            let lp = scorer.next_log_probs(&b.tokens)?;
            let mut ranked: Vec<(usize, f64)> = lp
                .iter()
                .enumerate()
                .filter(|(id, _)| emittable(*id))
                .map(|(id, &l)| (id, l))
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(id, l) in ranked.iter().take(beam) {
                let mut tokens = b.tokens.clone();
                tokens.push(id);
                let next = Beam {
                    tokens,
                    log_prob: b.log_prob + l,
                    finished: id == STOP,
                };
                if next.finished {
                    finished.push(next);
                } else {
                    candidates.push(next);
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then(a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam);
        live = candidates;
        if live.is_empty() {
            break;
        }
    }

    let winner = finished
        .iter()
        .chain(live.iter())
        .max_by(|a, b| {
            a.score(alpha)
                .partial_cmp(&b.score(alpha))
                .unwrap()
                .then(b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| InferError::Config("beam search produced no hypotheses".into()))?;
    Ok(winner.caption())
}

/// Greedy caption for one scene's regions. `max_len` must fit the model's
/// text window.
pub fn caption_scene(
    weights: &ModelWeights,
    regions: &[Region],
    max_len: usize,
) -> Result<Vec<usize>, InferError> {
    check_budget(weights, max_len)?;
    let mut scorer = ModelScorer::new(weights, regions)?;
    greedy_decode(&mut scorer, max_len)
}

/// Beam-search caption for one scene's regions.
pub fn caption_scene_beam(
    weights: &ModelWeights,
    regions: &[Region],
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<usize>, InferError> {
    check_budget(weights, max_len)?;
    let mut scorer = ModelScorer::new(weights, regions)?;
    beam_search(&mut scorer, beam, max_len, alpha)
}

fn check_budget(weights: &ModelWeights, max_len: usize) -> Result<(), InferError> {
    if max_len > weights.config.t {
        return Err(InferError::Config(format!(
            "decode budget {max_len} exceeds the {}-token text window",
            weights.config.t
        )));
    }
    Ok(())
}

/// Ranks the answer vocabulary for one (scene, question) pair: the VQA head
/// scores every answer with a sigmoid, and the top-k (score descending,
/// index ascending on ties) come back as (answer id, score).
pub fn vqa_predict(
    weights: &ModelWeights,
    scene: &SceneExample,
    question: &[usize],
    topk: usize,
) -> Result<Vec<(usize, f64)>, InferError> {
    let Some(head) = &weights.vqa_head else {
        return Err(InferError::Config("VQA head is not attached".into()));
    };
    let config = &weights.config;
    let regions = prepare_regions(config, &scene.regions);
    let (window, text_len) = crate::train::text_window(question, config.t);

    let mut tape = crate::tensor::Tape::new();
    let bind = weights.store.bind(&mut tape);
    let input = assemble_input(
        &mut tape,
        &bind,
        &weights.tables,
        &regions,
        &window,
        Objective::Bidirectional,
        config.region_positional,
    )?;
    let mask = Objective::Bidirectional.build_mask(input.layout, text_len);
    let trace = forward(
        &mut tape,
        &bind,
        &input,
        &mask,
        &weights.layers,
        config,
        &mut DropoutMode::Inference,
    )?;
    let logits = vqa_score_logits(&mut tape, &bind, head, trace.h_final, input.layout)?;
    let mut ranked: Vec<(usize, f64)> = tape
        .value(logits)
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, crate::tensor::sigmoid(l)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(topk);
    Ok(ranked)
}
