//! Objective-specific self-attention masks, BERT-style token corruption,
//! and the deterministic objective schedule.
//!
//! The two training objectives share every parameter and differ *only* in
//! the boolean attention mask built here: bidirectional allows everything
//! except padding; seq2seq keeps the visual block contained and makes the
//! text block autoregressive. Disallowed entries are excluded from the
//! softmax normalization entirely (the "−∞ logit" formulation), so their
//! attention weight is exactly zero.

use std::error::Error;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Vocab, MASK, PAD};

/// Errors from corruption and scheduling.
#[derive(Debug)]
pub enum MaskError {
    /// Token corruption was asked to select from a window with no real
    /// tokens.
    NoMaskablePosition,
    /// Objective mixing weight outside [0, 1].
    InvalidLambda(f64),
}

impl fmt::Display for MaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskError::NoMaskablePosition => {
                write!(f, "text window is all padding; nothing can be masked")
            }
            MaskError::InvalidLambda(l) => {
                write!(f, "objective mix lambda must lie in [0,1], got {l}")
            }
        }
    }
}

impl Error for MaskError {}

/// Column bookkeeping for the joint sequence
/// `[CLS] r_1..r_N [SEP] y_1..y_T [STOP]`. All index arithmetic for the
/// fixed layout lives here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub t: usize,
}

impl Layout {
    pub fn new(n: usize, t: usize) -> Layout {
        assert!(n >= 1 && t >= 1, "layout needs at least one region and one text slot");
        Layout { n, t }
    }

    /// Total sequence length U = N + T + 3.
    pub fn u(&self) -> usize {
        self.n + self.t + 3
    }

    pub fn cls(&self) -> usize {
        0
    }

    /// Column of region i (0-based).
    pub fn region(&self, i: usize) -> usize {
        debug_assert!(i < self.n);
        1 + i
    }

    pub fn sep(&self) -> usize {
        self.n + 1
    }

    /// Column of text offset j (0-based within the T-token window).
    pub fn text(&self, j: usize) -> usize {
        debug_assert!(j < self.t);
        self.n + 2 + j
    }

    /// The terminal [STOP] column at U−1.
    pub fn stop(&self) -> usize {
        self.n + self.t + 2
    }

    /// True for text-window columns and the terminal [STOP]; these carry
    /// token content rather than regions or structural anchors.
    pub fn is_text_block(&self, col: usize) -> bool {
        col >= self.n + 2
    }

    /// Visual block = [CLS] plus the region columns.
    pub fn is_visual_block(&self, col: usize) -> bool {
        col <= self.n
    }
}

/// A U×U boolean attention mask; row = query position, column = key
/// position. Immutable and cheaply shareable once built.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    u: usize,
    allow: Arc<Vec<bool>>,
}

impl AttentionMask {
    /// An all-true U×U mask (no padding, no restrictions). Mostly useful
    /// for single-column sequences and tests.
    pub fn full(u: usize) -> AttentionMask {
        AttentionMask {
            u,
            allow: Arc::new(vec![true; u * u]),
        }
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.u + col]
    }

    /// Shared flat row-major matrix, in the form the autodiff softmax op
    /// consumes.
    pub fn flat(&self) -> Arc<Vec<bool>> {
        Arc::clone(&self.allow)
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allow[row * self.u..(row + 1) * self.u]
    }
}

/// Columns of the text window beyond `text_len` are padding. `text_len`
/// counts real window entries (caption tokens plus an in-window terminator
/// when present); the terminal [STOP] column is structural and never pads.
fn pad_columns(layout: Layout, text_len: usize) -> Vec<bool> {
    assert!(text_len <= layout.t, "text_len {text_len} exceeds window {}", layout.t);
    let mut pad = vec![false; layout.u()];
    for j in text_len..layout.t {
        pad[layout.text(j)] = true;
    }
    pad
}

/// Bidirectional objective: unrestricted attention, except that padding
/// columns are never attended by anyone.
pub fn build_bidirectional_mask(layout: Layout, text_len: usize) -> AttentionMask {
    let u = layout.u();
    let pad = pad_columns(layout, text_len);
    let mut allow = vec![true; u * u];
    for row in 0..u {
        for col in 0..u {
            if pad[col] {
                allow[row * u + col] = false;
            }
        }
    }
    AttentionMask {
        u,
        allow: Arc::new(allow),
    }
}

/// Seq2seq objective: the visual block and [SEP] attend only to
/// {[CLS], regions, [SEP]}; a text-block row at position p additionally
/// attends to text columns ≤ p (the terminal [STOP] row sees everything).
/// Padding columns are excluded for every row.
pub fn build_seq2seq_mask(layout: Layout, text_len: usize) -> AttentionMask {
    let u = layout.u();
    let pad = pad_columns(layout, text_len);
    let mut allow = vec![false; u * u];
    for row in 0..u {
        for col in 0..u {
            if pad[col] {
                continue;
            }
            // Everyone sees the visual block and [SEP]; text rows also see
            // earlier (and their own) text columns.
            let visual_or_sep = col <= layout.sep();
            let causal_text = layout.is_text_block(row) && col <= row;
            if visual_or_sep || causal_text {
                allow[row * u + col] = true;
            }
        }
    }
    AttentionMask {
        u,
        allow: Arc::new(allow),
    }
}

/// What happened to one selected text position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    /// Replaced with [MASK].
    Mask,
    /// Replaced with this concrete (non-reserved) token id.
    Random(usize),
    /// Left as-is but still predicted in the loss.
    Keep,
}

/// Record of a corruption pass: which window offsets were selected, what
/// was written there, and the ground-truth ids to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionPlan {
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
    pub originals: Vec<usize>,
}

/// BERT-style corruption of a text window (length-T ids, [PAD] beyond the
/// real content). Each non-pad offset is selected independently with
/// probability `rate`; when `force_nonempty` is set the whole selection
/// pass is redrawn until at least one offset is selected. Selected offsets
/// are then rewritten in ascending order: with probability `p_mask` to
/// [MASK], `p_rand` to a uniformly random non-reserved token, else kept.
///
/// Draw order (load-bearing for replay): one uniform per non-pad offset in
/// ascending order per selection pass; then per selected offset in
/// ascending order, one uniform for the branch and — only for the random
/// branch — one uniform integer for the replacement id.
pub fn corrupt_tokens(
    window: &[usize],
    rng: &mut ChaCha8Rng,
    rate: f64,
    p_mask: f64,
    p_rand: f64,
    p_keep: f64,
    vocab: &Vocab,
    force_nonempty: bool,
) -> Result<(Vec<usize>, CorruptionPlan), MaskError> {
    assert!(rate > 0.0 && rate <= 1.0, "corruption rate must lie in (0,1], got {rate}");
    assert!(
        (p_mask + p_rand + p_keep - 1.0).abs() < 1e-12,
        "branch probabilities must sum to 1"
    );
    let real: Vec<usize> = (0..window.len()).filter(|&j| window[j] != PAD).collect();
    if real.is_empty() {
        return Err(MaskError::NoMaskablePosition);
    }

    let mut positions: Vec<usize> = Vec::new();
    loop {
        positions.clear();
        for &j in &real {
            if rng.random::<f64>() < rate {
                positions.push(j);
            }
        }
        if !positions.is_empty() || !force_nonempty {
            break;
        }
    }

    let mut corrupted = window.to_vec();
    let mut replacements = Vec::with_capacity(positions.len());
    let mut originals = Vec::with_capacity(positions.len());
    for &j in &positions {
        originals.push(window[j]);
        let u: f64 = rng.random();
        let rep = if u < p_mask {
            corrupted[j] = MASK;
            Replacement::Mask
        } else if u < p_mask + p_rand {
            let ids = vocab.word_ids();
            let id = rng.random_range(ids.start..ids.end);
            corrupted[j] = id;
            Replacement::Random(id)
        } else {
            Replacement::Keep
        };
        replacements.push(rep);
    }
    Ok((
        corrupted,
        CorruptionPlan {
            positions,
            replacements,
            originals,
        },
    ))
}

/// Which masked-LM objective a batch trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Seq2Seq,
    Bidirectional,
}

impl Objective {
    /// Stable lowercase name used in logs and reports.
    pub fn name(self) -> &'static str {
        match self {
            Objective::Seq2Seq => "seq2seq",
            Objective::Bidirectional => "bidirectional",
        }
    }

    /// Builds this objective's attention mask for one example.
    pub fn build_mask(self, layout: Layout, text_len: usize) -> AttentionMask {
        match self {
            Objective::Seq2Seq => build_seq2seq_mask(layout, text_len),
            Objective::Bidirectional => build_bidirectional_mask(layout, text_len),
        }
    }
}

/// Deterministic fractional-accumulator schedule: over any window of n
/// batches the seq2seq count is ⌊nλ⌋ or ⌈nλ⌉. The accumulator starts at λ
/// so a λ=0.75 run opens seq2seq, seq2seq, seq2seq, bidirectional.
#[derive(Debug, Clone)]
pub struct ObjectiveSchedule {
    lambda: f64,
    acc: f64,
}

impl ObjectiveSchedule {
    pub fn new(lambda: f64) -> Result<ObjectiveSchedule, MaskError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MaskError::InvalidLambda(lambda));
        }
        Ok(ObjectiveSchedule { lambda, acc: lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn next_objective(&mut self) -> Objective {
        self.acc += self.lambda;
        if self.acc >= 1.0 {
            self.acc -= 1.0;
            Objective::Seq2Seq
        } else {
            Objective::Bidirectional
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GrammarSpec;
    use rand::SeedableRng;

    #[test]
    fn layout_indices_cover_the_sequence() {
        let l = Layout::new(2, 2);
        assert_eq!(l.u(), 7);
        assert_eq!(l.cls(), 0);
        assert_eq!(l.region(1), 2);
        assert_eq!(l.sep(), 3);
        assert_eq!(l.text(0), 4);
        assert_eq!(l.stop(), 6);
        assert!(l.is_visual_block(2) && !l.is_visual_block(3));
        assert!(l.is_text_block(4) && l.is_text_block(6) && !l.is_text_block(3));
    }

    #[test]
    fn bidirectional_is_all_true_without_padding() {
        let l = Layout::new(2, 2);
        let m = build_bidirectional_mask(l, 2);
        for row in 0..7 {
            for col in 0..7 {
                assert!(m.allowed(row, col));
            }
        }
    }

    #[test]
    fn bidirectional_excludes_pad_columns_everywhere() {
        let l = Layout::new(2, 2);
        let m = build_bidirectional_mask(l, 1);
        for row in 0..7 {
            for col in 0..7 {
                assert_eq!(m.allowed(row, col), col != 5, "row {row} col {col}");
            }
        }
        let real = 6;
        for row in 0..7 {
            assert_eq!(m.row(row).iter().filter(|&&a| a).count(), real);
        }
    }

    #[test]
    fn seq2seq_matches_spec_example() {
        // N=2, T=2, no padding: y_1 (index 4) sees {0..4}; [STOP] (6) sees
        // all 7 columns.
        let l = Layout::new(2, 2);
        let m = build_seq2seq_mask(l, 2);
        let allowed_of = |row: usize| -> Vec<usize> {
            (0..7).filter(|&c| m.allowed(row, c)).collect()
        };
        assert_eq!(allowed_of(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(allowed_of(6), vec![0, 1, 2, 3, 4, 5, 6]);
        // Visual rows and [SEP] see exactly the visual block plus [SEP].
        for row in 0..=3 {
            assert_eq!(allowed_of(row), vec![0, 1, 2, 3]);
        }
        // Text block is lower-triangular: no text column beyond the row.
        for row in 4..7 {
            for col in (row + 1)..7 {
                assert!(!m.allowed(row, col));
            }
        }
    }

    #[test]
    fn seq2seq_allow_is_subset_of_bidirectional() {
        let l = Layout::new(4, 6);
        for text_len in [0, 3, 6] {
            let s = build_seq2seq_mask(l, text_len);
            let b = build_bidirectional_mask(l, text_len);
            for row in 0..l.u() {
                for col in 0..l.u() {
                    assert!(!s.allowed(row, col) || b.allowed(row, col));
                }
            }
        }
    }

    #[test]
    fn every_mask_row_has_an_allowed_entry() {
        for (n, t, len) in [(1, 1, 0), (4, 6, 3), (8, 20, 20), (8, 20, 0)] {
            let l = Layout::new(n, t);
            for m in [build_seq2seq_mask(l, len), build_bidirectional_mask(l, len)] {
                for row in 0..l.u() {
                    assert!(m.row(row).iter().any(|&a| a), "empty row {row} (n={n},t={t},len={len})");
                }
            }
        }
    }

    fn test_vocab() -> Vocab {
        Vocab::from_grammar(&GrammarSpec::default())
    }

    #[test]
    fn full_rate_all_mask_replaces_every_real_token() {
        let vocab = test_vocab();
        let window = vec![10, 11, 12, PAD, PAD];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (corrupted, plan) =
            corrupt_tokens(&window, &mut rng, 1.0, 1.0, 0.0, 0.0, &vocab, true).unwrap();
        assert_eq!(corrupted, vec![MASK, MASK, MASK, PAD, PAD]);
        assert_eq!(plan.positions, vec![0, 1, 2]);
        assert_eq!(plan.originals, vec![10, 11, 12]);
        assert!(plan.replacements.iter().all(|r| *r == Replacement::Mask));
    }

    #[test]
    fn keep_branch_changes_nothing_but_still_selects() {
        let vocab = test_vocab();
        let window = vec![10, 11, 12, 13];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (corrupted, plan) =
            corrupt_tokens(&window, &mut rng, 1.0, 0.0, 0.0, 1.0, &vocab, true).unwrap();
        assert_eq!(corrupted, window);
        assert_eq!(plan.positions, vec![0, 1, 2, 3]);
        assert!(plan.replacements.iter().all(|r| *r == Replacement::Keep));
    }

    #[test]
    fn all_pad_window_is_an_error() {
        let vocab = test_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = corrupt_tokens(&[PAD, PAD], &mut rng, 0.15, 0.8, 0.1, 0.1, &vocab, true)
            .unwrap_err();
        assert!(matches!(err, MaskError::NoMaskablePosition));
    }

    #[test]
    fn corruption_matches_independent_rng_replay() {
        // Replays the documented draw order with a twin RNG and checks the
        // corrupted window agrees exactly.
        let vocab = test_vocab();
        let window: Vec<usize> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (corrupted, plan) =
            corrupt_tokens(&window, &mut rng, 0.15, 0.8, 0.1, 0.1, &vocab, true).unwrap();

        let mut twin = ChaCha8Rng::seed_from_u64(7);
        let mut expect_positions: Vec<usize> = Vec::new();
        loop {
            expect_positions.clear();
            for j in 0..window.len() {
                if twin.random::<f64>() < 0.15 {
                    expect_positions.push(j);
                }
            }
            if !expect_positions.is_empty() {
                break;
            }
        }
        let mut expected = window.clone();
        for &j in &expect_positions {
            let u: f64 = twin.random();
            if u < 0.8 {
                expected[j] = MASK;
            } else if u < 0.9 {
                let ids = vocab.word_ids();
                expected[j] = twin.random_range(ids.start..ids.end);
            }
        }
        assert_eq!(plan.positions, expect_positions);
        assert_eq!(corrupted, expected);
    }

    #[test]
    fn random_replacements_are_never_reserved() {
        let vocab = test_vocab();
        let window: Vec<usize> = (10..30).collect();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, plan) =
                corrupt_tokens(&window, &mut rng, 0.15, 0.0, 1.0, 0.0, &vocab, true).unwrap();
            for r in &plan.replacements {
                if let Replacement::Random(id) = r {
                    assert!(!Vocab::is_reserved(*id));
                    assert!(*id < vocab.len());
                }
            }
        }
    }

    #[test]
    fn forcing_guarantees_a_selection_at_low_rate() {
        let vocab = test_vocab();
        let window = vec![10];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, plan) =
                corrupt_tokens(&window, &mut rng, 0.01, 0.8, 0.1, 0.1, &vocab, true).unwrap();
            assert_eq!(plan.positions, vec![0]);
        }
    }

    #[test]
    fn unforced_low_rate_can_select_nothing() {
        let vocab = test_vocab();
        let window = vec![10];
        let mut empty_seen = false;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, plan) =
                corrupt_tokens(&window, &mut rng, 0.01, 0.8, 0.1, 0.1, &vocab, false).unwrap();
            if plan.positions.is_empty() {
                empty_seen = true;
            }
        }
        assert!(empty_seen);
    }

    #[test]
    fn schedule_opens_with_three_seq2seq_at_three_quarters() {
        let mut s = ObjectiveSchedule::new(0.75).unwrap();
        let got: Vec<Objective> = (0..4).map(|_| s.next_objective()).collect();
        assert_eq!(
            got,
            vec![
                Objective::Seq2Seq,
                Objective::Seq2Seq,
                Objective::Seq2Seq,
                Objective::Bidirectional
            ]
        );
    }

    #[test]
    fn schedule_extremes_are_pure() {
        let mut all_s = ObjectiveSchedule::new(1.0).unwrap();
        let mut all_b = ObjectiveSchedule::new(0.0).unwrap();
        for _ in 0..100 {
            assert_eq!(all_s.next_objective(), Objective::Seq2Seq);
            assert_eq!(all_b.next_objective(), Objective::Bidirectional);
        }
    }

    #[test]
    fn schedule_hits_exact_proportion_over_ten_thousand() {
        let mut s = ObjectiveSchedule::new(0.75).unwrap();
        let count = (0..10_000)
            .filter(|_| s.next_objective() == Objective::Seq2Seq)
            .count();
        assert_eq!(count, 7500);
    }

    #[test]
    fn schedule_window_property_holds_for_awkward_lambda() {
        let lambda = 0.37;
        let mut s = ObjectiveSchedule::new(lambda).unwrap();
        let draws: Vec<Objective> = (0..2000).map(|_| s.next_objective()).collect();
        for window in [7, 100, 999] {
            for start in (0..draws.len() - window).step_by(311) {
                let c = draws[start..start + window]
                    .iter()
                    .filter(|&&o| o == Objective::Seq2Seq)
                    .count();
                let lo = (window as f64 * lambda).floor() as usize;
                let hi = (window as f64 * lambda).ceil() as usize;
                assert!((lo..=hi).contains(&c), "window {window} start {start}: {c}");
            }
        }
    }

    #[test]
    fn invalid_lambda_is_rejected() {
        assert!(ObjectiveSchedule::new(-0.1).is_err());
        assert!(ObjectiveSchedule::new(1.1).is_err());
    }
}
