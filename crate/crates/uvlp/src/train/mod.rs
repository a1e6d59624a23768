//! Training: masked-LM pre-training under the alternating objectives, the
//! caption and VQA fine-tuning loops, the optional region-label pretext
//! loss, and checkpoint/log plumbing.
//!
//! Exactly three losses exist in this crate — masked-LM cross-entropy, the
//! optional region-label pretext cross-entropy, and the VQA binary
//! cross-entropy — enumerated in [`LOSS_REGISTRY`]. There is deliberately no
//! next-sentence / image-text matching loss.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, LoadedCheckpoint, FORMAT_VERSION, MAGIC,
};

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AnswerVocab, SceneExample, Vocab, PAD, STOP};
use crate::embed::EmbeddingTables;
use crate::mask::{corrupt_tokens, Layout, MaskError, Objective, ObjectiveSchedule};
use crate::model::{
    forward, lm_logits, ConfigError, DropoutMode, LayerWeights, LmHead, ModelConfig,
};
use crate::tensor::{
    adam_step, clip_global_norm, finite_diff_check_steps, AdamConfig, AdamState, Binding, NodeId,
    ParamId, ParamStore, Tape, TensorError,
};

/// Every loss this crate can optimize. The absence of any
/// next-sentence-style image-text matching loss is a design commitment, not
/// an omission; a test pins this list.
pub const LOSS_REGISTRY: [&str; 3] = ["masked_lm", "region_pretext", "vqa_bce"];

#[derive(Debug)]
pub enum TrainError {
    /// Invalid training configuration or incompatible inputs.
    Config(String),
    Tensor(TensorError),
    Mask(MaskError),
    Data(crate::data::DataError),
    Checkpoint(CheckpointError),
    Io { path: PathBuf, source: std::io::Error },
    /// Loss or gradient left the reals; carries the step for diagnosis.
    NonFinite { step: u64, detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid training setup: {msg}"),
            TrainError::Tensor(e) => write!(f, "tensor error: {e}"),
            TrainError::Mask(e) => write!(f, "masking error: {e}"),
            TrainError::Data(e) => write!(f, "data error: {e}"),
            TrainError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            TrainError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
            TrainError::NonFinite { step, detail } => {
                write!(f, "training aborted at step {step}: {detail}")
            }
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Tensor(e) => Some(e),
            TrainError::Mask(e) => Some(e),
            TrainError::Data(e) => Some(e),
            TrainError::Checkpoint(e) => Some(e),
            TrainError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<MaskError> for TrainError {
    fn from(e: MaskError) -> Self {
        TrainError::Mask(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

impl From<crate::data::DataError> for TrainError {
    fn from(e: crate::data::DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// VQA answer head: Linear + ReLU + Linear (+ sigmoid in the loss) over the
/// element-wise product of the final [CLS] and [SEP] columns. Hidden width
/// equals the trunk width d; output width is the answer vocabulary size k.
#[derive(Debug, Clone)]
pub struct VqaHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub k: usize,
}

impl VqaHead {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, k: usize) -> VqaHead {
        VqaHead {
            w1: store.add_normal("vqa.w1", vec![d, d], 0.02, rng),
            b1: store.add_zeros("vqa.b1", vec![d]),
            w2: store.add_normal("vqa.w2", vec![k, d], 0.02, rng),
            b2: store.add_zeros("vqa.b2", vec![k]),
            k,
        }
    }
}

/// Region-label pretext head: a single dense map d→l predicting the class
/// behind a region whose appearance features were blanked at the input.
#[derive(Debug, Clone)]
pub struct PretextHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl PretextHead {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, classes: usize) -> Self {
        PretextHead {
            w: store.add_normal("pretext.w", vec![classes, d], 0.02, rng),
            b: store.add_zeros("pretext.b", vec![classes]),
        }
    }
}

/// Every learnable tensor of the model, plus the typed views into the store.
#[derive(Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub layers: Vec<LayerWeights>,
    pub lm_head: LmHead,
    pub vqa_head: Option<VqaHead>,
    pub pretext_head: Option<PretextHead>,
}

impl ModelWeights {
    /// Fresh trunk + LM head initialization (std 0.02 normals, unit layer
    /// norm gains). Task heads are attached separately.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelWeights, ConfigError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = EmbeddingTables::init(&mut store, &mut rng, config.embed_dims());
        let layers = (0..config.layers)
            .map(|i| LayerWeights::init(&mut store, &mut rng, i, config.d, config.ffn))
            .collect();
        let lm_head = LmHead::init(&mut store, &mut rng, config.d, config.vocab);
        Ok(ModelWeights {
            config: config.clone(),
            store,
            tables,
            layers,
            lm_head,
            vqa_head: None,
            pretext_head: None,
        })
    }

    /// Attaches (or freshly re-initializes) the VQA head for a k-answer
    /// vocabulary. Pre-training never touches this head, so fine-tuning
    /// re-randomizes it even when the trunk comes from a checkpoint.
    pub fn attach_vqa_head(&mut self, k: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &self.vqa_head {
            Some(head) => {
                assert_eq!(head.k, k, "answer vocabulary size changed; rebuild the head");
                let ids = [head.w1, head.w2];
                for id in ids {
                    for v in self.store.get_mut(id).data_mut() {
                        *v = 0.02 * crate::rngx::standard_normal(&mut rng);
                    }
                }
                for id in [head.b1, head.b2] {
                    self.store.get_mut(id).data_mut().fill(0.0);
                }
            }
            None => {
                self.vqa_head = Some(VqaHead::init(&mut self.store, &mut rng, self.config.d, k));
            }
        }
    }

    /// Attaches (or freshly re-initializes) the region-label pretext head.
    pub fn attach_pretext_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &self.pretext_head {
            Some(head) => {
                for v in self.store.get_mut(head.w).data_mut() {
                    *v = 0.02 * crate::rngx::standard_normal(&mut rng);
                }
                self.store.get_mut(head.b).data_mut().fill(0.0);
            }
            None => {
                self.pretext_head = Some(PretextHead::init(
                    &mut self.store,
                    &mut rng,
                    self.config.d,
                    self.config.classes,
                ));
            }
        }
    }
}

/// Errors if two configs disagree, listing every mismatched field — the
/// guard between a loaded checkpoint and the run's requested config.
pub fn check_config_compat(expected: &ModelConfig, found: &ModelConfig) -> Result<(), TrainError> {
    let mut bad: Vec<&str> = Vec::new();
    if expected.layers != found.layers {
        bad.push("layers");
    }
    if expected.d != found.d {
        bad.push("d");
    }
    if expected.heads != found.heads {
        bad.push("heads");
    }
    if expected.ffn != found.ffn {
        bad.push("ffn");
    }
    if expected.vocab != found.vocab {
        bad.push("vocab");
    }
    if expected.d_in != found.d_in {
        bad.push("d_in");
    }
    if expected.classes != found.classes {
        bad.push("classes");
    }
    if expected.n != found.n {
        bad.push("n");
    }
    if expected.t != found.t {
        bad.push("t");
    }
    if expected.max_u != found.max_u {
        bad.push("max_u");
    }
    if expected.region_positional != found.region_positional {
        bad.push("region_positional");
    }
    if expected.class_input != found.class_input {
        bad.push("class_input");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Config(format!(
            "checkpoint config mismatch in fields: {}",
            bad.join(", ")
        )))
    }
}

/// Lays token ids into a length-`t` text window: the leading tokens,
/// then [STOP] if room remains, then [PAD]. Returns the window and the
/// number of real (non-pad) positions.
pub fn text_window(tokens: &[usize], t: usize) -> (Vec<usize>, usize) {
    let mut window = vec![PAD; t];
    let l = tokens.len().min(t);
    window[..l].copy_from_slice(&tokens[..l]);
    if l < t {
        window[l] = STOP;
        (window, l + 1)
    } else {
        (window, t)
    }
}

/// Returns regions ready for embedding under `config`: when class
/// probabilities are excluded from the input (pretext ablation arm), every
/// region's class vector is zeroed.
pub fn prepare_regions(config: &ModelConfig, regions: &[crate::data::Region]) -> Vec<crate::data::Region> {
    let mut out = regions.to_vec();
    if !config.class_input {
        for r in &mut out {
            r.class_probs.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Token corruption settings (defaults: 15% selection, 80/10/10
/// mask/random/keep, at least one selection forced per window).
#[derive(Debug, Clone)]
pub struct CorruptionConfig {
    pub rate: f64,
    pub p_mask: f64,
    pub p_rand: f64,
    pub p_keep: f64,
    /// Redraw the whole selection pass while it comes up empty. Turning
    /// this off reproduces strict independent selection, which can yield
    /// windows with nothing to predict.
    pub force_nonempty: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            rate: 0.15,
            p_mask: 0.8,
            p_rand: 0.1,
            p_keep: 0.1,
            force_nonempty: true,
        }
    }
}

/// Scalars out of one masked-LM pass.
#[derive(Debug, Clone, Copy)]
pub struct LmStats {
    /// Cross-entropy averaged over every selected position in the batch.
    pub loss: f64,
    /// Fraction of selected positions whose argmax logit is the original.
    pub accuracy: f64,
    /// Number of selected positions in the batch.
    pub masked: usize,
}

/// One masked-LM pass over a batch of scenes: corrupt each caption window,
/// assemble under `objective`'s segment rows and attention mask, run the
/// trunk, and score the selected positions through the tied LM head.
/// With `train` set, gradients are accumulated into the store.
pub fn masked_lm_loss(
    weights: &mut ModelWeights,
    batch: &[&SceneExample],
    objective: Objective,
    vocab: &Vocab,
    corruption: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<LmStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty masked-LM batch".into()));
    }
    let ModelWeights {
        config,
        store,
        tables,
        layers,
        lm_head,
        ..
    } = weights;

    // Corruption consumes the loop RNG first, in batch order, so the plan
    // depends only on (seed, batch), never on the objective.
    let mut prepared = Vec::with_capacity(batch.len());
    for scene in batch {
        let (window, text_len) = text_window(&scene.caption, config.t);
        let (corrupted, plan) = corrupt_tokens(
            &window,
            rng,
            corruption.rate,
            corruption.p_mask,
            corruption.p_rand,
            corruption.p_keep,
            vocab,
            corruption.force_nonempty,
        )?;
        prepared.push((scene, corrupted, text_len, plan));
    }

    let mut tape = Tape::new();
    let bind = store.bind_mut(&mut tape);
    let mut total: Option<NodeId> = None;
    let mut masked = 0usize;
    let mut hits = 0usize;
    for (scene, corrupted, text_len, plan) in &prepared {
        let regions = prepare_regions(config, &scene.regions);
        let input = crate::embed::assemble_input(
            &mut tape,
            &bind,
            tables,
            &regions,
            corrupted,
            objective,
            config.region_positional,
        )?;
        let mask = objective.build_mask(input.layout, *text_len);
        let trace = forward(
            &mut tape,
            &bind,
            &input,
            &mask,
            layers,
            config,
            &mut DropoutMode::Inference,
        )?;
        let cols: Vec<usize> = plan.positions.iter().map(|&j| input.layout.text(j)).collect();
        let logits = lm_logits(&mut tape, &bind, trace.h_final, &cols, lm_head, tables)?;
        let ce = tape.cross_entropy(logits, &plan.originals)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });

        let values = tape.value(logits).to_vec();
        let p = plan.positions.len();
        for (j, &orig) in plan.originals.iter().enumerate() {
            let mut best = 0usize;
            for i in 1..config.vocab {
                if values[i * p + j] > values[best * p + j] {
                    best = i;
                }
            }
            if best == orig {
                hits += 1;
            }
        }
        masked += p;
    }

    let sum = total.expect("nonempty batch");
    let loss_node = tape.scale(sum, 1.0 / masked as f64);
    let loss = tape.value(loss_node)[0];
    if train {
        tape.backward(loss_node)?;
        store.accumulate_grads(&tape);
    }
    Ok(LmStats {
        loss,
        accuracy: hits as f64 / masked as f64,
        masked,
    })
}

/// Full-model gradient audit: the complete masked-LM loss — region and
/// token embeddings, every trunk layer, and the tied output head — is
/// differentiated by the tape and re-derived with central finite
/// differences over every parameter coordinate. The corruption plan is
/// frozen up front so the loss is a pure function of the parameters.
/// Returns the maximum relative error across all coordinates, where each
/// coordinate is scored by its best-conditioned step width in `hs` (see
/// [`finite_diff_check_steps`]): a steep output-head coordinate and a
/// near-cancelled attention coordinate cannot share one width.
pub fn masked_lm_fd_max_err(
    weights: &mut ModelWeights,
    batch: &[&SceneExample],
    vocab: &Vocab,
    corruption: &CorruptionConfig,
    objective: Objective,
    seed: u64,
    hs: &[f64],
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty gradient-check batch".into()));
    }
    let config = weights.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frozen = Vec::new();
    for scene in batch {
        let (window, text_len) = text_window(&scene.caption, config.t);
        let (corrupted, plan) = corrupt_tokens(
            &window,
            &mut rng,
            corruption.rate,
            corruption.p_mask,
            corruption.p_rand,
            corruption.p_keep,
            vocab,
            corruption.force_nonempty,
        )?;
        let regions = prepare_regions(&config, &scene.regions);
        frozen.push((regions, corrupted, text_len, plan));
    }
    let tables = weights.tables.clone();
    let layers = weights.layers.clone();
    let head = weights.lm_head.clone();
    let err = finite_diff_check_steps(&mut weights.store, hs, |tape, bind| {
        let mut total: Option<NodeId> = None;
        let mut masked = 0usize;
        for (regions, corrupted, text_len, plan) in &frozen {
            let input = crate::embed::assemble_input(
                tape,
                bind,
                &tables,
                regions,
                corrupted,
                objective,
                config.region_positional,
            )?;
            let mask = objective.build_mask(input.layout, *text_len);
            let trace = forward(
                tape,
                bind,
                &input,
                &mask,
                &layers,
                &config,
                &mut DropoutMode::Inference,
            )?;
            let cols: Vec<usize> = plan.positions.iter().map(|&j| input.layout.text(j)).collect();
            let logits = lm_logits(tape, bind, trace.h_final, &cols, &head, &tables)?;
            let ce = tape.cross_entropy(logits, &plan.originals)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            masked += plan.positions.len();
        }
        Ok(tape.scale(total.expect("nonempty batch"), 1.0 / masked as f64))
    })?;
    Ok(err)
}

/// Scalars out of one region-pretext pass.
#[derive(Debug, Clone, Copy)]
pub struct PretextStats {
    pub loss: f64,
    pub accuracy: f64,
    pub selected: usize,
}

/// Selects each index with probability `rate`, redrawing the whole pass
/// while the selection is empty. Draw order: one uniform per index,
/// ascending, per pass.
fn select_indices(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let mut sel = Vec::new();
        for i in 0..n {
            if rng.random::<f64>() < rate {
                sel.push(i);
            }
        }
        if !sel.is_empty() {
            return sel;
        }
    }
}

/// Region-label pretext loss: blank the appearance features of 15% of the
/// regions (at least one) at the input, keep the class/geometry branch as
/// configured, and predict each blanked region's class — the argmax of its
/// detector distribution — from its final hidden column through the
/// pretext head. Runs under the bidirectional mask with the caption as
/// uncorrupted context.
pub fn region_pretext_loss(
    weights: &mut ModelWeights,
    batch: &[&SceneExample],
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<PretextStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty region-pretext batch".into()));
    }
    let Some(head) = weights.pretext_head.clone() else {
        return Err(TrainError::Config(
            "region pretext head is not attached".into(),
        ));
    };
    let ModelWeights {
        config,
        store,
        tables,
        layers,
        ..
    } = weights;

    let mut prepared = Vec::with_capacity(batch.len());
    for scene in batch {
        let selected = select_indices(scene.regions.len(), 0.15, rng);
        prepared.push((scene, selected));
    }

    let mut tape = Tape::new();
    let bind = store.bind_mut(&mut tape);
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    let mut hits = 0usize;
    for (scene, selected) in &prepared {
        let mut regions = prepare_regions(config, &scene.regions);
        for &i in selected {
            regions[i].features.iter_mut().for_each(|v| *v = 0.0);
        }
        let (window, text_len) = text_window(&scene.caption, config.t);
        let input = crate::embed::assemble_input(
            &mut tape,
            &bind,
            tables,
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
            layers,
            config,
            &mut DropoutMode::Inference,
        )?;
        let cols: Vec<usize> = selected.iter().map(|&i| input.layout.region(i)).collect();
        let targets: Vec<usize> = selected
            .iter()
            .map(|&i| argmax(&scene.regions[i].class_probs))
            .collect();
        let h_cols = tape.select_cols(trace.h_final, &cols)?;
        let proj = tape.matmul(bind[head.w], h_cols)?;
        let logits = tape.add_bias(proj, bind[head.b])?;
        let ce = tape.cross_entropy(logits, &targets)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });

        let values = tape.value(logits).to_vec();
        let p = targets.len();
        for (j, &target) in targets.iter().enumerate() {
            let mut best = 0usize;
            for i in 1..config.classes {
                if values[i * p + j] > values[best * p + j] {
                    best = i;
                }
            }
            if best == target {
                hits += 1;
            }
        }
        count += p;
    }

    let sum = total.expect("nonempty batch");
    let loss_node = tape.scale(sum, 1.0 / count as f64);
    let loss = tape.value(loss_node)[0];
    if train {
        tape.backward(loss_node)?;
        store.accumulate_grads(&tape);
    }
    Ok(PretextStats {
        loss,
        accuracy: hits as f64 / count as f64,
        selected: count,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values[best];
    best
}

/// Scalars out of one VQA pass.
#[derive(Debug, Clone, Copy)]
pub struct VqaStats {
    /// Binary cross-entropy averaged over every answer dimension in the
    /// batch.
    pub loss: f64,
    /// Mean gold soft-label value at each example's top-1 answer.
    pub accuracy: f64,
}

/// Builds the VQA answer logits for one assembled-and-forwarded example:
/// the sigmoid-MLP input is the element-wise product of the final [CLS]
/// and [SEP] columns.
pub fn vqa_score_logits(
    tape: &mut Tape,
    bind: &Binding,
    head: &VqaHead,
    h_final: NodeId,
    layout: Layout,
) -> Result<NodeId, TensorError> {
    let cls = tape.select_cols(h_final, &[layout.cls()])?;
    let sep = tape.select_cols(h_final, &[layout.sep()])?;
    let z = tape.mul(cls, sep)?;
    let hidden = tape.matmul(bind[head.w1], z)?;
    let hidden = tape.add_bias(hidden, bind[head.b1])?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(bind[head.w2], hidden)?;
    tape.add_bias(out, bind[head.b2])
}

/// One VQA pass over a batch of (scene, question-index) pairs: assemble
/// each question under the bidirectional objective — no token corruption —
/// and score the answer vocabulary against the pair's soft labels with
/// binary cross-entropy.
pub fn vqa_loss(
    weights: &mut ModelWeights,
    batch: &[(&SceneExample, usize)],
    train: bool,
) -> Result<VqaStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty VQA batch".into()));
    }
    let Some(head) = weights.vqa_head.clone() else {
        return Err(TrainError::Config("VQA head is not attached".into()));
    };
    let ModelWeights {
        config,
        store,
        tables,
        layers,
        ..
    } = weights;

    let mut tape = Tape::new();
    let bind = store.bind_mut(&mut tape);
    let mut total: Option<NodeId> = None;
    let mut acc_sum = 0.0;
    for &(scene, qa_idx) in batch {
        let qa = scene.qa.get(qa_idx).ok_or_else(|| {
            TrainError::Config(format!(
                "scene {} has no question {qa_idx}",
                scene.scene_id
            ))
        })?;
        if qa.soft_labels.len() != head.k {
            return Err(TrainError::Config(format!(
                "soft labels carry {} answers, head expects {}",
                qa.soft_labels.len(),
                head.k
            )));
        }
        let regions = prepare_regions(config, &scene.regions);
        let (window, text_len) = text_window(&qa.question, config.t);
        let input = crate::embed::assemble_input(
            &mut tape,
            &bind,
            tables,
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
            layers,
            config,
            &mut DropoutMode::Inference,
        )?;
        let logits = vqa_score_logits(&mut tape, &bind, &head, trace.h_final, input.layout)?;
        let bce = tape.bce_with_logits(logits, &qa.soft_labels)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, bce)?,
            None => bce,
        });

        let values = tape.value(logits);
        let top = argmax(values);
        acc_sum += qa.soft_labels[top];
    }

    let sum = total.expect("nonempty batch");
    let loss_node = tape.scale(sum, 1.0 / (batch.len() * head.k) as f64);
    let loss = tape.value(loss_node)[0];
    if train {
        tape.backward(loss_node)?;
        store.accumulate_grads(&tape);
    }
    Ok(VqaStats {
        loss,
        accuracy: acc_sum / batch.len() as f64,
    })
}

/// Settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Per-batch seq2seq proportion; 1 = pure seq2seq, 0 = pure
    /// bidirectional.
    pub lambda: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm cap.
    pub clip: f64,
    pub corruption: CorruptionConfig,
    /// Seeds batch order and token corruption for the whole run.
    pub seed: u64,
    /// Also write the checkpoint every this many steps (last step always
    /// writes when a path is given).
    pub checkpoint_every: Option<u64>,
    /// Add the region-label pretext loss at every pre-training step.
    pub region_pretext: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 1000 steps of batch 16, λ=0.75, Adam 3e-3 with
    /// 100-step warmup, clip 1.0.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lambda: 0.75,
            adam: AdamConfig::default(),
            clip: 1.0,
            corruption: CorruptionConfig::default(),
            seed: 0,
            checkpoint_every: None,
            region_pretext: false,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: u64,
    pub objective: Objective,
    pub loss: f64,
    pub acc: f64,
    pub wallclock_ms: u64,
}

/// Per-step records of one run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn seq2seq_steps(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.objective == Objective::Seq2Seq)
            .count()
    }

    /// Writes `step,objective,loss,acc,wallclock_ms` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp).map_err(|source| TrainError::Io {
                path: tmp.clone(),
                source,
            })?;
            let mut out = std::io::BufWriter::new(file);
            writeln!(out, "step,objective,loss,acc,wallclock_ms").map_err(io)?;
            for r in &self.records {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.step,
                    r.objective.name(),
                    r.loss,
                    r.acc,
                    r.wallclock_ms
                )
                .map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }
}

/// Deterministic epoch sampler: a fresh shuffle of the index range whenever
/// the previous pass is exhausted.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize) -> Sampler {
        Sampler {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            crate::rngx::shuffle(rng, &mut self.order);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

/// Destination for checkpoints written during and after a run.
pub struct CheckpointSink<'a> {
    pub path: &'a Path,
    pub answers: Option<&'a AnswerVocab>,
}

/// Observer invoked on the live weights at step 0 (before any update),
/// every `every` steps after the optimizer applies, and at the final step.
/// The callback must not mutate the weights in a way that changes training
/// (evaluation passes with `train=false` leave no gradients behind).
pub struct Probe<'p> {
    pub every: u64,
    #[allow(clippy::type_complexity)]
    pub call: &'p mut dyn FnMut(u64, &mut ModelWeights) -> Result<(), TrainError>,
}

fn fire_probe(
    probe: &mut Option<Probe<'_>>,
    step: u64,
    weights: &mut ModelWeights,
    last: bool,
) -> Result<(), TrainError> {
    if let Some(p) = probe.as_mut() {
        if step == 0 || last || (p.every > 0 && step % p.every == 0) {
            (p.call)(step, weights)?;
        }
    }
    Ok(())
}

fn finish_step(
    weights: &mut ModelWeights,
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: u64,
    loss: f64,
) -> Result<(), TrainError> {
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    clip_global_norm(&mut weights.store, cfg.clip);
    adam_step(&mut weights.store, state, &cfg.adam, step as usize).map_err(|e| match e {
        TensorError::NonFiniteGradient { param } => TrainError::NonFinite {
            step,
            detail: format!("non-finite gradient in `{param}`"),
        },
        other => TrainError::Tensor(other),
    })?;
    weights.store.zero_grads();
    Ok(())
}

fn maybe_checkpoint(
    weights: &ModelWeights,
    sink: &Option<CheckpointSink<'_>>,
    cfg: &TrainConfig,
    step: u64,
    last: bool,
) -> Result<(), TrainError> {
    let Some(sink) = sink else { return Ok(()) };
    let due = matches!(cfg.checkpoint_every, Some(k) if k > 0 && step % k == 0);
    if due || last {
        save_checkpoint(weights, step, sink.answers, sink.path)?;
    }
    Ok(())
}

/// Masked-LM pre-training: per step, draw a batch, pick the objective from
/// the λ accumulator, descend the masked-LM loss (plus the region pretext
/// when enabled). Fully deterministic given (dataset, config, seeds).
pub fn pretrain(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainLog, TrainError> {
    pretrain_probed(weights, dataset, vocab, cfg, sink, None)
}

/// [`pretrain`] with an optional evaluation probe.
pub fn pretrain_probed(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
    mut probe: Option<Probe<'_>>,
) -> Result<TrainLog, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Config("empty training dataset".into()));
    }
    if cfg.region_pretext && weights.pretext_head.is_none() {
        weights.attach_pretext_head(cfg.seed ^ 0x7065_7478);
    }
    let mut schedule = ObjectiveSchedule::new(cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(dataset.len());
    let mut state = AdamState::new(&weights.store);
    let mut log = TrainLog::default();

    fire_probe(&mut probe, 0, weights, false)?;
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let batch: Vec<&SceneExample> = (0..cfg.batch_size)
            .map(|_| &dataset[sampler.next(&mut rng)])
            .collect();
        let objective = schedule.next_objective();
        let lm = masked_lm_loss(weights, &batch, objective, vocab, &cfg.corruption, &mut rng, true)?;
        let mut loss = lm.loss;
        if cfg.region_pretext {
            let pre = region_pretext_loss(weights, &batch, &mut rng, true)?;
            loss += pre.loss;
        }
        finish_step(weights, &mut state, cfg, step, loss)?;
        log.records.push(TrainRecord {
            step,
            objective,
            loss,
            acc: lm.accuracy,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
        maybe_checkpoint(weights, &sink, cfg, step, step == cfg.steps)?;
        fire_probe(&mut probe, step, weights, step == cfg.steps)?;
    }
    Ok(log)
}

/// Caption fine-tuning: the pre-training loop pinned to λ=1 (pure seq2seq).
pub fn finetune_caption(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainLog, TrainError> {
    finetune_caption_probed(weights, dataset, vocab, cfg, sink, None)
}

/// [`finetune_caption`] with an optional evaluation probe.
pub fn finetune_caption_probed(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
    probe: Option<Probe<'_>>,
) -> Result<TrainLog, TrainError> {
    let mut cfg = cfg.clone();
    cfg.lambda = 1.0;
    cfg.region_pretext = false;
    pretrain_probed(weights, dataset, vocab, &cfg, sink, probe)
}

/// VQA fine-tuning: pure bidirectional (λ=0), descending the sigmoid-MLP
/// binary cross-entropy over (scene, question) pairs. The answer head is
/// freshly initialized every run — pre-training never trains it.
pub fn finetune_vqa(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    answers: &AnswerVocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainLog, TrainError> {
    finetune_vqa_probed(weights, dataset, answers, cfg, sink, None)
}

/// [`finetune_vqa`] with an optional evaluation probe.
pub fn finetune_vqa_probed(
    weights: &mut ModelWeights,
    dataset: &[SceneExample],
    answers: &AnswerVocab,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
    mut probe: Option<Probe<'_>>,
) -> Result<TrainLog, TrainError> {
    let pairs: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| (0..scene.qa.len()).map(move |q| (s, q)))
        .collect();
    if pairs.is_empty() {
        return Err(TrainError::Config("dataset has no QA pairs".into()));
    }
    weights.attach_vqa_head(answers.len(), cfg.seed ^ 0x7671_6121);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(pairs.len());
    let mut state = AdamState::new(&weights.store);
    let mut log = TrainLog::default();

    fire_probe(&mut probe, 0, weights, false)?;
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let batch: Vec<(&SceneExample, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let (s, q) = pairs[sampler.next(&mut rng)];
                (&dataset[s], q)
            })
            .collect();
        let stats = vqa_loss(weights, &batch, true)?;
        finish_step(weights, &mut state, cfg, step, stats.loss)?;
        log.records.push(TrainRecord {
            step,
            objective: Objective::Bidirectional,
            loss: stats.loss,
            acc: stats.accuracy,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
        maybe_checkpoint(weights, &sink, cfg, step, step == cfg.steps)?;
        fire_probe(&mut probe, step, weights, step == cfg.steps)?;
    }
    Ok(log)
}
