//! Input construction: class-aware region embeddings and the assembled
//! joint sequence H⁰.
//!
//! A region embeds as `W_r·R + W_p·[LN(W_c·C) | LN(W_g·G)]` — appearance
//! features projected directly, class distribution and box geometry each
//! projected into half the hidden width, layer-normalized, concatenated,
//! and projected back. No bias, no nonlinearity. Text columns are token +
//! position + segment rows; the segment row depends on the training
//! objective and on whether the column is visual or textual, which is how
//! the trunk is told which regime it is in.

use rand_chacha::ChaCha8Rng;

use crate::data::{Region, CLS, SEP, STOP};
use crate::mask::{Layout, Objective};
use crate::tensor::{Binding, NodeId, ParamId, ParamStore, Tape, TensorError};

/// Layer-norm epsilon used by the two branch norms in the region embedding
/// (and by the backbone's norm layers).
pub const LN_EPS: f64 = 1e-12;

/// Whether visual-block columns ([CLS] and regions) also receive global
/// position rows. Regions are an unordered set, so the default adds
/// positions only from [SEP] onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionPositional {
    None,
    Global,
}

/// Dimensions the embedding tables are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedDims {
    /// Hidden size d (must be even: the two branch widths are d/2 each).
    pub d: usize,
    /// Region feature width d_in.
    pub d_in: usize,
    /// Class-distribution length l.
    pub l: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Longest sequence the position table covers.
    pub max_u: usize,
}

/// Parameter ids of every embedding table in the store.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub dims: EmbedDims,
    /// d×d_in appearance projection.
    pub w_r: ParamId,
    /// (d/2)×l class-branch projection.
    pub w_c: ParamId,
    /// (d/2)×5 geometry-branch projection.
    pub w_g: ParamId,
    /// d×d projection over the concatenated branches.
    pub w_p: ParamId,
    pub ln_c_gain: ParamId,
    pub ln_c_bias: ParamId,
    pub ln_g_gain: ParamId,
    pub ln_g_bias: ParamId,
    /// vocab×d token table; also the tied LM output projection.
    pub token: ParamId,
    /// max_U×d global position table.
    pub position: ParamId,
    /// 4×d segment table, rows indexed by [`segment_row`].
    pub segment: ParamId,
}

/// Row of the segment table for an (objective, block) pair.
pub fn segment_row(objective: Objective, visual: bool) -> usize {
    match (objective, visual) {
        (Objective::Seq2Seq, true) => 0,
        (Objective::Seq2Seq, false) => 1,
        (Objective::Bidirectional, true) => 2,
        (Objective::Bidirectional, false) => 3,
    }
}

impl EmbeddingTables {
    /// Allocates all tables in `store` with small normal init (projections),
    /// unit gains, and zero biases.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: EmbedDims) -> EmbeddingTables {
        assert!(dims.d % 2 == 0, "hidden size must be even, got {}", dims.d);
        let h = dims.d / 2;
        let std = 0.02;
        EmbeddingTables {
            dims,
            w_r: store.add_normal("embed.w_r", vec![dims.d, dims.d_in], std, rng),
            w_c: store.add_normal("embed.w_c", vec![h, dims.l], std, rng),
            w_g: store.add_normal("embed.w_g", vec![h, 5], std, rng),
            w_p: store.add_normal("embed.w_p", vec![dims.d, 2 * h], std, rng),
            ln_c_gain: store.add_ones("embed.ln_c.gain", vec![h]),
            ln_c_bias: store.add_zeros("embed.ln_c.bias", vec![h]),
            ln_g_gain: store.add_ones("embed.ln_g.gain", vec![h]),
            ln_g_bias: store.add_zeros("embed.ln_g.bias", vec![h]),
            token: store.add_normal("embed.token", vec![dims.vocab, dims.d], std, rng),
            position: store.add_normal("embed.position", vec![dims.max_u, dims.d], std, rng),
            segment: store.add_normal("embed.segment", vec![4, dims.d], std, rng),
        }
    }

    /// Embeds a batch of regions as the d×N matrix of Eq.-1 columns
    /// (segment rows not included).
    pub fn embed_regions(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        regions: &[Region],
    ) -> Result<NodeId, TensorError> {
        let n = regions.len();
        let d_in = self.dims.d_in;
        let l = self.dims.l;
        // Column-major assembly of the three per-region record matrices.
        let mut r = vec![0.0; d_in * n];
        let mut c = vec![0.0; l * n];
        let mut g = vec![0.0; 5 * n];
        for (j, region) in regions.iter().enumerate() {
            if region.features.len() != d_in || region.class_probs.len() != l {
                return Err(TensorError::ShapeMismatch {
                    op: "embed_regions",
                    lhs: vec![region.features.len(), region.class_probs.len()],
                    rhs: vec![d_in, l],
                });
            }
            for i in 0..d_in {
                r[i * n + j] = region.features[i];
            }
            for i in 0..l {
                c[i * n + j] = region.class_probs[i];
            }
            for i in 0..5 {
                g[i * n + j] = region.geometry[i];
            }
        }
        let r = tape.constant(vec![d_in, n], r)?;
        let c = tape.constant(vec![l, n], c)?;
        let g = tape.constant(vec![5, n], g)?;

        let appearance = tape.matmul(bind[self.w_r], r)?;
        let c_proj = tape.matmul(bind[self.w_c], c)?;
        let c_norm = tape.layer_norm(c_proj, bind[self.ln_c_gain], bind[self.ln_c_bias], LN_EPS)?;
        let g_proj = tape.matmul(bind[self.w_g], g)?;
        let g_norm = tape.layer_norm(g_proj, bind[self.ln_g_gain], bind[self.ln_g_bias], LN_EPS)?;
        let stacked = tape.concat_rows(&[c_norm, g_norm])?;
        let projected = tape.matmul(bind[self.w_p], stacked)?;
        tape.add(appearance, projected)
    }

    /// Embeds one region (a single Eq.-1 column of length d).
    pub fn embed_region(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        region: &Region,
    ) -> Result<NodeId, TensorError> {
        self.embed_regions(tape, bind, std::slice::from_ref(region))
    }

    /// Embedded column for one token table row plus its position and
    /// segment rows.
    fn token_columns(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ids: &[usize],
        first_position: usize,
        segment: usize,
    ) -> Result<NodeId, TensorError> {
        let rows = tape.select_rows(bind[self.token], ids)?;
        let tok = tape.transpose(rows);
        let positions: Vec<usize> = (first_position..first_position + ids.len()).collect();
        let pos_rows = tape.select_rows(bind[self.position], &positions)?;
        let pos = tape.transpose(pos_rows);
        let with_pos = tape.add(tok, pos)?;
        let seg_row = tape.select_rows(bind[self.segment], &[segment])?;
        let seg = tape.transpose(seg_row);
        tape.add_bias(with_pos, seg)
    }
}

/// The assembled joint input: H⁰ plus the bookkeeping needed to interpret
/// its columns.
#[derive(Debug, Clone)]
pub struct InputSequence {
    /// d×U embedded sequence on the tape.
    pub h0: NodeId,
    pub layout: Layout,
    /// The T text-window token ids this input was built from.
    pub token_ids: Vec<usize>,
    pub objective: Objective,
}

/// Builds H⁰ = [CLS] r_1..r_N [SEP] y_1..y_T [STOP] for one example.
/// `window_ids` is the length-T text window (already corrupted/padded as
/// the caller requires).
pub fn assemble_input(
    tape: &mut Tape,
    bind: &Binding,
    tables: &EmbeddingTables,
    regions: &[Region],
    window_ids: &[usize],
    objective: Objective,
    positional: RegionPositional,
) -> Result<InputSequence, TensorError> {
    let layout = Layout::new(regions.len(), window_ids.len());
    let u = layout.u();
    if u > tables.dims.max_u {
        return Err(TensorError::IndexOutOfRange {
            op: "assemble_input",
            index: u,
            bound: tables.dims.max_u,
        });
    }

    let seg_visual = segment_row(objective, true);
    let seg_text = segment_row(objective, false);

    // Visual block: [CLS] token column plus the region columns, all with
    // the visual segment row; position rows only when configured.
    let cls_rows = tape.select_rows(bind[tables.token], &[CLS])?;
    let mut cls = tape.transpose(cls_rows);
    let mut region_block = tables.embed_regions(tape, bind, regions)?;
    if positional == RegionPositional::Global {
        let pos0 = tape.select_rows(bind[tables.position], &[layout.cls()])?;
        let pos0 = tape.transpose(pos0);
        cls = tape.add(cls, pos0)?;
        let region_positions: Vec<usize> = (0..layout.n).map(|i| layout.region(i)).collect();
        let pos_rows = tape.select_rows(bind[tables.position], &region_positions)?;
        let pos = tape.transpose(pos_rows);
        region_block = tape.add(region_block, pos)?;
    }
    let seg_v_row = tape.select_rows(bind[tables.segment], &[seg_visual])?;
    let seg_v = tape.transpose(seg_v_row);
    let cls = tape.add(cls, seg_v)?;
    let region_block = tape.add_bias(region_block, seg_v)?;

    // Text block: [SEP], the window, then the terminal [STOP]; token +
    // global position + text segment row.
    let mut text_ids = Vec::with_capacity(layout.t + 2);
    text_ids.push(SEP);
    text_ids.extend_from_slice(window_ids);
    text_ids.push(STOP);
    let text_block = tables.token_columns(tape, bind, &text_ids, layout.sep(), seg_text)?;

    let h0 = tape.concat_cols(&[cls, region_block, text_block])?;
    Ok(InputSequence {
        h0,
        layout,
        token_ids: window_ids.to_vec(),
        objective,
    })
}
