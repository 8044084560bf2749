//! Self/cross attention and the two batch-coupling mechanisms.
//!
//! Regional interconnection self-attention (RISA) concatenates keys and
//! values across a batch of images and masks foreign-image keys to their
//! layout regions. Semantic fusion cross-attention (SFCA) augments each
//! image's cross-attention with the other images' subject-token keys and
//! values, masked along the query axis. Masking is additive: a zero mask
//! entry contributes a −1e9 logit, which underflows to exactly zero weight
//! after softmax while keeping gradients finite.

use thiserror::Error;

use crate::energy::BoundingBox;
use crate::tensor::{GradTape, NodeId, Tensor, TensorError};

/// Additive logit standing in for log 0.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttnError {
    #[error("query row {row} is fully masked")]
    FullyMaskedQuery { row: usize },
    #[error("image {image} has no subject token")]
    MissingSubject { image: usize },
    #[error("subject tokens {start}..{end} out of bounds for {tokens} prompt tokens")]
    SubjectOutOfRange {
        start: usize,
        end: usize,
        tokens: usize,
    },
    #[error("image {image}: spatial size {got} does not match batch size {expected}")]
    InconsistentSpatial {
        image: usize,
        got: usize,
        expected: usize,
    },
    #[error("mask carries {got} pixels, expected {expected}")]
    MaskShape { got: usize, expected: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("image index {index} out of bounds for batch of {len}")]
    ImageIndex { index: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which axis a foreign-image RISA block masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RisaMaskAxis {
    /// Image i attends only to layout-region pixels of image j (default).
    Key,
    /// Only layout-region pixels of image i attend to image j (ablation).
    Query,
}

/// Which layout mask gates a foreign subject key in SFCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfcaMaskSource {
    /// The foreign image's own mask M_j, matching the printed shapes (default).
    Literal,
    /// The attending image's mask M_i for the same subject slot.
    Own,
}

/// Binary rasterization of a bounding box: pixel is 1 iff its center lies
/// inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutMask {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl LayoutMask {
    pub fn full(h: usize, w: usize) -> Self {
        LayoutMask {
            h,
            w,
            values: vec![1.0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Flattened row-major 0/1 values, length H·W.
    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn area_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.h * self.w) as f64
    }

    /// Elementwise OR with another mask of the same grid.
    pub fn union(&self, other: &LayoutMask) -> Result<LayoutMask, AttnError> {
        if self.values.len() != other.values.len() {
            return Err(AttnError::MaskShape {
                got: other.values.len(),
                expected: self.values.len(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| if *a > 0.0 || *b > 0.0 { 1.0 } else { 0.0 })
            .collect();
        Ok(LayoutMask {
            h: self.h,
            w: self.w,
            values,
        })
    }
}

/// Center-inclusion rasterization of a box onto an H×W grid.
pub fn mask_from_box(b: &BoundingBox, h: usize, w: usize) -> LayoutMask {
    let mut values = vec![0.0; h * w];
    for row in 0..h {
        let x = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let y = (col as f64 + 0.5) / w as f64;
            if b.contains(x, y) {
                values[row * w + col] = 1.0;
            }
        }
    }
    LayoutMask { h, w, values }
}

// ── tape-level attention ──────────────────────────────────────────────────────

/// Dense 0/1 mask over (query, key) pairs.
#[derive(Debug, Clone)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl MaskMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            values: vec![1.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AttnError> {
        if values.len() != rows * cols {
            return Err(AttnError::MaskShape {
                got: values.len(),
                expected: rows * cols,
            });
        }
        Ok(MaskMatrix { rows, cols, values })
    }

    /// Broadcast of a key-axis mask: every query row shares it.
    pub fn from_key_mask(rows: usize, key_mask: &[f64]) -> Self {
        let mut values = Vec::with_capacity(rows * key_mask.len());
        for _ in 0..rows {
            values.extend_from_slice(key_mask);
        }
        MaskMatrix {
            rows,
            cols: key_mask.len(),
            values,
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn check_rows_have_keys(&self) -> Result<(), AttnError> {
        for row in 0..self.rows {
            let open = self.values[row * self.cols..(row + 1) * self.cols]
                .iter()
                .any(|&m| m > 0.0);
            if !open {
                return Err(AttnError::FullyMaskedQuery { row });
            }
        }
        Ok(())
    }

    /// Additive logit bias: 0 where open, −1e9 where masked.
    fn logit_bias(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&m| if m > 0.0 { 0.0 } else { MASK_NEG })
            .collect()
    }
}

/// Scaled dot-product attention on the tape with an optional dense mask.
///
/// `q` is Sq×dk, `k` is Sk×dk, `v` is Sk×dv; the mask, when present, covers
/// (Sq, Sk). Every query row must keep at least one unmasked key.
pub fn masked_attention_node(
    tape: &mut GradTape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&MaskMatrix>,
) -> Result<NodeId, AttnError> {
    let weights = attention_weights_node(tape, q, k, mask)?;
    Ok(tape.matmul(weights, v)?)
}

/// The softmax attention matrix alone (Sq×Sk), for map collection.
pub fn attention_weights_node(
    tape: &mut GradTape,
    q: NodeId,
    k: NodeId,
    mask: Option<&MaskMatrix>,
) -> Result<NodeId, AttnError> {
    let dk = match tape.value(q).shape() {
        [_, d] => *d,
        other => {
            return Err(TensorError::RankMismatch {
                op: "attention",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut logits = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(m) = mask {
        let shape = tape.value(logits).shape().to_vec();
        if shape != [m.rows, m.cols] {
            return Err(AttnError::MaskShape {
                got: m.values.len(),
                expected: shape.iter().product(),
            });
        }
        m.check_rows_have_keys()?;
        let bias = tape.constant(Tensor::new(shape, m.logit_bias())?);
        logits = tape.add(logits, bias)?;
    }
    Ok(tape.softmax_lastdim(logits)?)
}

/// Plain-tensor surface: attention with a key-axis mask shared by all
/// queries. Passing an all-ones mask reproduces standard attention.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: &[f64],
) -> Result<Tensor, AttnError> {
    let rows = match q.shape() {
        [r, _] => *r,
        other => {
            return Err(TensorError::RankMismatch {
                op: "masked_attention",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    let keys = match k.shape() {
        [r, _] => *r,
        other => {
            return Err(TensorError::RankMismatch {
                op: "masked_attention",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    if key_mask.len() != keys {
        return Err(AttnError::MaskShape {
            got: key_mask.len(),
            expected: keys,
        });
    }
    let mut tape = GradTape::new();
    let qn = tape.constant(q.clone());
    let kn = tape.constant(k.clone());
    let vn = tape.constant(v.clone());
    let mask = MaskMatrix::from_key_mask(rows, key_mask);
    let out = masked_attention_node(&mut tape, qn, kn, vn, Some(&mask))?;
    Ok(tape.value(out).clone())
}

// ── RISA ──────────────────────────────────────────────────────────────────────

/// One image's per-head self-attention projections plus its layout region.
#[derive(Debug, Clone)]
pub struct RisaHeadInputs {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// RISA for one head of one image: keys and values are the concatenation
/// over all N images; the block for the image itself is unmasked and the
/// block for image j≠i is masked by image j's region.
pub fn risa_head(
    tape: &mut GradTape,
    image_index: usize,
    heads: &[RisaHeadInputs],
    region_masks: &[Vec<f64>],
    axis: RisaMaskAxis,
) -> Result<NodeId, AttnError> {
    let n = heads.len();
    if n == 0 {
        return Err(AttnError::EmptyBatch);
    }
    if image_index >= n {
        return Err(AttnError::ImageIndex {
            index: image_index,
            len: n,
        });
    }
    let spatial = match tape.value(heads[0].q).shape() {
        [s, _] => *s,
        other => {
            return Err(TensorError::RankMismatch {
                op: "risa",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    for (j, h) in heads.iter().enumerate() {
        let got = tape.value(h.k).shape()[0];
        if got != spatial {
            return Err(AttnError::InconsistentSpatial {
                image: j,
                got,
                expected: spatial,
            });
        }
        if region_masks[j].len() != spatial {
            return Err(AttnError::MaskShape {
                got: region_masks[j].len(),
                expected: spatial,
            });
        }
    }

    let ks: Vec<NodeId> = heads.iter().map(|h| h.k).collect();
    let vs: Vec<NodeId> = heads.iter().map(|h| h.v).collect();
    let k_cat = tape.concat_rows(&ks)?;
    let v_cat = tape.concat_rows(&vs)?;

    let mut mask = MaskMatrix::ones(spatial, n * spatial);
    for j in 0..n {
        if j == image_index {
            continue; // the I block stays all ones
        }
        for q_row in 0..spatial {
            for p in 0..spatial {
                let open = match axis {
                    RisaMaskAxis::Key => region_masks[j][p],
                    RisaMaskAxis::Query => region_masks[j][q_row],
                };
                mask.set(q_row, j * spatial + p, open);
            }
        }
    }

    masked_attention_node(tape, heads[image_index].q, k_cat, v_cat, Some(&mask))
}

// ── SFCA ──────────────────────────────────────────────────────────────────────

/// A foreign subject's key/value rows plus the query-axis mask gating them.
#[derive(Debug, Clone)]
pub struct ForeignSubject {
    pub k: NodeId,
    pub v: NodeId,
    /// Flattened region mask of length S; query pixel q may attend to this
    /// subject iff the mask is 1 at q.
    pub query_mask: Vec<f64>,
}

/// Layout of an SFCA key axis: foreign subjects split around the own block.
#[derive(Debug, Clone, Copy)]
pub struct SfcaLayout {
    /// Column where the image's own prompt-token block starts.
    pub own_offset: usize,
    /// Number of own prompt-token columns.
    pub own_len: usize,
}

/// Attention pieces of an SFCA head: the softmax weights (so callers can
/// read off subject-token maps), the concatenated values, and the key-axis
/// layout.
#[derive(Debug, Clone, Copy)]
pub struct SfcaHeadAttn {
    pub weights: NodeId,
    pub values: NodeId,
    pub layout: SfcaLayout,
}

/// SFCA for one head of one image: the query grid attends over
/// [foreign subjects before ⊕ own prompt tokens ⊕ foreign subjects after].
/// The own block is unmasked; each foreign column is gated per query pixel.
pub fn sfca_head_attn(
    tape: &mut GradTape,
    q: NodeId,
    own_k: NodeId,
    own_v: NodeId,
    before: &[ForeignSubject],
    after: &[ForeignSubject],
) -> Result<SfcaHeadAttn, AttnError> {
    let spatial = match tape.value(q).shape() {
        [s, _] => *s,
        other => {
            return Err(TensorError::RankMismatch {
                op: "sfca",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    let own_len = tape.value(own_k).shape()[0];

    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    for f in before {
        k_parts.push(f.k);
        v_parts.push(f.v);
    }
    k_parts.push(own_k);
    v_parts.push(own_v);
    for f in after {
        k_parts.push(f.k);
        v_parts.push(f.v);
    }
    let k_cat = tape.concat_rows(&k_parts)?;
    let v_cat = tape.concat_rows(&v_parts)?;
    let total_cols = tape.value(k_cat).shape()[0];

    let mut mask = MaskMatrix::ones(spatial, total_cols);
    let mut col = 0;
    for f in before.iter() {
        let width = tape.value(f.k).shape()[0];
        apply_query_mask(&mut mask, col, width, &f.query_mask, spatial)?;
        col += width;
    }
    let own_offset = col;
    col += own_len;
    for f in after.iter() {
        let width = tape.value(f.k).shape()[0];
        apply_query_mask(&mut mask, col, width, &f.query_mask, spatial)?;
        col += width;
    }

    let weights = attention_weights_node(tape, q, k_cat, Some(&mask))?;
    Ok(SfcaHeadAttn {
        weights,
        values: v_cat,
        layout: SfcaLayout {
            own_offset,
            own_len,
        },
    })
}

/// SFCA head output features plus the key-axis layout.
pub fn sfca_head(
    tape: &mut GradTape,
    q: NodeId,
    own_k: NodeId,
    own_v: NodeId,
    before: &[ForeignSubject],
    after: &[ForeignSubject],
) -> Result<(NodeId, SfcaLayout), AttnError> {
    let attn = sfca_head_attn(tape, q, own_k, own_v, before, after)?;
    let out = tape.matmul(attn.weights, attn.values)?;
    Ok((out, attn.layout))
}

fn apply_query_mask(
    mask: &mut MaskMatrix,
    col: usize,
    width: usize,
    query_mask: &[f64],
    spatial: usize,
) -> Result<(), AttnError> {
    if query_mask.len() != spatial {
        return Err(AttnError::MaskShape {
            got: query_mask.len(),
            expected: spatial,
        });
    }
    for (q_row, &open) in query_mask.iter().enumerate() {
        for c in col..col + width {
            mask.set(q_row, c, open);
        }
    }
    Ok(())
}

// ── standalone batch surface ──────────────────────────────────────────────────

/// One subject within an image: its prompt-token span and layout region.
#[derive(Debug, Clone)]
pub struct SubjectSpec {
    pub token_start: usize,
    pub token_len: usize,
    pub mask: LayoutMask,
}

impl SubjectSpec {
    pub fn single(token_index: usize, mask: LayoutMask) -> Self {
        SubjectSpec {
            token_start: token_index,
            token_len: 1,
            mask,
        }
    }
}

/// Per-head projections for one image.
#[derive(Debug, Clone)]
pub struct ImageProjections {
    /// Self-attention Q/K/V, one (S×d_h) triple per head.
    pub self_qkv: Vec<(Tensor, Tensor, Tensor)>,
    /// Cross-attention queries, one S×d_h per head.
    pub cross_q: Vec<Tensor>,
    /// Cross-attention keys/values from the prompt embedding, T×d_h per head.
    pub cross_kv: Vec<(Tensor, Tensor)>,
    pub subjects: Vec<SubjectSpec>,
}

/// Batch of images with aligned grids, ready for RISA/SFCA.
#[derive(Debug, Clone)]
pub struct AttnBatch {
    pub grid_h: usize,
    pub grid_w: usize,
    pub images: Vec<ImageProjections>,
}

impl AttnBatch {
    fn united_mask(&self, image: usize) -> Result<Vec<f64>, AttnError> {
        let entry = &self.images[image];
        if entry.subjects.is_empty() {
            return Err(AttnError::MissingSubject { image });
        }
        let mut union = entry.subjects[0].mask.clone();
        for s in &entry.subjects[1..] {
            union = union.union(&s.mask)?;
        }
        Ok(union.flat().to_vec())
    }
}

/// Regional interconnection self-attention for one image of the batch;
/// returns the head-concatenated S×d features.
pub fn risa(
    batch: &AttnBatch,
    image_index: usize,
    axis: RisaMaskAxis,
) -> Result<Tensor, AttnError> {
    if batch.images.is_empty() {
        return Err(AttnError::EmptyBatch);
    }
    if image_index >= batch.images.len() {
        return Err(AttnError::ImageIndex {
            index: image_index,
            len: batch.images.len(),
        });
    }
    let heads = batch.images[0].self_qkv.len();
    let mut region_masks = Vec::with_capacity(batch.images.len());
    for j in 0..batch.images.len() {
        region_masks.push(batch.united_mask(j)?);
    }

    let mut tape = GradTape::new();
    let mut outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let inputs: Vec<RisaHeadInputs> = batch
            .images
            .iter()
            .map(|img| {
                let (q, k, v) = &img.self_qkv[head];
                RisaHeadInputs {
                    q: tape.constant(q.clone()),
                    k: tape.constant(k.clone()),
                    v: tape.constant(v.clone()),
                }
            })
            .collect();
        outputs.push(risa_head(
            &mut tape,
            image_index,
            &inputs,
            &region_masks,
            axis,
        )?);
    }
    let cat = tape.concat_cols(&outputs)?;
    Ok(tape.value(cat).clone())
}

/// Semantic fusion cross-attention for one image of the batch; returns the
/// head-concatenated S×d features.
pub fn sfca(
    batch: &AttnBatch,
    image_index: usize,
    source: SfcaMaskSource,
) -> Result<Tensor, AttnError> {
    if batch.images.is_empty() {
        return Err(AttnError::EmptyBatch);
    }
    if image_index >= batch.images.len() {
        return Err(AttnError::ImageIndex {
            index: image_index,
            len: batch.images.len(),
        });
    }
    let heads = batch.images[image_index].cross_q.len();
    let own = &batch.images[image_index];

    let mut tape = GradTape::new();
    let mut outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = tape.constant(own.cross_q[head].clone());
        let (k, v) = &own.cross_kv[head];
        let own_k = tape.constant(k.clone());
        let own_v = tape.constant(v.clone());

        let mut before = Vec::new();
        let mut after = Vec::new();
        for (j, img) in batch.images.iter().enumerate() {
            if j == image_index {
                continue;
            }
            if img.subjects.is_empty() {
                return Err(AttnError::MissingSubject { image: j });
            }
            for (u, subject) in img.subjects.iter().enumerate() {
                let entry = foreign_subject(
                    &mut tape,
                    batch,
                    image_index,
                    j,
                    u,
                    subject,
                    head,
                    source,
                )?;
                if j < image_index {
                    before.push(entry);
                } else {
                    after.push(entry);
                }
            }
        }

        let (out, _) = sfca_head(&mut tape, q, own_k, own_v, &before, &after)?;
        outputs.push(out);
    }
    let cat = tape.concat_cols(&outputs)?;
    Ok(tape.value(cat).clone())
}

#[allow(clippy::too_many_arguments)]
fn foreign_subject(
    tape: &mut GradTape,
    batch: &AttnBatch,
    attending: usize,
    foreign_image: usize,
    subject_slot: usize,
    subject: &SubjectSpec,
    head: usize,
    source: SfcaMaskSource,
) -> Result<ForeignSubject, AttnError> {
    let img = &batch.images[foreign_image];
    let (k, v) = &img.cross_kv[head];
    let tokens = k.shape()[0];
    let end = subject.token_start + subject.token_len;
    if subject.token_len == 0 || end > tokens {
        return Err(AttnError::SubjectOutOfRange {
            start: subject.token_start,
            end,
            tokens,
        });
    }
    let kn = tape.constant(k.clone());
    let vn = tape.constant(v.clone());
    let k_rows = tape.slice_rows(kn, subject.token_start, subject.token_len)?;
    let v_rows = tape.slice_rows(vn, subject.token_start, subject.token_len)?;
    let query_mask = match source {
        SfcaMaskSource::Literal => subject.mask.flat().to_vec(),
        SfcaMaskSource::Own => {
            let own_subjects = &batch.images[attending].subjects;
            // Fall back to the literal mask when the attending image has no
            // matching subject slot.
            match own_subjects.get(subject_slot) {
                Some(s) => s.mask.flat().to_vec(),
                None => subject.mask.flat().to_vec(),
            }
        }
    };
    Ok(ForeignSubject {
        k: k_rows,
        v: v_rows,
        query_mask,
    })
}
