//! Seeded toy denoiser.
//!
//! A stack of fixed-weight self- and cross-attention layers over an
//! S-pixel, d-dimensional latent, standing in for the full backbone at desk
//! scale. Identical seeds give bit-identical weights. The cross-attention
//! layers expose the subject-token attention maps the layout energy needs,
//! and the whole forward pass runs on a [`GradTape`] so both the latent and
//! the semantic leaves receive analytic gradients.

use crate::attention::{
    attention_weights_node, masked_attention_node, mask_from_box, risa_head, sfca_head_attn,
    AttnError, ForeignSubject, LayoutMask, RisaHeadInputs, RisaMaskAxis, SfcaMaskSource,
};
use crate::energy::BoundingBox;
use crate::rng::{normal_tensor, SeedSplitter};
use crate::tensor::{GradTape, NodeId, Tensor, TensorError};

/// Geometry of the toy latent and its attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserShape {
    pub grid_h: usize,
    pub grid_w: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub sa_layers: usize,
    pub ca_layers: usize,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        DenoiserShape {
            grid_h: 8,
            grid_w: 8,
            latent_dim: 16,
            heads: 4,
            sa_layers: 2,
            ca_layers: 2,
        }
    }
}

impl DenoiserShape {
    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err("grid must be at least 1x1".into());
        }
        if self.latent_dim == 0 || self.heads == 0 {
            return Err("latent_dim and heads must be positive".into());
        }
        if self.latent_dim % self.heads != 0 {
            return Err(format!(
                "latent_dim {} not divisible by heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.ca_layers == 0 {
            return Err("at least one cross-attention layer is required".into());
        }
        Ok(())
    }
}

/// Which batch-coupling mechanisms a forward pass applies.
#[derive(Debug, Clone, Copy)]
pub struct EnhanceOpts {
    pub risa: bool,
    pub sfca: bool,
    pub risa_axis: RisaMaskAxis,
    pub sfca_source: SfcaMaskSource,
}

impl EnhanceOpts {
    pub fn none() -> Self {
        EnhanceOpts {
            risa: false,
            sfca: false,
            risa_axis: RisaMaskAxis::Key,
            sfca_source: SfcaMaskSource::Literal,
        }
    }
}

/// One subject of one image: its prompt-token span and layout box.
#[derive(Debug, Clone)]
pub struct SubjectCond {
    pub token_start: usize,
    pub token_len: usize,
    pub bbox: BoundingBox,
}

impl SubjectCond {
    pub fn single(token_index: usize, bbox: BoundingBox) -> Self {
        SubjectCond {
            token_start: token_index,
            token_len: 1,
            bbox,
        }
    }
}

/// Layout conditioning for one image.
#[derive(Debug, Clone, Default)]
pub struct ImageCond {
    pub subjects: Vec<SubjectCond>,
}

/// Forward results: per-image noise predictions and, per (image, subject),
/// the raw heads×S subject attention map averaged across the cross-attention
/// layers.
#[derive(Debug)]
pub struct ForwardOutput {
    pub eps: Vec<NodeId>,
    pub subject_maps: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
struct AttnWeights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

/// Fixed-weight attention stack with a noise-prediction head.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    shape: DenoiserShape,
    seed: u64,
    sa: Vec<AttnWeights>,
    ca: Vec<AttnWeights>,
    w_eps: Tensor,
}

impl ToyDenoiser {
    /// Weight scale applied to self-attention projections; 1/√d keeps logits
    /// near unit variance for unit-variance features.
    pub fn default_sa_scale(shape: &DenoiserShape) -> f64 {
        1.0 / (shape.latent_dim as f64).sqrt()
    }

    /// Cross-attention projections run hotter so the subject maps respond
    /// sharply to the semantic embedding.
    pub fn default_ca_scale(shape: &DenoiserShape) -> f64 {
        2.0 / (shape.latent_dim as f64).sqrt()
    }

    pub fn new(shape: DenoiserShape, seed: u64) -> Result<Self, String> {
        let sa = Self::default_sa_scale(&shape);
        let ca = Self::default_ca_scale(&shape);
        Self::with_scales(shape, seed, sa, ca)
    }

    pub fn with_scales(
        shape: DenoiserShape,
        seed: u64,
        sa_scale: f64,
        ca_scale: f64,
    ) -> Result<Self, String> {
        shape.validate()?;
        let splitter = SeedSplitter::new(seed);
        let d = shape.latent_dim;
        let draw = |label: &str, layer: u64, slot: u64, scale: f64| {
            let mut rng = splitter.stream(label, &[layer, slot]);
            normal_tensor(&mut rng, &[d, d])
                .scale(scale)
                .expect("finite weights")
        };
        let sa = (0..shape.sa_layers as u64)
            .map(|l| AttnWeights {
                wq: draw("sa-w", l, 0, sa_scale),
                wk: draw("sa-w", l, 1, sa_scale),
                wv: draw("sa-w", l, 2, sa_scale),
                wo: draw("sa-w", l, 3, sa_scale),
            })
            .collect();
        let ca = (0..shape.ca_layers as u64)
            .map(|l| AttnWeights {
                wq: draw("ca-w", l, 0, ca_scale),
                wk: draw("ca-w", l, 1, ca_scale),
                wv: draw("ca-w", l, 2, ca_scale),
                wo: draw("ca-w", l, 3, ca_scale),
            })
            .collect();
        let w_eps = draw("eps-head", 0, 0, sa_scale);
        Ok(ToyDenoiser {
            shape,
            seed,
            sa,
            ca,
            w_eps,
        })
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Rasterizes every subject box onto the latent grid.
    pub fn subject_masks(&self, conds: &[ImageCond]) -> Vec<Vec<LayoutMask>> {
        conds
            .iter()
            .map(|cond| {
                cond.subjects
                    .iter()
                    .map(|s| mask_from_box(&s.bbox, self.shape.grid_h, self.shape.grid_w))
                    .collect()
            })
            .collect()
    }

    /// Runs the attention stack over the whole batch on the given tape.
    ///
    /// `z` holds per-image S×d latent nodes, `c` per-image T×d embedding
    /// nodes. RISA and SFCA activate only when requested and the batch has
    /// more than one image.
    pub fn forward_batch(
        &self,
        tape: &mut GradTape,
        z: &[NodeId],
        c: &[NodeId],
        conds: &[ImageCond],
        enhance: &EnhanceOpts,
    ) -> Result<ForwardOutput, AttnError> {
        let n = z.len();
        if n == 0 {
            return Err(AttnError::EmptyBatch);
        }
        assert_eq!(c.len(), n, "one embedding per latent");
        assert_eq!(conds.len(), n, "one condition per latent");
        let s = self.shape.spatial();
        let d = self.shape.latent_dim;
        for (i, &zi) in z.iter().enumerate() {
            let got = tape.value(zi).shape().to_vec();
            if got != [s, d] {
                return Err(AttnError::InconsistentSpatial {
                    image: i,
                    got: got.first().copied().unwrap_or(0),
                    expected: s,
                });
            }
        }

        let masks = self.subject_masks(conds);
        let use_risa = enhance.risa && n > 1;
        let use_sfca = enhance.sfca && n > 1;
        let region_masks: Option<Vec<Vec<f64>>> = if use_risa {
            let mut unions = Vec::with_capacity(n);
            for (i, image_masks) in masks.iter().enumerate() {
                let mut it = image_masks.iter();
                let mut union = match it.next() {
                    Some(m) => m.clone(),
                    None => return Err(AttnError::MissingSubject { image: i }),
                };
                for m in it {
                    union = union.union(m)?;
                }
                unions.push(union.flat().to_vec());
            }
            Some(unions)
        } else {
            None
        };

        let mut h: Vec<NodeId> = z.to_vec();
        // [image][subject] -> per-layer K×S map nodes
        let mut map_layers: Vec<Vec<Vec<NodeId>>> = conds
            .iter()
            .map(|cond| vec![Vec::new(); cond.subjects.len()])
            .collect();

        let layers = self.shape.sa_layers.max(self.shape.ca_layers);
        for layer in 0..layers {
            if layer < self.shape.sa_layers {
                self.self_attention_layer(
                    tape,
                    &mut h,
                    &self.sa[layer],
                    region_masks.as_deref(),
                    enhance.risa_axis,
                )?;
            }
            if layer < self.shape.ca_layers {
                self.cross_attention_layer(
                    tape,
                    &mut h,
                    c,
                    conds,
                    &masks,
                    &self.ca[layer],
                    use_sfca,
                    enhance.sfca_source,
                    &mut map_layers,
                )?;
            }
        }

        let w_eps = tape.constant(self.w_eps.clone());
        let mut eps = Vec::with_capacity(n);
        for &hi in &h {
            eps.push(tape.matmul(hi, w_eps)?);
        }

        let inv_layers = 1.0 / self.shape.ca_layers as f64;
        let mut subject_maps = Vec::with_capacity(n);
        for per_subject in map_layers {
            let mut image_maps = Vec::with_capacity(per_subject.len());
            for layer_maps in per_subject {
                let mut acc = layer_maps[0];
                for &m in &layer_maps[1..] {
                    acc = tape.add(acc, m)?;
                }
                image_maps.push(tape.scale(acc, inv_layers)?);
            }
            subject_maps.push(image_maps);
        }

        Ok(ForwardOutput { eps, subject_maps })
    }

    fn self_attention_layer(
        &self,
        tape: &mut GradTape,
        h: &mut [NodeId],
        weights: &AttnWeights,
        region_masks: Option<&[Vec<f64>]>,
        axis: RisaMaskAxis,
    ) -> Result<(), AttnError> {
        let n = h.len();
        let heads = self.shape.heads;
        let d_h = self.shape.head_dim();
        let wq = tape.constant(weights.wq.clone());
        let wk = tape.constant(weights.wk.clone());
        let wv = tape.constant(weights.wv.clone());
        let wo = tape.constant(weights.wo.clone());

        let mut qkv = Vec::with_capacity(n);
        for &hi in h.iter() {
            qkv.push((
                tape.matmul(hi, wq)?,
                tape.matmul(hi, wk)?,
                tape.matmul(hi, wv)?,
            ));
        }

        for i in 0..n {
            let mut head_outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let col = head * d_h;
                if let Some(regions) = region_masks {
                    let inputs: Result<Vec<RisaHeadInputs>, TensorError> = qkv
                        .iter()
                        .map(|(q, k, v)| {
                            Ok(RisaHeadInputs {
                                q: tape.slice_cols(*q, col, d_h)?,
                                k: tape.slice_cols(*k, col, d_h)?,
                                v: tape.slice_cols(*v, col, d_h)?,
                            })
                        })
                        .collect();
                    head_outs.push(risa_head(tape, i, &inputs?, regions, axis)?);
                } else {
                    let q = tape.slice_cols(qkv[i].0, col, d_h)?;
                    let k = tape.slice_cols(qkv[i].1, col, d_h)?;
                    let v = tape.slice_cols(qkv[i].2, col, d_h)?;
                    head_outs.push(masked_attention_node(tape, q, k, v, None)?);
                }
            }
            let cat = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(cat, wo)?;
            h[i] = tape.add(h[i], proj)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention_layer(
        &self,
        tape: &mut GradTape,
        h: &mut [NodeId],
        c: &[NodeId],
        conds: &[ImageCond],
        masks: &[Vec<LayoutMask>],
        weights: &AttnWeights,
        use_sfca: bool,
        source: SfcaMaskSource,
        map_layers: &mut [Vec<Vec<NodeId>>],
    ) -> Result<(), AttnError> {
        let n = h.len();
        let heads = self.shape.heads;
        let d_h = self.shape.head_dim();
        let wq = tape.constant(weights.wq.clone());
        let wk = tape.constant(weights.wk.clone());
        let wv = tape.constant(weights.wv.clone());
        let wo = tape.constant(weights.wo.clone());

        let mut kv = Vec::with_capacity(n);
        for &ci in c.iter() {
            kv.push((tape.matmul(ci, wk)?, tape.matmul(ci, wv)?));
        }

        for i in 0..n {
            let tokens = tape.value(c[i]).shape()[0];
            for subject in &conds[i].subjects {
                let end = subject.token_start + subject.token_len;
                if subject.token_len == 0 || end > tokens {
                    return Err(AttnError::SubjectOutOfRange {
                        start: subject.token_start,
                        end,
                        tokens,
                    });
                }
            }

            let qf = tape.matmul(h[i], wq)?;
            let mut head_outs = Vec::with_capacity(heads);
            // per-subject per-head 1×S map rows for this layer
            let mut subject_rows: Vec<Vec<NodeId>> =
                vec![Vec::with_capacity(heads); conds[i].subjects.len()];

            for head in 0..heads {
                let col = head * d_h;
                let q = tape.slice_cols(qf, col, d_h)?;
                let own_k = tape.slice_cols(kv[i].0, col, d_h)?;
                let own_v = tape.slice_cols(kv[i].1, col, d_h)?;

                let (weights_node, values_node, own_offset) = if use_sfca {
                    let mut before = Vec::new();
                    let mut after = Vec::new();
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        if conds[j].subjects.is_empty() {
                            return Err(AttnError::MissingSubject { image: j });
                        }
                        for (u, subject) in conds[j].subjects.iter().enumerate() {
                            let fk = tape.slice_cols(kv[j].0, col, d_h)?;
                            let fv = tape.slice_cols(kv[j].1, col, d_h)?;
                            let k_rows =
                                tape.slice_rows(fk, subject.token_start, subject.token_len)?;
                            let v_rows =
                                tape.slice_rows(fv, subject.token_start, subject.token_len)?;
                            let query_mask = match source {
                                SfcaMaskSource::Literal => masks[j][u].flat().to_vec(),
                                SfcaMaskSource::Own => match masks[i].get(u) {
                                    Some(m) => m.flat().to_vec(),
                                    None => masks[j][u].flat().to_vec(),
                                },
                            };
                            let entry = ForeignSubject {
                                k: k_rows,
                                v: v_rows,
                                query_mask,
                            };
                            if j < i {
                                before.push(entry);
                            } else {
                                after.push(entry);
                            }
                        }
                    }
                    let attn = sfca_head_attn(tape, q, own_k, own_v, &before, &after)?;
                    (attn.weights, attn.values, attn.layout.own_offset)
                } else {
                    let w = attention_weights_node(tape, q, own_k, None)?;
                    (w, own_v, 0)
                };

                head_outs.push(tape.matmul(weights_node, values_node)?);

                for (u, subject) in conds[i].subjects.iter().enumerate() {
                    let start = own_offset + subject.token_start;
                    let cols = tape.slice_cols(weights_node, start, subject.token_len)?;
                    let col_vec = if subject.token_len == 1 {
                        cols
                    } else {
                        let avg = Tensor::full(
                            vec![subject.token_len, 1],
                            1.0 / subject.token_len as f64,
                        )
                        .expect("finite");
                        let avg = tape.constant(avg);
                        tape.matmul(cols, avg)?
                    };
                    subject_rows[u].push(tape.transpose(col_vec)?);
                }
            }

            let cat = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(cat, wo)?;
            h[i] = tape.add(h[i], proj)?;

            for (u, rows) in subject_rows.into_iter().enumerate() {
                let map = tape.concat_rows(&rows)?;
                map_layers[i][u].push(map);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_conds(n: usize) -> Vec<ImageCond> {
        (0..n)
            .map(|i| ImageCond {
                subjects: vec![SubjectCond::single(
                    1,
                    BoundingBox::new(0.2, 0.2 + 0.05 * i as f64, 0.7, 0.7 + 0.05 * i as f64)
                        .unwrap(),
                )],
            })
            .collect()
    }

    fn demo_inputs(
        denoiser: &ToyDenoiser,
        tape: &mut GradTape,
        n: usize,
        tokens: usize,
        seed: u64,
    ) -> (Vec<NodeId>, Vec<NodeId>) {
        let splitter = SeedSplitter::new(seed);
        let s = denoiser.shape().spatial();
        let d = denoiser.shape().latent_dim;
        let mut zs = Vec::new();
        let mut cs = Vec::new();
        for i in 0..n as u64 {
            let mut rng = splitter.stream("z", &[i]);
            zs.push(tape.leaf(normal_tensor(&mut rng, &[s, d])));
            let mut rng = splitter.stream("c", &[i]);
            cs.push(tape.leaf(normal_tensor(&mut rng, &[tokens, d])));
        }
        (zs, cs)
    }

    #[test]
    fn identical_seed_gives_identical_outputs() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let a = ToyDenoiser::new(shape, 9).unwrap();
        let b = ToyDenoiser::new(shape, 9).unwrap();
        let conds = demo_conds(2);

        let mut run = |d: &ToyDenoiser| {
            let mut tape = GradTape::new();
            let (z, c) = demo_inputs(d, &mut tape, 2, 4, 123);
            let out = d
                .forward_batch(&mut tape, &z, &c, &conds, &EnhanceOpts::none())
                .unwrap();
            (
                tape.value(out.eps[0]).data().to_vec(),
                tape.value(out.subject_maps[1][0]).data().to_vec(),
            )
        };
        let (eps_a, map_a) = run(&a);
        let (eps_b, map_b) = run(&b);
        assert_eq!(eps_a, eps_b);
        assert_eq!(map_a, map_b);

        let c = ToyDenoiser::new(shape, 10).unwrap();
        let (eps_c, _) = run(&c);
        assert_ne!(eps_a, eps_c);
    }

    #[test]
    fn plain_batch_forward_equals_per_image_forward() {
        // With RISA/SFCA off, images do not interact.
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 2,
            ca_layers: 2,
        };
        let denoiser = ToyDenoiser::new(shape, 5).unwrap();
        let conds = demo_conds(2);

        let mut tape = GradTape::new();
        let (z, c) = demo_inputs(&denoiser, &mut tape, 2, 4, 77);
        let joint = denoiser
            .forward_batch(&mut tape, &z, &c, &conds, &EnhanceOpts::none())
            .unwrap();

        for i in 0..2 {
            let mut solo_tape = GradTape::new();
            let zi = solo_tape.leaf(tape.value(z[i]).clone());
            let ci = solo_tape.leaf(tape.value(c[i]).clone());
            let solo = denoiser
                .forward_batch(
                    &mut solo_tape,
                    &[zi],
                    &[ci],
                    &conds[i..=i],
                    &EnhanceOpts::none(),
                )
                .unwrap();
            assert_eq!(
                tape.value(joint.eps[i]).data(),
                solo_tape.value(solo.eps[0]).data()
            );
        }
    }

    #[test]
    fn subject_maps_are_attention_weights() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 2,
        };
        let denoiser = ToyDenoiser::new(shape, 3).unwrap();
        let conds = demo_conds(1);
        let mut tape = GradTape::new();
        let (z, c) = demo_inputs(&denoiser, &mut tape, 1, 4, 42);
        let out = denoiser
            .forward_batch(&mut tape, &z, &c, &conds, &EnhanceOpts::none())
            .unwrap();
        let map = tape.value(out.subject_maps[0][0]);
        assert_eq!(map.shape(), &[2, 16]);
        // Attention weights are probabilities; layer averages stay in [0,1].
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn subject_token_out_of_range_errors() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let denoiser = ToyDenoiser::new(shape, 3).unwrap();
        let conds = vec![ImageCond {
            subjects: vec![SubjectCond::single(
                9,
                BoundingBox::new(0.2, 0.2, 0.7, 0.7).unwrap(),
            )],
        }];
        let mut tape = GradTape::new();
        let (z, c) = demo_inputs(&denoiser, &mut tape, 1, 4, 42);
        let err = denoiser
            .forward_batch(&mut tape, &z, &c, &conds, &EnhanceOpts::none())
            .unwrap_err();
        assert!(matches!(err, AttnError::SubjectOutOfRange { .. }));
    }
}
