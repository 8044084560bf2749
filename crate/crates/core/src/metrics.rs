//! Evaluation metrics over externally produced detections and embeddings.
//!
//! Four dimensions: layout alignment (mIoU against the given boxes), subject
//! consistency (pairwise cosines of foreground embeddings, plus perceptual
//! distances), prompt conformity (precomputed text-image scores), and
//! background diversity (the same scores over backgrounds). All values are
//! reported in percentage form with sample std and seeded percentile
//! bootstrap confidence intervals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::BoundingBox;
use crate::rng::SeedSplitter;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed evaluation JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{context}: box [{0}, {1}, {2}, {3}] is invalid: {reason}", .bbox[0], .bbox[1], .bbox[2], .bbox[3])]
    BadBox {
        context: String,
        bbox: [f64; 4],
        reason: String,
    },
    #[error("{context}: zero-norm embedding vector at index {index}")]
    ZeroNorm { context: String, index: usize },
    #[error("{context}: embedding dimensions disagree ({left} vs {right})")]
    DimMismatch {
        context: String,
        left: usize,
        right: usize,
    },
    #[error("pairwise cosine needs at least two vectors, got {0}")]
    TooFewVectors(usize),
    #[error("no records to evaluate")]
    Empty,
}

// ── input schema ──────────────────────────────────────────────────────────────

/// A detected box, optionally tagged with the subject slot it claims.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectedBox {
    Plain([f64; 4]),
    Labeled { subject: usize, bbox: [f64; 4] },
}

impl DetectedBox {
    fn subject(&self, position: usize) -> usize {
        match self {
            DetectedBox::Plain(_) => position,
            DetectedBox::Labeled { subject, .. } => *subject,
        }
    }

    fn bbox(&self) -> [f64; 4] {
        match self {
            DetectedBox::Plain(b) => *b,
            DetectedBox::Labeled { bbox, .. } => *bbox,
        }
    }
}

/// Fg/bg pairwise perceptual distances from this image to the later images
/// of its set (upper-triangle rows).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LpipsPairs {
    #[serde(default)]
    pub fg: Vec<f64>,
    #[serde(default)]
    pub bg: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImageEval {
    #[serde(default)]
    pub given_boxes: Vec<[f64; 4]>,
    /// Absent field means no detections for this image.
    #[serde(default)]
    pub detected_boxes: Vec<DetectedBox>,
    /// Per embedding family (e.g. "dino", "clip"), the foreground vectors of
    /// this image.
    #[serde(default)]
    pub fg_embeds: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub bg_embeds: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub lpips_pairs: LpipsPairs,
    /// Precomputed text-image cosine score in [-1, 1].
    #[serde(default)]
    pub clip_t: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetEval {
    pub id: String,
    pub images: Vec<ImageEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalInput {
    pub sets: Vec<SetEval>,
}

pub fn parse_eval(json: &str) -> Result<EvalInput, MetricsError> {
    serde_json::from_str(json).map_err(|e| MetricsError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_eval(path: &std::path::Path) -> Result<EvalInput, MetricsError> {
    let json = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_eval(&json)
}

fn to_box(bbox: [f64; 4], context: &str) -> Result<BoundingBox, MetricsError> {
    BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(|e| MetricsError::BadBox {
        context: context.to_string(),
        bbox,
        reason: e.to_string(),
    })
}

// ── core scores ───────────────────────────────────────────────────────────────

/// Intersection over union of two normalized boxes; disjoint boxes score 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ih = (a.h_max.min(b.h_max) - a.h_min.max(b.h_min)).max(0.0);
    let iw = (a.w_max.min(b.w_max) - a.w_min.max(b.w_min)).max(0.0);
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-subject matching: every given box takes the highest-IoU
/// unused detection carrying its subject label; a missing detection counts
/// as IoU 0. Returns per-given-box IoUs.
pub fn match_ious(
    given: &[BoundingBox],
    detected: &[(usize, BoundingBox)],
) -> Vec<f64> {
    let mut used = vec![false; detected.len()];
    given
        .iter()
        .enumerate()
        .map(|(subject, g)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, (label, d)) in detected.iter().enumerate() {
                if used[k] || *label != subject {
                    continue;
                }
                let score = iou(g, d);
                if best.map_or(true, |(_, s)| score > s) {
                    best = Some((k, score));
                }
            }
            match best {
                Some((k, score)) => {
                    used[k] = true;
                    score
                }
                None => 0.0,
            }
        })
        .collect()
}

/// Pooled mean IoU over every (given, detected) pair in the input, in
/// percentage form.
pub fn mean_iou(input: &EvalInput) -> Result<f64, MetricsError> {
    let mut scores = Vec::new();
    for set in &input.sets {
        for (img_idx, image) in set.images.iter().enumerate() {
            let context = format!("set {} image {}", set.id, img_idx);
            let given: Vec<BoundingBox> = image
                .given_boxes
                .iter()
                .map(|&b| to_box(b, &context))
                .collect::<Result<_, _>>()?;
            let detected: Vec<(usize, BoundingBox)> = image
                .detected_boxes
                .iter()
                .enumerate()
                .map(|(k, d)| Ok((d.subject(k), to_box(d.bbox(), &context)?)))
                .collect::<Result<_, MetricsError>>()?;
            scores.extend(match_ious(&given, &detected));
        }
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64 * 100.0)
}

/// Mean cosine similarity over all unordered vector pairs, in percentage
/// form. Vectors must share a dimension and have nonzero norm.
pub fn pairwise_cosine_mean(vectors: &[Vec<f64>], context: &str) -> Result<f64, MetricsError> {
    if vectors.len() < 2 {
        return Err(MetricsError::TooFewVectors(vectors.len()));
    }
    let dim = vectors[0].len();
    let mut norms = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(MetricsError::DimMismatch {
                context: context.to_string(),
                left: dim,
                right: v.len(),
            });
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 0.0 {
            return Err(MetricsError::ZeroNorm {
                context: context.to_string(),
                index,
            });
        }
        norms.push(n);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            sum += dot / (norms[i] * norms[j]);
            count += 1;
        }
    }
    Ok(sum / count as f64 * 100.0)
}

// ── aggregation ───────────────────────────────────────────────────────────────

/// Mean, sample std and percentile-bootstrap CIs of one score family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStat {
    pub mean: f64,
    pub std: f64,
    pub ci80: (f64, f64),
    pub ci95: (f64, f64),
    pub sets: usize,
}

/// Scores keyed by metric name (mIoU, DINO-fg, CLIP-fg, LPIPS-fg, CLIP-T,
/// DINO-bg, CLIP-bg, LPIPS-bg, plus any extra embedding family present).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: BTreeMap<String, ScoreStat>,
}

/// Canonical column order mirroring the four evaluation dimensions.
pub const REPORT_COLUMNS: [&str; 8] = [
    "mIoU", "DINO-fg", "CLIP-fg", "LPIPS-fg", "CLIP-T", "DINO-bg", "CLIP-bg", "LPIPS-bg",
];

impl ScoreReport {
    /// Column list: canonical order first, then any extra families.
    pub fn ordered_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = REPORT_COLUMNS
            .iter()
            .filter(|c| self.scores.contains_key(**c))
            .map(|c| c.to_string())
            .collect();
        for key in self.scores.keys() {
            if !cols.contains(key) {
                cols.push(key.clone());
            }
        }
        cols
    }

    pub fn to_csv(&self) -> String {
        let cols = self.ordered_columns();
        let mut out = String::from("metric,mean,std,ci80_lo,ci80_hi,ci95_lo,ci95_hi,sets\n");
        for c in cols {
            let s = &self.scores[&c];
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                c, s.mean, s.std, s.ci80.0, s.ci80.1, s.ci95.0, s.ci95.1, s.sets
            ));
        }
        out
    }
}

fn family_label(family: &str, suffix: &str) -> String {
    format!("{}-{}", family.to_uppercase(), suffix)
}

/// Per-set score extraction. Within one set, fg/bg embeddings pool across
/// its images before the pairwise cosine; the set's score is that pooled
/// mean.
fn per_set_scores(set: &SetEval) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut out = BTreeMap::new();

    // Layout alignment.
    let mut ious = Vec::new();
    for (img_idx, image) in set.images.iter().enumerate() {
        let context = format!("set {} image {}", set.id, img_idx);
        let given: Vec<BoundingBox> = image
            .given_boxes
            .iter()
            .map(|&b| to_box(b, &context))
            .collect::<Result<_, _>>()?;
        let detected: Vec<(usize, BoundingBox)> = image
            .detected_boxes
            .iter()
            .enumerate()
            .map(|(k, d)| Ok((d.subject(k), to_box(d.bbox(), &context)?)))
            .collect::<Result<_, MetricsError>>()?;
        ious.extend(match_ious(&given, &detected));
    }
    if !ious.is_empty() {
        out.insert(
            "mIoU".to_string(),
            ious.iter().sum::<f64>() / ious.len() as f64 * 100.0,
        );
    }

    // Subject consistency and background diversity from embeddings.
    for (suffix, field) in [("fg", true), ("bg", false)] {
        let mut pooled: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for image in &set.images {
            let embeds = if field { &image.fg_embeds } else { &image.bg_embeds };
            for (family, vectors) in embeds {
                pooled
                    .entry(family.clone())
                    .or_default()
                    .extend(vectors.iter().cloned());
            }
        }
        for (family, vectors) in pooled {
            // Fewer than two embeddings: the score is absent, not zero.
            if vectors.len() < 2 {
                continue;
            }
            let context = format!("set {} {}_embeds[{}]", set.id, suffix, family);
            let score = pairwise_cosine_mean(&vectors, &context)?;
            out.insert(family_label(&family, suffix), score);
        }
    }

    // Perceptual distances.
    for (label, pick) in [("LPIPS-fg", true), ("LPIPS-bg", false)] {
        let distances: Vec<f64> = set
            .images
            .iter()
            .flat_map(|img| {
                if pick {
                    img.lpips_pairs.fg.iter().copied()
                } else {
                    img.lpips_pairs.bg.iter().copied()
                }
            })
            .collect();
        if !distances.is_empty() {
            out.insert(
                label.to_string(),
                distances.iter().sum::<f64>() / distances.len() as f64 * 100.0,
            );
        }
    }

    // Prompt conformity.
    let clip_t: Vec<f64> = set.images.iter().filter_map(|i| i.clip_t).collect();
    if !clip_t.is_empty() {
        out.insert(
            "CLIP-T".to_string(),
            clip_t.iter().sum::<f64>() / clip_t.len() as f64 * 100.0,
        );
    }

    Ok(out)
}

fn sample_std(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Percentile bootstrap over per-set scores: 1000 seeded resamples of the
/// set list, CI bounds at 80% and 95%.
fn bootstrap_cis(scores: &[f64], splitter: &SeedSplitter, metric: &str) -> ((f64, f64), (f64, f64)) {
    use rand::Rng;
    let mut rng = splitter.stream("bootstrap", &[fnv(metric)]);
    let n = scores.len();
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += scores[rng.random_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(f64::total_cmp);
    (
        (quantile(&means, 0.10), quantile(&means, 0.90)),
        (quantile(&means, 0.025), quantile(&means, 0.975)),
    )
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Aggregates per-set scores across sets: mean, sample std, bootstrap CIs.
/// A metric appears only when at least one set produced it.
pub fn aggregate_report(input: &EvalInput, seed: u64) -> Result<ScoreReport, MetricsError> {
    if input.sets.is_empty() {
        return Err(MetricsError::Empty);
    }
    let splitter = SeedSplitter::new(seed);
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for set in &input.sets {
        for (metric, score) in per_set_scores(set)? {
            per_metric.entry(metric).or_default().push(score);
        }
    }
    let mut scores = BTreeMap::new();
    for (metric, values) in per_metric {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = sample_std(&values, mean);
        let (ci80, ci95) = bootstrap_cis(&values, &splitter, &metric);
        scores.insert(
            metric,
            ScoreStat {
                mean,
                std,
                ci80,
                ci95,
                sets: values.len(),
            },
        );
    }
    Ok(ScoreReport { scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(h0: f64, w0: f64, h1: f64, w1: f64) -> BoundingBox {
        BoundingBox::new(h0, w0, h1, w1).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = bb(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bb(0.6, 0.6, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_worked_example() {
        let a = bb(0.0, 0.0, 0.5, 0.5);
        let b = bb(0.25, 0.25, 0.75, 0.75);
        // Oracle value derived by 1000x1000 rasterization (and exactly
        // 1/7 analytically).
        assert!((iou(&a, &b) - 0.142857).abs() <= 1e-6);
    }

    #[test]
    fn iou_symmetric() {
        let a = bb(0.05, 0.2, 0.6, 0.9);
        let b = bb(0.3, 0.1, 0.8, 0.5);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    fn image_with(given: Vec<[f64; 4]>, detected: Vec<DetectedBox>) -> ImageEval {
        ImageEval {
            given_boxes: given,
            detected_boxes: detected,
            ..ImageEval::default()
        }
    }

    #[test]
    fn mean_iou_perfect_and_missing() {
        let perfect = EvalInput {
            sets: vec![SetEval {
                id: "s".into(),
                images: vec![image_with(
                    vec![[0.1, 0.1, 0.5, 0.5]],
                    vec![DetectedBox::Plain([0.1, 0.1, 0.5, 0.5])],
                )],
            }],
        };
        assert!((mean_iou(&perfect).unwrap() - 100.0).abs() < 1e-12);

        let half = EvalInput {
            sets: vec![SetEval {
                id: "s".into(),
                images: vec![
                    image_with(
                        vec![[0.1, 0.1, 0.5, 0.5]],
                        vec![DetectedBox::Plain([0.1, 0.1, 0.5, 0.5])],
                    ),
                    image_with(vec![[0.1, 0.1, 0.5, 0.5]], vec![]),
                ],
            }],
        };
        assert!((mean_iou(&half).unwrap() - 50.0).abs() < 1e-12);

        assert!(matches!(
            mean_iou(&EvalInput { sets: vec![] }).unwrap_err(),
            MetricsError::Empty
        ));
    }

    #[test]
    fn mean_iou_mixed_fixture_matches_hand_sum() {
        // 10 pairs: 4 perfect, 2 missing, 4 with known overlaps.
        let quarter = [0.0, 0.0, 0.5, 0.5];
        let shifted = [0.25, 0.25, 0.75, 0.75]; // IoU 1/7 with quarter
        let mut images = Vec::new();
        for _ in 0..4 {
            images.push(image_with(vec![quarter], vec![DetectedBox::Plain(quarter)]));
        }
        for _ in 0..2 {
            images.push(image_with(vec![quarter], vec![]));
        }
        for _ in 0..4 {
            images.push(image_with(vec![quarter], vec![DetectedBox::Plain(shifted)]));
        }
        let input = EvalInput {
            sets: vec![SetEval {
                id: "s".into(),
                images,
            }],
        };
        let want = (4.0 * 1.0 + 2.0 * 0.0 + 4.0 * (1.0 / 7.0)) / 10.0 * 100.0;
        assert!((mean_iou(&input).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn greedy_matching_respects_subject_labels() {
        let given = vec![bb(0.0, 0.0, 0.5, 0.5), bb(0.5, 0.5, 1.0, 1.0)];
        let detected = vec![
            (1, bb(0.5, 0.5, 1.0, 1.0)),
            (0, bb(0.0, 0.0, 0.5, 0.5)),
            (0, bb(0.0, 0.0, 0.4, 0.4)),
        ];
        let ious = match_ious(&given, &detected);
        assert!((ious[0] - 1.0).abs() < 1e-12);
        assert!((ious[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_cosine_examples() {
        let same = vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert!((pairwise_cosine_mean(&same, "t").unwrap() - 100.0).abs() < 1e-12);

        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(pairwise_cosine_mean(&ortho, "t").unwrap().abs() < 1e-12);

        let zero = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        match pairwise_cosine_mean(&zero, "record-7").unwrap_err() {
            MetricsError::ZeroNorm { context, index } => {
                assert_eq!(context, "record-7");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }

        assert!(matches!(
            pairwise_cosine_mean(&[vec![1.0]], "t").unwrap_err(),
            MetricsError::TooFewVectors(1)
        ));
    }

    #[test]
    fn pairwise_cosine_matches_double_loop_oracle() {
        let vectors = vec![
            vec![0.3, -1.2, 0.5, 2.0],
            vec![1.0, 0.4, -0.7, 0.2],
            vec![-0.6, 0.9, 1.4, -0.3],
            vec![0.8, 0.8, 0.1, 1.1],
        ];
        let got = pairwise_cosine_mean(&vectors, "t").unwrap();
        // Oracle: explicit double loop with its own norm computation.
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                let na: f64 = vectors[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = vectors[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                sum += dot / (na * nb);
                count += 1;
            }
        }
        let want = sum / count as f64 * 100.0;
        assert!((got - want).abs() <= 1e-9);
    }

    #[test]
    fn cosine_invariant_under_positive_scaling() {
        let vectors = vec![vec![0.3, -1.2, 0.5], vec![1.0, 0.4, -0.7]];
        let base = pairwise_cosine_mean(&vectors, "t").unwrap();
        let scaled = vec![
            vectors[0].iter().map(|x| x * 37.5).collect::<Vec<_>>(),
            vectors[1].clone(),
        ];
        let got = pairwise_cosine_mean(&scaled, "t").unwrap();
        assert!((base - got).abs() < 1e-9);
    }

    fn set_with_fg(id: &str, vectors: Vec<Vec<f64>>) -> SetEval {
        SetEval {
            id: id.to_string(),
            images: vectors
                .into_iter()
                .map(|v| ImageEval {
                    fg_embeds: [("dino".to_string(), vec![v])].into(),
                    ..ImageEval::default()
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_consistency_set_scores_100_with_zero_width_ci() {
        let input = EvalInput {
            sets: vec![set_with_fg(
                "a",
                vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            )],
        };
        let report = aggregate_report(&input, 0).unwrap();
        let stat = &report.scores["DINO-fg"];
        assert!((stat.mean - 100.0).abs() < 1e-9);
        assert!((stat.ci95.1 - stat.ci95.0).abs() < 1e-9);
        assert_eq!(stat.sets, 1);
    }

    #[test]
    fn two_sets_average_their_scores() {
        // Set A: cos = 0.6; set B: cos = 0.8.
        let input = EvalInput {
            sets: vec![
                set_with_fg("a", vec![vec![1.0, 0.0], vec![0.6, 0.8]]),
                set_with_fg("b", vec![vec![1.0, 0.0], vec![0.8, 0.6]]),
            ],
        };
        let report = aggregate_report(&input, 0).unwrap();
        assert!((report.scores["DINO-fg"].mean - 70.0).abs() < 1e-9);
    }

    #[test]
    fn sparse_families_are_absent_not_zero() {
        let mut set = set_with_fg("a", vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
        // One lonely clip vector: below the two-vector minimum.
        set.images[0]
            .fg_embeds
            .insert("clip".to_string(), vec![vec![1.0, 0.0]]);
        let report = aggregate_report(&EvalInput { sets: vec![set] }, 0).unwrap();
        assert!(report.scores.contains_key("DINO-fg"));
        assert!(!report.scores.contains_key("CLIP-fg"));
    }

    #[test]
    fn aggregate_is_permutation_invariant_in_scores() {
        let sets = vec![
            set_with_fg("a", vec![vec![1.0, 0.0], vec![0.6, 0.8]]),
            set_with_fg("b", vec![vec![1.0, 0.0], vec![0.8, 0.6]]),
            set_with_fg("c", vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        ];
        let forward = aggregate_report(
            &EvalInput {
                sets: sets.clone(),
            },
            3,
        )
        .unwrap();
        let mut reversed_sets = sets;
        reversed_sets.reverse();
        let reversed = aggregate_report(&EvalInput { sets: reversed_sets }, 3).unwrap();
        let a = &forward.scores["DINO-fg"];
        let b = &reversed.scores["DINO-fg"];
        assert!((a.mean - b.mean).abs() < 1e-9);
        assert!((a.std - b.std).abs() < 1e-9);
    }

    #[test]
    fn report_csv_has_canonical_columns() {
        let input = EvalInput {
            sets: vec![SetEval {
                id: "a".into(),
                images: vec![
                    ImageEval {
                        given_boxes: vec![[0.1, 0.1, 0.5, 0.5]],
                        detected_boxes: vec![DetectedBox::Plain([0.1, 0.1, 0.5, 0.5])],
                        fg_embeds: [("dino".to_string(), vec![vec![1.0, 0.0]])].into(),
                        clip_t: Some(0.64),
                        lpips_pairs: LpipsPairs {
                            fg: vec![0.3],
                            bg: vec![0.55],
                        },
                        ..ImageEval::default()
                    },
                    ImageEval {
                        fg_embeds: [("dino".to_string(), vec![vec![0.6, 0.8]])].into(),
                        ..ImageEval::default()
                    },
                ],
            }],
        };
        let report = aggregate_report(&input, 1).unwrap();
        let csv = report.to_csv();
        let first_col: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(first_col, vec!["mIoU", "DINO-fg", "LPIPS-fg", "CLIP-T", "LPIPS-bg"]);
    }
}
