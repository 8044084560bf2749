//! Benchmark construction from COCO-format detection annotations.
//!
//! The pipeline ingests the documented JSON subset (images, annotations,
//! categories), drops boxes that are out of bounds, too small or too close
//! to the image edge, groups the survivors into single-subject and
//! double-subject sets of four prompt-box pairs, and fills template prompts
//! of the form [appearance]+[action]+[background]+[style]. Every stage is
//! deterministic under a seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::BoundingBox;
use crate::rng::SeedSplitter;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed annotation JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid cleaning policy: {0}")]
    BadPolicy(String),
    #[error("template bank is missing {0}")]
    EmptyBank(String),
    #[error("annotation {index} references unknown {what} id {id}")]
    DanglingId {
        index: usize,
        what: &'static str,
        id: u64,
    },
}

/// The three subject families prompts are typed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectType {
    Human,
    Animal,
    Object,
}

// ── input schema ──────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    /// COCO convention: [x, y, width, height] in absolute pixels.
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// One validated annotation: a subject-box pair inside a known image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub category: String,
    /// [x, y, w, h] absolute pixels.
    pub bbox: [f64; 4],
    pub image_width: f64,
    pub image_height: f64,
}

impl AnnotationRecord {
    /// Normalized (h_min, w_min, h_max, w_max) box.
    pub fn normalized(&self) -> BoundingBox {
        BoundingBox {
            h_min: self.bbox[1] / self.image_height,
            w_min: self.bbox[0] / self.image_width,
            h_max: (self.bbox[1] + self.bbox[3]) / self.image_height,
            w_max: (self.bbox[0] + self.bbox[2]) / self.image_width,
        }
    }

    pub fn area_frac(&self) -> f64 {
        (self.bbox[2] * self.bbox[3]) / (self.image_width * self.image_height)
    }

    /// Smallest normalized distance from any box edge to the image border.
    pub fn min_edge_margin(&self) -> f64 {
        let b = self.normalized();
        b.h_min
            .min(b.w_min)
            .min(1.0 - b.h_max)
            .min(1.0 - b.w_max)
    }
}

/// Why an annotation was rejected at load time.
#[derive(Debug, Clone, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub image_id: u64,
    pub category: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub records: Vec<AnnotationRecord>,
    pub rejections: Vec<Rejection>,
}

/// Parses the documented COCO subset; boxes outside image bounds or with
/// non-positive area become rejection reports rather than records.
pub fn parse_annotations(json: &str) -> Result<LoadOutcome, BenchError> {
    let file: CocoFile = serde_json::from_str(json).map_err(|e| BenchError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let images: BTreeMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let categories: BTreeMap<u64, &str> = file
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for (index, ann) in file.annotations.iter().enumerate() {
        let image = *images.get(&ann.image_id).ok_or(BenchError::DanglingId {
            index,
            what: "image",
            id: ann.image_id,
        })?;
        let category = *categories
            .get(&ann.category_id)
            .ok_or(BenchError::DanglingId {
                index,
                what: "category",
                id: ann.category_id,
            })?;
        let [x, y, w, h] = ann.bbox;
        let reason = if !(w > 0.0 && h > 0.0) {
            Some("non-positive box area".to_string())
        } else if x < 0.0 || y < 0.0 || x + w > image.width || y + h > image.height {
            Some(format!(
                "box [{x}, {y}, {w}, {h}] outside {}x{} image",
                image.width, image.height
            ))
        } else {
            None
        };
        match reason {
            Some(reason) => rejections.push(Rejection {
                index,
                image_id: ann.image_id,
                category: category.to_string(),
                reason,
            }),
            None => records.push(AnnotationRecord {
                image_id: ann.image_id,
                category: category.to_string(),
                bbox: ann.bbox,
                image_width: image.width,
                image_height: image.height,
            }),
        }
    }
    Ok(LoadOutcome {
        records,
        rejections,
    })
}

pub fn load_annotations(path: &Path) -> Result<LoadOutcome, BenchError> {
    let json = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations(&json)
}

// ── cleaning ──────────────────────────────────────────────────────────────────

/// Box-cleaning thresholds plus category handling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningPolicy {
    /// Keep boxes covering at least this fraction of the image area.
    pub min_area_frac: f64,
    /// Keep boxes whose every edge stays at least this normalized distance
    /// from the image border.
    pub min_edge_margin_frac: f64,
    /// Category to subject-type map; unmapped categories default to object.
    #[serde(default)]
    pub type_map: BTreeMap<String, SubjectType>,
    /// When non-empty, only these categories survive.
    #[serde(default)]
    pub allow: BTreeSet<String>,
    /// Categories dropped outright (uniform or unpersonalizable subjects).
    #[serde(default)]
    pub deny: BTreeSet<String>,
    /// Deterministic creative renames (e.g. dog to dragon); boxes are kept.
    #[serde(default)]
    pub conversion: BTreeMap<String, String>,
    /// Optional cap on emitted sets per category or category pair.
    #[serde(default)]
    pub max_sets_per_subject: Option<usize>,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            min_area_frac: 0.05,
            min_edge_margin_frac: 0.02,
            type_map: BTreeMap::new(),
            allow: BTreeSet::new(),
            deny: BTreeSet::new(),
            conversion: BTreeMap::new(),
            max_sets_per_subject: None,
        }
    }
}

impl CleaningPolicy {
    pub fn validate(&self) -> Result<(), BenchError> {
        for (name, v) in [
            ("min_area_frac", self.min_area_frac),
            ("min_edge_margin_frac", self.min_edge_margin_frac),
        ] {
            if !(v > 0.0 && v < 0.5) {
                return Err(BenchError::BadPolicy(format!(
                    "{name} must lie in (0, 0.5), got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn subject_type(&self, category: &str) -> SubjectType {
        self.type_map
            .get(category)
            .copied()
            .unwrap_or(SubjectType::Object)
    }

    pub fn subject_name(&self, category: &str) -> String {
        self.conversion
            .get(category)
            .cloned()
            .unwrap_or_else(|| category.to_string())
    }

    fn keeps(&self, r: &AnnotationRecord) -> bool {
        if self.deny.contains(&r.category) {
            return false;
        }
        if !self.allow.is_empty() && !self.allow.contains(&r.category) {
            return false;
        }
        r.area_frac() >= self.min_area_frac && r.min_edge_margin() >= self.min_edge_margin_frac
    }
}

/// Applies the policy predicate to every record.
pub fn clean_boxes(records: &[AnnotationRecord], policy: &CleaningPolicy) -> Vec<AnnotationRecord> {
    records.iter().filter(|r| policy.keeps(r)).cloned().collect()
}

// ── set assembly ──────────────────────────────────────────────────────────────

/// One prompt-box pair of a set. Boxes are normalized
/// (h_min, w_min, h_max, w_max), one per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBoxPair {
    pub prompt: String,
    pub boxes: Vec<[f64; 4]>,
}

/// A benchmark set: the same subject(s) across exactly four prompt-box pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSet {
    pub subjects: Vec<String>,
    pub types: Vec<SubjectType>,
    pub pairs: Vec<PromptBoxPair>,
}

/// A category (or pair) that could not fill a set.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedSubject {
    pub subjects: Vec<String>,
    pub available: usize,
    pub required: usize,
}

#[derive(Debug)]
pub struct AssembleOutcome {
    pub singles: Vec<BenchSet>,
    pub doubles: Vec<BenchSet>,
    pub skipped: Vec<SkippedSubject>,
}

const PAIRS_PER_SET: usize = 4;

fn box_array(b: &BoundingBox) -> [f64; 4] {
    [b.h_min, b.w_min, b.h_max, b.w_max]
}

/// Fisher-Yates shuffle driven by a named stream.
fn seeded_shuffle<T>(items: &mut [T], splitter: &SeedSplitter, label: &str) {
    use rand::Rng;
    let mut rng = splitter.stream(label, &[items.len() as u64]);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Greedy reorder that prefers records from images not yet represented in
/// the current chunk of four.
fn diversify_chunks(records: Vec<AnnotationRecord>) -> Vec<AnnotationRecord> {
    let mut pool = records;
    let mut out: Vec<AnnotationRecord> = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let chunk_base = out.len() / PAIRS_PER_SET * PAIRS_PER_SET;
        let used: BTreeSet<u64> = out[chunk_base..].iter().map(|r| r.image_id).collect();
        let pick = pool
            .iter()
            .position(|r| !used.contains(&r.image_id))
            .unwrap_or(0);
        out.push(pool.remove(pick));
    }
    out
}

/// Groups cleaned records into single- and double-subject sets.
///
/// Singles: each category yields ⌊n/4⌋ sets from a seeded shuffle that
/// prefers boxes from distinct images. Doubles: for every category pair
/// co-occurring in an image, the largest box of each category in that image
/// forms one co-occurrence; four co-occurrences make a set. Prompts are left
/// empty here; `fill_prompts` adds them.
pub fn assemble_sets(
    records: &[AnnotationRecord],
    policy: &CleaningPolicy,
    seed: u64,
) -> Result<AssembleOutcome, BenchError> {
    policy.validate()?;
    let splitter = SeedSplitter::new(seed);
    let cap = policy.max_sets_per_subject.unwrap_or(usize::MAX);

    // Stable sort before shuffling so input order never leaks through.
    let mut by_category: BTreeMap<String, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_category
            .entry(r.category.clone())
            .or_default()
            .push(r.clone());
    }
    for list in by_category.values_mut() {
        list.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then(a.bbox[0].total_cmp(&b.bbox[0]))
                .then(a.bbox[1].total_cmp(&b.bbox[1]))
        });
    }

    let mut singles = Vec::new();
    let mut skipped = Vec::new();
    for (category, list) in &by_category {
        if list.len() < PAIRS_PER_SET {
            skipped.push(SkippedSubject {
                subjects: vec![policy.subject_name(category)],
                available: list.len(),
                required: PAIRS_PER_SET,
            });
            continue;
        }
        let mut shuffled = list.clone();
        seeded_shuffle(&mut shuffled, &splitter, &format!("single:{category}"));
        let ordered = diversify_chunks(shuffled);
        for (set_idx, chunk) in ordered.chunks_exact(PAIRS_PER_SET).enumerate() {
            if set_idx >= cap {
                break;
            }
            singles.push(BenchSet {
                subjects: vec![policy.subject_name(category)],
                types: vec![policy.subject_type(category)],
                pairs: chunk
                    .iter()
                    .map(|r| PromptBoxPair {
                        prompt: String::new(),
                        boxes: vec![box_array(&r.normalized())],
                    })
                    .collect(),
            });
        }
    }

    // Doubles: per image, per category, keep the largest cleaned box; then
    // pair categories that co-occur.
    let mut best_per_image: BTreeMap<(u64, String), AnnotationRecord> = BTreeMap::new();
    for r in records {
        let key = (r.image_id, r.category.clone());
        match best_per_image.get(&key) {
            Some(prev) if prev.area_frac() >= r.area_frac() => {}
            _ => {
                best_per_image.insert(key, r.clone());
            }
        }
    }
    let mut categories_per_image: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for (image_id, category) in best_per_image.keys() {
        categories_per_image
            .entry(*image_id)
            .or_default()
            .push(category.clone());
    }
    let mut cooccurrences: BTreeMap<(String, String), Vec<(AnnotationRecord, AnnotationRecord)>> =
        BTreeMap::new();
    for (image_id, cats) in &categories_per_image {
        for i in 0..cats.len() {
            for j in i + 1..cats.len() {
                let (c1, c2) = (cats[i].clone(), cats[j].clone());
                let a = best_per_image[&(*image_id, c1.clone())].clone();
                let b = best_per_image[&(*image_id, c2.clone())].clone();
                cooccurrences.entry((c1, c2)).or_default().push((a, b));
            }
        }
    }

    let mut doubles = Vec::new();
    for ((c1, c2), list) in &cooccurrences {
        if list.len() < PAIRS_PER_SET {
            skipped.push(SkippedSubject {
                subjects: vec![policy.subject_name(c1), policy.subject_name(c2)],
                available: list.len(),
                required: PAIRS_PER_SET,
            });
            continue;
        }
        let mut shuffled = list.clone();
        seeded_shuffle(&mut shuffled, &splitter, &format!("double:{c1}+{c2}"));
        for (set_idx, chunk) in shuffled.chunks_exact(PAIRS_PER_SET).enumerate() {
            if set_idx >= cap {
                break;
            }
            doubles.push(BenchSet {
                subjects: vec![policy.subject_name(c1), policy.subject_name(c2)],
                types: vec![policy.subject_type(c1), policy.subject_type(c2)],
                pairs: chunk
                    .iter()
                    .map(|(a, b)| PromptBoxPair {
                        prompt: String::new(),
                        boxes: vec![box_array(&a.normalized()), box_array(&b.normalized())],
                    })
                    .collect(),
            });
        }
    }

    Ok(AssembleOutcome {
        singles,
        doubles,
        skipped,
    })
}

// ── prompt templates ──────────────────────────────────────────────────────────

/// Template strings per prompt segment; `{subject}` in an appearance or
/// action template is replaced by the subject name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateBank {
    pub appearance: BTreeMap<SubjectType, Vec<String>>,
    pub action: BTreeMap<SubjectType, Vec<String>>,
    pub background: Vec<String>,
    pub style: Vec<String>,
}

impl TemplateBank {
    /// Small built-in bank, enough for deterministic demo benchmarks.
    pub fn builtin() -> TemplateBank {
        let mut appearance = BTreeMap::new();
        appearance.insert(
            SubjectType::Human,
            vec![
                "a {subject} with a weathered green coat".to_string(),
                "a {subject} wearing a bright red scarf".to_string(),
            ],
        );
        appearance.insert(
            SubjectType::Animal,
            vec![
                "a fluffy {subject} with amber eyes".to_string(),
                "a sleek {subject} with silver fur".to_string(),
            ],
        );
        appearance.insert(
            SubjectType::Object,
            vec![
                "a vintage {subject} with brass fittings".to_string(),
                "a matte black {subject}".to_string(),
            ],
        );
        let mut action = BTreeMap::new();
        action.insert(
            SubjectType::Human,
            vec![
                "reading a newspaper".to_string(),
                "waving at the camera".to_string(),
            ],
        );
        action.insert(
            SubjectType::Animal,
            vec!["leaping over a log".to_string(), "napping in the sun".to_string()],
        );
        TemplateBank {
            appearance,
            action,
            background: vec![
                "in a misty forest".to_string(),
                "on a busy street".to_string(),
                "beside a mountain lake".to_string(),
                "inside a cozy library".to_string(),
            ],
            style: vec![
                "watercolor illustration".to_string(),
                "sharp studio photograph".to_string(),
            ],
        }
    }

    pub fn validate(&self, types_in_use: &[SubjectType]) -> Result<(), BenchError> {
        for t in types_in_use {
            if self.appearance.get(t).map_or(true, Vec::is_empty) {
                return Err(BenchError::EmptyBank(format!("appearance[{t:?}]")));
            }
            if *t != SubjectType::Object && self.action.get(t).map_or(true, Vec::is_empty) {
                return Err(BenchError::EmptyBank(format!("action[{t:?}]")));
            }
        }
        if self.background.is_empty() {
            return Err(BenchError::EmptyBank("background".into()));
        }
        if self.style.is_empty() {
            return Err(BenchError::EmptyBank("style".into()));
        }
        Ok(())
    }
}

fn pick<'a>(list: &'a [String], rng: &mut rand_chacha::ChaCha12Rng) -> &'a str {
    use rand::Rng;
    &list[rng.random_range(0..list.len())]
}

/// Fills the four prompts of a set. Appearance and style are sampled once
/// per set; action and background vary per pair; the action segment is
/// omitted for object subjects.
pub fn fill_prompts(
    set: &BenchSet,
    bank: &TemplateBank,
    splitter: &SeedSplitter,
    set_index: u64,
) -> Result<BenchSet, BenchError> {
    bank.validate(&set.types)?;
    let mut rng = splitter.stream("prompts", &[set_index]);

    let appearances: Vec<String> = set
        .subjects
        .iter()
        .zip(&set.types)
        .map(|(subject, t)| {
            pick(&bank.appearance[t], &mut rng).replace("{subject}", subject)
        })
        .collect();
    let style = pick(&bank.style, &mut rng).to_string();

    let mut out = set.clone();
    for pair in out.pairs.iter_mut() {
        let mut actions = Vec::new();
        for (subject, t) in set.subjects.iter().zip(&set.types) {
            if *t == SubjectType::Object {
                continue;
            }
            actions.push(pick(&bank.action[t], &mut rng).replace("{subject}", subject));
        }
        let background = pick(&bank.background, &mut rng).to_string();

        let mut segments = vec![appearances.join(" and ")];
        if !actions.is_empty() {
            segments.push(actions.join(" and "));
        }
        segments.push(background);
        segments.push(style.clone());
        pair.prompt = segments.join(", ");
    }
    Ok(out)
}

// ── whole-pipeline output ─────────────────────────────────────────────────────

pub const BENCH_SCHEMA: &str = "actorbench/1";

/// The emitted benchmark document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Benchmark {
    pub schema: String,
    pub sets: Vec<BenchSet>,
}

/// Full pipeline: clean, assemble, fill prompts. Singles precede doubles in
/// the output; `skipped` reports the subjects that could not fill a set.
pub fn build_benchmark(
    records: &[AnnotationRecord],
    policy: &CleaningPolicy,
    bank: &TemplateBank,
    seed: u64,
) -> Result<(Benchmark, Vec<SkippedSubject>), BenchError> {
    let cleaned = clean_boxes(records, policy);
    let outcome = assemble_sets(&cleaned, policy, seed)?;
    let splitter = SeedSplitter::new(seed);
    let mut sets = Vec::with_capacity(outcome.singles.len() + outcome.doubles.len());
    for (i, set) in outcome
        .singles
        .iter()
        .chain(outcome.doubles.iter())
        .enumerate()
    {
        sets.push(fill_prompts(set, bank, &splitter, i as u64)?);
    }
    Ok((
        Benchmark {
            schema: BENCH_SCHEMA.to_string(),
            sets,
        },
        outcome.skipped,
    ))
}
