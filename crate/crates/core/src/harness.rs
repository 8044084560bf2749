//! Seeded experiment harness: demo scenarios, guidance variants, and the
//! convergence statistics the sweeps and comparisons run on.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserShape, EnhanceOpts, ImageCond, SubjectCond, ToyDenoiser};
use crate::energy::BoundingBox;
use crate::guidance::{sample_batch, GuidanceConfig, GuidanceError, SampleOutput};
use crate::rng::{normal_tensor, SeedSplitter};
use crate::tensor::{GradTape, Tensor};
use crate::trace::StepTrace;

/// Guidance variants exposed by the CLI and the ablation harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dual update plus both attention couplings.
    Full,
    /// Semantic update off; attention couplings unchanged.
    NoSu,
    /// Semantic update and both couplings off: pure latent layout guidance.
    LatentOnly,
    NoRisa,
    NoSfca,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "no-su" => Some(Variant::NoSu),
            "latent-only" => Some(Variant::LatentOnly),
            "no-risa" => Some(Variant::NoRisa),
            "no-sfca" => Some(Variant::NoSfca),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSu => "no-su",
            Variant::LatentOnly => "latent-only",
            Variant::NoRisa => "no-risa",
            Variant::NoSfca => "no-sfca",
        }
    }

    pub fn apply(&self, cfg: &GuidanceConfig) -> GuidanceConfig {
        let mut out = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoSu => out.semantic_update = false,
            Variant::LatentOnly => {
                out.semantic_update = false;
                out.risa = false;
                out.sfca = false;
            }
            Variant::NoRisa => out.risa = false,
            Variant::NoSfca => out.sfca = false,
        }
        out
    }
}

/// Deterministic construction recipe for a demo scenario.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub shape: DenoiserShape,
    pub images: usize,
    pub tokens: usize,
    pub subject_index: usize,
    /// Per-image subject boxes; image i uses entry i % boxes.len().
    pub boxes: Vec<Vec<BoundingBox>>,
    pub denoiser_seed: u64,
    pub embed_scale: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            shape: DenoiserShape::default(),
            images: 2,
            tokens: 8,
            subject_index: 2,
            boxes: vec![
                vec![BoundingBox::new(0.25, 0.25, 0.75, 0.75).expect("valid")],
                vec![BoundingBox::new(0.3, 0.15, 0.8, 0.65).expect("valid")],
            ],
            denoiser_seed: 0,
            embed_scale: 1.0,
        }
    }
}

/// A concrete scenario: the denoiser plus per-run prompt embeddings and
/// layout conditions.
pub struct Scenario {
    pub denoiser: ToyDenoiser,
    pub prompt_embeds: Vec<Tensor>,
    pub conds: Vec<ImageCond>,
}

impl ScenarioSpec {
    /// Builds the scenario for one run seed. Denoiser weights depend only on
    /// the spec; embeddings draw from the run seed's "embeds" stream.
    pub fn build(&self, run_seed: u64) -> Result<Scenario, GuidanceError> {
        let denoiser =
            ToyDenoiser::new(self.shape, self.denoiser_seed).map_err(GuidanceError::BadConfig)?;
        if self.images == 0 || self.boxes.is_empty() {
            return Err(GuidanceError::BadConfig(
                "scenario needs at least one image and one box set".into(),
            ));
        }
        if self.subject_index >= self.tokens {
            return Err(GuidanceError::BadConfig(format!(
                "subject index {} outside {} tokens",
                self.subject_index, self.tokens
            )));
        }
        let splitter = SeedSplitter::new(run_seed);
        let mut prompt_embeds = Vec::with_capacity(self.images);
        let mut conds = Vec::with_capacity(self.images);
        for i in 0..self.images {
            let mut rng = splitter.stream("embeds", &[i as u64]);
            let e = normal_tensor(&mut rng, &[self.tokens, self.shape.latent_dim])
                .scale(self.embed_scale)?;
            prompt_embeds.push(e);
            let image_boxes = &self.boxes[i % self.boxes.len()];
            let subjects = image_boxes
                .iter()
                .enumerate()
                .map(|(u, b)| SubjectCond::single(self.subject_index + u, *b))
                .collect();
            conds.push(ImageCond { subjects });
        }
        Ok(Scenario {
            denoiser,
            prompt_embeds,
            conds,
        })
    }
}

/// Everything one guided run produces, plus derived statistics.
#[derive(Debug)]
pub struct RunResult {
    pub seed: u64,
    pub variant: Variant,
    pub steps: Vec<StepTrace>,
    pub final_latents: Vec<Tensor>,
    pub final_embeds: Vec<Tensor>,
    /// Sum of inner gradient steps across the backward window.
    pub total_inner_iters: usize,
    /// Every backward step converged.
    pub all_converged: bool,
    /// Final subject-token attention mass inside each subject's box,
    /// measured through the plain attention stack.
    pub mass_in_box: Vec<Vec<f64>>,
}

/// Runs one variant for one seed on a freshly built scenario.
pub fn run_variant(
    spec: &ScenarioSpec,
    cfg: &GuidanceConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunResult, GuidanceError> {
    let scenario = spec.build(seed)?;
    let run_cfg = variant.apply(cfg);
    let out = sample_batch(
        &scenario.prompt_embeds,
        &scenario.conds,
        &scenario.denoiser,
        &run_cfg,
        seed,
    )?;
    summarize_run(&scenario, out, variant, seed)
}

fn summarize_run(
    scenario: &Scenario,
    out: SampleOutput,
    variant: Variant,
    seed: u64,
) -> Result<RunResult, GuidanceError> {
    let total_inner_iters = out.steps.iter().map(|s| s.iterations).sum();
    let all_converged = !out.steps.is_empty() && out.steps.iter().all(|s| s.converged);
    let mass_in_box = subject_mass_in_box(
        &scenario.denoiser,
        &out.final_latents,
        &out.final_embeds,
        &scenario.conds,
    )?;
    Ok(RunResult {
        seed,
        variant,
        steps: out.steps,
        final_latents: out.final_latents,
        final_embeds: out.final_embeds,
        total_inner_iters,
        all_converged,
        mass_in_box,
    })
}

/// Fraction of raw subject-token attention (head- and layer-averaged) that
/// falls inside the subject's box.
pub fn subject_mass_in_box(
    denoiser: &ToyDenoiser,
    z: &[Tensor],
    c: &[Tensor],
    conds: &[ImageCond],
) -> Result<Vec<Vec<f64>>, GuidanceError> {
    let mut tape = GradTape::new();
    let z_nodes: Vec<_> = z.iter().map(|t| tape.constant(t.clone())).collect();
    let c_nodes: Vec<_> = c.iter().map(|t| tape.constant(t.clone())).collect();
    let out = denoiser.forward_batch(&mut tape, &z_nodes, &c_nodes, conds, &EnhanceOpts::none())?;
    let masks = denoiser.subject_masks(conds);
    let mut result = Vec::with_capacity(conds.len());
    for (i, maps) in out.subject_maps.iter().enumerate() {
        let mut per_subject = Vec::with_capacity(maps.len());
        for (u, &m) in maps.iter().enumerate() {
            let v = tape.value(m);
            let (heads, s) = (v.shape()[0], v.shape()[1]);
            let flat = masks[i][u].flat();
            let mut inside = 0.0;
            let mut total = 0.0;
            for h in 0..heads {
                for p in 0..s {
                    let val = v.data()[h * s + p];
                    total += val;
                    if flat[p] > 0.0 {
                        inside += val;
                    }
                }
            }
            per_subject.push(if total > 0.0 { inside / total } else { 0.0 });
        }
        result.push(per_subject);
    }
    Ok(result)
}

/// Convergence statistics over a seed list.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStats {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub per_seed_iters: Vec<usize>,
    pub converged_runs: usize,
    pub median_iters: f64,
    pub convergence_rate: f64,
}

pub fn collect_stats(
    spec: &ScenarioSpec,
    cfg: &GuidanceConfig,
    variant: Variant,
    seeds: &[u64],
) -> Result<ConvergenceStats, GuidanceError> {
    let mut per_seed_iters = Vec::with_capacity(seeds.len());
    let mut converged = 0;
    for &seed in seeds {
        let run = run_variant(spec, cfg, variant, seed)?;
        per_seed_iters.push(run.total_inner_iters);
        if run.all_converged {
            converged += 1;
        }
    }
    Ok(ConvergenceStats {
        variant: variant.name().to_string(),
        seeds: seeds.to_vec(),
        median_iters: median(&per_seed_iters),
        convergence_rate: converged as f64 / seeds.len().max(1) as f64,
        converged_runs: converged,
        per_seed_iters,
    })
}

/// Median of a nonempty integer sample (mean of the middle pair when even).
pub fn median(xs: &[usize]) -> f64 {
    assert!(!xs.is_empty(), "median of empty sample");
    let mut sorted = xs.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Splits per-grid-point iteration samples into consecutive seed batches and
/// counts the batches whose median-iteration curve attains its minimum at an
/// interior grid point only (both endpoints strictly above the minimum).
///
/// `iters_per_point[p][s]` is the total-inner-iteration count of grid point
/// p on seed index s. Returns (passing batches, total batches).
pub fn interior_minimum_batches(
    iters_per_point: &[Vec<usize>],
    batch_size: usize,
) -> (usize, usize) {
    assert!(iters_per_point.len() >= 3, "need at least 3 grid points");
    let seeds = iters_per_point[0].len();
    assert!(iters_per_point.iter().all(|v| v.len() == seeds));
    assert!(batch_size >= 1 && seeds >= batch_size);
    let batches = seeds / batch_size;
    let mut passing = 0;
    for b in 0..batches {
        let lo = b * batch_size;
        let hi = lo + batch_size;
        let meds: Vec<f64> = iters_per_point
            .iter()
            .map(|v| median(&v[lo..hi]))
            .collect();
        let min = meds.iter().cloned().fold(f64::INFINITY, f64::min);
        if meds[0] > min && meds[meds.len() - 1] > min {
            passing += 1;
        }
    }
    (passing, batches)
}
