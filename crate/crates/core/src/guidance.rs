//! The dual energy guidance engine.
//!
//! Each sampling step factorizes into a backward update that descends the
//! layout energy in the joint (latent, semantic) space, followed by a
//! forward DDPM step whose attention stack may be batch-coupled. The
//! backward stage stops once every subject's energy falls below
//! `k_thres · e_start`, or after `max_inner_iters` gradient steps.

use thiserror::Error;

use crate::attention::{AttnError, RisaMaskAxis, SfcaMaskSource};
use crate::denoiser::{EnhanceOpts, ImageCond, ToyDenoiser};
use crate::energy::{layout_energy_node, target_map, EnergyError, TargetKind, TargetMap};
use crate::rng::{normal_tensor, SeedSplitter};
use crate::tensor::{GradTape, NodeId, Tensor, TensorError};
use crate::trace::{StepTrace, TraceEntry};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("beta must lie strictly inside (0,1), got {0}")]
    BadBeta(f64),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("invalid guidance config: {0}")]
    BadConfig(String),
    #[error("image {image} needs at least one subject for the backward update")]
    NoSubjects { image: usize },
    #[error("non-finite {what} at step {step}, iteration {iteration}")]
    NonFinite {
        what: &'static str,
        step: usize,
        iteration: usize,
        /// Diagnostic trace of the iterations completed before the abort.
        trace: Box<StepTrace>,
    },
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Linear beta schedule from 1e-4 to 2e-2, the standard DDPM convention.
pub fn linear_betas(steps: usize) -> Vec<f64> {
    let (lo, hi) = (1e-4, 2e-2);
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// σ_t = √(1 − ᾱ_t) with ᾱ_t the running product of (1 − β).
pub fn sigmas_from_betas(betas: &[f64]) -> Vec<f64> {
    let mut alpha_bar = 1.0;
    betas
        .iter()
        .map(|b| {
            alpha_bar *= 1.0 - b;
            (1.0 - alpha_bar).sqrt()
        })
        .collect()
}

/// All knobs of a guidance run. Defaults carry the reference constants:
/// v=300, w=0.9, s=10, k_thres=0.6, 30 steps with 3 backward and 20
/// enhanced-forward steps.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Latent energy guidance scale.
    pub v: f64,
    /// Semantic energy guidance scale.
    pub w: f64,
    /// Sigmoid shape factor of the target distribution.
    pub s: f64,
    /// Convergence fraction: stop once e ≤ k_thres · e_start per subject.
    pub k_thres: f64,
    pub total_steps: usize,
    pub backward_steps: usize,
    pub forward_steps: usize,
    /// Cap on gradient steps per outer step.
    pub max_inner_iters: usize,
    pub betas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub target: TargetKind,
    pub risa: bool,
    pub sfca: bool,
    /// Master switch for the semantic half of the update; off forces w = 0.
    pub semantic_update: bool,
    pub risa_axis: RisaMaskAxis,
    pub sfca_source: SfcaMaskSource,
    /// Classifier-free blend scale; `None` disables the blend (the toy
    /// denoiser is untrained, so this stays off by default).
    pub cfg_blend: Option<f64>,
    /// Record per-iteration dual-space vectors into the traces.
    pub record_dual_vectors: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let total_steps = 30;
        let betas = linear_betas(total_steps);
        let sigmas = sigmas_from_betas(&betas);
        GuidanceConfig {
            v: 300.0,
            w: 0.9,
            s: 10.0,
            k_thres: 0.6,
            total_steps,
            backward_steps: 3,
            forward_steps: 20,
            max_inner_iters: 50,
            betas,
            sigmas,
            target: TargetKind::Sigmoid,
            risa: true,
            sfca: true,
            semantic_update: true,
            risa_axis: RisaMaskAxis::Key,
            sfca_source: SfcaMaskSource::Literal,
            cfg_blend: None,
            record_dual_vectors: false,
        }
    }
}

impl GuidanceConfig {
    /// Effective semantic scale after the on/off switch.
    pub fn effective_w(&self) -> f64 {
        if self.semantic_update {
            self.w
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.k_thres > 0.0 && self.k_thres < 1.0) {
            return Err(GuidanceError::BadConfig(format!(
                "k_thres must lie in (0,1), got {}",
                self.k_thres
            )));
        }
        if self.total_steps == 0 {
            return Err(GuidanceError::BadConfig("total_steps must be >= 1".into()));
        }
        if !(self.backward_steps <= self.forward_steps && self.forward_steps <= self.total_steps) {
            return Err(GuidanceError::BadConfig(format!(
                "step windows must satisfy backward <= forward <= total, got {}/{}/{}",
                self.backward_steps, self.forward_steps, self.total_steps
            )));
        }
        if self.betas.len() != self.total_steps || self.sigmas.len() != self.total_steps {
            return Err(GuidanceError::BadConfig(format!(
                "schedules must have length {}, got betas {} and sigmas {}",
                self.total_steps,
                self.betas.len(),
                self.sigmas.len()
            )));
        }
        for &b in &self.betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(GuidanceError::BadBeta(b));
            }
        }
        for &s in &self.sigmas {
            if !(s.is_finite() && s > 0.0) {
                return Err(GuidanceError::BadSigma(s));
            }
        }
        if !(self.v.is_finite() && self.w.is_finite() && self.v >= 0.0 && self.w >= 0.0) {
            return Err(GuidanceError::BadConfig(format!(
                "scales must be finite and non-negative, got v={} w={}",
                self.v, self.w
            )));
        }
        if self.max_inner_iters == 0 {
            return Err(GuidanceError::BadConfig(
                "max_inner_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One reverse-diffusion step: z_{t−1} = (z_t + β·score)/√(1−β) + √β·noise.
pub fn ddpm_step(
    z: &Tensor,
    score: &Tensor,
    beta: f64,
    noise: &Tensor,
) -> Result<Tensor, GuidanceError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(GuidanceError::BadBeta(beta));
    }
    let drift = z.add(&score.scale(beta)?)?.scale(1.0 / (1.0 - beta).sqrt())?;
    Ok(drift.add(&noise.scale(beta.sqrt())?)?)
}

/// Score from a noise prediction: −ε̂ / σ_t.
pub fn score_from_eps(eps: &Tensor, sigma: f64) -> Result<Tensor, GuidanceError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(GuidanceError::BadSigma(sigma));
    }
    Ok(eps.scale(-1.0 / sigma)?)
}

/// Per-subject energy nodes labeled by (image, subject slot).
pub struct EnergyEval {
    pub labels: Vec<(usize, usize)>,
    pub energies: Vec<NodeId>,
}

/// Outcome of one backward update stage.
#[derive(Debug)]
pub struct DualUpdateOutcome {
    pub z: Vec<Tensor>,
    pub c: Vec<Tensor>,
    pub trace: StepTrace,
}

fn combined_hash(tensors: &[Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for b in t.content_hash().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn dual_vector(z: &[Tensor], c: &[Tensor]) -> Vec<f64> {
    let mut v = Vec::new();
    for t in z {
        v.extend_from_slice(t.data());
    }
    for t in c {
        v.extend_from_slice(t.data());
    }
    v
}

/// Gradient descent in the dual (latent, semantic) space against an
/// arbitrary energy evaluator. The evaluator rebuilds the energy graph on a
/// fresh tape from the current leaves each iteration.
///
/// Returns the optimized pair and the full trace. On non-convergence the
/// best iterate found (by total energy) is returned and the trace stays
/// flagged `converged = false`.
pub fn dual_backward_update_with<F>(
    z0: &[Tensor],
    c0: &[Tensor],
    cfg: &GuidanceConfig,
    sigma: f64,
    outer_step: usize,
    mut eval: F,
) -> Result<DualUpdateOutcome, GuidanceError>
where
    F: FnMut(&mut GradTape, &[NodeId], &[NodeId]) -> Result<EnergyEval, GuidanceError>,
{
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(GuidanceError::BadSigma(sigma));
    }
    let w = cfg.effective_w();
    let v = cfg.v;

    let mut z: Vec<Tensor> = z0.to_vec();
    let mut c: Vec<Tensor> = c0.to_vec();

    let mut trace = StepTrace {
        outer_step,
        subject_labels: Vec::new(),
        e_start: Vec::new(),
        e_final: Vec::new(),
        iterations: 0,
        converged: false,
        entries: Vec::new(),
        dual_vectors: Vec::new(),
    };

    let mut best: Option<(f64, Vec<Tensor>, Vec<Tensor>, Vec<f64>)> = None;

    let mut iteration = 0usize;
    loop {
        // Forward: rebuild the energy graph from the current leaves.
        let mut tape = GradTape::new();
        let z_nodes: Vec<NodeId> = z.iter().map(|t| tape.leaf(t.clone())).collect();
        let c_nodes: Vec<NodeId> = c.iter().map(|t| tape.leaf(t.clone())).collect();
        let eval_out = eval(&mut tape, &z_nodes, &c_nodes).map_err(|e| {
            non_finite_or(e, "energy", outer_step, iteration, &trace)
        })?;
        if trace.subject_labels.is_empty() {
            trace.subject_labels = eval_out.labels.clone();
        }

        let mut total_node = eval_out.energies[0];
        for &e in &eval_out.energies[1..] {
            total_node = tape.add(total_node, e)?;
        }
        let energies: Vec<f64> = eval_out
            .energies
            .iter()
            .map(|&e| tape.value(e).item())
            .collect();
        let total: f64 = tape.value(total_node).item();

        trace.entries.push(TraceEntry {
            iteration,
            subject_energies: energies.clone(),
            total_energy: total,
            latent_hash: combined_hash(&z),
            semantic_hash: combined_hash(&c),
        });
        if cfg.record_dual_vectors {
            trace.dual_vectors.push(dual_vector(&z, &c));
        }

        if iteration == 0 {
            trace.e_start = energies.clone();
        }
        match &best {
            Some((b, _, _, _)) if *b <= total => {}
            _ => best = Some((total, z.clone(), c.clone(), energies.clone())),
        }

        let converged = energies
            .iter()
            .zip(&trace.e_start)
            .all(|(e, s)| *e <= cfg.k_thres * *s);
        if converged {
            trace.converged = true;
            trace.e_final = energies;
            trace.iterations = iteration;
            return Ok(DualUpdateOutcome { z, c, trace });
        }

        // A null update cannot make progress; report the single evaluation.
        if (v == 0.0 && w == 0.0) || iteration == cfg.max_inner_iters {
            break;
        }

        let grads = tape
            .backward_scalar(total_node)
            .map_err(|e| non_finite_or(e.into(), "gradient", outer_step, iteration, &trace))?;

        if v != 0.0 {
            let step = v * sigma;
            for (zi, &node) in z.iter_mut().zip(&z_nodes) {
                *zi = zi
                    .sub(&grads.wrt(node).scale(step)?)
                    .map_err(|e| non_finite_or(e.into(), "latent", outer_step, iteration, &trace))?;
            }
        }
        if w != 0.0 {
            let step = w * sigma;
            for (ci, &node) in c.iter_mut().zip(&c_nodes) {
                *ci = ci
                    .sub(&grads.wrt(node).scale(step)?)
                    .map_err(|e| {
                        non_finite_or(e.into(), "semantic", outer_step, iteration, &trace)
                    })?;
            }
        }
        iteration += 1;
    }

    // Non-convergence: hand back the best iterate seen.
    trace.iterations = iteration;
    trace.converged = false;
    let (_, bz, bc, be) = best.expect("at least one evaluation");
    trace.e_final = be;
    Ok(DualUpdateOutcome {
        z: bz,
        c: bc,
        trace,
    })
}

fn non_finite_or(
    err: GuidanceError,
    what: &'static str,
    step: usize,
    iteration: usize,
    trace: &StepTrace,
) -> GuidanceError {
    let is_non_finite = matches!(
        &err,
        GuidanceError::Tensor(TensorError::NonFinite { .. })
            | GuidanceError::Attn(AttnError::Tensor(TensorError::NonFinite { .. }))
            | GuidanceError::Energy(EnergyError::Tensor(TensorError::NonFinite { .. }))
    );
    if is_non_finite {
        GuidanceError::NonFinite {
            what,
            step,
            iteration,
            trace: Box::new(trace.clone()),
        }
    } else {
        err
    }
}

/// Builds the layout-energy evaluator backed by the toy denoiser.
///
/// Per subject: run the (optionally batch-coupled) forward pass, min-max
/// normalize the averaged subject attention map per head, and take the mean
/// squared deviation from the subject's target distribution.
pub fn layout_energy_eval<'a>(
    denoiser: &'a ToyDenoiser,
    conds: &'a [ImageCond],
    targets: &'a [Vec<TargetMap>],
    enhance: EnhanceOpts,
) -> impl FnMut(&mut GradTape, &[NodeId], &[NodeId]) -> Result<EnergyEval, GuidanceError> + 'a {
    move |tape, z_nodes, c_nodes| {
        let out = denoiser.forward_batch(tape, z_nodes, c_nodes, conds, &enhance)?;
        let mut labels = Vec::new();
        let mut energies = Vec::new();
        for (i, maps) in out.subject_maps.iter().enumerate() {
            for (u, &map) in maps.iter().enumerate() {
                let e = layout_energy_node(tape, map, &targets[i][u])?;
                labels.push((i, u));
                energies.push(e);
            }
        }
        if energies.is_empty() {
            return Err(GuidanceError::NoSubjects { image: 0 });
        }
        Ok(EnergyEval { labels, energies })
    }
}

/// Rasterized target distributions for every (image, subject).
pub fn build_targets(
    denoiser: &ToyDenoiser,
    conds: &[ImageCond],
    cfg: &GuidanceConfig,
) -> Result<Vec<Vec<TargetMap>>, GuidanceError> {
    let (h, w) = (denoiser.shape().grid_h, denoiser.shape().grid_w);
    conds
        .iter()
        .map(|cond| {
            cond.subjects
                .iter()
                .map(|s| Ok(target_map(&s.bbox, cfg.target, cfg.s, h, w)?))
                .collect()
        })
        .collect()
}

/// The layout-conditioned backward update against the toy denoiser.
pub fn dual_backward_update(
    z: &[Tensor],
    c: &[Tensor],
    conds: &[ImageCond],
    denoiser: &ToyDenoiser,
    cfg: &GuidanceConfig,
    sigma: f64,
    outer_step: usize,
    enhance: EnhanceOpts,
) -> Result<DualUpdateOutcome, GuidanceError> {
    for (i, cond) in conds.iter().enumerate() {
        if cond.subjects.is_empty() {
            return Err(GuidanceError::NoSubjects { image: i });
        }
    }
    let targets = build_targets(denoiser, conds, cfg)?;
    let eval = layout_energy_eval(denoiser, conds, &targets, enhance);
    dual_backward_update_with(z, c, cfg, sigma, outer_step, eval)
}

/// The latent-only baseline: identical update with the semantic half forced
/// off.
pub fn dual_latent_only_update(
    z: &[Tensor],
    c: &[Tensor],
    conds: &[ImageCond],
    denoiser: &ToyDenoiser,
    cfg: &GuidanceConfig,
    sigma: f64,
    outer_step: usize,
    enhance: EnhanceOpts,
) -> Result<DualUpdateOutcome, GuidanceError> {
    let mut latent_cfg = cfg.clone();
    latent_cfg.semantic_update = false;
    dual_backward_update(z, c, conds, denoiser, &latent_cfg, sigma, outer_step, enhance)
}

/// Full sampling output: final state plus the backward-stage traces.
#[derive(Debug)]
pub struct SampleOutput {
    pub final_latents: Vec<Tensor>,
    pub final_embeds: Vec<Tensor>,
    pub steps: Vec<StepTrace>,
    /// Outer steps whose backward stage hit the iteration cap.
    pub non_converged_steps: Vec<usize>,
}

/// Runs the full guided sampling loop for a batch.
///
/// Steps are numbered 1..=T in execution order (t runs from T down to 1).
/// The backward update applies to the first `backward_steps` steps; RISA and
/// SFCA enhance the first `forward_steps` steps; the remaining steps use the
/// plain attention stack. The semantic forward rule is c_{t−1} = c*_t.
pub fn sample_batch(
    prompt_embeds: &[Tensor],
    conds: &[ImageCond],
    denoiser: &ToyDenoiser,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<SampleOutput, GuidanceError> {
    cfg.validate()?;
    let n = prompt_embeds.len();
    if n == 0 {
        return Err(GuidanceError::BadConfig("empty batch".into()));
    }
    if conds.len() != n {
        return Err(GuidanceError::BadConfig(format!(
            "{} conditions for {} images",
            conds.len(),
            n
        )));
    }
    let splitter = SeedSplitter::new(seed);
    let s = denoiser.shape().spatial();
    let d = denoiser.shape().latent_dim;

    let mut z: Vec<Tensor> = (0..n)
        .map(|i| {
            let mut rng = splitter.stream("init", &[i as u64]);
            normal_tensor(&mut rng, &[s, d])
        })
        .collect();
    let mut c: Vec<Tensor> = prompt_embeds.to_vec();

    let mut steps = Vec::new();
    let mut non_converged = Vec::new();
    let guided = cfg.v != 0.0 || cfg.effective_w() != 0.0;

    for t in (1..=cfg.total_steps).rev() {
        let step_no = cfg.total_steps - t + 1;
        let beta = cfg.betas[t - 1];
        let sigma = cfg.sigmas[t - 1];
        let enhance = EnhanceOpts {
            risa: cfg.risa && step_no <= cfg.forward_steps,
            sfca: cfg.sfca && step_no <= cfg.forward_steps,
            risa_axis: cfg.risa_axis,
            sfca_source: cfg.sfca_source,
        };

        if guided && step_no <= cfg.backward_steps {
            let outcome = dual_backward_update(
                &z, &c, conds, denoiser, cfg, sigma, step_no, enhance,
            )?;
            if !outcome.trace.converged {
                non_converged.push(step_no);
            }
            z = outcome.z;
            c = outcome.c;
            steps.push(outcome.trace);
        }

        let eps = predict_eps(denoiser, &z, &c, conds, &enhance, cfg)?;
        for i in 0..n {
            let score = score_from_eps(&eps[i], sigma)?;
            let mut rng = splitter.stream("noise", &[i as u64, t as u64]);
            let noise = normal_tensor(&mut rng, &[s, d]);
            z[i] = ddpm_step(&z[i], &score, beta, &noise)?;
        }
        // c_{t-1} = c*_t: the optimized embedding carries forward unchanged.
    }

    Ok(SampleOutput {
        final_latents: z,
        final_embeds: c,
        steps,
        non_converged_steps: non_converged,
    })
}

/// Noise prediction values for the current state (no gradients kept).
pub fn predict_eps(
    denoiser: &ToyDenoiser,
    z: &[Tensor],
    c: &[Tensor],
    conds: &[ImageCond],
    enhance: &EnhanceOpts,
    cfg: &GuidanceConfig,
) -> Result<Vec<Tensor>, GuidanceError> {
    let mut tape = GradTape::new();
    let z_nodes: Vec<NodeId> = z.iter().map(|t| tape.constant(t.clone())).collect();
    let c_nodes: Vec<NodeId> = c.iter().map(|t| tape.constant(t.clone())).collect();
    let out = denoiser.forward_batch(&mut tape, &z_nodes, &c_nodes, conds, enhance)?;
    let mut eps: Vec<Tensor> = out
        .eps
        .iter()
        .map(|&e| tape.value(e).clone())
        .collect();

    if let Some(blend) = cfg.cfg_blend {
        // Classifier-free blend against a zero-embedding unconditional pass
        // through the plain stack.
        let zero_c: Vec<Tensor> = c.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut un_tape = GradTape::new();
        let zu: Vec<NodeId> = z.iter().map(|t| un_tape.constant(t.clone())).collect();
        let cu: Vec<NodeId> = zero_c.iter().map(|t| un_tape.constant(t.clone())).collect();
        let plain = EnhanceOpts::none();
        let un = denoiser.forward_batch(&mut un_tape, &zu, &cu, conds, &plain)?;
        for (e, &u) in eps.iter_mut().zip(&un.eps) {
            let uncond = un_tape.value(u);
            // ε = ε_u + blend·(ε_c − ε_u)
            *e = uncond.add(&e.sub(uncond)?.scale(blend)?)?;
        }
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserShape, SubjectCond};
    use crate::energy::BoundingBox;

    #[test]
    fn schedules_have_documented_shape() {
        let betas = linear_betas(30);
        assert_eq!(betas.len(), 30);
        assert!((betas[0] - 1e-4).abs() < 1e-18);
        assert!((betas[29] - 2e-2).abs() < 1e-18);
        let sigmas = sigmas_from_betas(&betas);
        assert!(sigmas.windows(2).all(|w| w[0] < w[1]));
        assert!(sigmas.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn ddpm_step_gaussian_score_identity() {
        // score = −z (standard Gaussian) with zero noise contracts by √(1−β).
        let z = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let score = z.scale(-1.0).unwrap();
        let noise = Tensor::zeros(vec![2, 2]);
        let beta = 0.1;
        let out = ddpm_step(&z, &score, beta, &noise).unwrap();
        for (o, zi) in out.data().iter().zip(z.data()) {
            assert!((o - zi * (1.0 - beta).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_step_direct_substitution() {
        let z = Tensor::scalar(1.0).unwrap();
        let zero = Tensor::scalar(0.0).unwrap();
        let out = ddpm_step(&z, &zero, 0.01, &zero).unwrap();
        assert!((out.item() - 1.0 / 0.99f64.sqrt()).abs() < 1e-12);
        assert!((out.item() - 1.005038).abs() < 1e-6);
    }

    #[test]
    fn ddpm_step_matches_elementwise_oracle() {
        let z = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let score = Tensor::new(vec![4], vec![-0.5, 0.25, 1.0, -2.0]).unwrap();
        let noise = Tensor::new(vec![4], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let beta = 0.015;
        let out = ddpm_step(&z, &score, beta, &noise).unwrap();
        for i in 0..4 {
            let want = (z.data()[i] + beta * score.data()[i]) / (1.0 - beta).sqrt()
                + beta.sqrt() * noise.data()[i];
            assert!((out.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddpm_step_rejects_bad_beta() {
        let z = Tensor::scalar(1.0).unwrap();
        let zero = Tensor::scalar(0.0).unwrap();
        assert!(matches!(
            ddpm_step(&z, &zero, 0.0, &zero).unwrap_err(),
            GuidanceError::BadBeta(_)
        ));
        assert!(matches!(
            ddpm_step(&z, &zero, 1.0, &zero).unwrap_err(),
            GuidanceError::BadBeta(_)
        ));
    }

    #[test]
    fn score_from_eps_examples() {
        let zero = Tensor::zeros(vec![3]);
        assert_eq!(score_from_eps(&zero, 0.7).unwrap().data(), &[0.0; 3]);

        let u = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eps = u.scale(0.7).unwrap();
        let score = score_from_eps(&eps, 0.7).unwrap();
        for (s, ui) in score.data().iter().zip(u.data()) {
            assert!((s + ui).abs() < 1e-12);
        }

        let e = Tensor::new(vec![2], vec![0.3, -0.9]).unwrap();
        let s = score_from_eps(&e, 0.25).unwrap();
        for i in 0..2 {
            assert!((s.data()[i] - (-e.data()[i] / 0.25)).abs() <= 1e-12);
        }

        assert!(matches!(
            score_from_eps(&e, 0.0).unwrap_err(),
            GuidanceError::BadSigma(_)
        ));
    }

    fn quadratic_eval(
        anchor: Tensor,
    ) -> impl FnMut(&mut GradTape, &[NodeId], &[NodeId]) -> Result<EnergyEval, GuidanceError> {
        move |tape, z_nodes, _c_nodes| {
            let a = tape.constant(anchor.clone());
            let diff = tape.sub(z_nodes[0], a)?;
            let sq = tape.mul(diff, diff)?;
            let e = tape.mean_all(sq)?;
            Ok(EnergyEval {
                labels: vec![(0, 0)],
                energies: vec![e],
            })
        }
    }

    #[test]
    fn null_update_returns_input_with_single_entry_trace() {
        let mut cfg = GuidanceConfig::default();
        cfg.v = 0.0;
        cfg.w = 0.0;
        let z = vec![Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()];
        let c = vec![Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()];
        let anchor = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out =
            dual_backward_update_with(&z, &c, &cfg, 0.5, 1, quadratic_eval(anchor)).unwrap();
        assert_eq!(out.z, z);
        assert_eq!(out.c, c);
        assert_eq!(out.trace.entries.len(), 1);
        assert_eq!(out.trace.iterations, 0);
        assert!(!out.trace.converged);
    }

    #[test]
    fn quadratic_energy_descends_monotonically_to_threshold() {
        // Closed-form oracle: e_{k+1} = (1 − 2·v·σ/n)² · e_k for
        // e = ‖z − a‖²/n, so with v·σ small the energy contracts by a known
        // factor every step.
        let mut cfg = GuidanceConfig::default();
        cfg.v = 0.05;
        cfg.w = 0.0;
        cfg.k_thres = 0.6;
        cfg.max_inner_iters = 200;
        let n = 4.0;
        let sigma = 1.0;
        let z = vec![Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap()];
        let c = vec![Tensor::zeros(vec![1, 1])];
        let anchor = Tensor::zeros(vec![2, 2]);
        let out =
            dual_backward_update_with(&z, &c, &cfg, sigma, 1, quadratic_eval(anchor)).unwrap();
        assert!(out.trace.converged);
        let energies: Vec<f64> = out.trace.entries.iter().map(|e| e.total_energy).collect();
        assert!(energies.windows(2).all(|w| w[1] < w[0]));
        let contraction = (1.0 - 2.0 * cfg.v * sigma / n).powi(2);
        for w in energies.windows(2) {
            assert!((w[1] / w[0] - contraction).abs() < 1e-9);
        }
        // Iterations-to-threshold matches the closed form ⌈ln k / ln ρ⌉.
        let want_iters = (cfg.k_thres.ln() / contraction.ln()).ceil() as usize;
        assert_eq!(out.trace.iterations, want_iters);
        assert!(out
            .trace
            .e_final
            .iter()
            .zip(&out.trace.e_start)
            .all(|(f, s)| *f <= cfg.k_thres * *s));
    }

    #[test]
    fn latent_only_equals_dual_with_w_zero() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let denoiser = ToyDenoiser::new(shape, 1).unwrap();
        let conds = vec![ImageCond {
            subjects: vec![SubjectCond::single(
                1,
                BoundingBox::new(0.2, 0.2, 0.8, 0.8).unwrap(),
            )],
        }];
        let splitter = SeedSplitter::new(900);
        let mut rng = splitter.stream("z", &[0]);
        let z = vec![normal_tensor(&mut rng, &[16, 8])];
        let mut rng = splitter.stream("c", &[0]);
        let c = vec![normal_tensor(&mut rng, &[4, 8])];

        let mut cfg = GuidanceConfig::default();
        cfg.max_inner_iters = 5;
        let enhance = EnhanceOpts::none();

        let latent_only =
            dual_latent_only_update(&z, &c, &conds, &denoiser, &cfg, 0.5, 1, enhance).unwrap();

        let mut w_zero = cfg.clone();
        w_zero.w = 0.0;
        let dual =
            dual_backward_update(&z, &c, &conds, &denoiser, &w_zero, 0.5, 1, enhance).unwrap();

        assert_eq!(latent_only.z, dual.z);
        assert_eq!(latent_only.c, dual.c);
        assert_eq!(latent_only.trace.entries, dual.trace.entries);

        // v = 0 and w = 0 is the identity.
        let mut null = cfg.clone();
        null.v = 0.0;
        null.w = 0.0;
        let id = dual_backward_update(&z, &c, &conds, &denoiser, &null, 0.5, 1, enhance).unwrap();
        assert_eq!(id.z, z);
        assert_eq!(id.c, c);
        assert_eq!(id.trace.entries.len(), 1);
    }

    #[test]
    fn sigma_scaling_invariance_of_update_sequence() {
        // Scaling σ by λ and (v, w) by 1/λ leaves every update identical
        // (bitwise for power-of-two λ).
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let denoiser = ToyDenoiser::new(shape, 2).unwrap();
        let conds = vec![ImageCond {
            subjects: vec![SubjectCond::single(
                1,
                BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            )],
        }];
        let splitter = SeedSplitter::new(901);
        let mut rng = splitter.stream("z", &[0]);
        let z = vec![normal_tensor(&mut rng, &[16, 8])];
        let mut rng = splitter.stream("c", &[0]);
        let c = vec![normal_tensor(&mut rng, &[4, 8])];

        let mut cfg = GuidanceConfig::default();
        cfg.max_inner_iters = 4;
        let enhance = EnhanceOpts::none();
        let base =
            dual_backward_update(&z, &c, &conds, &denoiser, &cfg, 0.5, 1, enhance).unwrap();

        let lambda = 4.0;
        let mut scaled = cfg.clone();
        scaled.v /= lambda;
        scaled.w /= lambda;
        let other = dual_backward_update(
            &z,
            &c,
            &conds,
            &denoiser,
            &scaled,
            0.5 * lambda,
            1,
            enhance,
        )
        .unwrap();

        assert_eq!(base.z, other.z);
        assert_eq!(base.c, other.c);
        assert_eq!(base.trace.entries, other.trace.entries);
    }

    #[test]
    fn single_step_no_guidance_is_one_plain_ddpm_step() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let denoiser = ToyDenoiser::new(shape, 4).unwrap();
        let conds = vec![ImageCond::default()];
        let splitter = SeedSplitter::new(55);
        let mut rng = splitter.stream("c", &[0]);
        let embeds = vec![normal_tensor(&mut rng, &[4, 8])];

        let mut cfg = GuidanceConfig::default();
        cfg.total_steps = 1;
        cfg.backward_steps = 0;
        cfg.forward_steps = 0;
        cfg.betas = linear_betas(1);
        cfg.sigmas = sigmas_from_betas(&cfg.betas);
        cfg.v = 0.0;
        cfg.w = 0.0;
        cfg.risa = false;
        cfg.sfca = false;

        let seed = 77;
        let out = sample_batch(&embeds, &conds, &denoiser, &cfg, seed).unwrap();
        assert!(out.steps.is_empty());

        // Reference: one manual plain DDPM step with the same streams.
        let sp = SeedSplitter::new(seed);
        let mut rng = sp.stream("init", &[0]);
        let z0 = normal_tensor(&mut rng, &[16, 8]);
        let eps = predict_eps(
            &denoiser,
            &[z0.clone()],
            &embeds,
            &conds,
            &EnhanceOpts::none(),
            &cfg,
        )
        .unwrap();
        let score = score_from_eps(&eps[0], cfg.sigmas[0]).unwrap();
        let mut rng = sp.stream("noise", &[0, 1]);
        let noise = normal_tensor(&mut rng, &[16, 8]);
        let want = ddpm_step(&z0, &score, cfg.betas[0], &noise).unwrap();
        assert_eq!(out.final_latents[0], want);
    }

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let shape = DenoiserShape {
            grid_h: 4,
            grid_w: 4,
            latent_dim: 8,
            heads: 2,
            sa_layers: 1,
            ca_layers: 1,
        };
        let denoiser = ToyDenoiser::new(shape, 4).unwrap();
        let conds = vec![ImageCond {
            subjects: vec![SubjectCond::single(
                1,
                BoundingBox::new(0.2, 0.2, 0.7, 0.7).unwrap(),
            )],
        }];
        let splitter = SeedSplitter::new(56);
        let mut rng = splitter.stream("c", &[0]);
        let embeds = vec![normal_tensor(&mut rng, &[4, 8])];

        let mut cfg = GuidanceConfig::default();
        cfg.total_steps = 4;
        cfg.backward_steps = 1;
        cfg.forward_steps = 2;
        cfg.betas = linear_betas(4);
        cfg.sigmas = sigmas_from_betas(&cfg.betas);
        cfg.max_inner_iters = 3;

        let a = sample_batch(&embeds, &conds, &denoiser, &cfg, 99).unwrap();
        let b = sample_batch(&embeds, &conds, &denoiser, &cfg, 99).unwrap();
        assert_eq!(a.final_latents, b.final_latents);
        assert_eq!(a.final_embeds, b.final_embeds);
        assert_eq!(a.steps, b.steps);

        let c_run = sample_batch(&embeds, &conds, &denoiser, &cfg, 100).unwrap();
        assert_ne!(a.final_latents, c_run.final_latents);
    }
}
