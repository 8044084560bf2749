//! Finite-difference verification of every recorded adjoint.
//!
//! Each check builds a scalar objective from seeded random leaves, compares
//! the tape gradient against central finite differences, and reports the
//! worst relative error (vector-norm based). The same suite backs the
//! `gradcheck` CLI command and the acceptance gate.

use std::fmt;
use std::time::Instant;

use rand_chacha::ChaCha12Rng;

use crate::attention::{
    masked_attention_node, risa_head, sfca_head, ForeignSubject, MaskMatrix, RisaHeadInputs,
    RisaMaskAxis, SfcaMaskSource,
};
use crate::denoiser::{DenoiserShape, EnhanceOpts, ImageCond, SubjectCond, ToyDenoiser};
use crate::energy::{layout_energy_node, sigmoid_target, BoundingBox, TargetMap};
use crate::guidance::{build_targets, layout_energy_eval, GuidanceConfig, GuidanceError};
use crate::rng::{normal_tensor, uniform_tensor, SeedSplitter};
use crate::tensor::{GradTape, NodeId, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Default relative-error tolerance.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances_per_op: usize,
    pub pipeline_instances: usize,
    pub tolerance: f64,
    pub fd_step: f64,
    /// Smaller step for the full-pipeline checks: it keeps the min-max
    /// arg-extremes stable across the perturbation interval.
    pub pipeline_fd_step: f64,
    /// Negative-control hook: perturb every computed adjoint before the
    /// comparison so the suite must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            instances_per_op: 100,
            pipeline_instances: 100,
            tolerance: FD_TOLERANCE,
            fd_step: FD_STEP,
            pipeline_fd_step: 1e-5,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
    pub tolerance: f64,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<22} instances={:<4} max_rel_error={:.3e}  {}",
                c.name,
                c.instances,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "tolerance={:.1e}  elapsed={:.2}s  overall={}",
            self.tolerance,
            self.elapsed_secs,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// A single differentiable scenario: leaf tensors plus a graph builder that
/// reconstructs the scalar objective from fresh leaf nodes.
struct Scenario<'a> {
    leaves: Vec<Tensor>,
    build: Box<dyn Fn(&mut GradTape, &[NodeId]) -> Result<NodeId, GuidanceError> + 'a>,
}

impl Scenario<'_> {
    fn objective(&self, leaves: &[Tensor]) -> Result<f64, GuidanceError> {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    }

    /// Vector-norm relative error between the tape gradient and central
    /// finite differences over every leaf entry.
    fn rel_error(&self, fd_step: f64, corrupt: bool) -> Result<f64, GuidanceError> {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = self.leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &ids)?;
        let grads = tape.backward_scalar(out)?;
        let mut ad: Vec<f64> = Vec::new();
        for &id in &ids {
            ad.extend_from_slice(grads.wrt(id).data());
        }
        if corrupt {
            if let Some(first) = ad.first_mut() {
                *first += 1e-3;
            }
        }

        let mut fd = Vec::with_capacity(ad.len());
        for (li, leaf) in self.leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let mut plus = self.leaves.clone();
                let mut minus = self.leaves.clone();
                plus[li] = perturb(leaf, e, fd_step);
                minus[li] = perturb(leaf, e, -fd_step);
                let fp = self.objective(&plus)?;
                let fm = self.objective(&minus)?;
                fd.push((fp - fm) / (2.0 * fd_step));
            }
        }

        let diff: f64 = ad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        Ok(diff / na.max(nb).max(1e-10))
    }
}

fn perturb(t: &Tensor, index: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("perturbed tensor stays finite")
}

/// Objective reducer: mean of the elementwise product with fixed weights,
/// so every output entry influences the scalar.
fn weighted_mean(
    tape: &mut GradTape,
    out: NodeId,
    weights: &Tensor,
) -> Result<NodeId, GuidanceError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.mean_all(prod)?)
}

fn dims_from(rng: &mut ChaCha12Rng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    rng.random_range(lo..=hi)
}

/// Uniform values with guaranteed spacing between the two smallest and two
/// largest entries per row, so min-max stays differentiable under the
/// finite-difference step.
fn spaced_rows(rng: &mut ChaCha12Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    use rand::Rng;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let row: Vec<f64> = (0..cols).map(|_| rng.random::<f64>()).collect();
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted[1] - sorted[0] > gap && sorted[cols - 1] - sorted[cols - 2] > gap {
                data.extend_from_slice(&row);
                break;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("finite")
}

fn run_check<F>(
    name: &'static str,
    instances: usize,
    opts: &GradcheckOptions,
    fd_step: f64,
    mut make: F,
) -> Result<OpCheck, GuidanceError>
where
    F: FnMut(u64) -> Result<Scenario<'static>, GuidanceError>,
{
    let mut max_rel = 0.0f64;
    for i in 0..instances as u64 {
        let scenario = make(i)?;
        let rel = scenario.rel_error(fd_step, opts.corrupt)?;
        max_rel = max_rel.max(rel);
    }
    Ok(OpCheck {
        name,
        instances,
        max_rel_error: max_rel,
        passed: max_rel < opts.tolerance,
    })
}

/// Runs the complete suite.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, GuidanceError> {
    let start = Instant::now();
    let sp = SeedSplitter::new(opts.seed);
    let mut checks = Vec::new();
    let n_op = opts.instances_per_op;

    // ── elementwise and structural ops ──
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        checks.push(run_check(name, n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream(name, &[i]);
            let r = dims_from(&mut rng, 2, 4);
            let c = dims_from(&mut rng, 2, 4);
            let a = normal_tensor(&mut rng, &[r, c]);
            let b = normal_tensor(&mut rng, &[r, c]);
            let w = normal_tensor(&mut rng, &[r, c]);
            Ok(Scenario {
                leaves: vec![a, b],
                build: Box::new(move |tape, ids| {
                    let out = match which {
                        0 => tape.add(ids[0], ids[1])?,
                        1 => tape.sub(ids[0], ids[1])?,
                        _ => tape.mul(ids[0], ids[1])?,
                    };
                    weighted_mean(tape, out, &w)
                }),
            })
        })?);
    }

    checks.push(run_check("scale", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("scale", &[i]);
        let r = dims_from(&mut rng, 2, 4);
        let c = dims_from(&mut rng, 2, 4);
        let a = normal_tensor(&mut rng, &[r, c]);
        let w = normal_tensor(&mut rng, &[r, c]);
        let k = uniform_tensor(&mut rng, &[1]).data()[0] * 4.0 - 2.0;
        Ok(Scenario {
            leaves: vec![a],
            build: Box::new(move |tape, ids| {
                let out = tape.scale(ids[0], k)?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push(run_check("matmul", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("matmul", &[i]);
        let m = dims_from(&mut rng, 2, 4);
        let k = dims_from(&mut rng, 2, 4);
        let n = dims_from(&mut rng, 2, 4);
        let a = normal_tensor(&mut rng, &[m, k]);
        let b = normal_tensor(&mut rng, &[k, n]);
        let w = normal_tensor(&mut rng, &[m, n]);
        Ok(Scenario {
            leaves: vec![a, b],
            build: Box::new(move |tape, ids| {
                let out = tape.matmul(ids[0], ids[1])?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push(run_check("transpose", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("transpose", &[i]);
        let r = dims_from(&mut rng, 2, 4);
        let c = dims_from(&mut rng, 2, 4);
        let a = normal_tensor(&mut rng, &[r, c]);
        let w = normal_tensor(&mut rng, &[c, r]);
        Ok(Scenario {
            leaves: vec![a],
            build: Box::new(move |tape, ids| {
                let out = tape.transpose(ids[0])?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push(run_check("softmax_lastdim", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("softmax", &[i]);
        let r = dims_from(&mut rng, 2, 4);
        let c = dims_from(&mut rng, 2, 5);
        let a = normal_tensor(&mut rng, &[r, c]);
        let w = normal_tensor(&mut rng, &[r, c]);
        Ok(Scenario {
            leaves: vec![a],
            build: Box::new(move |tape, ids| {
                let out = tape.softmax_lastdim(ids[0])?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    for (name, mean) in [("sum_all", false), ("mean_all", true)] {
        checks.push(run_check(name, n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream(name, &[i]);
            let r = dims_from(&mut rng, 2, 4);
            let c = dims_from(&mut rng, 2, 4);
            let a = normal_tensor(&mut rng, &[r, c]);
            Ok(Scenario {
                leaves: vec![a],
                build: Box::new(move |tape, ids| {
                    Ok(if mean {
                        tape.mean_all(ids[0])?
                    } else {
                        tape.sum_all(ids[0])?
                    })
                }),
            })
        })?);
    }

    for (name, rows) in [("slice_rows", true), ("slice_cols", false)] {
        checks.push(run_check(name, n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream(name, &[i]);
            let r = dims_from(&mut rng, 3, 5);
            let c = dims_from(&mut rng, 3, 5);
            let a = normal_tensor(&mut rng, &[r, c]);
            let axis = if rows { r } else { c };
            let start = dims_from(&mut rng, 0, axis - 2);
            let len = dims_from(&mut rng, 1, axis - start - 1);
            let w = if rows {
                normal_tensor(&mut rng, &[len, c])
            } else {
                normal_tensor(&mut rng, &[r, len])
            };
            Ok(Scenario {
                leaves: vec![a],
                build: Box::new(move |tape, ids| {
                    let out = if rows {
                        tape.slice_rows(ids[0], start, len)?
                    } else {
                        tape.slice_cols(ids[0], start, len)?
                    };
                    weighted_mean(tape, out, &w)
                }),
            })
        })?);
    }

    for (name, rows) in [("concat_rows", true), ("concat_cols", false)] {
        checks.push(run_check(name, n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream(name, &[i]);
            let shared = dims_from(&mut rng, 2, 4);
            let d1 = dims_from(&mut rng, 1, 3);
            let d2 = dims_from(&mut rng, 1, 3);
            let (a, b, w) = if rows {
                (
                    normal_tensor(&mut rng, &[d1, shared]),
                    normal_tensor(&mut rng, &[d2, shared]),
                    normal_tensor(&mut rng, &[d1 + d2, shared]),
                )
            } else {
                (
                    normal_tensor(&mut rng, &[shared, d1]),
                    normal_tensor(&mut rng, &[shared, d2]),
                    normal_tensor(&mut rng, &[shared, d1 + d2]),
                )
            };
            Ok(Scenario {
                leaves: vec![a, b],
                build: Box::new(move |tape, ids| {
                    let out = if rows {
                        tape.concat_rows(&[ids[0], ids[1]])?
                    } else {
                        tape.concat_cols(&[ids[0], ids[1]])?
                    };
                    weighted_mean(tape, out, &w)
                }),
            })
        })?);
    }

    checks.push({
        let gap = 10.0 * opts.fd_step;
        run_check("minmax_rows", n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream("minmax", &[i]);
            let r = dims_from(&mut rng, 2, 3);
            let c = dims_from(&mut rng, 4, 6);
            let a = spaced_rows(&mut rng, r, c, gap);
            let w = normal_tensor(&mut rng, &[r, c]);
            Ok(Scenario {
                leaves: vec![a],
                build: Box::new(move |tape, ids| {
                    let out = tape.minmax_rows(ids[0])?;
                    weighted_mean(tape, out, &w)
                }),
            })
        })?
    });

    // ── attention compound ops ──
    checks.push(run_check("masked_attention", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("masked-attn", &[i]);
        let sq = dims_from(&mut rng, 2, 4);
        let sk = dims_from(&mut rng, 3, 5);
        let d = dims_from(&mut rng, 2, 4);
        let q = normal_tensor(&mut rng, &[sq, d]);
        let k = normal_tensor(&mut rng, &[sk, d]);
        let v = normal_tensor(&mut rng, &[sk, d]);
        let gates = uniform_tensor(&mut rng, &[sk]);
        let mut key_mask: Vec<f64> = gates
            .data()
            .iter()
            .map(|&x| (x > 0.35) as u8 as f64)
            .collect();
        key_mask[0] = 1.0;
        let w = normal_tensor(&mut rng, &[sq, d]);
        Ok(Scenario {
            leaves: vec![q, k, v],
            build: Box::new(move |tape, ids| {
                let mask = MaskMatrix::from_key_mask(sq, &key_mask);
                let out = masked_attention_node(tape, ids[0], ids[1], ids[2], Some(&mask))?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push(run_check("risa_head", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("risa-head", &[i]);
        let s = 9; // 3x3 grid
        let d = dims_from(&mut rng, 2, 3);
        let mut leaves = Vec::new();
        for _ in 0..2 {
            leaves.push(normal_tensor(&mut rng, &[s, d])); // q
            leaves.push(normal_tensor(&mut rng, &[s, d])); // k
            leaves.push(normal_tensor(&mut rng, &[s, d])); // v
        }
        let mut masks = Vec::new();
        for _ in 0..2 {
            let gates = uniform_tensor(&mut rng, &[s]);
            let mut m: Vec<f64> = gates
                .data()
                .iter()
                .map(|&x| (x > 0.4) as u8 as f64)
                .collect();
            m[0] = 1.0;
            masks.push(m);
        }
        let w = normal_tensor(&mut rng, &[s, d]);
        Ok(Scenario {
            leaves,
            build: Box::new(move |tape, ids| {
                let inputs = vec![
                    RisaHeadInputs {
                        q: ids[0],
                        k: ids[1],
                        v: ids[2],
                    },
                    RisaHeadInputs {
                        q: ids[3],
                        k: ids[4],
                        v: ids[5],
                    },
                ];
                let out = risa_head(tape, 0, &inputs, &masks, RisaMaskAxis::Key)?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push(run_check("sfca_head", n_op, opts, opts.fd_step, move |i| {
        let mut rng = sp.stream("sfca-head", &[i]);
        let s = 9;
        let d = dims_from(&mut rng, 2, 3);
        let tokens = 3;
        let q = normal_tensor(&mut rng, &[s, d]);
        let own_k = normal_tensor(&mut rng, &[tokens, d]);
        let own_v = normal_tensor(&mut rng, &[tokens, d]);
        let fk = normal_tensor(&mut rng, &[1, d]);
        let fv = normal_tensor(&mut rng, &[1, d]);
        let gates = uniform_tensor(&mut rng, &[s]);
        let qmask: Vec<f64> = gates
            .data()
            .iter()
            .map(|&x| (x > 0.5) as u8 as f64)
            .collect();
        let w = normal_tensor(&mut rng, &[s, d]);
        Ok(Scenario {
            leaves: vec![q, own_k, own_v, fk, fv],
            build: Box::new(move |tape, ids| {
                let foreign = [ForeignSubject {
                    k: ids[3],
                    v: ids[4],
                    query_mask: qmask.clone(),
                }];
                let (out, _) = sfca_head(tape, ids[0], ids[1], ids[2], &[], &foreign)?;
                weighted_mean(tape, out, &w)
            }),
        })
    })?);

    checks.push({
        let gap = 10.0 * opts.fd_step;
        run_check("layout_energy", n_op, opts, opts.fd_step, move |i| {
            let mut rng = sp.stream("layout-energy", &[i]);
            let (gh, gw) = (3, 3);
            let heads = 2;
            let maps = spaced_rows(&mut rng, heads, gh * gw, gap);
            let bb = random_box(&mut rng);
            let target: TargetMap = sigmoid_target(&bb, 10.0, gh, gw).expect("valid box");
            Ok(Scenario {
                leaves: vec![maps],
                build: Box::new(move |tape, ids| Ok(layout_energy_node(tape, ids[0], &target)?)),
            })
        })?
    });

    // ── full energy pipeline through the toy denoiser ──
    let n_pipe = opts.pipeline_instances;
    let pipe_gap = 20.0 * opts.pipeline_fd_step;
    checks.push(run_check(
        "pipeline_plain",
        n_pipe.div_ceil(2),
        opts,
        opts.pipeline_fd_step,
        move |i| pipeline_scenario(&sp, i, false, pipe_gap),
    )?);
    checks.push(run_check(
        "pipeline_risa_sfca",
        n_pipe,
        opts,
        opts.pipeline_fd_step,
        move |i| pipeline_scenario(&sp, i, true, pipe_gap),
    )?);

    Ok(GradcheckReport {
        checks,
        tolerance: opts.tolerance,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn random_box(rng: &mut ChaCha12Rng) -> BoundingBox {
    let u = uniform_tensor(rng, &[4]);
    let h0 = u.data()[0] * 0.35;
    let w0 = u.data()[1] * 0.35;
    let h1 = h0 + 0.3 + u.data()[2] * 0.3;
    let w1 = w0 + 0.3 + u.data()[3] * 0.3;
    BoundingBox::new(h0, w0, h1.min(1.0), w1.min(1.0)).expect("extent bounded away from zero")
}

/// Full layout-energy pipeline gradient scenario: N=2 images, summed
/// per-subject energies through the (optionally RISA/SFCA-coupled) toy
/// denoiser. Leaves are [z_0, z_1, c_0, c_1].
fn pipeline_scenario(
    splitter: &SeedSplitter,
    instance: u64,
    enhanced: bool,
    gap: f64,
) -> Result<Scenario<'static>, GuidanceError> {
    let label = if enhanced { "pipe-enh" } else { "pipe-plain" };
    let shape = DenoiserShape {
        grid_h: 3,
        grid_w: 3,
        latent_dim: 8,
        heads: 2,
        sa_layers: 1,
        ca_layers: 1,
    };
    let tokens = 3;
    // The map min-max must keep a healthy span so the finite-difference step
    // cannot flip the arg-extremes; retry with fresh draws if an instance
    // lands too close to a tie.
    'outer: for attempt in 0..64u64 {
        let mut rng = splitter.stream(label, &[instance, attempt]);
        let denoiser = ToyDenoiser::new(
            shape,
            splitter.child_seed(label, &[instance, attempt, 7]),
        )
        .expect("valid shape");
        let z0 = normal_tensor(&mut rng, &[shape.spatial(), shape.latent_dim]);
        let z1 = normal_tensor(&mut rng, &[shape.spatial(), shape.latent_dim]);
        let c0 = normal_tensor(&mut rng, &[tokens, shape.latent_dim]);
        let c1 = normal_tensor(&mut rng, &[tokens, shape.latent_dim]);
        let conds = vec![
            ImageCond {
                subjects: vec![SubjectCond::single(1, random_box(&mut rng))],
            },
            ImageCond {
                subjects: vec![SubjectCond::single(2, random_box(&mut rng))],
            },
        ];
        let cfg = GuidanceConfig::default();
        let targets = build_targets(&denoiser, &conds, &cfg)?;
        let enhance = if enhanced {
            EnhanceOpts {
                risa: true,
                sfca: true,
                risa_axis: RisaMaskAxis::Key,
                sfca_source: SfcaMaskSource::Literal,
            }
        } else {
            EnhanceOpts::none()
        };

        // Screen the instance: every head map needs clear extreme gaps.
        {
            let mut tape = GradTape::new();
            let zs = [tape.leaf(z0.clone()), tape.leaf(z1.clone())];
            let cs = [tape.leaf(c0.clone()), tape.leaf(c1.clone())];
            let out = denoiser.forward_batch(&mut tape, &zs, &cs, &conds, &enhance)?;
            for maps in &out.subject_maps {
                for &m in maps {
                    let v = tape.value(m);
                    let cols = v.shape()[1];
                    for row in v.data().chunks(cols) {
                        let mut sorted = row.to_vec();
                        sorted.sort_by(f64::total_cmp);
                        if sorted[1] - sorted[0] < gap
                            || sorted[cols - 1] - sorted[cols - 2] < gap
                        {
                            continue 'outer;
                        }
                    }
                }
            }
        }

        let build = move |tape: &mut GradTape, ids: &[NodeId]| -> Result<NodeId, GuidanceError> {
            let mut eval = layout_energy_eval(&denoiser, &conds, &targets, enhance);
            let out = eval(tape, &ids[0..2], &ids[2..4])?;
            let mut total = out.energies[0];
            for &e in &out.energies[1..] {
                total = tape.add(total, e)?;
            }
            Ok(total)
        };
        return Ok(Scenario {
            leaves: vec![z0, z1, c0, c1],
            build: Box::new(build),
        });
    }
    Err(GuidanceError::BadConfig(format!(
        "could not build a well-separated pipeline instance for seed index {instance}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let opts = GradcheckOptions {
            instances_per_op: 4,
            pipeline_instances: 2,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_adjoint_fails_the_suite() {
        let opts = GradcheckOptions {
            instances_per_op: 2,
            pipeline_instances: 1,
            corrupt: true,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed());
    }
}
