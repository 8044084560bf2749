//! Sigmoid layout targets and the nuanced layout energy.
//!
//! A bounding box turns into a smooth two-dimensional sigmoid bump whose
//! 0.5-level set traces the box edges; the layout energy is the mean squared
//! deviation between min-max normalized subject attention maps and that
//! target, differentiable back to the latent and semantic leaves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{GradTape, NodeId, Tensor, TensorError, MINMAX_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("invalid box ({h_min}, {w_min}, {h_max}, {w_max}): {reason}")]
    InvalidBox {
        h_min: f64,
        w_min: f64,
        h_max: f64,
        w_max: f64,
        reason: &'static str,
    },
    #[error("target grid needs H, W >= 1, got {h}x{w}")]
    EmptyGrid { h: usize, w: usize },
    #[error("shape factor must be positive and finite, got {0}")]
    BadShapeFactor(f64),
    #[error("map stack is empty")]
    EmptyMaps,
    #[error("maps are {map_h}x{map_w} but target is {target_h}x{target_w}")]
    GridMismatch {
        map_h: usize,
        map_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Normalized layout box; coordinates follow (h_min, w_min, h_max, w_max)
/// with h vertical and w horizontal, both in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub h_min: f64,
    pub w_min: f64,
    pub h_max: f64,
    pub w_max: f64,
}

impl BoundingBox {
    pub fn new(h_min: f64, w_min: f64, h_max: f64, w_max: f64) -> Result<Self, EnergyError> {
        let b = BoundingBox {
            h_min,
            w_min,
            h_max,
            w_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        let fail = |reason| {
            Err(EnergyError::InvalidBox {
                h_min: self.h_min,
                w_min: self.w_min,
                h_max: self.h_max,
                w_max: self.w_max,
                reason,
            })
        };
        let coords = [self.h_min, self.w_min, self.h_max, self.w_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return fail("non-finite coordinate");
        }
        if coords.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return fail("coordinate outside [0, 1]");
        }
        if self.h_min >= self.h_max || self.w_min >= self.w_max {
            return fail("zero or negative extent");
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.h_max - self.h_min) * (self.w_max - self.w_min)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.h_min + self.h_max) / 2.0,
            (self.w_min + self.w_max) / 2.0,
        )
    }

    /// Closed-interval membership test for a normalized point.
    pub fn contains(&self, h: f64, w: f64) -> bool {
        h >= self.h_min && h <= self.h_max && w >= self.w_min && w <= self.w_max
    }
}

/// Box moments: centers and squared half-extents.
pub fn box_to_moments(b: &BoundingBox) -> Result<(f64, f64, f64, f64), EnergyError> {
    b.validate()?;
    let mu1 = (b.h_min + b.h_max) / 2.0;
    let mu2 = (b.w_min + b.w_max) / 2.0;
    let sigma1 = (b.h_max - b.h_min).powi(2) / 4.0;
    let sigma2 = (b.w_max - b.w_min).powi(2) / 4.0;
    Ok((mu1, mu2, sigma1, sigma2))
}

/// Which analytic target the energy chases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Elliptical sigmoid bump (the default):
    /// argument 1 − (x−μ1)²/σ1 − (y−μ2)²/σ2.
    Sigmoid,
    /// Sigmoid with the positive second term (a saddle); kept behind a flag
    /// for comparison only.
    SigmoidLiteralSign,
    /// Hard 0/1 mask of the box; comparison baseline.
    Binary,
    /// Unnormalized Gaussian bump with the same moments; comparison baseline.
    Gaussian,
}

impl TargetKind {
    pub fn parse(s: &str) -> Option<TargetKind> {
        match s {
            "sigmoid" => Some(TargetKind::Sigmoid),
            "sigmoid-literal" | "sigmoid_literal_sign" => Some(TargetKind::SigmoidLiteralSign),
            "binary" => Some(TargetKind::Binary),
            "gaussian" => Some(TargetKind::Gaussian),
            _ => None,
        }
    }
}

/// 2-D target distribution rasterized at pixel centers, carrying the moments
/// it was built from so the continuous surface can be re-evaluated.
#[derive(Debug, Clone)]
pub struct TargetMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    pub s: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub kind: TargetKind,
}

impl TargetMap {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.w + w]
    }

    /// Continuous target surface at normalized coordinates (x vertical,
    /// y horizontal).
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let tx = (x - self.mu1).powi(2) / self.sigma1;
        let ty = (y - self.mu2).powi(2) / self.sigma2;
        match self.kind {
            TargetKind::Sigmoid => sigmoid(self.s * (1.0 - tx - ty)),
            TargetKind::SigmoidLiteralSign => sigmoid(self.s * (1.0 - tx + ty)),
            TargetKind::Binary => {
                if tx <= 1.0 && ty <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TargetKind::Gaussian => (-(tx + ty) / 2.0).exp(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Builds the sigmoid target for a box: pixel (h, w) samples the surface at
/// the pixel center ((h+0.5)/H, (w+0.5)/W).
pub fn sigmoid_target(
    b: &BoundingBox,
    s: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<TargetMap, EnergyError> {
    target_map(b, TargetKind::Sigmoid, s, grid_h, grid_w)
}

/// Builds any of the supported target kinds on the same grid convention.
pub fn target_map(
    b: &BoundingBox,
    kind: TargetKind,
    s: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<TargetMap, EnergyError> {
    if grid_h == 0 || grid_w == 0 {
        return Err(EnergyError::EmptyGrid {
            h: grid_h,
            w: grid_w,
        });
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(EnergyError::BadShapeFactor(s));
    }
    let (mu1, mu2, sigma1, sigma2) = box_to_moments(b)?;
    let mut map = TargetMap {
        h: grid_h,
        w: grid_w,
        values: Vec::with_capacity(grid_h * grid_w),
        s,
        mu1,
        mu2,
        sigma1,
        sigma2,
        kind,
    };
    let mut values = Vec::with_capacity(grid_h * grid_w);
    for h in 0..grid_h {
        let x = (h as f64 + 0.5) / grid_h as f64;
        for w in 0..grid_w {
            let y = (w as f64 + 0.5) / grid_w as f64;
            values.push(map.eval(x, y));
        }
    }
    map.values = values;
    Ok(map)
}

/// Stack of same-sized 2-D maps: per-head attention maps or per-token maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

/// Subject-token cross-attention maps, one per head.
pub type CrossAttnMaps = MapStack;

impl MapStack {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, EnergyError> {
        if n == 0 || h == 0 || w == 0 {
            return Err(EnergyError::EmptyMaps);
        }
        if data.len() != n * h * w {
            return Err(TensorError::ShapeDataMismatch {
                shape: vec![n, h, w],
                expected: n * h * w,
                got: data.len(),
            }
            .into());
        }
        Ok(MapStack { n, h, w, data })
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, i: usize) -> &[f64] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

/// Per-map min-max normalization along the spatial dimensions; a map with a
/// degenerate range comes back as all zeros.
pub fn minmax_normalize(maps: &MapStack) -> MapStack {
    let size = maps.h * maps.w;
    let mut data = vec![0.0; maps.data.len()];
    for i in 0..maps.n {
        let src = maps.map(i);
        let min = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if span < MINMAX_EPS {
            continue;
        }
        for (o, &v) in data[i * size..(i + 1) * size].iter_mut().zip(src) {
            *o = (v - min) / span;
        }
    }
    MapStack {
        n: maps.n,
        h: maps.h,
        w: maps.w,
        data,
    }
}

/// Per-token normalization: each token map rescaled to [0, 1] on its own.
pub fn intra_token_map(maps: &MapStack) -> MapStack {
    minmax_normalize(maps)
}

/// Joint normalization: one min-max over the concatenation of all token maps,
/// preserving the relative activation levels between tokens.
pub fn inter_token_map(maps: &MapStack) -> MapStack {
    let min = maps.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = maps.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let data = if span < MINMAX_EPS {
        vec![0.0; maps.data.len()]
    } else {
        maps.data.iter().map(|&v| (v - min) / span).collect()
    };
    MapStack {
        n: maps.n,
        h: maps.h,
        w: maps.w,
        data,
    }
}

/// Mean squared deviation between normalized maps and the target grid,
/// averaged over heads and pixels.
pub fn layout_energy(normalized: &MapStack, target: &TargetMap) -> Result<f64, EnergyError> {
    if normalized.h != target.h || normalized.w != target.w {
        return Err(EnergyError::GridMismatch {
            map_h: normalized.h,
            map_w: normalized.w,
            target_h: target.h,
            target_w: target.w,
        });
    }
    let size = normalized.h * normalized.w;
    let mut sum = 0.0;
    for i in 0..normalized.n {
        for (a, t) in normalized.map(i).iter().zip(&target.values) {
            let d = a - t;
            sum += d * d;
        }
    }
    Ok(sum / (normalized.n * size) as f64)
}

/// Tape version of the energy: `maps` is a K×S node of raw per-head subject
/// maps (S = H·W); the node is min-max normalized per head and compared to
/// the target. Returns a scalar node.
pub fn layout_energy_node(
    tape: &mut GradTape,
    maps: NodeId,
    target: &TargetMap,
) -> Result<NodeId, EnergyError> {
    let (heads, s) = match tape.value(maps).shape() {
        [k, s] => (*k, *s),
        other => {
            return Err(TensorError::RankMismatch {
                op: "layout_energy",
                expected: 2,
                shape: other.to_vec(),
            }
            .into())
        }
    };
    if s != target.h * target.w {
        return Err(EnergyError::GridMismatch {
            map_h: 1,
            map_w: s,
            target_h: target.h,
            target_w: target.w,
        });
    }
    let normalized = tape.minmax_rows(maps)?;
    let mut tiled = Vec::with_capacity(heads * s);
    for _ in 0..heads {
        tiled.extend_from_slice(&target.values);
    }
    let t = tape.constant(Tensor::new(vec![heads, s], tiled)?);
    let diff = tape.sub(normalized, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_direct_substitution() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(box_to_moments(&b).unwrap(), (0.5, 0.5, 0.25, 0.25));

        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        assert_eq!(box_to_moments(&b).unwrap(), (0.5, 0.5, 0.0625, 0.0625));

        let b = BoundingBox::new(0.1, 0.2, 0.5, 0.8).unwrap();
        let (mu1, mu2, s1, s2) = box_to_moments(&b).unwrap();
        assert!((mu1 - 0.3).abs() < 1e-15);
        assert!((mu2 - 0.5).abs() < 1e-15);
        assert!((s1 - 0.04).abs() < 1e-15);
        assert!((s2 - 0.09).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.9, 1.0, 0.1).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn sigmoid_target_center_edge_corner() {
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let t = sigmoid_target(&b, 10.0, 8, 8).unwrap();
        // Center: argument is s·1.
        assert!((t.eval(0.5, 0.5) - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
        // Edge midpoint: argument is exactly 0.
        assert!((t.eval(0.25, 0.5) - 0.5).abs() < 1e-12);
        // Corner: argument is −s·1.
        assert!((t.eval(0.25, 0.25) - 1.0 / (1.0 + 10.0f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_target_values_strictly_inside_unit_interval() {
        let b = BoundingBox::new(0.1, 0.3, 0.4, 0.9).unwrap();
        let t = sigmoid_target(&b, 10.0, 16, 16).unwrap();
        assert!(t.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn literal_sign_is_a_saddle() {
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let t = target_map(&b, TargetKind::SigmoidLiteralSign, 10.0, 8, 8).unwrap();
        // Along +y from center the literal form keeps rising instead of
        // decaying, which is what the corrected sign fixes.
        assert!(t.eval(0.5, 0.95) > t.eval(0.5, 0.5) - 1e-12);
    }

    #[test]
    fn minmax_normalize_examples() {
        let maps = MapStack::new(1, 1, 3, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(minmax_normalize(&maps).data(), &[0.0, 0.5, 1.0]);

        let constant = MapStack::new(1, 1, 3, vec![3.0, 3.0, 3.0]).unwrap();
        assert_eq!(minmax_normalize(&constant).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn minmax_normalize_preserves_order_per_head() {
        // Sort-order oracle on a random 2-head map.
        let data: Vec<f64> = (0..32)
            .map(|i| ((i * 37 + 11) % 17) as f64 * 0.37 + if i < 16 { 2.0 } else { -5.0 })
            .collect();
        let maps = MapStack::new(2, 4, 4, data.clone()).unwrap();
        let out = minmax_normalize(&maps);
        for head in 0..2 {
            let src = maps.map(head);
            let dst = out.map(head);
            assert!(dst.iter().cloned().fold(f64::INFINITY, f64::min).abs() < 1e-15);
            assert!((dst.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-15);
            let mut src_order: Vec<usize> = (0..16).collect();
            src_order.sort_by(|&a, &b| src[a].total_cmp(&src[b]));
            let mut dst_order: Vec<usize> = (0..16).collect();
            dst_order.sort_by(|&a, &b| dst[a].total_cmp(&dst[b]));
            assert_eq!(src_order, dst_order);
        }
    }

    #[test]
    fn intra_token_independence() {
        let maps = MapStack::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(intra_token_map(&maps).data(), &[0.0, 1.0]);

        let maps = MapStack::new(2, 1, 2, vec![0.0, 1.0, 0.0, 10.0]).unwrap();
        assert_eq!(intra_token_map(&maps).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn inter_token_joint_rescale() {
        let maps = MapStack::new(2, 1, 2, vec![0.0, 1.0, 0.0, 10.0]).unwrap();
        assert_eq!(inter_token_map(&maps).data(), &[0.0, 0.1, 0.0, 1.0]);

        let same = MapStack::new(2, 1, 2, vec![1.0, 4.0, 1.0, 4.0]).unwrap();
        let out = inter_token_map(&same);
        assert_eq!(out.map(0), out.map(1));
    }

    #[test]
    fn inter_token_range_oracle() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let maps = MapStack::new(3, 2, 4, data).unwrap();
        let out = inter_token_map(&maps);
        let min = out.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min.abs() < 1e-15);
        assert!((max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layout_energy_exact_match_is_zero() {
        let b = BoundingBox::new(0.2, 0.2, 0.8, 0.8).unwrap();
        let t = sigmoid_target(&b, 10.0, 4, 4).unwrap();
        let maps = MapStack::new(2, 4, 4, [t.values(), t.values()].concat()).unwrap();
        assert!(layout_energy(&maps, &t).unwrap().abs() < 1e-15);
    }

    #[test]
    fn layout_energy_constant_offset() {
        let b = BoundingBox::new(0.2, 0.2, 0.8, 0.8).unwrap();
        let t = sigmoid_target(&b, 10.0, 4, 4).unwrap();
        let shifted: Vec<f64> = t.values().iter().map(|v| v + 0.1).collect();
        let maps = MapStack::new(1, 4, 4, shifted).unwrap();
        assert!((layout_energy(&maps, &t).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn layout_energy_matches_double_loop_oracle() {
        let b = BoundingBox::new(0.1, 0.3, 0.6, 0.9).unwrap();
        let t = sigmoid_target(&b, 10.0, 8, 8).unwrap();
        let data: Vec<f64> = (0..128).map(|i| ((i * 73 + 5) % 29) as f64 / 29.0).collect();
        let maps = MapStack::new(2, 8, 8, data).unwrap();
        let got = layout_energy(&maps, &t).unwrap();
        // Independent oracle: explicit k/h/w triple loop.
        let mut want = 0.0;
        for k in 0..2 {
            for h in 0..8 {
                for w in 0..8 {
                    let a = maps.map(k)[h * 8 + w];
                    let d = a - t.value_at(h, w);
                    want += d * d;
                }
            }
        }
        want /= (2 * 8 * 8) as f64;
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn target_monotone_non_increasing_along_rays() {
        let b = BoundingBox::new(0.2, 0.3, 0.7, 0.9).unwrap();
        let t = sigmoid_target(&b, 10.0, 8, 8).unwrap();
        for k in 0..16 {
            let angle = k as f64 * std::f64::consts::PI / 8.0;
            let mut prev = f64::INFINITY;
            for step in 0..40 {
                let r = step as f64 * 0.02;
                let x = t.mu1 + r * angle.cos();
                let y = t.mu2 + r * angle.sin();
                let v = t.eval(x, y);
                assert!(v <= prev + 1e-12, "ray {k} step {step}: {v} > {prev}");
                prev = v;
            }
        }
    }
}
