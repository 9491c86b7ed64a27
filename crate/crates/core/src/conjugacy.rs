//! Leaf conjugacies from converged graph sections: the raw map `h1`,
//! its moving-average regularization `h`, the return map `rho` with
//! the semi-conjugacy identity, and the injectivity probe.

use serde::Serialize;

use crate::chart::{self, ChartPoint};
use crate::cones::{Bundle, BundleEstimator};
use crate::error::{Error, Result};
use crate::graph_transform::{
    closed_copy, continuation_leaf, Continuation, GraphSection, StripAssembly, StripGrid,
    StripKind, TubularFrame,
};
use crate::cones::RateReport;
use crate::leaves::{integrate_leaf, local_intersection_coords, LeafArc, LineField};
use crate::systems::DynamicalSystem;

/// Sampled raw leaf map `h1: L -> L'` as an unwrapped monotone
/// parameter map, with its construction-quality measurements.
#[derive(Debug, Clone)]
pub struct H1Data {
    /// Source leaf parameters (uniform grid over one period).
    pub params: Vec<f64>,
    /// Unwrapped target-leaf parameters of the images.
    pub psi1: Vec<f64>,
    pub source_length: f64,
    pub target_length: f64,
    /// `sup d(x, h1(x))` over the samples.
    pub sup_identity_distance: f64,
    /// `sup d_{L'}(g h1(x), h1 f(x))` over the samples.
    pub equivariance_sup: f64,
    /// Parameter-distance-delta3 pairs satisfy
    /// `delta3/2 < d_{L'}(h1 x, h1 y) < 2 delta3`.
    pub eq41_ok: bool,
}

impl H1Data {
    /// Interpolated, unwrapped `psi1` at an arbitrary source parameter.
    pub fn psi1_at(&self, t: f64) -> f64 {
        let l = self.source_length;
        let lp = self.target_length;
        let wraps = (t / l).floor();
        let tw = t - wraps * l;
        let n = self.params.len();
        let spacing = l / n as f64;
        let fi = tw / spacing;
        let i0 = (fi.floor() as usize).min(n - 1);
        let a = fi - i0 as f64;
        let v0 = self.psi1[i0];
        let v1 = if i0 + 1 < n {
            self.psi1[i0 + 1]
        } else {
            self.psi1[0] + lp
        };
        v0 * (1.0 - a) + v1 * a + wraps * lp
    }
}

/// The regularized conjugacy data on one leaf pair.
#[derive(Debug, Clone)]
pub struct LeafConjugacyData {
    pub source: LeafArc,
    pub target: LeafArc,
    pub h1: H1Data,
    pub delta3: f64,
    pub dpsi_min: f64,
    pub dpsi_max: f64,
}

impl LeafConjugacyData {
    /// Moving average of `psi1` over a window of width `delta3`
    /// (trapezoid quadrature, 20 panels).
    pub fn psi(&self, t: f64) -> f64 {
        let d3 = self.delta3;
        let n = 20usize;
        let h = d3 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * self.h1.psi1_at(t - d3 / 2.0 + i as f64 * h);
        }
        acc * h / d3
    }

    /// Closed-form derivative of the moving average.
    pub fn dpsi(&self, t: f64) -> f64 {
        (self.h1.psi1_at(t + self.delta3 / 2.0) - self.h1.psi1_at(t - self.delta3 / 2.0))
            / self.delta3
    }

    /// The conjugacy point `h(gamma(t))` on the target leaf.
    pub fn h_point(&self, t: f64) -> Result<ChartPoint> {
        let p = self.psi(t).rem_euclid(self.h1.target_length);
        self.target.point_at(p)
    }

    /// Monotone inversion of `psi` near a hint (bisection to 1e-12).
    pub fn psi_inv(&self, value: f64, hint: f64) -> f64 {
        // psi is increasing with derivative in (1/2, 2); bracket around
        // the hint and expand until the bracket holds.
        let lp = self.h1.target_length;
        // Choose the branch of `value` closest to psi(hint).
        let base = self.psi(hint);
        let mut v = value;
        while v - base > lp / 2.0 {
            v -= lp;
        }
        while base - v > lp / 2.0 {
            v += lp;
        }
        let mut lo = hint - 2.0 * (v - base).abs() - 1e-9;
        let mut hi = hint + 2.0 * (v - base).abs() + 1e-9;
        for _ in 0..8 {
            if self.psi(lo) <= v {
                break;
            }
            lo -= (hi - lo) / 2.0;
        }
        for _ in 0..8 {
            if self.psi(hi) >= v {
                break;
            }
            hi += (hi - lo) / 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.psi(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Build the raw map `h1(x) = xi_cs . pi_u . xi_cu (x)` on a uniform
/// sample grid along the base leaf: the unique point of the
/// continuation whose partner-unstable plaque meets the
/// partner-stable plaque of `x`.
#[allow(clippy::too_many_arguments)]
pub fn build_h1(
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    cu: &StripAssembly,
    cu_section: &GraphSection,
    cs: &StripAssembly,
    cs_section: &GraphSection,
    lprime: &LeafArc,
    sample_count: usize,
) -> Result<H1Data> {
    let frame = &cu.frame;
    let l = frame.length;
    let lp = lprime.param_end() - lprime.param_start();
    let delta3 = cu.cascade.delta3;
    let mut gu_field = LineField::invariant(g, Bundle::Unstable)?;
    // The projection arcs are a few delta3 long; a shallow pullback
    // leaves a direction error far below the crossing tolerances.
    gu_field.estimator = BundleEstimator::new(cu.grid.estimator_depth.min(20), 1e-6);

    let n = sample_count.max(16);
    let mut params = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut sup_id = 0.0f64;
    let mut plaque_cache: std::collections::HashMap<usize, crate::leaves::Plaque> =
        std::collections::HashMap::new();
    let cs_spacing = frame.length / cs.grid.center_count as f64;
    for i in 0..n {
        let t = l * i as f64 / n as f64;
        params.push(t);
        let x = frame.leaf.point_at(t)?;
        let p1 = cu.section_point_at(cu_section, t, 0.0)?;
        // pi_u: project along the partner-unstable plaque onto the
        // cs-strip, then evaluate the cs-section there.
        let uarc = integrate_leaf(&gu_field, &p1, 1.5 * delta3, delta3 / 2.0)?;
        let key = (frame.wrap(t) / cs_spacing).round() as usize % cs.grid.center_count;
        if !plaque_cache.contains_key(&key) {
            plaque_cache.insert(key, cs.window_plaque(t)?);
        }
        let plaque = &plaque_cache[&key];
        let (_, t2, s2) = local_intersection_coords(&uarc, plaque).map_err(|e| {
            Error::NoIntersection(format!("pi_u failed at leaf parameter {t}: {e}"))
        })?;
        let p3 = cs.section_point_at(cs_section, t2, s2)?;
        // The composed point lies on the continuation; place it there.
        let tp = lprime.nearest_param(&p3)?;
        let on_leaf = lprime.point_at(tp)?;
        let resid = chart::dist(&on_leaf, &p3)?;
        if resid > delta3 {
            return Err(Error::violation(format!(
                "h1 image strayed {resid:.3e} from the continuation at parameter {t}"
            )));
        }
        sup_id = sup_id.max(chart::dist(&x, &on_leaf)?);
        images.push(tp);
    }

    // Unwrap the target parameters into a monotone lift.
    let mut psi1 = Vec::with_capacity(n);
    let mut prev = images[0];
    psi1.push(prev);
    for &raw in images.iter().skip(1) {
        let mut v = raw;
        while v < prev - lp / 2.0 {
            v += lp;
        }
        while v > prev + lp / 2.0 {
            v -= lp;
        }
        psi1.push(v);
        prev = v;
    }
    // Degree check: one source loop covers one target loop.
    let wrap_gain = psi1[n - 1] + (psi1[1] - psi1[0]) - psi1[0];
    if (wrap_gain - lp).abs() > lp / 4.0 && n > 8 {
        // Tolerant check via endpoints.
        let total = psi1[n - 1] - psi1[0] + lp / n as f64;
        if (total - lp).abs() > lp / 4.0 {
            return Err(Error::violation(
                "h1 does not wind once around the continuation",
            ));
        }
    }

    let h1 = H1Data {
        params,
        psi1,
        source_length: l,
        target_length: lp,
        sup_identity_distance: sup_id,
        equivariance_sup: 0.0,
        eq41_ok: true,
    };

    // Bound (4.1): parameter-distance-delta3 pairs map to target
    // distances in (delta3/2, 2 delta3).
    let mut eq41_ok = true;
    for i in 0..n {
        let t = h1.params[i];
        let d = h1.psi1_at(t + delta3) - h1.psi1_at(t);
        if d <= delta3 / 2.0 || d >= 2.0 * delta3 {
            eq41_ok = false;
        }
    }

    // Equivariance (4.2): d_{L'}(g h1(x), h1(f x)) along the
    // continuation, measured per sample.
    let mut equiv = 0.0f64;
    let step = (n / 64).max(1);
    for i in (0..n).step_by(step) {
        let t = h1.params[i];
        let hx = lprime.point_at(h1.psi1[i].rem_euclid(lp))?;
        let ghx = g.forward(&hx)?;
        let fx = f.forward(&frame.leaf.point_at(t)?)?;
        let tfx = frame.leaf.nearest_param(&fx)?;
        let h1fx = lprime.point_at(h1.psi1_at(tfx).rem_euclid(lp))?;
        let a = lprime.nearest_param(&ghx)?;
        let b = lprime.nearest_param(&h1fx)?;
        let mut dp = (a - b).abs();
        dp = dp.min(lp - dp);
        equiv = equiv.max(dp);
    }

    Ok(H1Data {
        eq41_ok,
        equivariance_sup: equiv,
        ..h1
    })
}

/// Regularize `h1` by the moving average of width `delta3` and verify
/// the derivative bounds `1/2 < Dpsi < 2`.
pub fn smooth_to_h(
    source: &LeafArc,
    target: &LeafArc,
    h1: H1Data,
    delta3: f64,
) -> Result<LeafConjugacyData> {
    let n = h1.params.len();
    let spacing = h1.source_length / n as f64;
    if spacing > delta3 / 20.0 * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "psi1 samples too sparse for the smoothing window: spacing {spacing:.3e} > delta3/20"
        )));
    }
    let data = LeafConjugacyData {
        source: source.clone(),
        target: target.clone(),
        h1,
        delta3,
        dpsi_min: f64::INFINITY,
        dpsi_max: f64::NEG_INFINITY,
    };
    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    for i in 0..n {
        let d = data.dpsi(data.h1.params[i]);
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if dmin <= 0.5 || dmax >= 2.0 {
        return Err(Error::violation(format!(
            "smoothed derivative left (1/2, 2): range [{dmin:.6}, {dmax:.6}]"
        )));
    }
    Ok(LeafConjugacyData {
        dpsi_min: dmin,
        dpsi_max: dmax,
        ..data
    })
}

/// Residual report of the conjugacy pipeline on one leaf family.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub semi_conjugacy_sup: f64,
    pub h_to_identity_sup: f64,
    pub rho_to_identity_sup: f64,
    pub dpsi_min: f64,
    pub dpsi_max: f64,
    pub eq41_ok: bool,
}

/// Compute `rho = h^{-1} . g . h . f^{-1}` leafwise and measure the
/// semi-conjugacy identity `h . rho . f = g . h` (structurally an
/// inversion residual) together with the distance of `rho` and `h`
/// to the identity.
pub fn build_rho_and_residual(
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    data: &LeafConjugacyData,
    delta: f64,
    sample_count: usize,
) -> Result<ResidualReport> {
    let l = data.h1.source_length;
    let lp = data.h1.target_length;
    let mut semi = 0.0f64;
    let mut h_id = 0.0f64;
    let mut rho_id = 0.0f64;
    for i in 0..sample_count {
        let t = l * i as f64 / sample_count as f64;
        let x = data.source.point_at(t)?;
        // h to identity.
        let hx = data.h_point(t)?;
        h_id = h_id.max(chart::dist(&x, &hx)?);
        // rho(x) = h^{-1}(g(h(f^{-1}(x)))).
        let fx_inv = f.inverse(&x)?;
        let ty = data.source.nearest_param(&fx_inv)?;
        let hy = data.h_point(ty)?;
        let z = g.forward(&hy)?;
        let tz = data.target.nearest_param(&z)?;
        // Unwrapped target parameter near psi(ty).
        let t_rho = data.psi_inv(tz, ty);
        let rho_x = data.source.point_at(t_rho.rem_euclid(l))?;
        // Distance of rho to the identity along the leaf.
        let mut dp = (t_rho - t).rem_euclid(l);
        if dp > l / 2.0 {
            dp = l - dp;
        }
        rho_id = rho_id.max(dp);
        if dp > delta {
            return Err(Error::violation(format!(
                "rho moved a point {dp:.3e} along the leaf (> delta)"
            )));
        }
        // Semi-conjugacy: h(rho(f(x))) vs g(h(x)).
        let fx = f.forward(&x)?;
        let t_fx = data.source.nearest_param(&fx)?;
        let rho_fx = data.psi_inv(data.target.nearest_param(&g.forward(&data.h_point(t)?)?)?, t_fx);
        let lhs = data.h_point(rho_fx.rem_euclid(l))?;
        let rhs = g.forward(&data.h_point(t)?)?;
        semi = semi.max(chart::dist(&lhs, &rhs)?);
        let _ = (rho_x, lp);
    }
    Ok(ResidualReport {
        semi_conjugacy_sup: semi,
        h_to_identity_sup: h_id,
        rho_to_identity_sup: rho_id,
        dpsi_min: data.dpsi_min,
        dpsi_max: data.dpsi_max,
        eq41_ok: data.h1.eq41_ok,
    })
}

/// Verdict of the injectivity probe.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum InjectivityVerdict {
    /// No collision found and the plaque-expansivity verdict holds.
    Conjugacy,
    /// Near-collision between points on distinct center plaques.
    CollisionWitness { x: [f64; 3], y: [f64; 3] },
    /// Resolution-limited outcome.
    Inconclusive { reason: String },
}

/// Search the sampled map for near-collisions `h(x) ~ h(y)` with `y`
/// outside the `3 delta` center plaque of `x`; combined with the
/// plaque-expansivity verdict this yields the leaf-conjugacy status.
pub fn injectivity_probe(
    center: &LineField,
    samples: &[(ChartPoint, ChartPoint)],
    delta: f64,
    plaque_expansive: Option<bool>,
) -> Result<InjectivityVerdict> {
    for (i, (x, hx)) in samples.iter().enumerate() {
        for (y, hy) in samples.iter().skip(i + 1) {
            if chart::dist(hx, hy)? >= delta / 10.0 {
                continue;
            }
            // Collision candidate: is y on the 3 delta center plaque
            // of x?
            let arc = integrate_leaf(center, x, 3.0 * delta, (delta / 4.0).min(1e-2))?;
            let t = arc.nearest_param(y)?;
            let on_plaque = chart::dist(&arc.point_at(t)?, y)? < delta / 10.0;
            if !on_plaque {
                return Ok(InjectivityVerdict::CollisionWitness {
                    x: x.coords,
                    y: y.coords,
                });
            }
        }
    }
    match plaque_expansive {
        Some(true) => Ok(InjectivityVerdict::Conjugacy),
        Some(false) => Ok(InjectivityVerdict::Inconclusive {
            reason: "no collision found, but plaque expansivity is not established".into(),
        }),
        None => Ok(InjectivityVerdict::Inconclusive {
            reason: "no collision found; plaque-expansivity verdict missing".into(),
        }),
    }
}

/// Full leaf-conjugacy pipeline on one invariant closed leaf.
pub struct LeafConjugacyOutcome {
    pub continuation: Continuation,
    pub data: LeafConjugacyData,
    pub report: ResidualReport,
}

#[allow(clippy::too_many_arguments)]
pub fn leaf_conjugacy_pipeline(
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    frame: &TubularFrame,
    cascade: &RateReport,
    grid: StripGrid,
    tol: f64,
    samples_per_window: usize,
    residual_samples: usize,
) -> Result<LeafConjugacyOutcome> {
    let cu = StripAssembly::new(StripKind::Cu, f, g, frame, cascade, grid)?;
    let cs = StripAssembly::new(StripKind::Cs, f, g, frame, cascade, grid)?;
    let (cu_section, cu_certificate) = crate::graph_transform::iterate_to_fixed_point(&cu, tol, 400)?;
    let (cs_section, cs_certificate) = crate::graph_transform::iterate_to_fixed_point(&cs, tol, 400)?;
    let continuation = continuation_leaf(f, g, frame, cascade, grid, tol)?;
    let sample_count =
        ((frame.length / cascade.delta3 * samples_per_window as f64).ceil() as usize).max(64);
    let h1 = build_h1(
        f,
        g,
        &cu,
        &cu_section,
        &cs,
        &cs_section,
        &continuation.leaf,
        sample_count,
    )?;
    let source = closed_copy(&frame.leaf)?;
    let data = smooth_to_h(&source, &continuation.leaf, h1, cascade.delta3)?;
    let report = build_rho_and_residual(f, g, &data, cascade.delta, residual_samples)?;
    let _ = (cu_certificate, cs_certificate);
    Ok(LeafConjugacyOutcome {
        continuation,
        data,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{normalize, IntMat2};
    use crate::cones::{derive_scale_cascade, estimate_rates};
    use crate::graph_transform::build_tubular_frame;
    use crate::systems::{make_suspension_time1, perturb, PerturbationKind};

    fn a() -> IntMat2 {
        IntMat2::cat_map()
    }

    fn synthetic_h1(n: usize, l: f64, f: impl Fn(f64) -> f64) -> H1Data {
        let params: Vec<f64> = (0..n).map(|i| l * i as f64 / n as f64).collect();
        let psi1: Vec<f64> = params.iter().map(|&t| f(t)).collect();
        H1Data {
            params,
            psi1,
            source_length: l,
            target_length: l,
            sup_identity_distance: 0.0,
            equivariance_sup: 0.0,
            eq41_ok: true,
        }
    }

    fn dummy_arc(sys: &DynamicalSystem) -> LeafArc {
        let field = LineField::invariant(sys, Bundle::Center).unwrap();
        let x = normalize([0.0, 0.0, 0.25], &sys.manifold).unwrap();
        integrate_leaf(&field, &x, 1.05, 5e-3).unwrap()
    }

    #[test]
    fn smoothing_identity_stays_identity() {
        let f = make_suspension_time1(a()).unwrap();
        let arc = dummy_arc(&f);
        let d3 = 1e-3;
        let h1 = synthetic_h1(40_000, 1.0, |t| t);
        let data = smooth_to_h(&arc, &arc, h1, d3).unwrap();
        for t in [0.1, 0.37, 0.5, 0.93] {
            assert!((data.psi(t) - t).abs() < 1e-12);
            assert!((data.dpsi(t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_averages_out_window_period_oscillation() {
        let f = make_suspension_time1(a()).unwrap();
        let arc = dummy_arc(&f);
        let d3 = 1e-3;
        let h1 = synthetic_h1(80_000, 1.0, |t| {
            t + 0.1 * d3 * (std::f64::consts::TAU * t / d3).sin()
        });
        let data = smooth_to_h(&arc, &arc, h1, d3).unwrap();
        for t in [0.2, 0.444, 0.71] {
            // The oscillation has period exactly delta3: the moving
            // average and the two-point derivative both cancel it.
            assert!((data.psi(t) - t).abs() < 1e-6, "psi({t}) = {}", data.psi(t));
            assert!((data.dpsi(t) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dpsi_matches_central_differences_of_psi() {
        let f = make_suspension_time1(a()).unwrap();
        let arc = dummy_arc(&f);
        let d3 = 1e-3;
        let h1 = synthetic_h1(60_000, 1.0, |t| t + 0.2 * d3 * (std::f64::consts::TAU * t).sin());
        let data = smooth_to_h(&arc, &arc, h1, d3).unwrap();
        let h = 1e-5;
        for t in [0.15, 0.5, 0.83] {
            let fd = (data.psi(t + h) - data.psi(t - h)) / (2.0 * h);
            assert!(
                (data.dpsi(t) - fd).abs() < 1e-6,
                "dpsi {} vs fd {}",
                data.dpsi(t),
                fd
            );
        }
    }

    #[test]
    fn derivative_bound_violation_is_detected() {
        let f = make_suspension_time1(a()).unwrap();
        let arc = dummy_arc(&f);
        let d3 = 1e-3;
        // Slope 3 violates (1/2, 2).
        let h1 = synthetic_h1(40_000, 1.0, |t| 3.0 * t);
        assert!(matches!(
            smooth_to_h(&arc, &arc, h1, d3),
            Err(Error::ModelViolation(_))
        ));
    }

    #[test]
    fn degenerate_pair_gives_identity_conjugacy() {
        let f = make_suspension_time1(a()).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.1, rates, &f, &f, 6).unwrap();
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.0, 0.0, 0.25], &f.manifold).unwrap();
        let leaf = integrate_leaf(&cfield, &x, 1.4, 5e-3).unwrap();
        let frame = build_tubular_frame(&f, &leaf, &cascade).unwrap();
        let grid = StripGrid {
            center_count: 64,
            trans_count: 7,
            estimator_depth: 40,
        };
        let out = leaf_conjugacy_pipeline(&f, &f, &frame, &cascade, grid, 1e-10, 20, 64).unwrap();
        assert!(
            out.data.h1.sup_identity_distance < 1e-9,
            "h1 moved {:.3e}",
            out.data.h1.sup_identity_distance
        );
        assert!(out.report.h_to_identity_sup < 1e-8);
        assert!(out.report.rho_to_identity_sup < 1e-8);
        assert!(out.report.semi_conjugacy_sup < 1e-8);
        assert!(out.report.dpsi_min > 0.5 && out.report.dpsi_max < 2.0);
    }

    #[test]
    fn perturbed_pair_conjugacy_residuals() {
        let f = make_suspension_time1(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 1e-4).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.1, rates, &f, &g, 8).unwrap();
        assert!(cascade.accepted);
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.0, 0.0, 0.25], &f.manifold).unwrap();
        let leaf = integrate_leaf(&cfield, &x, 1.4, 5e-3).unwrap();
        let frame = build_tubular_frame(&f, &leaf, &cascade).unwrap();
        let grid = StripGrid {
            center_count: 96,
            trans_count: 7,
            estimator_depth: 40,
        };
        let out = leaf_conjugacy_pipeline(&f, &g, &frame, &cascade, grid, 1e-9, 20, 64).unwrap();
        assert!(
            out.data.h1.sup_identity_distance <= 2.0 * cascade.delta3,
            "sup d(x, h1 x) = {:.3e}",
            out.data.h1.sup_identity_distance
        );
        assert!(out.data.h1.eq41_ok);
        assert!(
            out.data.h1.equivariance_sup < 2.0 * cascade.delta_prime + 1e-7,
            "equivariance {:.3e}",
            out.data.h1.equivariance_sup
        );
        assert!(out.report.semi_conjugacy_sup < 1e-8);
        assert!(out.report.h_to_identity_sup < cascade.delta);
        assert!(out.report.rho_to_identity_sup < cascade.delta);
        assert!(out.report.dpsi_min > 0.5 && out.report.dpsi_max < 2.0);
    }

    #[test]
    fn injectivity_no_collision_and_collapsed_double() {
        let f = make_suspension_time1(a()).unwrap();
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let delta = 0.05;
        // Honest samples: h = identity on scattered points.
        let mut samples = Vec::new();
        for i in 0..8 {
            let p = normalize([0.1 * i as f64, 0.07 * i as f64, 0.3], &f.manifold).unwrap();
            samples.push((p, p));
        }
        let v = injectivity_probe(&cfield, &samples, delta, Some(true)).unwrap();
        assert!(matches!(v, InjectivityVerdict::Conjugacy));

        // Collapsed double: two points on distinct center leaves with
        // the same image.
        let x = normalize([0.1, 0.2, 0.3], &f.manifold).unwrap();
        let y = normalize([0.4, 0.7, 0.3], &f.manifold).unwrap();
        let hx = normalize([0.25, 0.45, 0.3], &f.manifold).unwrap();
        let v = injectivity_probe(&cfield, &[(x, hx), (y, hx)], delta, Some(true)).unwrap();
        assert!(matches!(v, InjectivityVerdict::CollisionWitness { .. }));
    }

    #[test]
    fn residual_report_serialization_fields() {
        let rep = ResidualReport {
            semi_conjugacy_sup: 0.0,
            h_to_identity_sup: 0.0,
            rho_to_identity_sup: 0.0,
            dpsi_min: 1.0,
            dpsi_max: 1.0,
            eq41_ok: true,
        };
        let v = serde_json::to_value(&rep).unwrap();
        for key in [
            "semi_conjugacy_sup",
            "h_to_identity_sup",
            "rho_to_identity_sup",
            "dpsi_min",
            "dpsi_max",
            "eq41_ok",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
