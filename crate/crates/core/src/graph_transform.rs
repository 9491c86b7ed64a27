//! Graph-transform continuation of normally hyperbolic center leaves:
//! tubular coordinates along a center leaf, cu- and cs-strip sections,
//! the contraction step, convergence to the limit section, and the
//! continuation leaf with its tangency certificate.
//!
//! Sections over a strip store scalar transverse offsets with the
//! structural identity `projection . section = id`: a cu-section
//! assigns to each point of the unstable strip of the base leaf a
//! stable offset along the (partner map's) stable plaque through it,
//! and dually for cs-sections.

use nalgebra::Vector3;
use serde::Serialize;

use crate::chart::{self, chart_diff_with_deck, ChartPoint, LocalChart};
use crate::cones::{Bundle, BundleEstimator, RateReport};
use crate::error::{Error, Result};
use crate::leaves::{integrate_leaf, local_intersection_coords, LeafArc, LineField, Plaque};
use crate::systems::DynamicalSystem;

/// Find the closure parameter of a leaf arc: the first parameter past
/// `floor` at which the arc returns to its seed with matching tangent.
pub fn closure_param(arc: &LeafArc, tol: f64, floor: f64) -> Result<Option<f64>> {
    let seed = &arc.points[arc.seed_index];
    let seed_tan = arc.tangents[arc.seed_index];
    let mut i = arc.seed_index + 1;
    while i < arc.len() {
        if arc.params[i] > floor && chart::dist(&arc.points[i], seed)? < 10.0 * tol {
            // Refine around this sample.
            let t = arc.nearest_param_in(seed, arc.params[i - 1], arc.params[i + 1].min(arc.param_end()))?;
            let p = arc.point_at(t)?;
            if chart::dist(&p, seed)? < tol {
                let tan = arc.tangent_at(t)?;
                if tan.dot(&seed_tan) > 0.999 {
                    return Ok(Some(t));
                }
            }
            // Near-return without closure: skip past it.
            while i < arc.len() && chart::dist(&arc.points[i], seed)? < 10.0 * tol {
                i += 1;
            }
        }
        i += 1;
    }
    Ok(None)
}

impl LeafArc {
    /// Nearest parameter to `q` restricted to a window.
    pub fn nearest_param_in(&self, q: &ChartPoint, lo: f64, hi: f64) -> Result<f64> {
        let (mut lo, mut hi) = (lo.max(self.param_start()), hi.min(self.param_end()));
        for _ in 0..70 {
            let m1 = lo + (hi - lo) * 0.381966011250105;
            let m2 = hi - (hi - lo) * 0.381966011250105;
            let d1 = chart::dist(&self.point_at(m1)?, q)?;
            let d2 = chart::dist(&self.point_at(m2)?, q)?;
            if d1 < d2 {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Arc-length tubular coordinates along a center leaf: per-sample
/// orthonormal transverse frames, winding data for compact leaves.
#[derive(Debug, Clone)]
pub struct TubularFrame {
    /// One period of the leaf for closed leaves, the whole arc else.
    pub leaf: LeafArc,
    pub closed: bool,
    /// Period for closed leaves, parameter span otherwise.
    pub length: f64,
    /// Orthonormalized (stable-ish, unstable-ish) frame per sample.
    pub frames: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Whether the map preserves the center orientation along the leaf.
    pub orientation_preserved: bool,
    /// Largest frame mismatch at the closure point.
    pub closure_frame_residual: f64,
}

impl TubularFrame {
    /// Leaf parameter wrapped into the fundamental window.
    pub fn wrap(&self, t: f64) -> f64 {
        if self.closed {
            let lo = self.leaf.param_start();
            lo + (t - lo).rem_euclid(self.length)
        } else {
            t.clamp(self.leaf.param_start(), self.leaf.param_end())
        }
    }

    /// Signed wrapped difference `a - b` of leaf parameters.
    pub fn param_diff(&self, a: f64, b: f64) -> f64 {
        if self.closed {
            let mut d = (a - b).rem_euclid(self.length);
            if d > self.length / 2.0 {
                d -= self.length;
            }
            d
        } else {
            a - b
        }
    }
}

/// Build the arc-length tubular frame of a center leaf of `f`.
///
/// The guard rejects tubes that would self-overlap at scale `delta`:
/// points of the leaf at parameter distance greater than `6 delta`
/// must stay `delta` apart in the manifold.
pub fn build_tubular_frame(
    f: &DynamicalSystem,
    leaf: &LeafArc,
    rates: &RateReport,
) -> Result<TubularFrame> {
    let delta = rates.delta;
    let closure = closure_param(leaf, 1e-7, 4.0 * rates.delta3)?;
    let (leaf, closed, length) = match closure {
        Some(period) => {
            // Truncate to one period.
            let mut pts = Vec::new();
            let mut tans = Vec::new();
            let mut pars = Vec::new();
            for i in 0..leaf.len() {
                if leaf.params[i] >= 0.0 && leaf.params[i] < period {
                    pts.push(leaf.points[i]);
                    tans.push(leaf.tangents[i]);
                    pars.push(leaf.params[i]);
                }
            }
            // Append the closure sample so interpolation covers the
            // whole period.
            pts.push(pts[0]);
            tans.push(tans[0]);
            pars.push(period);
            (
                LeafArc {
                    sigma: leaf.sigma,
                    points: pts,
                    tangents: tans,
                    params: pars,
                    seed_index: 0,
                    truncated: false,
                },
                true,
                period,
            )
        }
        None => (leaf.clone(), false, leaf.length()),
    };

    // Tube-overlap guard.
    for i in 0..leaf.len() {
        for j in (i + 1)..leaf.len() {
            let mut dp = leaf.params[j] - leaf.params[i];
            if closed {
                dp = dp.min(length - dp);
            }
            if dp > 6.0 * delta && chart::dist(&leaf.points[i], &leaf.points[j])? < delta {
                return Err(Error::TubeOverlap(format!(
                    "leaf returns within {delta:.3e} of itself at parameter distance {dp:.3e}"
                )));
            }
        }
    }

    let est = BundleEstimator::default();
    let mut frames = Vec::with_capacity(leaf.len());
    for i in 0..leaf.len() {
        let p = &leaf.points[i];
        let tangent = leaf.tangents[i];
        let (e_s, _) = est.stable(f, p)?;
        let (e_u, _) = est.unstable(f, p)?;
        // Orthonormalize the transverse frame against the tangent.
        let s_dir = (e_s - tangent * e_s.dot(&tangent)).normalize();
        let mut u_dir = e_u - tangent * e_u.dot(&tangent);
        u_dir = (u_dir - s_dir * u_dir.dot(&s_dir)).normalize();
        frames.push((s_dir, u_dir));
    }

    // Frame closure: compare the frame at parameter 0 with the frame
    // recomputed at the closure point.
    let closure_frame_residual = if closed {
        let end = leaf.point_at(length - 1e-9)?;
        let (e_s, _) = est.stable(f, &end)?;
        let tangent = leaf.tangent_at(length - 1e-9)?;
        let s_dir = (e_s - tangent * e_s.dot(&tangent)).normalize();
        let d = (s_dir - frames[0].0).norm().min((s_dir + frames[0].0).norm());
        if d > 1e-6 {
            return Err(Error::TubeOverlap(format!(
                "transverse frame does not close up along the leaf (residual {d:.3e})"
            )));
        }
        d
    } else {
        0.0
    };

    // Center orientation under f along the leaf.
    let x0 = &leaf.points[0];
    let j = f.jacobian(x0)?;
    let mapped_tan = (j * leaf.tangents[0]).normalize();
    let fx = f.forward(x0)?;
    let t_fx = leaf.nearest_param(&fx)?;
    let orientation_preserved = mapped_tan.dot(&leaf.tangent_at(t_fx)?) > 0.0;
    if !orientation_preserved {
        // The identification would need the double-cover bookkeeping;
        // no cataloged system reverses center orientation on an
        // invariant leaf.
        return Err(Error::TubeOverlap(
            "map reverses center orientation along the leaf; unsupported tube".into(),
        ));
    }

    Ok(TubularFrame {
        leaf,
        closed,
        length,
        frames,
        orientation_preserved,
        closure_frame_residual,
    })
}

/// Which strip family a section lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripKind {
    /// Unstable strip of `f`, sections along stable plaques of `g`,
    /// transformed by `g`.
    Cu,
    /// Stable strip of `f`, sections along unstable plaques of `g`,
    /// transformed by `g^{-1}`.
    Cs,
}

/// Grid resolution of a strip.
#[derive(Debug, Clone, Copy)]
pub struct StripGrid {
    pub center_count: usize,
    pub trans_count: usize,
    /// Pullback depth for the partner-map bundle estimations.
    pub estimator_depth: usize,
}

impl Default for StripGrid {
    fn default() -> Self {
        StripGrid {
            center_count: 192,
            trans_count: 11,
            estimator_depth: 48,
        }
    }
}

/// A section over a strip: scalar transverse offsets on the canonical
/// node grid, `values[i * trans_count + j]`.
#[derive(Debug, Clone)]
pub struct GraphSection {
    pub kind: StripKind,
    pub center_count: usize,
    pub trans_count: usize,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<f64>,
}

impl GraphSection {
    pub fn zero(kind: StripKind, m: usize, k: usize) -> GraphSection {
        GraphSection {
            kind,
            center_count: m,
            trans_count: k,
            values: vec![0.0; m * k],
            iterations: 0,
            history: Vec::new(),
        }
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.trans_count + j]
    }

    /// Sup distance in the plaque metric (offsets along shared rails).
    pub fn sup_distance(&self, other: &GraphSection) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

struct Rail {
    /// Source plaque arc through the base node (partner-map bundle).
    arc: LeafArc,
    /// Image of the rail under the step map, same index order.
    img_points: Vec<ChartPoint>,
    /// Signed arc-length along the image rail, zero at the seed image.
    img_params: Vec<f64>,
    /// Image-rail position of the projection foot.
    foot_img_param: f64,
}

impl Rail {
    /// Signed image-arc position of the image of the rail point at
    /// source offset `v`.
    fn image_param(&self, v: f64) -> Result<f64> {
        let ps = &self.arc.params;
        if v < ps[0] || v > *ps.last().unwrap() {
            return Err(Error::invalid(format!(
                "offset {v:.3e} outside the rail extent"
            )));
        }
        let i = match ps.binary_search_by(|p| p.partial_cmp(&v).unwrap()) {
            Ok(i) => i.min(ps.len() - 2),
            Err(i) => i.saturating_sub(1).min(ps.len() - 2),
        };
        let u = (v - ps[i]) / (ps[i + 1] - ps[i]);
        Ok(self.img_params[i] * (1.0 - u) + self.img_params[i + 1] * u)
    }
}

struct Stencil {
    nodes: [usize; 4],
    weights: [f64; 4],
}

/// Per-strip precomputation for the graph transform over an invariant
/// leaf: base grid, value rails, image feet, and the interpolation
/// stencils pulling scattered image data back onto the canonical grid.
pub struct StripAssembly {
    pub kind: StripKind,
    pub frame: TubularFrame,
    pub grid: StripGrid,
    pub cascade: RateReport,
    pub center_params: Vec<f64>,
    pub trans_params: Vec<f64>,
    /// Strip surface arcs through each center sample.
    surface_arcs: Vec<LeafArc>,
    base_points: Vec<ChartPoint>,
    rails: Vec<Rail>,
    stencils: Vec<Stencil>,
    rail_field: LineField,
}

fn bundle_pair(kind: StripKind) -> (Bundle, Bundle) {
    match kind {
        StripKind::Cu => (Bundle::Unstable, Bundle::Stable),
        StripKind::Cs => (Bundle::Stable, Bundle::Unstable),
    }
}

impl StripAssembly {
    /// Assemble the strip of `kind` over an `f`-invariant closed leaf
    /// for the pair `(f, g)` with an accepted cascade.
    pub fn new(
        kind: StripKind,
        f: &DynamicalSystem,
        g: &DynamicalSystem,
        frame: &TubularFrame,
        cascade: &RateReport,
        grid: StripGrid,
    ) -> Result<StripAssembly> {
        if !cascade.accepted {
            return Err(Error::invalid(
                "the scale cascade rejected this pair of systems",
            ));
        }
        if !frame.closed {
            return Err(Error::invalid(
                "strip assembly over a single tube requires a closed invariant leaf",
            ));
        }
        let m = grid.center_count;
        let k = grid.trans_count | 1; // odd
        let (base_bundle, rail_bundle) = bundle_pair(kind);
        let mut base_field = LineField::invariant(f, base_bundle)?;
        base_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);
        let mut rail_field = LineField::invariant(g, rail_bundle)?;
        rail_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);

        let delta2 = cascade.delta2;
        let delta3 = cascade.delta3;
        let step_map = |p: &ChartPoint| -> Result<ChartPoint> {
            match kind {
                StripKind::Cu => g.forward(p),
                StripKind::Cs => g.inverse(p),
            }
        };
        let jac_map = |p: &ChartPoint| -> Result<nalgebra::Matrix3<f64>> {
            match kind {
                StripKind::Cu => g.jacobian(p),
                StripKind::Cs => g.jacobian_inverse_map(p),
            }
        };

        let mut center_params = Vec::with_capacity(m);
        for i in 0..m {
            center_params.push(frame.length * i as f64 / m as f64);
        }
        let mut trans_params = Vec::with_capacity(k);
        for j in 0..k {
            trans_params.push(-delta3 + 2.0 * delta3 * j as f64 / (k - 1) as f64);
        }

        // Strip surface arcs (f-bundle) through the center samples,
        // wide enough to receive the expanded image feet.
        let kappa = cascade.kappa;
        let surface_half = (kappa * delta3 * 1.3).max(2.0 * delta3);
        let mut surface_arcs = Vec::with_capacity(m);
        for &t in &center_params {
            let p = frame.leaf.point_at(t)?;
            surface_arcs.push(integrate_leaf(
                &base_field,
                &p,
                surface_half,
                (delta3 / 2.0).min(1e-2),
            )?);
        }

        // Base nodes and value rails.
        let mut base_points = Vec::with_capacity(m * k);
        let mut rails = Vec::with_capacity(m * k);
        let rail_half = 1.6 * delta2;
        let rail_step = (delta2 / 4.0).min(1e-2);
        for i in 0..m {
            for &u in &trans_params {
                let b = surface_arcs[i].point_at(u)?;
                base_points.push(b);
                let arc = integrate_leaf(&rail_field, &b, rail_half, rail_step)?;
                // Image tabulation.
                let mut img_points = Vec::with_capacity(arc.len());
                for p in &arc.points {
                    img_points.push(step_map(p)?);
                }
                let mut img_params = vec![0.0; arc.len()];
                for r in 1..arc.len() {
                    img_params[r] =
                        img_params[r - 1] + chart::dist(&img_points[r - 1], &img_points[r])?;
                }
                let off = img_params[arc.seed_index];
                for v in img_params.iter_mut() {
                    *v -= off;
                }
                rails.push(Rail {
                    arc,
                    img_points,
                    img_params,
                    foot_img_param: 0.0,
                });
            }
        }

        let mut asm = StripAssembly {
            kind,
            frame: frame.clone(),
            grid: StripGrid {
                center_count: m,
                trans_count: k,
                estimator_depth: grid.estimator_depth,
            },
            cascade: cascade.clone(),
            center_params,
            trans_params,
            surface_arcs,
            base_points,
            rails,
            stencils: Vec::new(),
            rail_field,
        };

        // Feet: project each image rail onto the strip surface.
        let mut feet = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                let idx = i * k + j;
                let img_arc = asm.image_rail_arc(idx, &jac_map)?;
                let base_img = asm.rails[idx].img_points[asm.rails[idx].arc.seed_index];
                let t_guess = asm.frame.leaf.nearest_param(&base_img)?;
                let plaque = asm.window_plaque(t_guess)?;
                let (hit, t_foot, u_foot) =
                    local_intersection_coords(&img_arc, &plaque).map_err(|e| Error::Step {
                        message: format!("image rail missed the strip: {e}"),
                        node: (i, j),
                    })?;
                let foot_param = img_arc.nearest_param(&hit)?;
                asm.rails[idx].foot_img_param = foot_param;
                feet.push((asm.frame.wrap(t_foot), u_foot));
            }
        }

        // Canonical-grid stencils from the scattered feet mesh.
        asm.stencils = asm.build_stencils(&feet)?;
        Ok(asm)
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.grid.trans_count + j
    }

    pub fn base_point(&self, i: usize, j: usize) -> &ChartPoint {
        &self.base_points[self.idx(i, j)]
    }

    /// The image rail as an interpolable arc (tangents mapped by the
    /// step Jacobian).
    fn image_rail_arc<J>(&self, idx: usize, jac_map: &J) -> Result<LeafArc>
    where
        J: Fn(&ChartPoint) -> Result<nalgebra::Matrix3<f64>>,
    {
        let rail = &self.rails[idx];
        let mut tangents = Vec::with_capacity(rail.arc.len());
        for (p, t) in rail.arc.points.iter().zip(rail.arc.tangents.iter()) {
            let j = jac_map(p)?;
            tangents.push((j * *t).normalize());
        }
        Ok(LeafArc {
            sigma: rail.arc.sigma,
            points: rail.img_points.clone(),
            tangents,
            params: rail.img_params.clone(),
            seed_index: rail.arc.seed_index,
            truncated: false,
        })
    }

    /// Local plaque of the strip surface around center parameter `t`.
    pub fn window_plaque(&self, t: f64) -> Result<Plaque> {
        let m = self.grid.center_count;
        let spacing = self.frame.length / m as f64;
        let i0 = ((self.frame.wrap(t) / spacing).round() as isize).rem_euclid(m as isize) as usize;
        let halfwin = 4isize;
        let anchor = self.surface_arcs[i0].points[self.surface_arcs[i0].seed_index];
        let chartp = LocalChart::new(anchor);
        let mut grid = Vec::new();
        let mut base_params = Vec::new();
        let trans_params: Vec<f64> = {
            // Use the full surface extent for projections.
            let a = &self.surface_arcs[i0];
            let n = 13;
            (0..n)
                .map(|r| a.param_start() + (a.param_end() - a.param_start()) * r as f64 / (n - 1) as f64)
                .collect()
        };
        for w in -halfwin..=halfwin {
            let ii = (i0 as isize + w).rem_euclid(m as isize) as usize;
            if !self.frame.closed && (i0 as isize + w) != ii as isize {
                continue;
            }
            let arc = &self.surface_arcs[ii];
            let mut row = Vec::with_capacity(trans_params.len());
            for &u in &trans_params {
                row.push(chartp.to_local(&arc.point_at(u)?)?);
            }
            grid.push(row);
            base_params.push(self.center_params[i0] + w as f64 * spacing);
        }
        Ok(Plaque {
            anchor,
            grid,
            base_params,
            trans_params,
        })
    }

    fn build_stencils(&self, feet: &[(f64, f64)]) -> Result<Vec<Stencil>> {
        let m = self.grid.center_count;
        let k = self.grid.trans_count;
        let mut out = Vec::with_capacity(m * k);
        for a in 0..m {
            for b in 0..k {
                let target = (self.center_params[a], self.trans_params[b]);
                let stencil = self.locate_in_feet(feet, target).ok_or_else(|| Error::Step {
                    message: "target node not covered by the image mesh".into(),
                    node: (a, b),
                })?;
                out.push(stencil);
            }
        }
        Ok(out)
    }

    fn locate_in_feet(&self, feet: &[(f64, f64)], target: (f64, f64)) -> Option<Stencil> {
        let m = self.grid.center_count;
        let k = self.grid.trans_count;
        // The feet mesh is a small deformation of the base grid with
        // the transverse direction expanded; search cells outward from
        // the aligned cell.
        let spacing = self.frame.length / m as f64;
        let i_guess = ((target.0 / spacing).round() as isize).rem_euclid(m as isize) as usize;
        for radius in 0..m / 2 + 1 {
            for side in [-1isize, 1] {
                let i = (i_guess as isize + side * radius as isize).rem_euclid(m as isize) as usize;
                let i1 = (i + 1) % m;
                if !self.frame.closed && i + 1 >= m {
                    continue;
                }
                for j in 0..k - 1 {
                    let q = [
                        feet[i * k + j],
                        feet[i1 * k + j],
                        feet[i1 * k + j + 1],
                        feet[i * k + j + 1],
                    ];
                    if let Some(w) = self.invert_bilinear(&q, target) {
                        return Some(Stencil {
                            nodes: [i * k + j, i1 * k + j, i1 * k + j + 1, i * k + j + 1],
                            weights: w,
                        });
                    }
                }
                if radius == 0 {
                    break;
                }
            }
        }
        None
    }

    /// Invert the bilinear map of a quad (corners in cyclic order) at
    /// `target`; returns corner weights if the point is inside.
    fn invert_bilinear(&self, q: &[(f64, f64); 4], target: (f64, f64)) -> Option<[f64; 4]> {
        // Work in wrapped center-coordinates relative to the first corner.
        let t0 = q[0].0;
        let rel = |p: (f64, f64)| (self.frame.param_diff(p.0, t0), p.1);
        let c: Vec<(f64, f64)> = q.iter().map(|p| rel(*p)).collect();
        let tg = rel(target);
        let mut a = 0.5;
        let mut b = 0.5;
        for _ in 0..40 {
            let f = |a: f64, b: f64| {
                (
                    c[0].0 * (1.0 - a) * (1.0 - b)
                        + c[1].0 * a * (1.0 - b)
                        + c[2].0 * a * b
                        + c[3].0 * (1.0 - a) * b,
                    c[0].1 * (1.0 - a) * (1.0 - b)
                        + c[1].1 * a * (1.0 - b)
                        + c[2].1 * a * b
                        + c[3].1 * (1.0 - a) * b,
                )
            };
            let (fx, fy) = f(a, b);
            let rx = tg.0 - fx;
            let ry = tg.1 - fy;
            if rx.abs() < 1e-14 && ry.abs() < 1e-14 {
                break;
            }
            let h = 1e-7;
            let (fxa, fya) = f(a + h, b);
            let (fxb, fyb) = f(a, b + h);
            let j11 = (fxa - fx) / h;
            let j21 = (fya - fy) / h;
            let j12 = (fxb - fx) / h;
            let j22 = (fyb - fy) / h;
            let det = j11 * j22 - j12 * j21;
            if det.abs() < 1e-30 {
                return None;
            }
            a += (rx * j22 - ry * j12) / det;
            b += (ry * j11 - rx * j21) / det;
            if !(-(1.0) ..=2.0).contains(&a) || !(-(1.0)..=2.0).contains(&b) {
                return None;
            }
        }
        let inside = (-1e-9..=1.0 + 1e-9).contains(&a) && (-1e-9..=1.0 + 1e-9).contains(&b);
        if !inside {
            return None;
        }
        let a = a.clamp(0.0, 1.0);
        let b = b.clamp(0.0, 1.0);
        Some([
            (1.0 - a) * (1.0 - b),
            a * (1.0 - b),
            a * b,
            (1.0 - a) * b,
        ])
    }

    /// The manifold point of a section node.
    pub fn section_point(&self, section: &GraphSection, i: usize, j: usize) -> Result<ChartPoint> {
        let idx = self.idx(i, j);
        let v = section.values[idx];
        self.rails[idx].arc.point_at(v)
    }

    /// Section point at arbitrary strip coordinates (bilinear value
    /// interpolation, rail integrated on demand).
    pub fn section_point_at(
        &self,
        section: &GraphSection,
        t: f64,
        u: f64,
    ) -> Result<ChartPoint> {
        let m = self.grid.center_count;
        let k = self.grid.trans_count;
        let spacing = self.frame.length / m as f64;
        let tw = self.frame.wrap(t);
        let i0f = tw / spacing;
        let i0 = (i0f.floor() as usize) % m;
        let i1 = (i0 + 1) % m;
        let a = i0f - i0f.floor();
        let ju = (u - self.trans_params[0]) / (self.trans_params[1] - self.trans_params[0]);
        let j0 = (ju.floor() as isize).clamp(0, k as isize - 2) as usize;
        let b = (ju - j0 as f64).clamp(0.0, 1.0);
        let v = section.value(i0, j0) * (1.0 - a) * (1.0 - b)
            + section.value(i1, j0) * a * (1.0 - b)
            + section.value(i1, j0 + 1) * a * b
            + section.value(i0, j0 + 1) * (1.0 - a) * b;
        // Base point on the strip surface.
        let p0 = self.surface_arcs[i0].point_at(u)?;
        let p1 = self.surface_arcs[i1].point_at(u)?;
        let chartp = LocalChart::new(p0);
        let d = chartp.to_local(&p1)?;
        let (base, _) = chartp.from_local(d * a)?;
        if v == 0.0 {
            return Ok(base);
        }
        let arc = integrate_leaf(
            &self.rail_field,
            &base,
            v.abs() * 1.5 + 1e-6,
            (self.cascade.delta2 / 4.0).min(1e-2),
        )?;
        arc.point_at(v)
    }
}

/// Outcome statistics of one transform step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// `d(xi0, g xi)` after the step.
    pub dist_to_zero: f64,
    /// `d(g xi, xi)`: how far the step moved the section.
    pub moved: f64,
}

/// One graph-transform step: push the section through the partner map,
/// project along the value plaques back onto the strip and
/// re-interpolate onto the canonical grid.
pub fn transform_step(
    assembly: &StripAssembly,
    section: &GraphSection,
) -> Result<(GraphSection, StepStats)> {
    let m = assembly.grid.center_count;
    let k = assembly.grid.trans_count;
    let delta2 = assembly.cascade.delta2;
    let delta3 = assembly.cascade.delta3;
    let dist0 = section.sup_abs();
    if dist0 >= delta3 {
        return Err(Error::Step {
            message: format!("section is not admissible: d(xi, xi0) = {dist0:.3e} >= delta3"),
            node: (0, 0),
        });
    }
    // Image values at the scattered feet.
    let mut img_vals = Vec::with_capacity(m * k);
    for idx in 0..m * k {
        let rail = &assembly.rails[idx];
        let v = section.values[idx];
        let s =
            rail.image_param(v)
                .map_err(|e| Error::Step {
                    message: e.to_string(),
                    node: (idx / k, idx % k),
                })?
                - rail.foot_img_param;
        img_vals.push(s);
    }
    // Pull back onto the canonical grid.
    let mut out = GraphSection::zero(section.kind, m, k);
    for idx in 0..m * k {
        let st = &assembly.stencils[idx];
        let mut v = 0.0;
        for c in 0..4 {
            v += st.weights[c] * img_vals[st.nodes[c]];
        }
        if v.abs() > delta2 {
            return Err(Error::Step {
                message: format!("projected offset {v:.3e} left the delta2 tube"),
                node: (idx / k, idx % k),
            });
        }
        out.values[idx] = v;
    }
    out.iterations = section.iterations + 1;
    out.history = section.history.clone();
    let stats = StepStats {
        dist_to_zero: out.sup_abs(),
        moved: out.sup_distance(section),
    };
    // Numerical assertion of the step bound d(xi0, g xi) < 2 delta' +
    // lambda d(xi0, xi), with slack for interpolation noise.
    let bound = 2.0 * assembly.cascade.delta_prime + assembly.cascade.lambda * dist0;
    if stats.dist_to_zero > 1.1 * bound + 1e-10 {
        return Err(Error::violation(format!(
            "transform step exceeded the contraction bound: {:.3e} > {:.3e}",
            stats.dist_to_zero, bound
        )));
    }
    Ok((out, stats))
}

/// Convergence certificate of the fixed-point iteration.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceCertificate {
    pub delta_prime: f64,
    pub lambda: f64,
    pub history: Vec<f64>,
    pub bound_ok: bool,
    pub fixed_point_residual: f64,
}

/// Iterate the transform from the zero section until successive
/// sup-distances drop below `tol`; the certificate records the history,
/// its domination by `2 delta' lambda^n` (10% slack plus a numerical
/// floor) and the fixed-point residual of one extra step.
pub fn iterate_to_fixed_point(
    assembly: &StripAssembly,
    tol: f64,
    max_iter: usize,
) -> Result<(GraphSection, ConvergenceCertificate)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut section = GraphSection::zero(
        assembly.kind,
        assembly.grid.center_count,
        assembly.grid.trans_count,
    );
    let mut history = Vec::new();
    let delta_prime = assembly.cascade.delta_prime;
    let lambda = assembly.cascade.lambda;
    let mut converged = false;
    for _ in 0..max_iter {
        let (next, stats) = transform_step(assembly, &section)?;
        history.push(stats.moved);
        section = next;
        if stats.moved < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            message: "graph transform exhausted its iteration budget".into(),
            point: [0.0; 3],
            residual: *history.last().unwrap_or(&f64::NAN),
        });
    }
    // Domination check.
    let mut bound_ok = true;
    for (n, d) in history.iter().enumerate() {
        let bound = 2.0 * delta_prime * lambda.powi(n as i32);
        if *d > 1.1 * bound + 1e-10 {
            bound_ok = false;
        }
    }
    if !bound_ok {
        return Err(Error::violation(
            "convergence history violates the geometric bound by more than 10%",
        ));
    }
    // Total bound d(xi0, xi_inf) <= 2 delta'/(1 - lambda) < delta3/2.
    let total = section.sup_abs();
    let total_bound = 2.0 * delta_prime / (1.0 - lambda);
    if total > 1.1 * total_bound + 1e-10 || total >= assembly.cascade.delta3 / 2.0 {
        return Err(Error::violation(format!(
            "limit section distance {total:.3e} violates the geometric total bound {total_bound:.3e}"
        )));
    }
    let (_, stats) = transform_step(assembly, &section)?;
    let fixed_point_residual = stats.moved;
    if fixed_point_residual > tol {
        return Err(Error::Convergence {
            message: "fixed point moved by more than the tolerance under one extra step".into(),
            point: [0.0; 3],
            residual: fixed_point_residual,
        });
    }
    section.history = history.clone();
    Ok((
        section,
        ConvergenceCertificate {
            delta_prime,
            lambda,
            history,
            bound_ok,
            fixed_point_residual,
        },
    ))
}

/// Continuation of an invariant center leaf: both limit sections, the
/// fiberwise intersection of their graphs, and the quality reports.
pub struct Continuation {
    pub leaf: LeafArc,
    pub cu_section: GraphSection,
    pub cs_section: GraphSection,
    pub cu_certificate: ConvergenceCertificate,
    pub cs_certificate: ConvergenceCertificate,
    /// Max angle between continuation chords and the estimated center
    /// direction of the partner system.
    pub tangency_max_angle: f64,
    pub hausdorff_to_base: f64,
    /// Hausdorff distance between the image of the continuation under
    /// the partner map and the continuation of the mapped leaf.
    pub equivariance_residual: f64,
}

/// Run the full continuation machinery over an `f`-invariant closed
/// center leaf.
pub fn continuation_leaf(
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    frame: &TubularFrame,
    cascade: &RateReport,
    grid: StripGrid,
    tol: f64,
) -> Result<Continuation> {
    let cu = StripAssembly::new(StripKind::Cu, f, g, frame, cascade, grid)?;
    let cs = StripAssembly::new(StripKind::Cs, f, g, frame, cascade, grid)?;
    let (cu_section, cu_certificate) = iterate_to_fixed_point(&cu, tol, 400)?;
    let (cs_section, cs_certificate) = iterate_to_fixed_point(&cs, tol, 400)?;
    let leaf = intersect_limit_graphs(&cu, &cu_section, &cs, &cs_section)?;

    // Tangency: continuation chords against the partner center bundle.
    let est = BundleEstimator::default();
    let mut tangency = 0.0f64;
    for i in 0..leaf.len() - 1 {
        let chartp = LocalChart::new(leaf.points[i]);
        let chord = chartp.to_local(&leaf.points[i + 1])?;
        let (mid, _) = chartp.from_local(chord / 2.0)?;
        let (ec, _) = est.center(g, &mid)?;
        let ang = (chord.normalize().dot(&ec)).abs().min(1.0).acos();
        tangency = tangency.max(ang);
    }

    let hausdorff_to_base = polyline_hausdorff(&closed_copy(&frame.leaf)?, &leaf)?;

    // Equivariance: g(L') against (fL)' = L' for an invariant leaf.
    let mut equiv = 0.0f64;
    for p in &leaf.points {
        let gp = g.forward(p)?;
        let t = leaf.nearest_param(&gp)?;
        equiv = equiv.max(chart::dist(&leaf.point_at(t)?, &gp)?);
    }

    Ok(Continuation {
        leaf,
        cu_section,
        cs_section,
        cu_certificate,
        cs_certificate,
        tangency_max_angle: tangency,
        hausdorff_to_base,
        equivariance_residual: equiv,
    })
}

/// A copy of a one-period arc with the closing segment appended (a
/// no-op when the endpoints already coincide).
pub fn closed_copy(arc: &LeafArc) -> Result<LeafArc> {
    if chart::dist(&arc.points[0], arc.points.last().unwrap())? < 1e-9 {
        return Ok(arc.clone());
    }
    let mut points = arc.points.clone();
    let mut params = arc.params.clone();
    let mut tangents = arc.tangents.clone();
    let closing = chart::dist(points.last().unwrap(), &points[0])?;
    points.push(points[0]);
    params.push(params[params.len() - 1] + closing.max(1e-12));
    tangents.push(tangents[0]);
    Ok(LeafArc {
        sigma: arc.sigma,
        points,
        tangents,
        params,
        seed_index: arc.seed_index,
        truncated: arc.truncated,
    })
}

pub fn polyline_hausdorff(a: &LeafArc, b: &LeafArc) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in &a.points {
        let t = b.nearest_param(p)?;
        worst = worst.max(chart::dist(&b.point_at(t)?, p)?);
    }
    for p in &b.points {
        let t = a.nearest_param(p)?;
        worst = worst.max(chart::dist(&a.point_at(t)?, p)?);
    }
    Ok(worst)
}

/// Fiberwise intersection of the two limit graphs over the center
/// parameter: per fiber, the cs-offset curve meets the cu-offset curve
/// in the transverse disc.
fn intersect_limit_graphs(
    cu: &StripAssembly,
    cu_section: &GraphSection,
    cs: &StripAssembly,
    cs_section: &GraphSection,
) -> Result<LeafArc> {
    let m = cu.grid.center_count;
    let mut points = Vec::with_capacity(m);
    for i in 0..m {
        let t0 = cu.center_params[i];
        let anchor = cu.frame.leaf.point_at(t0)?;
        let chartp = LocalChart::new(anchor);
        // Unknowns: (u on the cu-strip, s on the cs-strip, t2 on the
        // cs-strip); solve P_cu(t0, u) = P_cs(t2, s).
        let mut u = 0.0f64;
        let mut s = 0.0f64;
        let mut t2 = t0;
        let eval = |u: f64, s: f64, t2: f64| -> Result<Vector3<f64>> {
            let pcu = cu.section_point_at(cu_section, t0, u)?;
            let pcs = cs.section_point_at(cs_section, t2, s)?;
            Ok(chartp.to_local(&pcu)? - chartp.to_local(&pcs)?)
        };
        let mut r = eval(u, s, t2)?;
        for _ in 0..30 {
            if r.norm() < 1e-12 {
                break;
            }
            let h = 1e-7;
            let ju = (eval(u + h, s, t2)? - r) / h;
            let js = (eval(u, s + h, t2)? - r) / h;
            let jt = (eval(u, s, t2 + h)? - r) / h;
            let jac = nalgebra::Matrix3::from_columns(&[ju, js, jt]);
            let step = jac
                .lu()
                .solve(&(-r))
                .ok_or_else(|| Error::NoIntersection("singular fiber system".into()))?;
            u += step.x;
            s += step.y;
            t2 += step.z;
            let lim = cu.cascade.delta2;
            if u.abs() > lim || s.abs() > lim {
                return Err(Error::NoIntersection(format!(
                    "fiber solution left the tube at center parameter {t0}"
                )));
            }
            r = eval(u, s, t2)?;
        }
        if r.norm() > 1e-9 {
            return Err(Error::NoIntersection(format!(
                "fiber intersection residual {:.3e} at center parameter {t0}",
                r.norm()
            )));
        }
        let pcu = cu.section_point_at(cu_section, t0, u)?;
        let pcs = cs.section_point_at(cs_section, t2, s)?;
        let half = chartp.to_local(&pcu)? * 0.5 + chartp.to_local(&pcs)? * 0.5;
        points.push(chartp.from_local(half)?.0);
    }
    // Close the polyline: parameters by chord accumulation, with the
    // first sample appended so interpolation covers the closing span.
    let mut params = vec![0.0];
    for i in 1..points.len() {
        let d = chart::dist(&points[i - 1], &points[i])?;
        params.push(params[i - 1] + d);
    }
    let mut tangents = Vec::with_capacity(points.len() + 1);
    for i in 0..points.len() {
        let nxt = (i + 1) % points.len();
        let chartp = LocalChart::new(points[i]);
        tangents.push(chartp.to_local(&points[nxt])?.normalize());
    }
    let closing = chart::dist(points.last().unwrap(), &points[0])?;
    let first = points[0];
    let first_tan = tangents[0];
    points.push(first);
    params.push(params[params.len() - 1] + closing.max(1e-12));
    tangents.push(first_tan);
    Ok(LeafArc {
        sigma: Some(Bundle::Center),
        points,
        tangents,
        params,
        seed_index: 0,
        truncated: false,
    })
}

/// Smooth random admissible sections and the measured contraction
/// ratios of the transform on their pairs.
pub fn measure_contraction(
    assembly: &StripAssembly,
    pairs: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = assembly.grid.center_count;
    let k = assembly.grid.trans_count;
    let amp = 0.45 * assembly.cascade.delta3;
    let mut make_section = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut s = GraphSection::zero(assembly.kind, m, k);
        // Band-limited random profile: low Fourier modes along the
        // center, affine in the transverse coordinate.
        let a: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let ph: [f64; 3] = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let slope = rng.gen_range(-0.5..0.5);
        for i in 0..m {
            let t = assembly.center_params[i] / assembly.frame.length;
            let mut v = 0.0;
            for (kk, (aa, pp)) in a.iter().zip(ph.iter()).enumerate() {
                v += aa * (std::f64::consts::TAU * (kk as f64 + 1.0) * t + pp).cos();
            }
            for j in 0..k {
                let u = assembly.trans_params[j] / assembly.cascade.delta3;
                s.values[i * k + j] = amp * (v / 3.0) * (1.0 + slope * u) / (1.0 + slope.abs());
            }
        }
        s
    };
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let s1 = make_section(&mut rng);
        let s2 = make_section(&mut rng);
        let d_before = s1.sup_distance(&s2);
        let (t1, _) = transform_step(assembly, &s1)?;
        let (t2, _) = transform_step(assembly, &s2)?;
        let d_after = t1.sup_distance(&t2);
        out.push((d_before, d_after));
    }
    Ok(out)
}

/// Continuation of a (not necessarily closed) complete center
/// immersion over a finite iterate window: returns the window of
/// continued curves, each trimmed at the parameter boundary.
pub struct ImmersionContinuation {
    /// The continued curves for n = -window..=window.
    pub curves: Vec<LeafArc>,
    pub window: i32,
    /// Parameter trim applied at each boundary of each curve.
    pub trim: f64,
}

/// Continue a complete center immersion of `f` (given as a long arc)
/// to a sequence of center curves of `g` over the iterate window, with
/// `d(f^n eta(t), gamma_n(t)) < delta` on the interior samples.
pub fn continue_immersion(
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    eta: &LeafArc,
    window: i32,
    cascade: &RateReport,
    grid: StripGrid,
    tol: f64,
) -> Result<ImmersionContinuation> {
    if window < 0 {
        return Err(Error::invalid("window must be nonnegative"));
    }
    // Arcs f^n(eta), reparameterized by arc length.
    let mut arcs = Vec::new();
    for n in -window..=window + 1 {
        arcs.push(map_arc(f, eta, n)?);
    }
    // Open-chain graph transform in both families.
    let chain = ChainAssembly::new(f, g, &arcs, cascade, grid)?;
    let (cu_secs, cs_secs) = chain.iterate(tol, 400)?;
    let mut curves = Vec::new();
    let trim = chain.trim();
    for (i, _n) in (-window..=window).enumerate() {
        curves.push(chain.intersect(i, &cu_secs[i], &cs_secs[i])?);
    }
    Ok(ImmersionContinuation {
        curves,
        window,
        trim,
    })
}

/// The image arc `f^n(eta)` reparameterized by arc length.
pub fn map_arc(f: &DynamicalSystem, eta: &LeafArc, n: i32) -> Result<LeafArc> {
    let mut points = Vec::with_capacity(eta.len());
    let mut tangents = Vec::with_capacity(eta.len());
    for (p, t) in eta.points.iter().zip(eta.tangents.iter()) {
        let q = f.iterate(p, n)?;
        let mut j = nalgebra::Matrix3::identity();
        let mut x = *p;
        for _ in 0..n.unsigned_abs() {
            let step = if n >= 0 {
                f.jacobian(&x)?
            } else {
                f.jacobian_inverse_map(&x)?
            };
            j = step * j;
            x = if n >= 0 { f.forward(&x)? } else { f.inverse(&x)? };
        }
        points.push(q);
        tangents.push((j * *t).normalize());
    }
    let mut params = vec![0.0];
    for i in 1..points.len() {
        params.push(params[i - 1] + chart::dist(&points[i - 1], &points[i])?);
    }
    // Shift so the seed keeps parameter 0.
    let off = params[eta.seed_index];
    for p in params.iter_mut() {
        *p -= off;
    }
    Ok(LeafArc {
        sigma: eta.sigma,
        points,
        tangents,
        params,
        seed_index: eta.seed_index,
        truncated: eta.truncated,
    })
}

/// Open-chain assembly: strips over consecutive image arcs, sections
/// fed forward (cu, by `g`) and backward (cs, by `g^{-1}`), boundaries
/// held at the zero section. Surface rows span the whole arc while
/// nodes live on a padded interior window, so images of boundary
/// nodes stay covered by the receiving surface.
struct ChainAssembly {
    strips: Vec<OpenStrip>,
    cu_links: Vec<LinkData>,
    cs_links: Vec<LinkData>,
    cascade: RateReport,
    /// Nodes per strip along the center (interior window).
    node_count: usize,
    trans_count: usize,
    g_center: LineField,
}

const CHAIN_PAD: usize = 4;

struct OpenStrip {
    arc: LeafArc,
    /// Full-span surface row parameters (length m).
    row_params: Vec<f64>,
    /// Node center parameters: rows CHAIN_PAD .. m-1-CHAIN_PAD.
    node_params: Vec<f64>,
    trans_params: Vec<f64>,
    cu_surface: Vec<LeafArc>,
    cs_surface: Vec<LeafArc>,
    cu_rails: Vec<Rail>,
    cs_rails: Vec<Rail>,
}

struct LinkData {
    /// Per target node: stencil into the feeding strip's feet, or
    /// None outside coverage (held at the zero section).
    stencils: Vec<Option<Stencil>>,
}

impl ChainAssembly {
    fn new(
        f: &DynamicalSystem,
        g: &DynamicalSystem,
        arcs: &[LeafArc],
        cascade: &RateReport,
        grid: StripGrid,
    ) -> Result<ChainAssembly> {
        if !cascade.accepted {
            return Err(Error::invalid(
                "the scale cascade rejected this pair of systems",
            ));
        }
        let mut u_field = LineField::invariant(f, Bundle::Unstable)?;
        u_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);
        let mut s_field = LineField::invariant(f, Bundle::Stable)?;
        s_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);
        let mut gs_field = LineField::invariant(g, Bundle::Stable)?;
        gs_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);
        let mut gu_field = LineField::invariant(g, Bundle::Unstable)?;
        gu_field.estimator = BundleEstimator::new(grid.estimator_depth, 1e-8);
        let mut g_center = LineField::invariant(g, Bundle::Center)?;
        g_center.estimator = BundleEstimator::new(grid.estimator_depth.max(64), 1e-7);

        let m = grid.center_count.max(2 * CHAIN_PAD + 8);
        let k = grid.trans_count | 1;
        let delta2 = cascade.delta2;
        let delta3 = cascade.delta3;
        let mut strips = Vec::with_capacity(arcs.len());
        for arc in arcs {
            let mut row_params = Vec::with_capacity(m);
            for i in 0..m {
                row_params.push(
                    arc.param_start()
                        + (arc.param_end() - arc.param_start()) * i as f64 / (m - 1) as f64,
                );
            }
            let node_params: Vec<f64> = row_params[CHAIN_PAD..m - CHAIN_PAD].to_vec();
            let mut trans_params = Vec::with_capacity(k);
            for j in 0..k {
                trans_params.push(-delta3 + 2.0 * delta3 * j as f64 / (k - 1) as f64);
            }
            let surf_half = (cascade.kappa * delta3 * 1.3).max(2.0 * delta3);
            let mut cu_surface = Vec::with_capacity(m);
            let mut cs_surface = Vec::with_capacity(m);
            for &t in &row_params {
                let p = arc.point_at(t)?;
                cu_surface.push(integrate_leaf(
                    &u_field,
                    &p,
                    surf_half,
                    (delta3 / 2.0).min(1e-2),
                )?);
                cs_surface.push(integrate_leaf(
                    &s_field,
                    &p,
                    surf_half,
                    (delta3 / 2.0).min(1e-2),
                )?);
            }
            let rail_half = 1.6 * delta2;
            let rail_step = (delta2 / 4.0).min(1e-2);
            let mut cu_rails = Vec::with_capacity(node_params.len() * k);
            let mut cs_rails = Vec::with_capacity(node_params.len() * k);
            for i in 0..node_params.len() {
                let row = i + CHAIN_PAD;
                for &u in &trans_params {
                    let b_cu = cu_surface[row].point_at(u)?;
                    cu_rails.push(make_rail(&gs_field, &b_cu, rail_half, rail_step, |p| {
                        g.forward(p)
                    })?);
                    let b_cs = cs_surface[row].point_at(u)?;
                    cs_rails.push(make_rail(&gu_field, &b_cs, rail_half, rail_step, |p| {
                        g.inverse(p)
                    })?);
                }
            }
            strips.push(OpenStrip {
                arc: arc.clone(),
                row_params,
                node_params,
                trans_params,
                cu_surface,
                cs_surface,
                cu_rails,
                cs_rails,
            });
        }

        let mut cu_links = Vec::new();
        let mut cs_links = Vec::new();
        for n in 0..strips.len() - 1 {
            cu_links.push(build_link(g, &mut strips, n, n + 1, true)?);
            cs_links.push(build_link(g, &mut strips, n + 1, n, false)?);
        }
        Ok(ChainAssembly {
            strips,
            cu_links,
            cs_links,
            cascade: cascade.clone(),
            node_count: m - 2 * CHAIN_PAD,
            trans_count: k,
            g_center,
        })
    }

    /// Parameter margin inside which fiber intersections are trusted.
    fn trim(&self) -> f64 {
        let s0 = &self.strips[0];
        let spacing = s0.node_params[1] - s0.node_params[0];
        6.0 * spacing
    }

    fn iterate(&self, tol: f64, max_iter: usize) -> Result<(Vec<GraphSection>, Vec<GraphSection>)> {
        let m = self.node_count;
        let k = self.trans_count;
        let n_str = self.strips.len();
        let mut cu: Vec<GraphSection> = (0..n_str)
            .map(|_| GraphSection::zero(StripKind::Cu, m, k))
            .collect();
        let mut cs: Vec<GraphSection> = (0..n_str)
            .map(|_| GraphSection::zero(StripKind::Cs, m, k))
            .collect();
        let mut converged = false;
        for _ in 0..max_iter {
            let mut moved = 0.0f64;
            let mut new_cu = cu.clone();
            for n in 0..n_str - 1 {
                let next = apply_link(
                    &self.strips[n].cu_rails,
                    &self.cu_links[n].stencils,
                    &cu[n],
                    &cu[n + 1],
                )?;
                moved = moved.max(next.sup_distance(&new_cu[n + 1]));
                new_cu[n + 1] = next;
            }
            let mut new_cs = cs.clone();
            for n in (1..n_str).rev() {
                let next = apply_link(
                    &self.strips[n].cs_rails,
                    &self.cs_links[n - 1].stencils,
                    &cs[n],
                    &cs[n - 1],
                )?;
                moved = moved.max(next.sup_distance(&new_cs[n - 1]));
                new_cs[n - 1] = next;
            }
            cu = new_cu;
            cs = new_cs;
            if moved < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Convergence {
                message: "chain transform exhausted its iteration budget".into(),
                point: [0.0; 3],
                residual: f64::NAN,
            });
        }
        Ok((cu, cs))
    }

    /// Fiber intersection of the two limit sections on strip `n`,
    /// restricted to the trimmed interior window.
    fn intersect(
        &self,
        n: usize,
        cu_sec: &GraphSection,
        cs_sec: &GraphSection,
    ) -> Result<LeafArc> {
        let strip = &self.strips[n];
        let m = self.node_count;
        let spacing = strip.node_params[1] - strip.node_params[0];
        let skip = (self.trim() / spacing).ceil() as usize;
        let mut points = Vec::new();
        for i in skip..m - skip {
            let t_i = strip.node_params[i];
            let anchor = strip.arc.point_at(t_i)?;
            let chartp = LocalChart::new(anchor);
            let eval = |u: f64, s: f64, dt: f64| -> Result<Vector3<f64>> {
                let pcu = open_section_point(strip, cu_sec, true, t_i, u)?;
                let pcs = open_section_point(strip, cs_sec, false, t_i + dt, s)?;
                Ok(chartp.to_local(&pcu)? - chartp.to_local(&pcs)?)
            };
            let mut u = 0.0;
            let mut s = 0.0;
            let mut dt = 0.0;
            let mut r = eval(u, s, dt)?;
            for _ in 0..30 {
                if r.norm() < 1e-11 {
                    break;
                }
                let h = 1e-7;
                let ju = (eval(u + h, s, dt)? - r) / h;
                let js = (eval(u, s + h, dt)? - r) / h;
                let jt = (eval(u, s, dt + h)? - r) / h;
                let jac = nalgebra::Matrix3::from_columns(&[ju, js, jt]);
                let step = jac
                    .lu()
                    .solve(&(-r))
                    .ok_or_else(|| Error::NoIntersection("singular fiber system".into()))?;
                u += step.x;
                s += step.y;
                dt += step.z;
                r = eval(u, s, dt)?;
            }
            if r.norm() > 1e-9 {
                return Err(Error::NoIntersection(format!(
                    "fiber residual {:.3e} on strip {n}",
                    r.norm()
                )));
            }
            points.push(open_section_point(strip, cu_sec, true, t_i, u)?);
        }
        let mut params = vec![0.0];
        for i in 1..points.len() {
            params.push(params[i - 1] + chart::dist(&points[i - 1], &points[i])?);
        }
        let mut tangents = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let mut dir = self.g_center.direction(p)?;
            if i > 0 {
                let (d, _) = chart_diff_with_deck(p, &points[i - 1])?;
                if dir.dot(&d) < 0.0 {
                    dir = -dir;
                }
            }
            tangents.push(dir);
        }
        let seed_index = points.len() / 2;
        Ok(LeafArc {
            sigma: Some(Bundle::Center),
            points,
            tangents,
            params,
            seed_index,
            truncated: true,
        })
    }
}

fn make_rail<F>(field: &LineField, base: &ChartPoint, half: f64, step: f64, map: F) -> Result<Rail>
where
    F: Fn(&ChartPoint) -> Result<ChartPoint>,
{
    let arc = integrate_leaf(field, base, half, step)?;
    let mut img_points = Vec::with_capacity(arc.len());
    for p in &arc.points {
        img_points.push(map(p)?);
    }
    let mut img_params = vec![0.0; arc.len()];
    for r in 1..arc.len() {
        img_params[r] = img_params[r - 1] + chart::dist(&img_points[r - 1], &img_points[r])?;
    }
    let off = img_params[arc.seed_index];
    for v in img_params.iter_mut() {
        *v -= off;
    }
    Ok(Rail {
        arc,
        img_points,
        img_params,
        foot_img_param: 0.0,
    })
}

/// Section point over an open strip at arbitrary node coordinates.
fn open_section_point(
    strip: &OpenStrip,
    section: &GraphSection,
    cu: bool,
    t: f64,
    u: f64,
) -> Result<ChartPoint> {
    let m = section.center_count;
    let k = section.trans_count;
    let t = t.clamp(strip.node_params[0], strip.node_params[m - 1]);
    let spacing = (strip.node_params[m - 1] - strip.node_params[0]) / (m - 1) as f64;
    let fi = (t - strip.node_params[0]) / spacing;
    let i0 = (fi.floor() as usize).min(m - 2);
    let a = fi - i0 as f64;
    let ju = (u - strip.trans_params[0]) / (strip.trans_params[1] - strip.trans_params[0]);
    let j0 = (ju.floor() as isize).clamp(0, k as isize - 2) as usize;
    let b = (ju - j0 as f64).clamp(0.0, 1.0);
    let v = section.value(i0, j0) * (1.0 - a) * (1.0 - b)
        + section.value(i0 + 1, j0) * a * (1.0 - b)
        + section.value(i0 + 1, j0 + 1) * a * b
        + section.value(i0, j0 + 1) * (1.0 - a) * b;
    let surface = if cu { &strip.cu_surface } else { &strip.cs_surface };
    let row0 = i0 + CHAIN_PAD;
    let p0 = surface[row0].point_at(u)?;
    let p1 = surface[row0 + 1].point_at(u)?;
    let chartp = LocalChart::new(p0);
    let d = chartp.to_local(&p1)?;
    let (base, _) = chartp.from_local(d * a)?;
    if v == 0.0 {
        return Ok(base);
    }
    // Offset along the value rail of the nearest node, carried over to
    // the interpolated base point.
    let rails = if cu { &strip.cu_rails } else { &strip.cs_rails };
    let idx = i0 * k + j0;
    let rail = &rails[idx];
    let rail_base = &rail.arc.points[rail.arc.seed_index];
    let delta = chart::chart_diff(&base, rail_base)?;
    let p = rail.arc.point_at(v)?;
    p.offset(delta)
}

fn build_link(
    g: &DynamicalSystem,
    strips: &mut [OpenStrip],
    from: usize,
    to: usize,
    cu: bool,
) -> Result<LinkData> {
    let (to_surface, to_rows, to_nodes, to_trans) = {
        let s = &strips[to];
        (
            if cu {
                s.cu_surface.clone()
            } else {
                s.cs_surface.clone()
            },
            s.row_params.clone(),
            s.node_params.clone(),
            s.trans_params.clone(),
        )
    };
    let jac_map = |p: &ChartPoint| -> Result<nalgebra::Matrix3<f64>> {
        if cu {
            g.jacobian(p)
        } else {
            g.jacobian_inverse_map(p)
        }
    };
    let (node_count, k) = {
        let s = &strips[from];
        (s.node_params.len(), s.trans_params.len())
    };
    let mut feet = Vec::with_capacity(node_count * k);
    {
        let sf = &strips[from];
        let rails = if cu { &sf.cu_rails } else { &sf.cs_rails };
        for (idx, rail) in rails.iter().enumerate() {
            let mut tangents = Vec::with_capacity(rail.arc.len());
            for (p, t) in rail.arc.points.iter().zip(rail.arc.tangents.iter()) {
                tangents.push((jac_map(p)? * *t).normalize());
            }
            let img_arc = LeafArc {
                sigma: rail.arc.sigma,
                points: rail.img_points.clone(),
                tangents,
                params: rail.img_params.clone(),
                seed_index: rail.arc.seed_index,
                truncated: false,
            };
            let base_img = &rail.img_points[rail.arc.seed_index];
            let foot = project_open(&to_surface, &to_rows, base_img, &img_arc).map_err(|e| {
                Error::Step {
                    message: format!(
                        "chain foot {from}->{to} at image {:?}: {e}",
                        base_img.coords
                    ),
                    node: (idx / k, idx % k),
                }
            })?;
            feet.push(foot);
        }
    }
    {
        let sf = &mut strips[from];
        let rails = if cu {
            &mut sf.cu_rails
        } else {
            &mut sf.cs_rails
        };
        for (idx, rail) in rails.iter_mut().enumerate() {
            rail.foot_img_param = feet[idx].2;
        }
    }
    let spacing = to_nodes[1] - to_nodes[0];
    let mut stencils = Vec::with_capacity(node_count * k);
    for a in 0..node_count {
        for b in 0..k {
            let target = (to_nodes[a], to_trans[b]);
            let mut found = None;
            let i_guess = (((target.0 - to_nodes[0]) / spacing).round() as isize)
                .clamp(0, node_count as isize - 2) as usize;
            'search: for radius in 0..node_count {
                for side in [-1isize, 1] {
                    let i = i_guess as isize + side * radius as isize;
                    if i < 0 || i as usize + 1 >= node_count {
                        continue;
                    }
                    let i = i as usize;
                    for j in 0..k - 1 {
                        let q = [
                            (feet[i * k + j].0, feet[i * k + j].1),
                            (feet[(i + 1) * k + j].0, feet[(i + 1) * k + j].1),
                            (feet[(i + 1) * k + j + 1].0, feet[(i + 1) * k + j + 1].1),
                            (feet[i * k + j + 1].0, feet[i * k + j + 1].1),
                        ];
                        if let Some(w) = invert_bilinear_flat(&q, target) {
                            found = Some(Stencil {
                                nodes: [
                                    i * k + j,
                                    (i + 1) * k + j,
                                    (i + 1) * k + j + 1,
                                    i * k + j + 1,
                                ],
                                weights: w,
                            });
                            break 'search;
                        }
                    }
                    if radius == 0 {
                        break;
                    }
                }
            }
            stencils.push(found);
        }
    }
    Ok(LinkData { stencils })
}

/// Project an image rail onto an open strip surface: returns
/// `(center param, transverse param, image-arc param of the foot)`.
fn project_open(
    surface: &[LeafArc],
    row_params: &[f64],
    near: &ChartPoint,
    img_arc: &LeafArc,
) -> Result<(f64, f64, f64)> {
    let mut best = (f64::INFINITY, 0usize);
    for (i, arc) in surface.iter().enumerate() {
        let d = chart::dist(&arc.points[arc.seed_index], near)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    let rows = 9usize;
    let i0 = best.1.clamp(rows / 2, surface.len().saturating_sub(rows / 2 + 1).max(rows / 2));
    let anchor = surface[i0].points[surface[i0].seed_index];
    let chartp = LocalChart::new(anchor);
    let cols = 13usize;
    let a0 = &surface[i0];
    let trans: Vec<f64> = (0..cols)
        .map(|r| {
            a0.param_start() + (a0.param_end() - a0.param_start()) * r as f64 / (cols - 1) as f64
        })
        .collect();
    let mut grid = Vec::with_capacity(rows);
    let mut base_params = Vec::with_capacity(rows);
    for w in 0..rows {
        let ii = i0 + w - rows / 2;
        if ii >= surface.len() {
            continue;
        }
        let mut row = Vec::with_capacity(cols);
        for &u in &trans {
            row.push(chartp.to_local(&surface[ii].point_at(u)?)?);
        }
        grid.push(row);
        base_params.push(row_params[ii]);
    }
    let plaque = Plaque {
        anchor,
        grid,
        base_params,
        trans_params: trans,
    };
    let (hit, t_foot, u_foot) = local_intersection_coords(img_arc, &plaque)?;
    let foot_param = img_arc.nearest_param(&hit)?;
    Ok((t_foot, u_foot, foot_param))
}

fn invert_bilinear_flat(q: &[(f64, f64); 4], target: (f64, f64)) -> Option<[f64; 4]> {
    let mut a = 0.5;
    let mut b = 0.5;
    for _ in 0..40 {
        let f = |a: f64, b: f64| {
            (
                q[0].0 * (1.0 - a) * (1.0 - b)
                    + q[1].0 * a * (1.0 - b)
                    + q[2].0 * a * b
                    + q[3].0 * (1.0 - a) * b,
                q[0].1 * (1.0 - a) * (1.0 - b)
                    + q[1].1 * a * (1.0 - b)
                    + q[2].1 * a * b
                    + q[3].1 * (1.0 - a) * b,
            )
        };
        let (fx, fy) = f(a, b);
        let rx = target.0 - fx;
        let ry = target.1 - fy;
        if rx.abs() < 1e-14 && ry.abs() < 1e-14 {
            break;
        }
        let h = 1e-7;
        let (fxa, fya) = f(a + h, b);
        let (fxb, fyb) = f(a, b + h);
        let j11 = (fxa - fx) / h;
        let j21 = (fya - fy) / h;
        let j12 = (fxb - fx) / h;
        let j22 = (fyb - fy) / h;
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-30 {
            return None;
        }
        a += (rx * j22 - ry * j12) / det;
        b += (ry * j11 - rx * j21) / det;
        if !(-1.0..=2.0).contains(&a) || !(-1.0..=2.0).contains(&b) {
            return None;
        }
    }
    let inside = (-1e-9..=1.0 + 1e-9).contains(&a) && (-1e-9..=1.0 + 1e-9).contains(&b);
    if !inside {
        return None;
    }
    let a = a.clamp(0.0, 1.0);
    let b = b.clamp(0.0, 1.0);
    Some([(1.0 - a) * (1.0 - b), a * (1.0 - b), a * b, (1.0 - a) * b])
}

fn apply_link(
    rails: &[Rail],
    stencils: &[Option<Stencil>],
    from_section: &GraphSection,
    hold: &GraphSection,
) -> Result<GraphSection> {
    let mut out = GraphSection::zero(hold.kind, hold.center_count, hold.trans_count);
    let mut img_vals = Vec::with_capacity(from_section.values.len());
    for (idx, rail) in rails.iter().enumerate() {
        let v = from_section.values[idx];
        img_vals.push(rail.image_param(v)? - rail.foot_img_param);
    }
    for (idx, st) in stencils.iter().enumerate() {
        out.values[idx] = match st {
            Some(st) => {
                let mut v = 0.0;
                for c in 0..4 {
                    v += st.weights[c] * img_vals[st.nodes[c]];
                }
                v
            }
            // Boundary nodes keep the held value (zero section).
            None => hold.values[idx],
        };
    }
    out.iterations = hold.iterations + 1;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{normalize, IntMat2};
    use crate::cones::{derive_scale_cascade, estimate_rates};
    use crate::systems::{make_skew_product, make_suspension_time1, perturb, PerturbationKind};

    fn a() -> IntMat2 {
        IntMat2::cat_map()
    }

    fn suspension_frame_and_cascade(
        g_eps: f64,
    ) -> (
        DynamicalSystem,
        DynamicalSystem,
        TubularFrame,
        RateReport,
    ) {
        let f = make_suspension_time1(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, g_eps).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.1, rates, &f, &g, 8).unwrap();
        assert!(cascade.accepted, "cascade rejected: {cascade:?}");
        // Closed orbit through the fixed point of the base map.
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.0, 0.0, 0.25], &f.manifold).unwrap();
        let leaf = integrate_leaf(&cfield, &x, 1.4, 5e-3).unwrap();
        let frame = build_tubular_frame(&f, &leaf, &cascade).unwrap();
        (f, g, frame, cascade)
    }

    #[test]
    fn closed_orbit_frame_detected() {
        let (_, _, frame, _) = suspension_frame_and_cascade(1e-4);
        assert!(frame.closed);
        assert!((frame.length - 1.0).abs() < 1e-6, "length {}", frame.length);
        assert!(frame.orientation_preserved);
    }

    #[test]
    fn skew_fiber_frame() {
        let f = make_skew_product(a()).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.05, rates, &f, &f, 6).unwrap();
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.0, 0.0, 0.25], &f.manifold).unwrap();
        let leaf = integrate_leaf(&cfield, &x, 1.4, 5e-3).unwrap();
        let frame = build_tubular_frame(&f, &leaf, &cascade).unwrap();
        assert!(frame.closed);
        assert!((frame.length - 1.0).abs() < 1e-7);
    }

    #[test]
    fn tube_overlap_guard_fires() {
        // A long non-closed orbit segment through a point near the
        // fixed point of the base map returns close to itself.
        let f = make_suspension_time1(a()).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.1, rates, &f, &f, 6).unwrap();
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.004, 0.003, 0.25], &f.manifold).unwrap();
        let leaf = integrate_leaf(&cfield, &x, 3.2, 5e-3).unwrap();
        match build_tubular_frame(&f, &leaf, &cascade) {
            Err(Error::TubeOverlap(_)) => {}
            other => panic!("expected tube overlap, got {other:?}"),
        }
    }

    #[test]
    fn zero_section_invariant_when_g_equals_f() {
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
        let asm = StripAssembly::new(StripKind::Cu, &f, &f, &frame, &cascade, grid).unwrap();
        let zero = GraphSection::zero(StripKind::Cu, 64, 7);
        let (next, stats) = transform_step(&asm, &zero).unwrap();
        assert!(stats.dist_to_zero < 1e-10, "zero section moved {:.3e}", stats.dist_to_zero);
        assert!(next.sup_abs() < 1e-10);
    }

    #[test]
    fn convergence_on_perturbed_pair() {
        let (f, g, frame, cascade) = suspension_frame_and_cascade(1e-4);
        let grid = StripGrid {
            center_count: 96,
            trans_count: 7,
            estimator_depth: 40,
        };
        let asm = StripAssembly::new(StripKind::Cu, &f, &g, &frame, &cascade, grid).unwrap();
        let (section, cert) = iterate_to_fixed_point(&asm, 1e-9, 200).unwrap();
        assert!(cert.bound_ok);
        assert!(cert.fixed_point_residual < 1e-9);
        assert!(section.sup_abs() <= 2.0 * cascade.delta_prime / (1.0 - cascade.lambda) * 1.1);
        // First step within 2 delta'.
        assert!(cert.history[0] <= 2.0 * cascade.delta_prime * 1.1 + 1e-12);
    }

    #[test]
    fn contraction_ratios_below_lambda() {
        let (f, g, frame, cascade) = suspension_frame_and_cascade(1e-4);
        let grid = StripGrid {
            center_count: 96,
            trans_count: 7,
            estimator_depth: 40,
        };
        let asm = StripAssembly::new(StripKind::Cu, &f, &g, &frame, &cascade, grid).unwrap();
        let ratios = measure_contraction(&asm, 20, 42).unwrap();
        for (before, after) in ratios {
            assert!(
                after <= cascade.lambda * before,
                "contraction violated: {after:.3e} vs lambda*{before:.3e} = {:.3e}",
                cascade.lambda * before
            );
        }
    }

    #[test]
    fn continuation_identity_when_g_equals_f() {
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
        let cont = continuation_leaf(&f, &f, &frame, &cascade, grid, 1e-10).unwrap();
        assert!(
            cont.hausdorff_to_base < 1e-9,
            "L' moved by {:.3e}",
            cont.hausdorff_to_base
        );
        assert!(cont.equivariance_residual < 1e-9);
    }

    #[test]
    fn continuation_of_perturbed_pair_stays_close_and_tangent() {
        let (f, g, frame, cascade) = suspension_frame_and_cascade(1e-4);
        let grid = StripGrid {
            center_count: 128,
            trans_count: 9,
            estimator_depth: 40,
        };
        let cont = continuation_leaf(&f, &g, &frame, &cascade, grid, 1e-9).unwrap();
        let bound = 2.0 * cascade.delta_prime / (1.0 - cascade.lambda) + 1e-5;
        assert!(
            cont.hausdorff_to_base <= bound,
            "Hausdorff {:.3e} > {:.3e}",
            cont.hausdorff_to_base,
            bound
        );
        assert!(
            cont.tangency_max_angle < 1e-5,
            "tangency {:.3e}",
            cont.tangency_max_angle
        );
        assert!(
            cont.equivariance_residual < 1e-6,
            "equivariance {:.3e}",
            cont.equivariance_residual
        );
    }



    #[test]
    fn immersion_continuation_degenerate_and_unique() {
        let f = make_suspension_time1(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 1e-4).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let cascade = derive_scale_cascade(0.1, rates, &f, &g, 8).unwrap();
        let cfield = LineField::invariant(&f, Bundle::Center).unwrap();
        let x = normalize([0.31, 0.47, 0.2], &f.manifold).unwrap();
        let eta = integrate_leaf(&cfield, &x, 0.9, 5e-3).unwrap();
        let grid = StripGrid {
            center_count: 48,
            trans_count: 7,
            estimator_depth: 40,
        };
        // Degenerate pair: the continued curves are the mapped arcs.
        let cont = continue_immersion(&f, &f, &eta, 1, &cascade, grid, 1e-9).unwrap();
        for (idx, n) in (-1i32..=1).enumerate() {
            let target = map_arc(&f, &eta, n).unwrap();
            let gamma = &cont.curves[idx];
            let mut worst = 0.0f64;
            for p in &gamma.points {
                let t = target.nearest_param(p).unwrap();
                worst = worst.max(crate::chart::dist(&target.point_at(t).unwrap(), p).unwrap());
            }
            assert!(worst < 1e-8, "n = {n}: gamma_n off f^n eta by {worst:.3e}");
        }
        // Perturbed pair: curves stay delta-close to the mapped arcs
        // and are reparameterization-unique under a grid change.
        let cont1 = continue_immersion(&f, &g, &eta, 1, &cascade, grid, 1e-9).unwrap();
        for (idx, n) in (-1i32..=1).enumerate() {
            let target = map_arc(&f, &eta, n).unwrap();
            let gamma = &cont1.curves[idx];
            let mut worst = 0.0f64;
            for p in &gamma.points {
                let t = target.nearest_param(p).unwrap();
                worst = worst.max(crate::chart::dist(&target.point_at(t).unwrap(), p).unwrap());
            }
            assert!(worst < cascade.delta, "n = {n}: gamma_n {worst:.3e} >= delta");
        }
        let grid2 = StripGrid {
            center_count: 60,
            trans_count: 7,
            estimator_depth: 40,
        };
        let cont2 = continue_immersion(&f, &g, &eta, 1, &cascade, grid2, 1e-9).unwrap();
        let g1 = &cont1.curves[1];
        let g2 = &cont2.curves[1];
        let mut worst = 0.0f64;
        for p in g1.points.iter() {
            let t = g2.nearest_param(p).unwrap();
            worst = worst.max(crate::chart::dist(&g2.point_at(t).unwrap(), p).unwrap());
        }
        assert!(worst < 1e-6, "grid-phase uniqueness probe: {worst:.3e}");
    }

    #[test]
    fn certificate_serialization_fields() {
        let (f, g, frame, cascade) = suspension_frame_and_cascade(1e-4);
        let grid = StripGrid {
            center_count: 64,
            trans_count: 7,
            estimator_depth: 40,
        };
        let asm = StripAssembly::new(StripKind::Cu, &f, &g, &frame, &cascade, grid).unwrap();
        let (_, cert) = iterate_to_fixed_point(&asm, 1e-8, 200).unwrap();
        let v = serde_json::to_value(&cert).unwrap();
        for key in [
            "delta_prime",
            "lambda",
            "history",
            "bound_ok",
            "fixed_point_residual",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
