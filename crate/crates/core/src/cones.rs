//! Cone fields and the cone criterion, numerical estimation of the
//! invariant splitting by power iteration along orbits, the rate
//! constants `lambda < 1 < kappa`, the nearly-euclidean scale and the
//! derived scale cascade used by the graph transform.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::chart::{self, ChartPoint};
use crate::error::{Error, Result};
use crate::systems::{probe_grid, DynamicalSystem};

/// One-dimensional invariant bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bundle {
    Stable,
    Center,
    Unstable,
}

/// Two-dimensional invariant plane bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneBundle {
    CenterStable,
    CenterUnstable,
}

/// Operator norm (largest singular value).
pub fn opnorm(m: &Matrix3<f64>) -> f64 {
    m.svd(false, false).singular_values[0]
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut lead = v.x;
    if v.y.abs() > lead.abs() {
        lead = v.y;
    }
    if v.z.abs() > lead.abs() {
        lead = v.z;
    }
    if lead < 0.0 {
        -v
    } else {
        v
    }
}

/// Estimates invariant directions and plane normals at arbitrary
/// points by power iteration of the derivative cocycle along orbits.
#[derive(Debug, Clone, Copy)]
pub struct BundleEstimator {
    /// Pullback depth.
    pub iterations: usize,
    /// Residual threshold (angle scale) above which estimation errors.
    pub tol: f64,
}

impl Default for BundleEstimator {
    fn default() -> Self {
        BundleEstimator {
            iterations: 96,
            tol: 1e-9,
        }
    }
}

const SEED_VEC: Vector3<f64> = Vector3::new(0.5964775896, 0.6312671054, 0.4958306602);

impl BundleEstimator {
    pub fn new(iterations: usize, tol: f64) -> Self {
        BundleEstimator { iterations, tol }
    }

    /// Collect `n+1` points of the orbit in the given time direction:
    /// `out[k] = f^{+-k}(p)`.
    fn orbit(
        &self,
        sys: &DynamicalSystem,
        p: &ChartPoint,
        n: usize,
        fwd: bool,
    ) -> Result<Vec<ChartPoint>> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(*p);
        let mut q = *p;
        for _ in 0..n {
            q = if fwd { sys.forward(&q)? } else { sys.inverse(&q)? };
            out.push(q);
        }
        Ok(out)
    }

    /// Push the seed forward along the stored backward orbit:
    /// `normalize(Df^n(f^{-n} p) v0)`, the unstable direction.
    fn push_forward(
        sys: &DynamicalSystem,
        back: &[ChartPoint],
        depth: usize,
    ) -> Result<Vector3<f64>> {
        let mut v = SEED_VEC;
        for k in (1..=depth).rev() {
            let j = sys.jacobian(&back[k])?;
            v = (j * v).normalize();
        }
        Ok(canonical_sign(v))
    }

    /// Pull the seed back along the stored forward orbit with inverse
    /// Jacobians: `normalize(Df^{-n}(f^n p) v0)`, the stable direction.
    fn pull_back(sys: &DynamicalSystem, fwd: &[ChartPoint], depth: usize) -> Result<Vector3<f64>> {
        let mut v = SEED_VEC;
        for k in (1..=depth).rev() {
            // D(f^{-1}) at fwd[k] equals J(fwd[k-1])^{-1}.
            let j = sys.jacobian(&fwd[k - 1])?;
            let ji = j
                .try_inverse()
                .ok_or_else(|| Error::violation("singular Jacobian"))?;
            v = (ji * v).normalize();
        }
        Ok(canonical_sign(v))
    }

    /// Covector iteration for the normal of `E^cu`: transport a seed
    /// covector from the backward orbit to `p` by inverse transposes;
    /// the limit annihilates everything but the strongest contraction.
    fn cu_normal_at(
        sys: &DynamicalSystem,
        back: &[ChartPoint],
        depth: usize,
    ) -> Result<Vector3<f64>> {
        let mut w = SEED_VEC;
        for k in (1..=depth).rev() {
            let j = sys.jacobian(&back[k])?;
            let jit = j
                .try_inverse()
                .ok_or_else(|| Error::violation("singular Jacobian"))?
                .transpose();
            w = (jit * w).normalize();
        }
        Ok(canonical_sign(w))
    }

    /// Covector iteration for the normal of `E^cs` along the forward
    /// orbit (transposes pull covectors back).
    fn cs_normal_at(
        sys: &DynamicalSystem,
        fwd: &[ChartPoint],
        depth: usize,
    ) -> Result<Vector3<f64>> {
        let mut w = SEED_VEC;
        for k in (1..=depth).rev() {
            let j = sys.jacobian(&fwd[k - 1])?;
            w = (j.transpose() * w).normalize();
        }
        Ok(canonical_sign(w))
    }

    fn with_residual<F>(&self, f: F, p: &ChartPoint) -> Result<(Vector3<f64>, f64)>
    where
        F: Fn(usize) -> Result<Vector3<f64>>,
    {
        let n = self.iterations;
        let a = f(n.saturating_sub(1))?;
        let b = f(n)?;
        let residual = (b - a).norm().min((b + a).norm());
        if residual > self.tol {
            return Err(Error::convergence(
                "bundle estimation did not converge",
                p.vector(),
                residual,
            ));
        }
        Ok((b, residual))
    }

    /// Unit unstable direction with residual.
    pub fn unstable(&self, sys: &DynamicalSystem, p: &ChartPoint) -> Result<(Vector3<f64>, f64)> {
        let back = self.orbit(sys, p, self.iterations, false)?;
        self.with_residual(|d| Self::push_forward(sys, &back, d), p)
    }

    /// Unit stable direction with residual.
    pub fn stable(&self, sys: &DynamicalSystem, p: &ChartPoint) -> Result<(Vector3<f64>, f64)> {
        let fwd = self.orbit(sys, p, self.iterations, true)?;
        self.with_residual(|d| Self::pull_back(sys, &fwd, d), p)
    }

    /// Unit normal of the center-unstable plane with residual.
    pub fn cu_normal(&self, sys: &DynamicalSystem, p: &ChartPoint) -> Result<(Vector3<f64>, f64)> {
        let back = self.orbit(sys, p, self.iterations, false)?;
        self.with_residual(|d| Self::cu_normal_at(sys, &back, d), p)
    }

    /// Unit normal of the center-stable plane with residual.
    pub fn cs_normal(&self, sys: &DynamicalSystem, p: &ChartPoint) -> Result<(Vector3<f64>, f64)> {
        let fwd = self.orbit(sys, p, self.iterations, true)?;
        self.with_residual(|d| Self::cs_normal_at(sys, &fwd, d), p)
    }

    /// Unit center direction (intersection of the cu and cs planes)
    /// with combined residual.
    pub fn center(&self, sys: &DynamicalSystem, p: &ChartPoint) -> Result<(Vector3<f64>, f64)> {
        let (ncu, r1) = self.cu_normal(sys, p)?;
        let (ncs, r2) = self.cs_normal(sys, p)?;
        let c = ncu.cross(&ncs);
        let n = c.norm();
        if n < 1e-8 {
            return Err(Error::convergence(
                "cu and cs planes are tangent; no center direction",
                p.vector(),
                n,
            ));
        }
        Ok((canonical_sign(c / n), r1.max(r2)))
    }

    pub fn direction(
        &self,
        sys: &DynamicalSystem,
        p: &ChartPoint,
        bundle: Bundle,
    ) -> Result<(Vector3<f64>, f64)> {
        match bundle {
            Bundle::Stable => self.stable(sys, p),
            Bundle::Center => self.center(sys, p),
            Bundle::Unstable => self.unstable(sys, p),
        }
    }

    pub fn plane_normal(
        &self,
        sys: &DynamicalSystem,
        p: &ChartPoint,
        plane: PlaneBundle,
    ) -> Result<(Vector3<f64>, f64)> {
        match plane {
            PlaneBundle::CenterStable => self.cs_normal(sys, p),
            PlaneBundle::CenterUnstable => self.cu_normal(sys, p),
        }
    }
}

/// Per-point estimated invariant frame with convergence residuals.
#[derive(Debug, Clone)]
pub struct SplitSample {
    pub point: ChartPoint,
    pub e_s: Vector3<f64>,
    pub e_c: Vector3<f64>,
    pub e_u: Vector3<f64>,
    pub residual_s: f64,
    pub residual_c: f64,
    pub residual_u: f64,
}

/// Estimated invariant splitting on a regular grid.
#[derive(Debug, Clone)]
pub struct Splitting {
    pub grid: usize,
    pub samples: Vec<SplitSample>,
    /// Smallest pairwise angle between the three directions over the grid.
    pub min_pairwise_angle: f64,
    /// Largest estimation residual over the grid.
    pub max_residual: f64,
}

/// Estimate `e^s, e^c, e^u` on a `grid^3` sample grid with pullback
/// depth `n`.
pub fn estimate_splitting(sys: &DynamicalSystem, grid: usize, n: usize) -> Result<Splitting> {
    if n < 20 {
        return Err(Error::invalid("at least 20 iterations are required"));
    }
    let est = BundleEstimator::new(n, 1e-6);
    let mut samples = Vec::new();
    let mut min_angle = f64::INFINITY;
    let mut max_res = 0.0f64;
    for p in probe_grid(&sys.manifold, grid) {
        let (e_s, rs) = est.stable(sys, &p)?;
        let (e_u, ru) = est.unstable(sys, &p)?;
        let (e_c, rc) = est.center(sys, &p)?;
        for (a, b) in [(&e_s, &e_c), (&e_s, &e_u), (&e_c, &e_u)] {
            let ang = a.dot(b).abs().min(1.0).acos();
            min_angle = min_angle.min(ang);
        }
        max_res = max_res.max(rs).max(ru).max(rc);
        samples.push(SplitSample {
            point: p,
            e_s,
            e_c,
            e_u,
            residual_s: rs,
            residual_c: rc,
            residual_u: ru,
        });
    }
    Ok(Splitting {
        grid,
        samples,
        min_pairwise_angle: min_angle,
        max_residual: max_res,
    })
}

/// Largest angle between `Df(x) e^sigma(x)` and `e^sigma(f x)` over the
/// splitting's grid; the invariance certificate for the estimate.
pub fn splitting_invariance_angle(sys: &DynamicalSystem, s: &Splitting) -> Result<f64> {
    let est = BundleEstimator::new(64, 1e-6);
    let mut worst = 0.0f64;
    for sample in &s.samples {
        let j = sys.jacobian(&sample.point)?;
        let fx = sys.forward(&sample.point)?;
        for (v, bundle) in [
            (&sample.e_s, Bundle::Stable),
            (&sample.e_c, Bundle::Center),
            (&sample.e_u, Bundle::Unstable),
        ] {
            let mapped = (j * *v).normalize();
            let (target, _) = est.direction(sys, &fx, bundle)?;
            let ang = mapped.dot(&target).abs().min(1.0).acos();
            worst = worst.max(ang);
        }
    }
    Ok(worst)
}

/// Which invariant cone this is; fixes the dimension, the invariance
/// time direction and whether uniform expansion must be certified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    Unstable,
    Stable,
    CenterUnstable,
    CenterStable,
}

impl ConeKind {
    /// Cones around the (center-)unstable data are checked under `f^N`,
    /// the (center-)stable ones under `f^{-N}`.
    pub fn forward(&self) -> bool {
        matches!(self, ConeKind::Unstable | ConeKind::CenterUnstable)
    }

    pub fn dimension(&self) -> usize {
        match self {
            ConeKind::Unstable | ConeKind::Stable => 1,
            ConeKind::CenterUnstable | ConeKind::CenterStable => 2,
        }
    }

    /// Strong cones must additionally expand extreme rays.
    pub fn expansion_marked(&self) -> bool {
        matches!(self, ConeKind::Unstable | ConeKind::Stable)
    }
}

#[derive(Debug, Clone)]
pub enum ConeFrames {
    /// Fixed frame at every point (constant-coefficient systems and
    /// test doubles).
    Constant {
        e: Vec<Vector3<f64>>,
        f: Vec<Vector3<f64>>,
    },
    /// Frames re-estimated per point by power iteration.
    Estimated(BundleEstimator),
}

/// A cone field: a core bundle `E`, its complement `F` and an opening
/// ratio `alpha` (`v` is inside iff `|v_E| >= alpha |v_F|` in the
/// oblique decomposition along the frame).
#[derive(Debug, Clone)]
pub struct ConeField {
    pub kind: ConeKind,
    pub alpha: f64,
    pub frames: ConeFrames,
}

impl ConeField {
    /// Cone around the estimated bundle data of the system it is
    /// checked against.
    pub fn standard(kind: ConeKind, alpha: f64) -> ConeField {
        ConeField {
            kind,
            alpha,
            frames: ConeFrames::Estimated(BundleEstimator::default()),
        }
    }

    pub fn constant(
        kind: ConeKind,
        alpha: f64,
        e: Vec<Vector3<f64>>,
        f: Vec<Vector3<f64>>,
    ) -> ConeField {
        ConeField {
            kind,
            alpha,
            frames: ConeFrames::Constant { e, f },
        }
    }

    /// Core and complement frame at a point.
    pub fn frame(
        &self,
        sys: &DynamicalSystem,
        p: &ChartPoint,
    ) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        match &self.frames {
            ConeFrames::Constant { e, f } => Ok((e.clone(), f.clone())),
            ConeFrames::Estimated(est) => {
                let (e_s, _) = est.stable(sys, p)?;
                let (e_u, _) = est.unstable(sys, p)?;
                let (e_c, _) = est.center(sys, p)?;
                Ok(match self.kind {
                    ConeKind::Unstable => (vec![e_u], vec![e_s, e_c]),
                    ConeKind::Stable => (vec![e_s], vec![e_c, e_u]),
                    ConeKind::CenterUnstable => (vec![e_c, e_u], vec![e_s]),
                    ConeKind::CenterStable => (vec![e_s, e_c], vec![e_u]),
                })
            }
        }
    }

    /// Boundary rays of the cone at a point, sampled with `rays`
    /// directions on the core sphere (polyhedral approximation;
    /// containment of a convex cone under a linear map is determined
    /// by extreme rays).
    pub fn extreme_rays(
        &self,
        sys: &DynamicalSystem,
        p: &ChartPoint,
        rays: usize,
    ) -> Result<Vec<Vector3<f64>>> {
        let (e, f) = self.frame(sys, p)?;
        let mut out = Vec::new();
        match (e.len(), f.len()) {
            (1, 2) => {
                for i in 0..rays {
                    let phi = std::f64::consts::TAU * i as f64 / rays as f64;
                    out.push(e[0] + (phi.cos() * f[0] + phi.sin() * f[1]) / self.alpha);
                }
            }
            (2, 1) => {
                for i in 0..rays {
                    let psi = std::f64::consts::TAU * i as f64 / rays as f64;
                    for s in [-1.0, 1.0] {
                        out.push(psi.cos() * e[0] + psi.sin() * e[1] + s * f[0] / self.alpha);
                    }
                }
            }
            _ => {
                return Err(Error::invalid(
                    "cone frame must split 3-space as 1+2 or 2+1",
                ))
            }
        }
        Ok(out)
    }

    /// Containment margin of a vector at a point:
    /// `(|v_E| - alpha |v_F|) / |v|`, positive strictly inside.
    pub fn margin(&self, sys: &DynamicalSystem, p: &ChartPoint, v: Vector3<f64>) -> Result<f64> {
        let (e, f) = self.frame(sys, p)?;
        let mut basis = Matrix3::zeros();
        for (i, b) in e.iter().chain(f.iter()).enumerate() {
            basis.set_column(i, b);
        }
        let inv = basis
            .try_inverse()
            .ok_or_else(|| Error::invalid("degenerate cone frame"))?;
        let comp = inv * v;
        let (ne, nf) = match e.len() {
            1 => (
                (comp.x * e[0]).norm(),
                (comp.y * f[0] + comp.z * f[1]).norm(),
            ),
            _ => ((comp.x * e[0] + comp.y * e[1]).norm(), (comp.z * f[0]).norm()),
        };
        Ok((ne - self.alpha * nf) / v.norm())
    }
}

/// Outcome of a cone-criterion run.
#[derive(Debug, Clone, Serialize)]
pub struct ConeCertificate {
    pub pass: bool,
    /// Minimal containment margin over all grid cells and extreme rays.
    pub worst_margin: f64,
    pub worst_cell: [f64; 3],
    /// Minimal relative expansion `(|Df^N v| - |v|)/|v|` over extreme
    /// rays, for expansion-marked cones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion_margin: Option<f64>,
    pub iterates: usize,
    pub grid: usize,
}

/// Check `Df^N C(x)` inside the interior of `C(f^N x)` (time direction
/// per cone kind) at all grid points by testing extreme rays;
/// expansion-marked cones additionally need `|Df^N v| > |v|` on
/// extreme rays. Failure is a verdict, not an error.
pub fn verify_cone_invariance(
    sys: &DynamicalSystem,
    cone: &ConeField,
    iterates: usize,
    grid: usize,
) -> Result<ConeCertificate> {
    if cone.alpha <= 0.0 {
        return Err(Error::invalid("cone opening ratio must be positive"));
    }
    if iterates < 1 {
        return Err(Error::invalid("at least one iterate is required"));
    }
    if grid < 8 {
        return Err(Error::invalid("grid must be at least 8 per axis"));
    }
    let rays = 16;
    let fwd = cone.kind.forward();
    let mut worst = f64::INFINITY;
    let mut worst_cell = [0.0; 3];
    let mut exp_margin = f64::INFINITY;
    for p in probe_grid(&sys.manifold, grid) {
        // Cocycle along the orbit in the invariance direction.
        let mut j = Matrix3::identity();
        let mut q = p;
        for _ in 0..iterates {
            let step = if fwd {
                sys.jacobian(&q)?
            } else {
                sys.jacobian_inverse_map(&q)?
            };
            j = step * j;
            q = if fwd { sys.forward(&q)? } else { sys.inverse(&q)? };
        }
        for v in cone.extreme_rays(sys, &p, rays)? {
            let w = j * v;
            let m = cone.margin(sys, &q, w)?;
            if m < worst {
                worst = m;
                worst_cell = p.coords;
            }
            if cone.kind.expansion_marked() {
                exp_margin = exp_margin.min((w.norm() - v.norm()) / v.norm());
            }
        }
    }
    let expansion_margin = cone.kind.expansion_marked().then_some(exp_margin);
    let pass = worst > 0.0 && expansion_margin.map_or(true, |e| e > 0.0);
    Ok(ConeCertificate {
        pass,
        worst_margin: worst,
        worst_cell,
        expansion_margin,
        iterates,
        grid,
    })
}

/// The four standard cones around the estimated splitting.
pub fn standard_cones(alpha: f64) -> Vec<ConeField> {
    vec![
        ConeField::standard(ConeKind::Unstable, alpha),
        ConeField::standard(ConeKind::Stable, alpha),
        ConeField::standard(ConeKind::CenterUnstable, alpha),
        ConeField::standard(ConeKind::CenterStable, alpha),
    ]
}

/// Contraction and bilipschitz constants measured on a grid, with 1%
/// safety headroom converting sampled maxima into usable bounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Rates {
    pub lambda: f64,
    pub kappa: f64,
}

/// `lambda = 1.01 max(|Df e^s|, |Df^{-1} e^u|)`, `kappa = 1.01 max
/// operator norm of Df, Df^{-1}`; the grid is refined x2 until the
/// estimates move by less than 0.1%.
pub fn estimate_rates(sys: &DynamicalSystem, start_grid: usize) -> Result<Rates> {
    let est = BundleEstimator::default();
    let measure = |grid: usize| -> Result<(f64, f64)> {
        let mut lam = 0.0f64;
        let mut kap = 0.0f64;
        for p in probe_grid(&sys.manifold, grid) {
            let j = sys.jacobian(&p)?;
            let ji = sys.jacobian_inverse_map(&p)?;
            let (e_s, _) = est.stable(sys, &p)?;
            let (e_u, _) = est.unstable(sys, &p)?;
            lam = lam.max((j * e_s).norm()).max((ji * e_u).norm());
            kap = kap.max(opnorm(&j)).max(opnorm(&ji));
        }
        Ok((lam, kap))
    };
    let mut grid = start_grid.max(4);
    let (mut lam, mut kap) = measure(grid)?;
    loop {
        let next = grid * 2;
        if next > 4 * start_grid.max(4) {
            break;
        }
        let (l2, k2) = measure(next)?;
        let moved = ((l2 - lam) / lam).abs().max(((k2 - kap) / kap).abs());
        lam = l2;
        kap = k2;
        grid = next;
        if moved < 1e-3 {
            break;
        }
    }
    let lambda = lam * 1.01;
    let kappa = kap * 1.01;
    if lambda >= 1.0 {
        return Err(Error::NotPartiallyHyperbolic(format!(
            "contraction bound {lambda:.6} >= 1 in the flat metric"
        )));
    }
    Ok(Rates { lambda, kappa })
}

/// Largest scale (dyadic search from `cap`) at which the estimated
/// bundles are `eps`-nearly euclidean: over sampled pairs within
/// `20 delta`, bundle directions differ by at most `eps pi` and the
/// strong directions stay within `eps pi` of orthogonal to the
/// opposite planes.
pub fn nearly_euclidean_scale(sys: &DynamicalSystem, eps: f64, cap: f64) -> Result<f64> {
    if eps <= 0.0 {
        // Open condition: no positive scale can satisfy it.
        return Err(Error::ScaleNotFound { floor: 0.0 });
    }
    if eps > 1.0 / 16.0 {
        return Err(Error::invalid("tolerance must lie in (0, 1/16]"));
    }
    let est = BundleEstimator::default();
    let anchors = probe_grid(&sys.manifold, 5);
    let dirs = [
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.577350269189626, 0.577350269189626, 0.577350269189626),
        Vector3::new(-0.577350269189626, 0.577350269189626, 0.577350269189626),
        Vector3::new(0.577350269189626, -0.577350269189626, 0.577350269189626),
    ];
    let floor = cap / (1u64 << 20) as f64;
    let mut delta = cap;
    'search: while delta > floor {
        let limit = eps * std::f64::consts::PI;
        for p in &anchors {
            let (es_p, _) = est.stable(sys, p)?;
            let (ec_p, _) = est.center(sys, p)?;
            let (eu_p, _) = est.unstable(sys, p)?;
            for d in &dirs {
                for r in [0.45, 0.95] {
                    let (q, deck) = chart::normalize_with_deck(
                        [
                            p.coords[0] + d.x * 20.0 * delta * r,
                            p.coords[1] + d.y * 20.0 * delta * r,
                            p.coords[2] + d.z * 20.0 * delta * r,
                        ],
                        &sys.manifold,
                    )?;
                    let mut es_q = est.stable(sys, &q)?.0;
                    let mut ec_q = est.center(sys, &q)?.0;
                    let mut eu_q = est.unstable(sys, &q)?.0;
                    let ncu_q = est.cu_normal(sys, &q)?.0;
                    let ncs_q = est.cs_normal(sys, &q)?.0;
                    // Express q's bundle data in p's chart: directions
                    // transport by the inverse deck action, normals by
                    // its transpose-inverse (renormalized either way).
                    for v in [&mut es_q, &mut ec_q, &mut eu_q] {
                        *v = deck.transport_inv(&sys.manifold, *v)?.normalize();
                    }
                    let ncu_q = deck.transport(&sys.manifold, ncu_q)?.normalize();
                    let ncs_q = deck.transport(&sys.manifold, ncs_q)?.normalize();
                    let variation = [
                        es_p.dot(&es_q).abs(),
                        ec_p.dot(&ec_q).abs(),
                        eu_p.dot(&eu_q).abs(),
                    ]
                    .iter()
                    .map(|c| c.min(1.0).acos())
                    .fold(0.0f64, f64::max);
                    // angle(e^s(p), E^cu(q)) within eps*pi of pi/2
                    // means angle to the plane normal within eps*pi.
                    let s_vs_cu = es_p.dot(&ncu_q).abs().min(1.0).acos();
                    let u_vs_cs = eu_p.dot(&ncs_q).abs().min(1.0).acos();
                    if variation > limit || s_vs_cu > limit || u_vs_cs > limit {
                        delta /= 2.0;
                        continue 'search;
                    }
                }
            }
        }
        return Ok(delta);
    }
    Err(Error::ScaleNotFound { floor })
}

/// The scale cascade of the graph transform and the acceptance verdict
/// for a pair of systems.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub lambda: f64,
    pub kappa: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub accepted: bool,
}

/// Derive `delta1 = delta/2kappa`, `delta2 = delta1/2`,
/// `delta3 = delta2/4kappa`, measure `delta' = max_grid d(f x, g x)`,
/// and accept the pair iff `delta' < delta (1-lambda) / (64 kappa^2)`
/// and `delta' < (1/lambda - 1)/10`.
pub fn derive_scale_cascade(
    delta: f64,
    rates: Rates,
    f: &DynamicalSystem,
    g: &DynamicalSystem,
    grid: usize,
) -> Result<RateReport> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let mut delta_prime = 0.0f64;
    for p in probe_grid(&f.manifold, grid) {
        let d = chart::dist(&f.forward(&p)?, &g.forward(&p)?)?;
        delta_prime = delta_prime.max(d);
    }
    let Rates { lambda, kappa } = rates;
    let delta1 = delta / (2.0 * kappa);
    let delta2 = delta1 / 2.0;
    let delta3 = delta2 / (4.0 * kappa);
    let accepted = delta_prime < delta / (64.0 * kappa * kappa) * (1.0 - lambda)
        && delta_prime < 0.1 * (1.0 / lambda - 1.0);
    Ok(RateReport {
        lambda,
        kappa,
        delta,
        delta_prime,
        delta1,
        delta2,
        delta3,
        accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{normalize, IntMat2};
    use crate::systems::{
        make_hhu_map, make_skew_product, make_suspension_time1, perturb, PerturbationKind,
    };

    fn a() -> IntMat2 {
        IntMat2::cat_map()
    }

    const MU: f64 = 2.618033988749895; // (3 + sqrt 5)/2
    const LAM: f64 = 0.3819660112501051; // (3 - sqrt 5)/2

    #[test]
    fn skew_splitting_matches_eigen_data() {
        let f = make_skew_product(a()).unwrap();
        let s = estimate_splitting(&f, 4, 40).unwrap();
        assert!(s.max_residual < 1e-10, "residual {:.3e}", s.max_residual);
        let es2 = a().stable_direction().unwrap();
        let eu2 = a().unstable_direction().unwrap();
        for sample in &s.samples {
            assert!((sample.e_c - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
            let es = Vector3::new(es2.x, es2.y, 0.0);
            let eu = Vector3::new(eu2.x, eu2.y, 0.0);
            assert!(sample.e_s.dot(&es).abs() > 1.0 - 1e-10);
            assert!(sample.e_u.dot(&eu).abs() > 1.0 - 1e-10);
        }
    }

    #[test]
    fn suspension_center_is_flow_direction() {
        let f = make_suspension_time1(a()).unwrap();
        let s = estimate_splitting(&f, 4, 40).unwrap();
        for sample in &s.samples {
            assert!(sample.e_c.dot(&Vector3::new(0.0, 0.0, 1.0)).abs() > 1.0 - 1e-10);
        }
    }

    #[test]
    fn splitting_invariance_under_df() {
        for sys in [
            make_skew_product(a()).unwrap(),
            make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap(),
        ] {
            let s = estimate_splitting(&sys, 3, 64).unwrap();
            let worst = splitting_invariance_angle(&sys, &s).unwrap();
            assert!(worst < 1e-6, "invariance angle {worst:.3e}");
        }
    }

    #[test]
    fn splitting_residual_decreases_with_depth() {
        let sys = make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap();
        let r1 = estimate_splitting(&sys, 3, 64).unwrap().max_residual;
        let r2 = estimate_splitting(&sys, 3, 96).unwrap().max_residual;
        let r3 = estimate_splitting(&sys, 3, 128).unwrap().max_residual;
        assert!(r2 <= r1 + 1e-13, "{r1:.3e} -> {r2:.3e}");
        assert!(r3 <= r2 + 1e-13, "{r2:.3e} -> {r3:.3e}");
    }

    #[test]
    fn rates_of_skew_product() {
        let f = make_skew_product(a()).unwrap();
        let r = estimate_rates(&f, 4).unwrap();
        assert!((r.lambda - LAM * 1.01).abs() < 1e-9, "lambda {}", r.lambda);
        assert!(r.kappa >= MU, "kappa {}", r.kappa);
        assert!((r.kappa - MU * 1.01).abs() < 1e-6);
    }

    #[test]
    fn rates_unchanged_by_zero_perturbation() {
        let f = make_suspension_time1(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 0.0).unwrap();
        let rf = estimate_rates(&f, 4).unwrap();
        let rg = estimate_rates(&g, 4).unwrap();
        assert!((rf.lambda - rg.lambda).abs() < 1e-12);
        assert!((rf.kappa - rg.kappa).abs() < 1e-12);
    }

    #[test]
    fn cone_criterion_on_skew_product() {
        let f = make_skew_product(a()).unwrap();
        let cone = ConeField::standard(ConeKind::Unstable, 0.5);
        let cert = verify_cone_invariance(&f, &cone, 1, 8).unwrap();
        assert!(cert.pass, "margin {:.3e}", cert.worst_margin);
        assert!(cert.worst_margin > 0.0);
        assert!(cert.expansion_margin.unwrap() > 0.0);
    }

    #[test]
    fn cone_boundary_has_zero_margin_under_identity() {
        // Under the identity derivative a proper cone is not strictly
        // contained in its interior: boundary rays have margin 0.
        let f = make_skew_product(a()).unwrap();
        let cone = ConeField::constant(
            ConeKind::Unstable,
            1.0,
            vec![Vector3::new(1.0, 0.0, 0.0)],
            vec![Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0)],
        );
        let p = normalize([0.3, 0.3, 0.3], &f.manifold).unwrap();
        for v in cone.extreme_rays(&f, &p, 16).unwrap() {
            let m = cone.margin(&f, &p, v).unwrap();
            assert!(m.abs() < 1e-12, "boundary rays have zero margin, got {m}");
        }
    }

    #[test]
    fn degenerate_cone_rejected() {
        let f = make_skew_product(a()).unwrap();
        let cone = ConeField::standard(ConeKind::Unstable, 0.0);
        assert!(verify_cone_invariance(&f, &cone, 1, 8).is_err());
    }

    #[test]
    fn hhu_cone_certification() {
        let f = make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap();
        for cone in standard_cones(1.0) {
            let cert = verify_cone_invariance(&f, &cone, 3, 8).unwrap();
            assert!(
                cert.pass,
                "{:?}: margin {:.3e}",
                cone.kind, cert.worst_margin
            );
        }
    }

    #[test]
    fn nearly_euclidean_scale_constant_system_hits_cap() {
        let f = make_suspension_time1(a()).unwrap();
        let d = nearly_euclidean_scale(&f, 1.0 / 16.0, 0.05).unwrap();
        assert_eq!(d, 0.05);
    }

    #[test]
    fn nearly_euclidean_scale_monotone_in_eps() {
        // A strongly perturbed suspension has smoothly varying bundles,
        // so the admissible scale is finite and shrinks with eps.
        let base = make_suspension_time1(a()).unwrap();
        let f = perturb(&base, PerturbationKind::TranslationBump, 0.01).unwrap();
        let d1 = nearly_euclidean_scale(&f, 1.0 / 16.0, 0.05).unwrap();
        let d2 = nearly_euclidean_scale(&f, 1.0 / 32.0, 0.05).unwrap();
        assert!(d2 <= d1, "shrinking eps must not increase delta: {d1} -> {d2}");
        assert!(d1 > 0.0);
    }

    #[test]
    fn nearly_euclidean_scale_not_found_near_tangent_bundles() {
        // Near the cu-torus of this family the stable direction lies
        // within ~25 degrees of the cu-plane in the flat metric (the
        // center bundle turns only inside a thin Holder layer), so no
        // scale is nearly euclidean without an adapted metric.
        let f = make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap();
        assert!(matches!(
            nearly_euclidean_scale(&f, 1.0 / 16.0, 0.05),
            Err(Error::ScaleNotFound { .. })
        ));
    }

    #[test]
    fn nearly_euclidean_scale_zero_eps_errors() {
        let f = make_suspension_time1(a()).unwrap();
        assert!(matches!(
            nearly_euclidean_scale(&f, 0.0, 0.05),
            Err(Error::ScaleNotFound { .. })
        ));
    }

    #[test]
    fn cascade_arithmetic() {
        let f = make_suspension_time1(a()).unwrap();
        let rates = Rates {
            lambda: 0.5,
            kappa: 3.0,
        };
        let rep = derive_scale_cascade(0.05, rates, &f, &f, 6).unwrap();
        assert!((rep.delta1 - 0.05 / 6.0).abs() < 1e-15);
        assert!((rep.delta2 - 0.05 / 12.0).abs() < 1e-15);
        assert!((rep.delta3 - 0.05 / 144.0).abs() < 1e-15);
        assert_eq!(rep.delta_prime, 0.0);
        assert!(rep.accepted);
        // (P5) threshold instance: 0.05/(64*9) * 0.5 ~ 4.34e-5.
        let thr: f64 = 0.05 / (64.0 * 9.0) * 0.5;
        assert!((thr - 4.340277777777778e-5).abs() < 1e-18);
    }

    #[test]
    fn cascade_rejects_distant_pair() {
        let f = make_suspension_time1(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 1e-3).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let rep = derive_scale_cascade(0.05, rates, &f, &g, 8).unwrap();
        assert!(!rep.accepted, "1e-3 is too far at delta = 0.05");
        let rep2 = derive_scale_cascade(1.0, rates, &f, &g, 8).unwrap();
        assert!(rep2.accepted, "larger delta admits the pair");
    }

    #[test]
    fn rate_report_serialization_fields() {
        let f = make_suspension_time1(a()).unwrap();
        let rates = estimate_rates(&f, 4).unwrap();
        let rep = derive_scale_cascade(0.05, rates, &f, &f, 4).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        for key in [
            "lambda",
            "kappa",
            "delta",
            "delta_prime",
            "delta1",
            "delta2",
            "delta3",
            "accepted",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
