//! Catalog of explicit diffeomorphisms: linear skew products, time-t
//! maps of constant-roof suspension flows, a skew product with two
//! invariant tori and non-uniquely-integrable center bundle (on the
//! product torus and on its twisted quotient), and a perturbation
//! combinator producing C1-close pairs.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::chart::{
    self, normalize, normalize_with_deck, ChartPoint, IntMat2, ManifoldDescriptor, ManifoldKind,
};
use crate::error::{Error, Result};

/// How Jacobians are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum JacobianMode {
    Analytic,
    /// Central differences with the given step.
    CentralDifference { step: f64 },
}

impl Default for JacobianMode {
    fn default() -> Self {
        JacobianMode::Analytic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Displaces the fiber coordinate by a periodic shear.
    FiberShear,
    /// Displaces along the stable eigendirection by a bump supported
    /// away from the gluing locus.
    TranslationBump,
}

/// Symbolic recipe of a cataloged system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case")]
pub enum Recipe {
    Skew {
        matrix: IntMat2,
    },
    Suspension {
        matrix: IntMat2,
        time: f64,
    },
    Hhu {
        matrix: IntMat2,
        c: f64,
        a0: f64,
        a1: f64,
        quotient: bool,
    },
    Perturbed {
        base: Box<Recipe>,
        kind: PerturbationKind,
        eps: f64,
    },
}

impl Recipe {
    fn matrix(&self) -> IntMat2 {
        match self {
            Recipe::Skew { matrix }
            | Recipe::Suspension { matrix, .. }
            | Recipe::Hhu { matrix, .. } => *matrix,
            Recipe::Perturbed { base, .. } => base.matrix(),
        }
    }

    fn manifold(&self) -> Result<ManifoldDescriptor> {
        match self {
            Recipe::Skew { .. } => ManifoldDescriptor::product_torus(1.0),
            Recipe::Suspension { matrix, .. } => ManifoldDescriptor::mapping_torus(*matrix),
            Recipe::Hhu {
                matrix, quotient, ..
            } => {
                if *quotient {
                    ManifoldDescriptor::hhu_quotient(*matrix)
                } else {
                    ManifoldDescriptor::product_torus(2.0)
                }
            }
            Recipe::Perturbed { base, .. } => base.manifold(),
        }
    }

    /// Total perturbation amplitude stacked on the base system.
    fn total_eps(&self) -> f64 {
        match self {
            Recipe::Perturbed { base, eps, .. } => eps + base.total_eps(),
            _ => 0.0,
        }
    }
}

/// Smooth circle map on the theta fiber with fixed points exactly at
/// 0 and -1 (mod 2) and prescribed derivatives there:
/// `psi(t) = t + alpha sin(pi t) + beta sin(2 pi t)`.
#[derive(Debug, Clone, Copy)]
struct FiberMap {
    alpha: f64,
    beta: f64,
}

impl FiberMap {
    fn new(a0: f64, a1: f64) -> Result<Self> {
        let alpha = (a0 - a1) / (2.0 * std::f64::consts::PI);
        let beta = (a0 + a1 - 2.0) / (4.0 * std::f64::consts::PI);
        // The displacement factors as sin(pi t) (alpha + 2 beta cos(pi t));
        // zeros stay exactly at the integers iff |alpha| > 2 |beta|.
        if alpha.abs() <= 2.0 * beta.abs() {
            return Err(Error::invalid(
                "fiber map displacement would vanish away from the fixed tori",
            ));
        }
        let m = FiberMap { alpha, beta };
        for i in 0..=4000 {
            let t = -1.0 + 2.0 * i as f64 / 4000.0;
            if m.deriv(t) <= 0.0 {
                return Err(Error::invalid("fiber map is not a diffeomorphism"));
            }
        }
        Ok(m)
    }

    fn eval(&self, t: f64) -> f64 {
        let p = std::f64::consts::PI;
        t + self.alpha * (p * t).sin() + self.beta * (2.0 * p * t).sin()
    }

    fn deriv(&self, t: f64) -> f64 {
        let p = std::f64::consts::PI;
        1.0 + self.alpha * p * (p * t).cos() + 2.0 * self.beta * p * (2.0 * p * t).cos()
    }

    /// Monotone scalar inversion: Newton with bisection safeguard.
    fn invert(&self, y: f64) -> f64 {
        let (mut lo, mut hi) = (y - 1.0, y + 1.0);
        let mut t = y;
        for _ in 0..200 {
            let r = self.eval(t) - y;
            if r > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.deriv(t);
            let mut next = t - r / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() < 1e-16 {
                return next;
            }
            t = next;
        }
        t
    }

    /// Invert and wrap into the manifold's theta interval.
    fn invert_in_domain(&self, y: f64, m: &ManifoldDescriptor) -> f64 {
        let t = self.invert(y);
        let lo = m.theta_lo();
        if t < lo {
            t + m.period
        } else if t >= lo + m.period {
            t - m.period
        } else {
            t
        }
    }
}

/// Smooth transition equal to 0 for u <= 0 and 1 for u >= 1.
fn smoothstep_inf(u: f64) -> f64 {
    let sigma = |v: f64| if v > 0.0 { (-1.0 / v).exp() } else { 0.0 };
    let a = sigma(u);
    let b = sigma(1.0 - u);
    a / (a + b)
}

fn smoothstep_inf_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let sigma = |v: f64| (-1.0 / v).exp();
    let a = sigma(u);
    let b = sigma(1.0 - u);
    let da = a / (u * u);
    let db = -b / ((1.0 - u) * (1.0 - u));
    (da * b - a * db) / ((a + b) * (a + b))
}

/// Infinitely flat bump on (0,1), max 1 at the midpoint.
fn bump01(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    (1.0 - 1.0 / (4.0 * u * (1.0 - u))).exp()
}

fn bump01_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let w = 4.0 * u * (1.0 - u);
    let dw = 4.0 * (1.0 - 2.0 * u);
    bump01(u) * dw / (w * w)
}

/// Shear taper for the quotient system: 1 away from the gluing torus
/// `theta = -1 ~ 1`, vanishing to all orders there (transition width
/// 0.25 per side). Without it the quotient map is only Lipschitz at
/// the gluing.
fn gluing_taper(theta: f64) -> f64 {
    let r = (theta - 1.0).rem_euclid(2.0); // in [0,2), gluing at 0
    let d = r.min(2.0 - r);
    smoothstep_inf(d / 0.25)
}

fn gluing_taper_deriv(theta: f64) -> f64 {
    let r = (theta - 1.0).rem_euclid(2.0);
    let (d, sign) = if r <= 1.0 { (r, 1.0) } else { (2.0 - r, -1.0) };
    sign * smoothstep_inf_deriv(d / 0.25) / 0.25
}

#[derive(Debug)]
struct HhuData {
    a: Matrix2<f64>,
    a_inv: Matrix2<f64>,
    e_s: Vector2<f64>,
    c: f64,
    psi: FiberMap,
    tapered: bool,
}

impl HhuData {
    fn shear(&self, theta: f64) -> f64 {
        let v = -self.c * (std::f64::consts::PI * theta).sin();
        if self.tapered {
            v * gluing_taper(theta)
        } else {
            v
        }
    }

    fn shear_deriv(&self, theta: f64) -> f64 {
        let p = std::f64::consts::PI;
        let v = -self.c * (p * theta).sin();
        let dv = -self.c * p * (p * theta).cos();
        if self.tapered {
            dv * gluing_taper(theta) + v * gluing_taper_deriv(theta)
        } else {
            dv
        }
    }
}

#[derive(Debug)]
enum Kernel {
    Skew {
        a: Matrix2<f64>,
        a_inv: Matrix2<f64>,
    },
    Suspension {
        a: Matrix2<f64>,
        time: f64,
    },
    Hhu(HhuData),
    Perturbed {
        base: Arc<Kernel>,
        kind: PerturbationKind,
        eps: f64,
        shear_dir: Vector2<f64>,
    },
}

/// An evaluable diffeomorphism with inverse and Jacobian, chart-aware.
///
/// Values are immutable after construction; evaluation is pure and may
/// be called from concurrent workers without coordination.
#[derive(Debug, Clone)]
pub struct DynamicalSystem {
    pub recipe: Recipe,
    pub manifold: ManifoldDescriptor,
    pub jacobian_mode: JacobianMode,
    kernel: Arc<Kernel>,
}

impl PartialEq for DynamicalSystem {
    fn eq(&self, other: &Self) -> bool {
        self.recipe == other.recipe
            && self.manifold == other.manifold
            && self.jacobian_mode == other.jacobian_mode
    }
}

fn build_kernel(recipe: &Recipe) -> Result<Arc<Kernel>> {
    match recipe {
        Recipe::Skew { matrix } => Ok(Arc::new(Kernel::Skew {
            a: matrix.as_f64(),
            a_inv: matrix.inverse()?.as_f64(),
        })),
        Recipe::Suspension { matrix, time } => Ok(Arc::new(Kernel::Suspension {
            a: matrix.as_f64(),
            time: *time,
        })),
        Recipe::Hhu {
            matrix,
            c,
            a0,
            a1,
            quotient,
        } => Ok(Arc::new(Kernel::Hhu(HhuData {
            a: matrix.as_f64(),
            a_inv: matrix.inverse()?.as_f64(),
            e_s: matrix.stable_direction()?,
            c: *c,
            psi: FiberMap::new(*a0, *a1)?,
            tapered: *quotient,
        }))),
        Recipe::Perturbed { base, kind, eps } => {
            let shear_dir = base
                .matrix()
                .stable_direction()
                .unwrap_or_else(|_| Vector2::new(1.0, 0.0));
            Ok(Arc::new(Kernel::Perturbed {
                base: build_kernel(base)?,
                kind: *kind,
                eps: *eps,
                shear_dir,
            }))
        }
    }
}

/// Chart displacement of the perturbation at a (normalized) point.
fn perturbation_displacement(
    kind: PerturbationKind,
    eps: f64,
    shear_dir: Vector2<f64>,
    m: &ManifoldDescriptor,
    c: [f64; 3],
) -> Vector3<f64> {
    let tau = std::f64::consts::TAU;
    match (kind, m.kind) {
        (PerturbationKind::FiberShear, ManifoldKind::ProductTorus) => {
            Vector3::new(0.0, 0.0, eps * (tau * c[0]).sin())
        }
        (PerturbationKind::FiberShear, _) => {
            let u = (c[2] - m.theta_lo()) / m.period;
            Vector3::new(0.0, 0.0, eps * (tau * u).sin())
        }
        (PerturbationKind::TranslationBump, _) => {
            let u = (c[2] - m.theta_lo()) / m.period;
            let b = bump01(u);
            Vector3::new(eps * b * shear_dir.x, eps * b * shear_dir.y, 0.0)
        }
    }
}

fn perturbation_jacobian(
    kind: PerturbationKind,
    eps: f64,
    shear_dir: Vector2<f64>,
    m: &ManifoldDescriptor,
    c: [f64; 3],
) -> Matrix3<f64> {
    let tau = std::f64::consts::TAU;
    let mut j = Matrix3::identity();
    match (kind, m.kind) {
        (PerturbationKind::FiberShear, ManifoldKind::ProductTorus) => {
            j[(2, 0)] = eps * tau * (tau * c[0]).cos();
        }
        (PerturbationKind::FiberShear, _) => {
            let u = (c[2] - m.theta_lo()) / m.period;
            j[(2, 2)] = 1.0 + eps * (tau / m.period) * (tau * u).cos();
        }
        (PerturbationKind::TranslationBump, _) => {
            let u = (c[2] - m.theta_lo()) / m.period;
            let db = bump01_deriv(u) / m.period;
            j[(0, 2)] = eps * db * shear_dir.x;
            j[(1, 2)] = eps * db * shear_dir.y;
        }
    }
    j
}

fn perturbation_inverse(
    kind: PerturbationKind,
    eps: f64,
    shear_dir: Vector2<f64>,
    m: &ManifoldDescriptor,
    p: &ChartPoint,
) -> Result<ChartPoint> {
    let c = p.coords;
    let tau = std::f64::consts::TAU;
    match (kind, m.kind) {
        (PerturbationKind::FiberShear, ManifoldKind::ProductTorus) => {
            // x is untouched, so the shear inverts exactly.
            normalize([c[0], c[1], c[2] - eps * (tau * c[0]).sin()], m)
        }
        (PerturbationKind::FiberShear, _) => {
            // Solve theta' = theta + eps sin(2 pi u(theta)); the shear
            // is period-periodic so the wrapped representative solves
            // the same equation.
            let mut t = c[2];
            for _ in 0..200 {
                let u = (t - m.theta_lo()) / m.period;
                let next = c[2] - eps * (tau * u).sin();
                if (next - t).abs() < 1e-16 {
                    t = next;
                    break;
                }
                t = next;
            }
            normalize([c[0], c[1], t], m)
        }
        (PerturbationKind::TranslationBump, _) => {
            let u = (c[2] - m.theta_lo()) / m.period;
            let b = bump01(u);
            normalize(
                [
                    c[0] - eps * b * shear_dir.x,
                    c[1] - eps * b * shear_dir.y,
                    c[2],
                ],
                m,
            )
        }
    }
}

fn embed2(a: &Matrix2<f64>) -> Matrix3<f64> {
    let mut j = Matrix3::identity();
    j[(0, 0)] = a[(0, 0)];
    j[(0, 1)] = a[(0, 1)];
    j[(1, 0)] = a[(1, 0)];
    j[(1, 1)] = a[(1, 1)];
    j
}

fn kernel_forward(k: &Kernel, p: &ChartPoint) -> Result<ChartPoint> {
    let m = &p.manifold;
    let c = p.coords;
    match k {
        Kernel::Skew { a, .. } => {
            let b = a * Vector2::new(c[0], c[1]);
            normalize([b.x, b.y, c[2]], m)
        }
        Kernel::Suspension { time, .. } => normalize([c[0], c[1], c[2] + time], m),
        Kernel::Hhu(d) => {
            let v = d.shear(c[2]);
            let b = d.a * Vector2::new(c[0], c[1]) + v * d.e_s;
            normalize([b.x, b.y, d.psi.eval(c[2])], m)
        }
        Kernel::Perturbed {
            base,
            kind,
            eps,
            shear_dir,
        } => {
            let fp = kernel_forward(base, p)?;
            let disp = perturbation_displacement(*kind, *eps, *shear_dir, m, fp.coords);
            fp.offset(disp)
        }
    }
}

fn kernel_inverse(k: &Kernel, p: &ChartPoint) -> Result<ChartPoint> {
    let m = &p.manifold;
    let c = p.coords;
    match k {
        Kernel::Skew { a_inv, .. } => {
            let b = a_inv * Vector2::new(c[0], c[1]);
            normalize([b.x, b.y, c[2]], m)
        }
        Kernel::Suspension { time, .. } => normalize([c[0], c[1], c[2] - time], m),
        Kernel::Hhu(d) => {
            let t = d.psi.invert_in_domain(c[2], m);
            let v = d.shear(t);
            let b = d.a_inv * (Vector2::new(c[0], c[1]) - v * d.e_s);
            normalize([b.x, b.y, t], m)
        }
        Kernel::Perturbed {
            base,
            kind,
            eps,
            shear_dir,
        } => {
            let q = perturbation_inverse(*kind, *eps, *shear_dir, m, p)?;
            kernel_inverse(base, &q)
        }
    }
}

fn kernel_jacobian(k: &Kernel, p: &ChartPoint) -> Result<Matrix3<f64>> {
    let m = &p.manifold;
    let c = p.coords;
    match k {
        Kernel::Skew { a, .. } => Ok(embed2(a)),
        Kernel::Suspension { a, time } => {
            // One roof crossing iff s + t leaves the interval.
            if c[2] + time >= m.theta_lo() + m.period {
                Ok(embed2(a))
            } else {
                Ok(Matrix3::identity())
            }
        }
        Kernel::Hhu(d) => {
            let mut j = embed2(&d.a);
            let dv = d.shear_deriv(c[2]);
            j[(0, 2)] = dv * d.e_s.x;
            j[(1, 2)] = dv * d.e_s.y;
            j[(2, 2)] = d.psi.deriv(c[2]);
            Ok(j)
        }
        Kernel::Perturbed {
            base,
            kind,
            eps,
            shear_dir,
        } => {
            let fp = kernel_forward(base, p)?;
            let jf = kernel_jacobian(base, p)?;
            let jp = perturbation_jacobian(*kind, *eps, *shear_dir, m, fp.coords);
            // If the displacement itself wraps through the gluing the
            // chart Jacobian picks up the deck action.
            let disp = perturbation_displacement(*kind, *eps, *shear_dir, m, fp.coords);
            let raw = [
                fp.coords[0] + disp.x,
                fp.coords[1] + disp.y,
                fp.coords[2] + disp.z,
            ];
            let (_, deck) = normalize_with_deck(raw, m)?;
            let j = jp * jf;
            if deck.base_pow == 0 {
                Ok(j)
            } else {
                let mut out = Matrix3::zeros();
                for i in 0..3 {
                    let col: Vector3<f64> = j.column(i).into();
                    out.set_column(i, &deck.transport(m, col)?);
                }
                Ok(out)
            }
        }
    }
}

impl DynamicalSystem {
    /// Build a system from a recipe; the manifold is derived from it.
    pub fn from_recipe(recipe: Recipe) -> Result<Self> {
        let manifold = recipe.manifold()?;
        let kernel = build_kernel(&recipe)?;
        Ok(DynamicalSystem {
            recipe,
            manifold,
            jacobian_mode: JacobianMode::Analytic,
            kernel,
        })
    }

    /// Evaluate the map in fundamental-domain coordinates.
    pub fn forward(&self, p: &ChartPoint) -> Result<ChartPoint> {
        self.check_point(p)?;
        kernel_forward(&self.kernel, p)
    }

    pub fn inverse(&self, p: &ChartPoint) -> Result<ChartPoint> {
        self.check_point(p)?;
        kernel_inverse(&self.kernel, p)
    }

    /// n-fold composition, negative n meaning the inverse.
    pub fn iterate(&self, p: &ChartPoint, n: i32) -> Result<ChartPoint> {
        let mut q = *p;
        for _ in 0..n.unsigned_abs() {
            q = if n >= 0 {
                kernel_forward(&self.kernel, &q)?
            } else {
                kernel_inverse(&self.kernel, &q)?
            };
        }
        Ok(q)
    }

    /// Chart Jacobian of the forward map at `p` (branch-aware across
    /// the gluing, consistent with how `forward` normalizes).
    pub fn jacobian(&self, p: &ChartPoint) -> Result<Matrix3<f64>> {
        self.check_point(p)?;
        match self.jacobian_mode {
            JacobianMode::Analytic => kernel_jacobian(&self.kernel, p),
            JacobianMode::CentralDifference { step } => self.jacobian_fd(p, step),
        }
    }

    /// Central-difference Jacobian; also the cross-check oracle for the
    /// analytic formulas.
    pub fn jacobian_fd(&self, p: &ChartPoint, h: f64) -> Result<Matrix3<f64>> {
        let mut out = Matrix3::zeros();
        let fp = kernel_forward(&self.kernel, p)?;
        for i in 0..3 {
            let mut cp = p.coords;
            cp[i] += h;
            let plus = kernel_forward(&self.kernel, &normalize(cp, &self.manifold)?)?;
            let mut cm = p.coords;
            cm[i] -= h;
            let minus = kernel_forward(&self.kernel, &normalize(cm, &self.manifold)?)?;
            let dp = chart::chart_diff(&plus, &fp)?;
            let dm = chart::chart_diff(&minus, &fp)?;
            let col = (dp - dm) / (2.0 * h);
            out.set_column(i, &col);
        }
        Ok(out)
    }

    /// Chart Jacobian of the inverse map at `p`.
    pub fn jacobian_inverse_map(&self, p: &ChartPoint) -> Result<Matrix3<f64>> {
        let pre = self.inverse(p)?;
        let j = self.jacobian(&pre)?;
        j.try_inverse()
            .ok_or_else(|| Error::violation("singular Jacobian"))
    }

    fn check_point(&self, p: &ChartPoint) -> Result<()> {
        if p.manifold != self.manifold {
            return Err(Error::invalid(
                "point does not live on the system's manifold",
            ));
        }
        Ok(())
    }

    /// The toral automorphism underlying this system.
    pub fn matrix(&self) -> IntMat2 {
        self.recipe.matrix()
    }

    /// Total amplitude of stacked perturbations.
    pub fn perturbation_amplitude(&self) -> f64 {
        self.recipe.total_eps()
    }
}

/// `(x, theta) -> (A x, theta)` on the product torus with period 1.
pub fn make_skew_product(a: IntMat2) -> Result<DynamicalSystem> {
    if !a.is_hyperbolic() {
        return Err(Error::invalid("skew product requires a hyperbolic matrix"));
    }
    DynamicalSystem::from_recipe(Recipe::Skew { matrix: a })
}

/// Time-1 map of the constant-roof suspension flow of `A` on the
/// mapping torus: `(x, s) -> (A x, s)` in the chart.
pub fn make_suspension_time1(a: IntMat2) -> Result<DynamicalSystem> {
    make_suspension_time(a, 1.0)
}

/// Time-t map of the suspension flow for `t` in (0, 1].
pub fn make_suspension_time(a: IntMat2, time: f64) -> Result<DynamicalSystem> {
    if !a.is_hyperbolic() {
        return Err(Error::invalid("suspension requires a hyperbolic matrix"));
    }
    if !(time > 0.0 && time <= 1.0) {
        return Err(Error::invalid("suspension time must lie in (0, 1]"));
    }
    DynamicalSystem::from_recipe(Recipe::Suspension { matrix: a, time })
}

/// Skew product `f(x, t) = (A x + v(t) e_s, psi(t))` on the product
/// torus of period 2, with invariant tori at `t = 0` and `t = -1 ~ 1`,
/// fiber derivatives `a0` at 0 and `a1` at -1, and shear
/// `v(t) = -c sin(pi t)`.
///
/// Requires `0 < a0 < lambda < 1 < a1 < 1/lambda` with `lambda` the
/// contracting eigenvalue of `A`.
pub fn make_hhu_map(a: IntMat2, c: f64, a0: f64, a1: f64) -> Result<DynamicalSystem> {
    make_hhu(a, c, a0, a1, false)
}

/// Quotient version of [`make_hhu_map`] on `(T^2 x R)/Gamma`, where
/// every center leaf is individually fixed. The shear is tapered to
/// vanish flatly at the gluing torus so the quotient map stays C1.
pub fn make_hhu_quotient(a: IntMat2, c: f64, a0: f64, a1: f64) -> Result<DynamicalSystem> {
    make_hhu(a, c, a0, a1, true)
}

fn make_hhu(a: IntMat2, c: f64, a0: f64, a1: f64, quotient: bool) -> Result<DynamicalSystem> {
    if !a.is_hyperbolic() {
        return Err(Error::invalid("requires a hyperbolic matrix"));
    }
    let (ls, _) = a.eigenvalues()?;
    let lambda = ls.abs();
    if !(0.0 < a0 && a0 < lambda && 1.0 < a1 && a1 < 1.0 / lambda) {
        return Err(Error::invalid(format!(
            "fiber derivatives must satisfy 0 < a0 < {lambda:.6} < 1 < a1 < {:.6}",
            1.0 / lambda
        )));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("shear amplitude must be positive"));
    }
    DynamicalSystem::from_recipe(Recipe::Hhu {
        matrix: a,
        c,
        a0,
        a1,
        quotient,
    })
}

/// Compose `f` with a smooth chart-level displacement of amplitude
/// `eps`. `eps = 0` returns a system extensionally equal to `f`.
pub fn perturb(f: &DynamicalSystem, kind: PerturbationKind, eps: f64) -> Result<DynamicalSystem> {
    if !(eps >= 0.0) {
        return Err(Error::invalid("perturbation amplitude must be nonnegative"));
    }
    let sys = DynamicalSystem::from_recipe(Recipe::Perturbed {
        base: Box::new(f.recipe.clone()),
        kind,
        eps,
    })?;
    // Invertibility probe on a coarse grid.
    let mut worst = 0.0f64;
    for p in probe_grid(&f.manifold, 5) {
        let q = sys.inverse(&sys.forward(&p)?)?;
        worst = worst.max(chart::dist(&p, &q)?);
    }
    if worst > 1e-9 {
        return Err(Error::invalid(format!(
            "perturbation breaks invertibility on the probe grid (round-trip {worst:.3e})"
        )));
    }
    Ok(sys)
}

/// Measured C0 and Jacobian distances between two systems on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbReport {
    pub c0_distance: f64,
    pub jacobian_distance: f64,
}

/// Sup over an `n^3` grid of `d(f(x), g(x))` and of the Jacobian
/// difference in Frobenius norm.
pub fn perturb_report(f: &DynamicalSystem, g: &DynamicalSystem, n: usize) -> Result<PerturbReport> {
    let mut c0 = 0.0f64;
    let mut c1 = 0.0f64;
    for p in probe_grid(&f.manifold, n) {
        let fp = f.forward(&p)?;
        let gp = g.forward(&p)?;
        c0 = c0.max(chart::dist(&fp, &gp)?);
        let dj = g.jacobian(&p)? - f.jacobian(&p)?;
        c1 = c1.max(dj.norm());
    }
    Ok(PerturbReport {
        c0_distance: c0,
        jacobian_distance: c1,
    })
}

/// Regular sample grid over the fundamental domain, offset by half a
/// cell so that special loci (fixed tori, gluing boundaries) are
/// avoided.
pub fn probe_grid(m: &ManifoldDescriptor, n: usize) -> Vec<ChartPoint> {
    let mut out = Vec::with_capacity(n * n * n);
    let lo = m.theta_lo();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = [
                    (i as f64 + 0.5) / n as f64,
                    (j as f64 + 0.5) / n as f64,
                    lo + m.period * (k as f64 + 0.5) / n as f64,
                ];
                out.push(normalize(c, m).expect("grid point is finite"));
            }
        }
    }
    out
}

/// Round-trip and Jacobian cross-check residuals for a system.
#[derive(Debug, Clone, Serialize)]
pub struct SystemCheck {
    pub round_trip_sup: f64,
    pub jacobian_mismatch_sup: f64,
}

/// Verifies `forward(inverse(p)) = p` and analytic-vs-central-difference
/// Jacobians on an `n^3` grid, skipping points whose difference stencil
/// straddles a chart branch locus (where the chart Jacobian of a
/// manifold-smooth map legitimately switches branch).
pub fn check_system(sys: &DynamicalSystem, n: usize) -> Result<SystemCheck> {
    let mut rt = 0.0f64;
    let mut jm = 0.0f64;
    let h = 1e-6;
    for p in probe_grid(&sys.manifold, n) {
        let q = sys.forward(&sys.inverse(&p)?)?;
        rt = rt.max(chart::dist(&p, &q)?);
        let q2 = sys.inverse(&sys.forward(&p)?)?;
        rt = rt.max(chart::dist(&p, &q2)?);
        if near_branch_locus(sys, &p, 4.0 * h)? {
            continue;
        }
        let ja = sys.jacobian(&p)?;
        let jf = sys.jacobian_fd(&p, h)?;
        jm = jm.max((ja - jf).norm());
    }
    Ok(SystemCheck {
        round_trip_sup: rt,
        jacobian_mismatch_sup: jm,
    })
}

fn near_branch_locus(sys: &DynamicalSystem, p: &ChartPoint, margin: f64) -> Result<bool> {
    fn walk(r: &Recipe, m: &ManifoldDescriptor, p: &ChartPoint, margin: f64) -> bool {
        match r {
            Recipe::Suspension { time, .. } => {
                let boundary = m.theta_lo() + m.period - time;
                (p.coords[2] - boundary).abs() < margin
            }
            Recipe::Perturbed { base, .. } => walk(base, m, p, margin),
            _ => false,
        }
    }
    if walk(&sys.recipe, &sys.manifold, p, margin) {
        return Ok(true);
    }
    // Stacked perturbations can push the image across the gluing.
    let eps = sys.perturbation_amplitude();
    if eps > 0.0 {
        let fp = sys.forward(p)?;
        let lo = sys.manifold.theta_lo();
        let hi = lo + sys.manifold.period;
        let d = (fp.coords[2] - lo).min(hi - fp.coords[2]);
        if d < margin + 2.0 * eps {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::dist;

    fn a() -> IntMat2 {
        IntMat2::cat_map()
    }

    #[test]
    fn skew_product_fixed_base_point() {
        let f = make_skew_product(a()).unwrap();
        let p = normalize([0.0, 0.0, 0.25], &f.manifold).unwrap();
        let q = f.forward(&p).unwrap();
        assert!(dist(&p, &q).unwrap() < 1e-15);
    }

    #[test]
    fn skew_product_matrix_action() {
        let f = make_skew_product(a()).unwrap();
        let p = normalize([0.1, 0.1, 0.0], &f.manifold).unwrap();
        let q = f.forward(&p).unwrap();
        assert!((q.coords[0] - 0.3).abs() < 1e-12);
        assert!((q.coords[1] - 0.2).abs() < 1e-12);
        assert_eq!(q.coords[2], 0.0);
    }

    #[test]
    fn skew_product_unstable_eigenvalue() {
        let f = make_skew_product(a()).unwrap();
        let p = normalize([0.3, 0.7, 0.2], &f.manifold).unwrap();
        let j = f.jacobian(&p).unwrap();
        let eu = a().unstable_direction().unwrap();
        let v = Vector3::new(eu.x, eu.y, 0.0);
        let w = j * v;
        let mu = (3.0 + 5.0f64.sqrt()) / 2.0;
        assert!((w.norm() - mu).abs() < 1e-10);
    }

    #[test]
    fn non_hyperbolic_matrix_rejected() {
        assert!(make_skew_product(IntMat2::new(1, 1, 0, 1)).is_err());
        assert!(make_skew_product(IntMat2::new(2, 0, 0, 2)).is_err());
    }

    #[test]
    fn suspension_roof_crossing() {
        let f = make_suspension_time1(a()).unwrap();
        let p = normalize([0.1, 0.2, 0.3], &f.manifold).unwrap();
        let q = f.forward(&p).unwrap();
        let am = a().as_f64();
        let e = am * Vector2::new(0.1, 0.2);
        assert!((q.coords[0] - e.x.rem_euclid(1.0)).abs() < 1e-12);
        assert!((q.coords[1] - e.y.rem_euclid(1.0)).abs() < 1e-12);
        assert!((q.coords[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn suspension_round_trip_grid() {
        let f = make_suspension_time1(a()).unwrap();
        let mut worst = 0.0f64;
        for p in probe_grid(&f.manifold, 10) {
            let q = f.inverse(&f.forward(&p).unwrap()).unwrap();
            worst = worst.max(dist(&p, &q).unwrap());
        }
        assert!(worst < 1e-12, "round trip {worst:.3e}");
    }

    #[test]
    fn catalog_round_trip_and_jacobians() {
        let systems = vec![
            make_skew_product(a()).unwrap(),
            make_suspension_time1(a()).unwrap(),
            make_suspension_time(a(), 0.3).unwrap(),
            make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap(),
            make_hhu_quotient(a(), 0.05, 0.3, 1.5).unwrap(),
            perturb(
                &make_suspension_time1(a()).unwrap(),
                PerturbationKind::FiberShear,
                1e-3,
            )
            .unwrap(),
            perturb(
                &make_skew_product(a()).unwrap(),
                PerturbationKind::TranslationBump,
                1e-3,
            )
            .unwrap(),
        ];
        for sys in &systems {
            let chk = check_system(sys, 10).unwrap();
            assert!(
                chk.round_trip_sup < 1e-9,
                "{:?}: rt {:.3e}",
                sys.recipe,
                chk.round_trip_sup
            );
            assert!(
                chk.jacobian_mismatch_sup < 1e-5,
                "{:?}: jac {:.3e}",
                sys.recipe,
                chk.jacobian_mismatch_sup
            );
        }
    }

    #[test]
    fn hhu_constraint_window() {
        // lambda = (3 - sqrt 5)/2 ~ 0.381966
        assert!(make_hhu_map(a(), 0.05, 0.3, 1.5).is_ok());
        assert!(make_hhu_map(a(), 0.05, 0.4, 1.5).is_err()); // a0 > lambda
        assert!(make_hhu_map(a(), 0.05, 0.3, 2.7).is_err()); // a1 > 1/lambda
        assert!(make_hhu_map(a(), 0.0, 0.3, 1.5).is_err()); // c = 0
    }

    #[test]
    fn hhu_invariant_tori() {
        for sys in [
            make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap(),
            make_hhu_quotient(a(), 0.05, 0.3, 1.5).unwrap(),
        ] {
            let lo = sys.manifold.theta_lo();
            let tori = [0.0, if lo < 0.0 { -1.0 } else { 1.0 }];
            let mut worst = 0.0f64;
            for &t in &tori {
                for i in 0..64 {
                    for j in 0..64 {
                        let p =
                            normalize([i as f64 / 64.0, j as f64 / 64.0, t], &sys.manifold)
                                .unwrap();
                        let q = sys.forward(&p).unwrap();
                        let dt = (q.coords[2] - t).abs();
                        let dt = dt.min((dt - sys.manifold.period).abs());
                        worst = worst.max(dt);
                    }
                }
            }
            assert!(worst < 1e-12, "torus displacement {worst:.3e}");
        }
    }

    #[test]
    fn hhu_acts_as_matrix_on_tori() {
        let sys = make_hhu_map(a(), 0.05, 0.3, 1.5).unwrap();
        let p = normalize([0.3, 0.8, 0.0], &sys.manifold).unwrap();
        let q = sys.forward(&p).unwrap();
        let e = a().as_f64() * Vector2::new(0.3, 0.8);
        assert!((q.coords[0] - e.x.rem_euclid(1.0)).abs() < 1e-12);
        assert!((q.coords[1] - e.y.rem_euclid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn perturb_zero_is_bitwise_identity() {
        let f = make_skew_product(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 0.0).unwrap();
        for p in probe_grid(&f.manifold, 6) {
            let fp = f.forward(&p).unwrap();
            let gp = g.forward(&p).unwrap();
            assert_eq!(fp.coords, gp.coords);
        }
    }

    #[test]
    fn perturb_c0_distance_bounded() {
        let f = make_skew_product(a()).unwrap();
        let g = perturb(&f, PerturbationKind::FiberShear, 1e-3).unwrap();
        let rep = perturb_report(&f, &g, 20).unwrap();
        assert!(rep.c0_distance <= 1e-3 + 1e-15, "{:.3e}", rep.c0_distance);
        assert!(rep.c0_distance > 1e-4, "perturbation should be visible");
    }

    #[test]
    fn recipe_json_round_trip() {
        let f = perturb(
            &make_suspension_time1(a()).unwrap(),
            PerturbationKind::FiberShear,
            1e-4,
        )
        .unwrap();
        let s = serde_json::to_string(&f.recipe).unwrap();
        let back: Recipe = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f.recipe);
    }
}
