//! Numerical integration of the one-dimensional invariant line fields
//! into leaf arcs, local product-structure plaques and intersections,
//! and holonomy transports along leaves.

use nalgebra::Vector3;

use crate::chart::{self, chart_diff_with_deck, ChartPoint, LocalChart};
use crate::cones::{Bundle, BundleEstimator};
use crate::error::{Error, Result};
use crate::systems::{probe_grid, DynamicalSystem};

/// What a line field evaluates.
#[derive(Debug, Clone)]
pub enum FieldSpec {
    /// One of the invariant bundles of the system.
    Invariant(Bundle),
    /// A fixed chart direction (negative controls and test doubles).
    ConstantChart(Vector3<f64>),
}

/// An evaluable unit line field on a system's manifold.
///
/// Invariant fields are re-derived per point by power iteration; two
/// structure-exploiting caches keep integration fast: for
/// constant-coefficient systems the direction is computed once, and
/// for systems whose derivative depends only on the fiber coordinate
/// the direction is tabulated adaptively along the fiber.
#[derive(Debug, Clone)]
pub struct LineField {
    pub sys: DynamicalSystem,
    pub spec: FieldSpec,
    pub estimator: BundleEstimator,
    cached: Option<Vector3<f64>>,
    theta_table: Option<std::sync::Arc<ThetaTable>>,
}

/// Direction samples over the fiber coordinate, adaptively refined
/// where the direction turns (the invariant bundles of fiber-driven
/// skew products are Holder near their invariant tori).
#[derive(Debug)]
pub struct ThetaTable {
    thetas: Vec<f64>,
    dirs: Vec<Vector3<f64>>,
}

impl ThetaTable {
    fn build(sys: &DynamicalSystem, bundle: Bundle, est: &BundleEstimator) -> Result<ThetaTable> {
        let m = &sys.manifold;
        let lo = m.theta_lo();
        let eval = |theta: f64| -> Result<Vector3<f64>> {
            let p = crate::chart::normalize([0.171717, 0.434343, theta], m)?;
            Ok(est.direction(sys, &p, bundle)?.0)
        };
        // Seed grid, then curvature-driven refinement with a width
        // floor (the direction may be Holder, not smooth, at isolated
        // fiber values).
        let n0 = 512usize;
        let mut thetas: Vec<f64> = (0..=n0)
            .map(|i| lo + m.period * i as f64 / n0 as f64)
            .collect();
        // Keep the endpoint just inside the domain.
        let last = thetas.len() - 1;
        thetas[last] = lo + m.period * (1.0 - 1e-12);
        let mut dirs: Vec<Vector3<f64>> = Vec::with_capacity(thetas.len());
        for &t in &thetas {
            dirs.push(eval(t)?);
        }
        align_chain(&mut dirs);
        let tol = 1e-8;
        let floor = 1e-13;
        let mut guard = 0usize;
        loop {
            let mut inserted = false;
            let mut i = 0;
            while i + 1 < thetas.len() {
                let width = thetas[i + 1] - thetas[i];
                if width > floor {
                    let mid_t = 0.5 * (thetas[i] + thetas[i + 1]);
                    let mut mid = eval(mid_t)?;
                    if mid.dot(&dirs[i]) < 0.0 {
                        mid = -mid;
                    }
                    let interp = (dirs[i] + dirs[i + 1]).normalize();
                    if (mid - interp).norm() > tol {
                        thetas.insert(i + 1, mid_t);
                        dirs.insert(i + 1, mid);
                        inserted = true;
                        i += 2;
                        continue;
                    }
                }
                i += 1;
            }
            guard += 1;
            if !inserted || guard > 60 || thetas.len() > 400_000 {
                break;
            }
        }
        Ok(ThetaTable { thetas, dirs })
    }

    fn lookup(&self, theta: f64) -> Vector3<f64> {
        let i = match self
            .thetas
            .binary_search_by(|t| t.partial_cmp(&theta).unwrap())
        {
            Ok(i) => i.min(self.thetas.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.thetas.len() - 2),
        };
        let w = self.thetas[i + 1] - self.thetas[i];
        let a = ((theta - self.thetas[i]) / w).clamp(0.0, 1.0);
        (self.dirs[i] * (1.0 - a) + self.dirs[i + 1] * a).normalize()
    }
}

fn align_chain(dirs: &mut [Vector3<f64>]) {
    for i in 1..dirs.len() {
        if dirs[i].dot(&dirs[i - 1]) < 0.0 {
            dirs[i] = -dirs[i];
        }
    }
}

impl LineField {
    pub fn invariant(sys: &DynamicalSystem, bundle: Bundle) -> Result<LineField> {
        let estimator = BundleEstimator::default();
        let cached = constant_direction(sys, bundle, &estimator)?;
        let theta_table = if cached.is_none() && theta_driven(sys)? {
            Some(std::sync::Arc::new(ThetaTable::build(
                sys, bundle, &estimator,
            )?))
        } else {
            None
        };
        Ok(LineField {
            sys: sys.clone(),
            spec: FieldSpec::Invariant(bundle),
            estimator,
            cached,
            theta_table,
        })
    }

    pub fn constant(sys: &DynamicalSystem, dir: Vector3<f64>) -> LineField {
        LineField {
            sys: sys.clone(),
            spec: FieldSpec::ConstantChart(dir.normalize()),
            estimator: BundleEstimator::default(),
            cached: None,
            theta_table: None,
        }
    }

    /// Unit direction of the field at `p` (sign is canonical only up
    /// to the caches; integration carries orientation by continuity).
    pub fn direction(&self, p: &ChartPoint) -> Result<Vector3<f64>> {
        match &self.spec {
            FieldSpec::ConstantChart(d) => Ok(*d),
            FieldSpec::Invariant(bundle) => {
                if let Some(d) = self.cached {
                    return Ok(d);
                }
                if let Some(table) = &self.theta_table {
                    return Ok(table.lookup(p.coords[2]));
                }
                Ok(self.estimator.direction(&self.sys, p, *bundle)?.0)
            }
        }
    }

    pub fn bundle(&self) -> Option<Bundle> {
        match self.spec {
            FieldSpec::Invariant(b) => Some(b),
            FieldSpec::ConstantChart(_) => None,
        }
    }
}

/// If the chart Jacobian is the same at a probe sample, the invariant
/// bundles are constant and can be computed from a single matrix.
fn constant_direction(
    sys: &DynamicalSystem,
    bundle: Bundle,
    est: &BundleEstimator,
) -> Result<Option<Vector3<f64>>> {
    let pts = probe_grid(&sys.manifold, 3);
    let j0 = sys.jacobian(&pts[0])?;
    for p in &pts[1..] {
        if (sys.jacobian(p)? - j0).norm() > 1e-15 {
            return Ok(None);
        }
    }
    Ok(Some(est.direction(sys, &pts[0], bundle)?.0))
}

/// Does the chart derivative depend only on the fiber coordinate?
fn theta_driven(sys: &DynamicalSystem) -> Result<bool> {
    let m = &sys.manifold;
    for theta in [0.133, 0.561, 0.93] {
        let t = m.theta_lo() + m.period * theta;
        let p1 = crate::chart::normalize([0.2, 0.3, t], m)?;
        let p2 = crate::chart::normalize([0.77, 0.59, t], m)?;
        if (sys.jacobian(&p1)? - sys.jacobian(&p2)?).norm() > 1e-14 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// An arc-length discretized curve tangent to one invariant line
/// field, with oriented unit tangents.
#[derive(Debug, Clone)]
pub struct LeafArc {
    /// Bundle tag; `None` for constant-field test arcs.
    pub sigma: Option<Bundle>,
    pub points: Vec<ChartPoint>,
    /// Oriented unit tangents in the chart of each point.
    pub tangents: Vec<Vector3<f64>>,
    /// Strictly increasing arc-length parameters; 0 at the seed.
    pub params: Vec<f64>,
    pub seed_index: usize,
    /// Set when chart validity or budget cut the arc short.
    pub truncated: bool,
}

impl LeafArc {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn param_start(&self) -> f64 {
        self.params[0]
    }

    pub fn param_end(&self) -> f64 {
        *self.params.last().unwrap()
    }

    /// Total parameter span.
    pub fn length(&self) -> f64 {
        self.param_end() - self.param_start()
    }

    /// Sum of chord lengths (cross-check against the parameter span).
    pub fn chord_length(&self) -> Result<f64> {
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            acc += chart::dist(&w[0], &w[1])?;
        }
        Ok(acc)
    }

    fn segment_of(&self, t: f64) -> usize {
        match self.params.binary_search_by(|p| p.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.params.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.params.len() - 2),
        }
    }

    /// Cubic-hermite point at arc parameter `t` (clamped to range).
    pub fn point_at(&self, t: f64) -> Result<ChartPoint> {
        let t = t.clamp(self.param_start(), self.param_end());
        let i = self.segment_of(t);
        let (p0, p1) = (&self.points[i], &self.points[i + 1]);
        let dt = self.params[i + 1] - self.params[i];
        let u = (t - self.params[i]) / dt;
        let chartp = LocalChart::new(*p0);
        let d = chartp.to_local(p1)?;
        // Transport the far tangent into p0's chart.
        let (_, deck) = chart_diff_with_deck(p1, p0)?;
        let t1 = deck.transport(&p0.manifold, self.tangents[i + 1])?;
        let m0 = self.tangents[i] * dt;
        let m1 = t1 * dt;
        let h10 = u * u * u - 2.0 * u * u + u;
        let h01 = -2.0 * u * u * u + 3.0 * u * u;
        let h11 = u * u * u - u * u;
        let pos = d * h01 + m0 * h10 + m1 * h11;
        Ok(chartp.from_local(pos)?.0)
    }

    /// Oriented unit tangent at arc parameter `t`.
    pub fn tangent_at(&self, t: f64) -> Result<Vector3<f64>> {
        let t = t.clamp(self.param_start(), self.param_end());
        let i = self.segment_of(t);
        let dt = self.params[i + 1] - self.params[i];
        let u = (t - self.params[i]) / dt;
        let (_, deck) = chart_diff_with_deck(&self.points[i + 1], &self.points[i])?;
        let t1 = deck.transport(&self.points[i].manifold, self.tangents[i + 1])?;
        Ok((self.tangents[i] * (1.0 - u) + t1 * u).normalize())
    }

    /// Arc parameter closest to `q`, refined by golden-section search
    /// on the interpolated curve. For arcs whose endpoints coincide
    /// (closed polylines) the window at the opposite end is searched
    /// too.
    pub fn nearest_param(&self, q: &ChartPoint) -> Result<f64> {
        let mut best = (f64::INFINITY, self.params[0]);
        for (i, p) in self.points.iter().enumerate() {
            let d = chart::dist(p, q)?;
            if d < best.0 {
                best = (d, self.params[i]);
            }
        }
        let span = (self.length() / (self.len() - 1) as f64).max(1e-12);
        let refine = |center: f64| -> Result<(f64, f64)> {
            let (mut lo, mut hi) = (
                (center - span).max(self.param_start()),
                (center + span).min(self.param_end()),
            );
            for _ in 0..60 {
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
            let t = 0.5 * (lo + hi);
            Ok((chart::dist(&self.point_at(t)?, q)?, t))
        };
        let mut result = refine(best.1)?;
        let closed = chart::dist(&self.points[0], self.points.last().unwrap())? < 1e-9;
        if closed {
            if best.1 - self.param_start() < 1.5 * span {
                let alt = refine(self.param_end())?;
                if alt.0 < result.0 {
                    result = alt;
                }
            }
            if self.param_end() - best.1 < 1.5 * span {
                let alt = refine(self.param_start())?;
                if alt.0 < result.0 {
                    result = alt;
                }
            }
        }
        Ok(result.1)
    }

    /// The arc with reversed orientation.
    pub fn reversed(&self) -> LeafArc {
        let n = self.points.len();
        LeafArc {
            sigma: self.sigma,
            points: self.points.iter().rev().copied().collect(),
            tangents: self.tangents.iter().rev().map(|t| -t).collect(),
            params: self.params.iter().rev().map(|p| -p).collect(),
            seed_index: n - 1 - self.seed_index,
            truncated: self.truncated,
        }
    }

    /// Sub-arc from the seed onward (parameters >= 0).
    pub fn forward_half(&self) -> LeafArc {
        LeafArc {
            sigma: self.sigma,
            points: self.points[self.seed_index..].to_vec(),
            tangents: self.tangents[self.seed_index..].to_vec(),
            params: self.params[self.seed_index..].to_vec(),
            seed_index: 0,
            truncated: self.truncated,
        }
    }

    /// CSV serialization: `index, t, x, y, theta, tx, ty, ttheta` with
    /// 17 significant digits, comma delimiter, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,t,x,y,theta,tx,ty,ttheta\n");
        for i in 0..self.points.len() {
            let c = self.points[i].coords;
            let t = self.tangents[i];
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                i, self.params[i], c[0], c[1], c[2], t.x, t.y, t.z
            ));
        }
        out
    }
}

/// Controls for leaf integration.
#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    pub h_min: f64,
    pub h_max: f64,
    /// Local error target for adaptive step halving.
    pub local_tol: f64,
    /// Abort threshold on the cosine between consecutive directions.
    pub turn_cos: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            h_min: 1e-4,
            h_max: 1e-2,
            local_tol: 1e-12,
            turn_cos: 0.2,
        }
    }
}

fn field_in_chart(
    field: &LineField,
    anchor: &ChartPoint,
    local: Vector3<f64>,
    prev: Vector3<f64>,
) -> Result<Vector3<f64>> {
    let chartp = LocalChart::new(*anchor);
    let (q, deck) = chartp.from_local(local)?;
    let raw = field.direction(&q)?;
    let v = deck.transport_inv(&anchor.manifold, raw)?.normalize();
    let d = v.dot(&prev);
    if d.abs() < 1e-12 {
        return Err(Error::Integration {
            message: "field direction orthogonal to the carried orientation".into(),
            location: q.coords,
        });
    }
    Ok(if d < 0.0 { -v } else { v })
}

/// Integrate one side of the leaf in the chart of a moving anchor:
/// all stage arithmetic uses raw anchor-relative coordinates, so the
/// arc never wraps through a gluing mid-step (the flat pushforward
/// metric is chart-dependent at the gluing; staying in one chart keeps
/// the arc-length parameterization consistent). The anchor is moved
/// only when the raw coordinates drift far from it.
fn integrate_side(
    field: &LineField,
    seed: &ChartPoint,
    seed_dir: Vector3<f64>,
    halflength: f64,
    opts: &IntegrateOptions,
    out: &mut Vec<(ChartPoint, Vector3<f64>, f64)>,
) -> Result<()> {
    let mut anchor = *seed;
    let mut p_loc = Vector3::zeros();
    let mut dir = seed_dir;
    let mut s = 0.0;
    let mut h = opts.h_max.min(halflength);
    // Evaluate the oriented field at anchor-relative coordinates.
    let eval = |anchor: &ChartPoint, loc: Vector3<f64>, prev: Vector3<f64>| -> Result<Vector3<f64>> {
        field_in_chart(field, anchor, loc, prev)
    };
    while s < halflength - 1e-15 {
        h = h.min(halflength - s);
        let rk4 = |loc: Vector3<f64>, d0: Vector3<f64>, h: f64| -> Result<Vector3<f64>> {
            let k1 = d0;
            let k2 = eval(&anchor, loc + k1 * (h / 2.0), k1)?;
            let k3 = eval(&anchor, loc + k2 * (h / 2.0), k1)?;
            let k4 = eval(&anchor, loc + k3 * h, k1)?;
            for k in [&k2, &k3, &k4] {
                if k.dot(&k1) < opts.turn_cos {
                    return Err(Error::Integration {
                        message: format!(
                            "tangent left the orientation cone (cos {:.3})",
                            k.dot(&k1)
                        ),
                        location: [loc.x, loc.y, loc.z],
                    });
                }
            }
            Ok((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
        };
        // Step-doubling error control in a single chart.
        let d_full = rk4(p_loc, dir, h)?;
        let d_half = rk4(p_loc, dir, h / 2.0)?;
        let dir_m = eval(&anchor, p_loc + d_half, dir)?;
        let d_half2 = rk4(p_loc + d_half, dir_m, h / 2.0)?;
        let two_step = d_half + d_half2;
        let err = (d_full - two_step).norm() / 15.0;
        if err > opts.local_tol && h > opts.h_min * (1.0 + 1e-9) {
            h = (h / 2.0).max(opts.h_min);
            continue;
        }
        p_loc += two_step;
        dir = eval(&anchor, p_loc, dir)?;
        s += h;
        let chartp = LocalChart::new(anchor);
        let (stored, deck) = chartp.from_local(p_loc)?;
        let stored_dir = deck.transport(&anchor.manifold, dir)?.normalize();
        out.push((stored, stored_dir, s));
        if err < opts.local_tol / 64.0 {
            h = (h * 1.5).min(opts.h_max);
        }
        // Re-anchor away from the seed to keep raw coordinates local;
        // the switch happens between steps, never inside one.
        if p_loc.norm() > 0.35 {
            anchor = stored;
            dir = stored_dir;
            p_loc = Vector3::zeros();
        }
    }
    Ok(())
}

/// Fourth-order integration of the chosen unit line field through `x`,
/// orientation carried continuously, total length `2 halflength`,
/// the field re-evaluated at every stage.
pub fn integrate_leaf(
    field: &LineField,
    x: &ChartPoint,
    halflength: f64,
    step: f64,
) -> Result<LeafArc> {
    integrate_leaf_opts(
        field,
        x,
        halflength,
        &IntegrateOptions {
            h_max: step,
            ..Default::default()
        },
    )
}

pub fn integrate_leaf_opts(
    field: &LineField,
    x: &ChartPoint,
    halflength: f64,
    opts: &IntegrateOptions,
) -> Result<LeafArc> {
    if opts.h_max <= 0.0 || halflength <= 0.0 {
        return Err(Error::invalid("step and halflength must be positive"));
    }
    let dir0 = field.direction(x)?;
    let mut fwd = Vec::new();
    integrate_side(field, x, dir0, halflength, opts, &mut fwd)?;
    let mut bwd = Vec::new();
    integrate_side(field, x, -dir0, halflength, opts, &mut bwd)?;

    let mut points = Vec::with_capacity(fwd.len() + bwd.len() + 1);
    let mut tangents = Vec::new();
    let mut params = Vec::new();
    for (p, t, s) in bwd.iter().rev() {
        points.push(*p);
        tangents.push(-*t);
        params.push(-*s);
    }
    let seed_index = points.len();
    points.push(*x);
    tangents.push(dir0);
    params.push(0.0);
    for (p, t, s) in &fwd {
        points.push(*p);
        tangents.push(*t);
        params.push(*s);
    }
    Ok(LeafArc {
        sigma: field.bundle(),
        points,
        tangents,
        params,
        seed_index,
        truncated: false,
    })
}

/// A local 2-D plaque: a grid of points obtained by integrating a
/// second line field from the samples of a base arc (the saturation
/// `W^{sigma2}_w(base)`), stored in the local chart of an anchor.
#[derive(Debug, Clone)]
pub struct Plaque {
    pub anchor: ChartPoint,
    /// `grid[i][j]`: base sample `i`, transverse sample `j`.
    pub grid: Vec<Vec<Vector3<f64>>>,
    pub base_params: Vec<f64>,
    pub trans_params: Vec<f64>,
}

impl Plaque {
    /// Saturate a base arc by a second field: rows follow the base
    /// arc's samples, columns the transverse arcs.
    pub fn saturate(
        base: &LeafArc,
        field2: &LineField,
        halfwidth: f64,
        step: f64,
    ) -> Result<Plaque> {
        let anchor = base.points[base.seed_index];
        let chartp = LocalChart::new(anchor);
        let mut grid = Vec::with_capacity(base.points.len());
        let mut trans_params = Vec::new();
        for (i, p) in base.points.iter().enumerate() {
            let arc = integrate_leaf(field2, p, halfwidth, step)?;
            if i == 0 {
                trans_params = arc.params.clone();
            }
            // Re-sample onto the first row's parameters in case the
            // adaptive integrator chose different steps.
            let mut row = Vec::with_capacity(trans_params.len());
            for &t in &trans_params {
                row.push(chartp.to_local(&arc.point_at(t)?)?);
            }
            grid.push(row);
        }
        Ok(Plaque {
            anchor,
            grid,
            base_params: base.params.clone(),
            trans_params,
        })
    }

    /// Flat rectangular transversal spanned by two unit directions.
    pub fn transversal(
        center: &ChartPoint,
        dir1: Vector3<f64>,
        dir2: Vector3<f64>,
        radius: f64,
        n: usize,
    ) -> Plaque {
        let n = n.max(2);
        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            params.push(-radius + 2.0 * radius * i as f64 / (n - 1) as f64);
        }
        let mut grid = Vec::with_capacity(n);
        for &s in &params {
            let mut row = Vec::with_capacity(n);
            for &t in &params {
                row.push(dir1 * s + dir2 * t);
            }
            grid.push(row);
        }
        Plaque {
            anchor: *center,
            grid,
            base_params: params.clone(),
            trans_params: params,
        }
    }

    fn rows(&self) -> usize {
        self.grid.len()
    }

    fn cols(&self) -> usize {
        self.grid[0].len()
    }

    /// Evaluate the bilinear patch surface at continuous indices.
    fn eval(&self, s: f64, t: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, (self.rows() - 1) as f64 - 1e-12);
        let t = t.clamp(0.0, (self.cols() - 1) as f64 - 1e-12);
        let i = s.floor() as usize;
        let j = t.floor() as usize;
        let a = s - i as f64;
        let b = t - j as f64;
        self.grid[i][j] * (1.0 - a) * (1.0 - b)
            + self.grid[i + 1][j] * a * (1.0 - b)
            + self.grid[i][j + 1] * (1.0 - a) * b
            + self.grid[i + 1][j + 1] * a * b
    }

    /// Project a local point onto the surface (Gauss-Newton on the
    /// bilinear patches); returns continuous indices `(s, t)`, the
    /// foot and the signed offset along the local normal.
    pub fn project(&self, p: Vector3<f64>) -> (f64, f64, Vector3<f64>, f64) {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                let d = (self.grid[i][j] - p).norm();
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let mut s = best.1 as f64;
        let mut t = best.2 as f64;
        let h = 1e-4;
        for _ in 0..60 {
            let f0 = self.eval(s, t);
            let ds = (self.eval(s + h, t) - self.eval(s - h, t)) / (2.0 * h);
            let dt = (self.eval(s, t + h) - self.eval(s, t - h)) / (2.0 * h);
            let r = p - f0;
            let a11 = ds.dot(&ds);
            let a12 = ds.dot(&dt);
            let a22 = dt.dot(&dt);
            let b1 = ds.dot(&r);
            let b2 = dt.dot(&r);
            let det = a11 * a22 - a12 * a12;
            if det.abs() < 1e-30 {
                break;
            }
            let du = (b1 * a22 - b2 * a12) / det;
            let dv = (b2 * a11 - b1 * a12) / det;
            s = (s + du).clamp(0.0, (self.rows() - 1) as f64);
            t = (t + dv).clamp(0.0, (self.cols() - 1) as f64);
            if du.abs() < 1e-14 && dv.abs() < 1e-14 {
                break;
            }
        }
        let foot = self.eval(s, t);
        let ds = (self.eval(s + h, t) - self.eval(s - h, t)) / (2.0 * h);
        let dt = (self.eval(s, t + h) - self.eval(s, t - h)) / (2.0 * h);
        let normal = ds.cross(&dt).normalize();
        let offset = (p - foot).dot(&normal);
        (s, t, foot, offset)
    }

    /// Interpolated base parameter at a continuous row index.
    pub fn base_param_at(&self, s: f64) -> f64 {
        let i = (s.floor() as usize).min(self.base_params.len() - 2);
        let a = s - i as f64;
        self.base_params[i] * (1.0 - a) + self.base_params[i + 1] * a
    }

    /// Interpolated transverse parameter at a continuous column index.
    pub fn trans_param_at(&self, t: f64) -> f64 {
        let j = (t.floor() as usize).min(self.trans_params.len() - 2);
        let b = t - j as f64;
        self.trans_params[j] * (1.0 - b) + self.trans_params[j + 1] * b
    }
}

/// The unique transversal intersection of an arc with a local plaque,
/// found by bisection on the signed normal offset along the arc; the
/// residual to both objects is below 1e-10.
pub fn local_intersection(arc: &LeafArc, plaque: &Plaque) -> Result<ChartPoint> {
    Ok(local_intersection_coords(arc, plaque)?.0)
}

/// As [`local_intersection`], also returning the plaque coordinates
/// `(base param, transverse param)` of the intersection.
pub fn local_intersection_coords(arc: &LeafArc, plaque: &Plaque) -> Result<(ChartPoint, f64, f64)> {
    let chartp = LocalChart::new(plaque.anchor);
    let mut offsets = Vec::with_capacity(arc.len());
    for p in &arc.points {
        let local = chartp.to_local(p)?;
        offsets.push(plaque.project(local).3);
    }
    let mut crossings = Vec::new();
    for i in 0..offsets.len() {
        if offsets[i] == 0.0 {
            // The sample itself is on the plaque.
            crossings.push((arc.params[i], arc.params[i]));
        } else if i + 1 < offsets.len() && offsets[i] * offsets[i + 1] < 0.0 {
            crossings.push((arc.params[i], arc.params[i + 1]));
        }
    }
    if crossings.is_empty() {
        return Err(Error::NoIntersection(
            "no sign change of the plaque offset along the arc".into(),
        ));
    }
    if crossings.len() > 1 {
        return Err(Error::Ambiguity(format!(
            "{} sign changes along the arc",
            crossings.len()
        )));
    }
    let (mut lo, mut hi) = crossings[0];
    let off_at = |t: f64| -> Result<f64> {
        let local = chartp.to_local(&arc.point_at(t)?)?;
        Ok(plaque.project(local).3)
    };
    let mut flo = off_at(lo)?;
    if flo == 0.0 {
        hi = lo;
    }
    for _ in 0..80 {
        if lo == hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = off_at(mid)?;
        if fm == 0.0 || (hi - lo) < 1e-15 {
            lo = mid;
            hi = mid;
            break;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let point = arc.point_at(0.5 * (lo + hi))?;
    let local = chartp.to_local(&point)?;
    let (s, t, foot, off) = plaque.project(local);
    if off.abs() > 1e-10 || (local - foot).norm() > 1e-5 {
        return Err(Error::NoIntersection(format!(
            "residual {:.3e} beyond tolerance",
            off.abs()
        )));
    }
    Ok((point, plaque.base_param_at(s), plaque.trans_param_at(t)))
}

/// Transport `z` along a foliation curve `gamma`: the companion curve
/// stays on the leaf of `z` while tracking the transversal discs of
/// `gamma`; returns its endpoint. Fails with a holonomy error if the
/// companion leaves the `tube_radius` tube.
pub fn holonomy_transport(
    field: &LineField,
    gamma: &LeafArc,
    z: &ChartPoint,
    tube_radius: f64,
) -> Result<ChartPoint> {
    if chart::dist(z, &gamma.points[0])? > tube_radius {
        return Err(Error::HolonomyUndefined(
            "start point outside the holonomy tube".into(),
        ));
    }
    let mut companion = *z;
    for i in 1..gamma.len() {
        let target = &gamma.points[i];
        let tangent = gamma.tangents[i];
        let (d1, d2) = orthonormal_complement(tangent);
        let disc = Plaque::transversal(target, d1, d2, 2.0 * tube_radius, 9);
        let step = gamma.params[i] - gamma.params[i - 1];
        let arc = integrate_leaf(
            field,
            &companion,
            2.5 * step + 4.0 * tube_radius,
            (step / 2.0).clamp(1e-5, 1e-2),
        )?;
        companion = local_intersection(&arc, &disc)?;
        if chart::dist(&companion, target)? > tube_radius {
            return Err(Error::HolonomyUndefined(format!(
                "companion left the tube at parameter {}",
                gamma.params[i]
            )));
        }
    }
    Ok(companion)
}

pub fn orthonormal_complement(v: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if v.x.abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let d1 = (a - v * a.dot(&v)).normalize();
    let d2 = v.cross(&d1).normalize();
    (d1, d2)
}

/// Result of the su-transport of a center arc.
#[derive(Debug, Clone)]
pub struct SuTransport {
    pub arc: LeafArc,
    /// Per-sample intersection residuals.
    pub residuals: Vec<f64>,
}

/// Transport a center arc `eta` (at a point `y` on the stable leaf of
/// `x`) onto the center leaf of `x`: per sample, the unstable plaque
/// of `eta(t)` meets the stable saturation of the center leaf of `x`,
/// and the saturation coordinates give the foot on that center leaf.
pub fn hsu_transport(
    sys: &DynamicalSystem,
    x: &ChartPoint,
    eta: &LeafArc,
    delta: f64,
) -> Result<SuTransport> {
    let center = LineField::invariant(sys, Bundle::Center)?;
    let stable = LineField::invariant(sys, Bundle::Stable)?;
    let unstable = LineField::invariant(sys, Bundle::Unstable)?;
    let budget = eta.length() + 6.0 * delta;
    let cx = integrate_leaf(&center, x, budget, 1e-2)?;
    let plaque = Plaque::saturate(&cx, &stable, 2.0 * delta, delta / 2.0)?;
    let mut points = Vec::with_capacity(eta.len());
    let mut residuals = Vec::with_capacity(eta.len());
    for (i, p) in eta.points.iter().enumerate() {
        let uarc = integrate_leaf(&unstable, p, 2.0 * delta, delta / 2.0)?;
        let (hit, base_param, _) = local_intersection_coords(&uarc, &plaque)
            .map_err(|e| Error::NoIntersection(format!("sample {i}: {e}")))?;
        let foot = cx.point_at(base_param)?;
        // Residual: the hit must sit on the stable arc through the foot.
        let sarc = integrate_leaf(&stable, &foot, 2.5 * delta, delta / 2.0)?;
        let near = sarc.nearest_param(&hit)?;
        residuals.push(chart::dist(&sarc.point_at(near)?, &hit)?);
        points.push(foot);
    }
    let mut arc_params = vec![0.0];
    for i in 1..points.len() {
        let d = chart::dist(&points[i - 1], &points[i])?;
        arc_params.push(arc_params[i - 1] + d);
    }
    let mut tangents = Vec::with_capacity(points.len());
    for p in &points {
        tangents.push(center.direction(p)?);
    }
    for i in 1..tangents.len() {
        let (_, deck) = chart_diff_with_deck(&points[i], &points[i - 1])?;
        let prev = deck.transport(&points[i].manifold, tangents[i - 1])?;
        if tangents[i].dot(&prev) < 0.0 {
            tangents[i] = -tangents[i];
        }
    }
    Ok(SuTransport {
        arc: LeafArc {
            sigma: Some(Bundle::Center),
            points,
            tangents,
            params: arc_params,
            seed_index: 0,
            truncated: false,
        },
        residuals,
    })
}
