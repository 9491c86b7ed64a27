//! Fundamental-domain charts for the three supported flat 3-manifolds:
//! the product torus `T^2 x (R/pZ)`, the mapping torus of a hyperbolic
//! toral automorphism with roof 1 and the skew quotient
//! `(T^2 x R)/Gamma` with `Gamma` generated by `(x, t) -> (Ax, t+2)`.
//!
//! Coordinates are `[x, y, theta]` with the torus part in `[0,1)^2` and
//! `theta` in a half-open period interval (lower bound included, so
//! normalization is deterministic at boundaries). Distances use the
//! flat chart metric minimized over deck translates within one
//! fundamental-domain shift per direction.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2x2 integer matrix, used for toral automorphisms and gluing maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMat2(pub [[i64; 2]; 2]);

impl IntMat2 {
    pub fn new(a: i64, b: i64, c: i64, d: i64) -> Self {
        IntMat2([[a, b], [c, d]])
    }

    /// The standard hyperbolic example `[[2,1],[1,1]]`.
    pub fn cat_map() -> Self {
        IntMat2::new(2, 1, 1, 1)
    }

    pub fn det(&self) -> i64 {
        let m = self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> i64 {
        self.0[0][0] + self.0[1][1]
    }

    /// Unimodular with real eigenvalues off the unit circle.
    pub fn is_hyperbolic(&self) -> bool {
        self.det().abs() == 1 && self.trace().abs() > 2
    }

    pub fn as_f64(&self) -> Matrix2<f64> {
        let m = self.0;
        Matrix2::new(
            m[0][0] as f64,
            m[0][1] as f64,
            m[1][0] as f64,
            m[1][1] as f64,
        )
    }

    /// Exact integer inverse; requires `det = +-1`.
    pub fn inverse(&self) -> Result<IntMat2> {
        let d = self.det();
        if d.abs() != 1 {
            return Err(Error::invalid("matrix is not unimodular"));
        }
        let m = self.0;
        Ok(IntMat2::new(d * m[1][1], -d * m[0][1], -d * m[1][0], d * m[0][0]))
    }

    fn mul(&self, other: &IntMat2) -> Result<IntMat2> {
        let a = self.0;
        let b = other.0;
        let mut out = [[0i64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc: i64 = 0;
                for k in 0..2 {
                    acc = acc
                        .checked_add(
                            a[i][k]
                                .checked_mul(b[k][j])
                                .ok_or_else(|| Error::invalid("integer matrix power overflow"))?,
                        )
                        .ok_or_else(|| Error::invalid("integer matrix power overflow"))?;
                }
                out[i][j] = acc;
            }
        }
        Ok(IntMat2(out))
    }

    /// Exact integer power, negative exponents via the exact inverse.
    pub fn pow(&self, n: i32) -> Result<IntMat2> {
        let base = if n < 0 { self.inverse()? } else { *self };
        let mut out = IntMat2::new(1, 0, 0, 1);
        for _ in 0..n.unsigned_abs() {
            out = out.mul(&base)?;
        }
        Ok(out)
    }

    /// Eigenvalues `(contracting, expanding)` of a hyperbolic matrix.
    pub fn eigenvalues(&self) -> Result<(f64, f64)> {
        if !self.is_hyperbolic() {
            return Err(Error::invalid("matrix is not hyperbolic unimodular"));
        }
        let t = self.trace() as f64;
        let d = self.det() as f64;
        let disc = (t * t - 4.0 * d).sqrt();
        let l1 = (t - disc) / 2.0;
        let l2 = (t + disc) / 2.0;
        if l1.abs() < l2.abs() {
            Ok((l1, l2))
        } else {
            Ok((l2, l1))
        }
    }

    fn eigenvector(&self, mu: f64) -> Vector2<f64> {
        let m = self.as_f64();
        // (A - mu) v = 0; pick the better-conditioned row relation.
        let v1 = Vector2::new(m[(0, 1)], mu - m[(0, 0)]);
        let v2 = Vector2::new(mu - m[(1, 1)], m[(1, 0)]);
        let v = if v1.norm() >= v2.norm() { v1 } else { v2 };
        let v = v.normalize();
        // Canonical sign: largest-magnitude component positive.
        let lead = if v.x.abs() >= v.y.abs() { v.x } else { v.y };
        if lead < 0.0 {
            -v
        } else {
            v
        }
    }

    /// Unit eigenvector for the contracting eigenvalue.
    pub fn stable_direction(&self) -> Result<Vector2<f64>> {
        let (ls, _) = self.eigenvalues()?;
        Ok(self.eigenvector(ls))
    }

    /// Unit eigenvector for the expanding eigenvalue.
    pub fn unstable_direction(&self) -> Result<Vector2<f64>> {
        let (_, lu) = self.eigenvalues()?;
        Ok(self.eigenvector(lu))
    }
}

/// Which chart family a manifold belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifoldKind {
    /// `T^2 x (R/pZ)` with configurable period `p`.
    #[serde(rename = "product-torus")]
    ProductTorus,
    /// Mapping torus of a hyperbolic `A`, roof 1: `(x, s+1) ~ (Ax, s)`.
    #[serde(rename = "mapping-torus")]
    MappingTorus,
    /// `(T^2 x R)/Gamma`, `Gamma` generated by `(x, t) -> (Ax, t+2)`,
    /// fundamental interval `[-1, 1)`.
    #[serde(rename = "hhu-quotient")]
    HhuQuotient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldDescriptor {
    pub kind: ManifoldKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<IntMat2>,
    pub period: f64,
}

impl ManifoldDescriptor {
    pub fn product_torus(period: f64) -> Result<Self> {
        if !(period > 0.0) {
            return Err(Error::invalid("period must be positive"));
        }
        Ok(ManifoldDescriptor {
            kind: ManifoldKind::ProductTorus,
            matrix: None,
            period,
        })
    }

    pub fn mapping_torus(matrix: IntMat2) -> Result<Self> {
        if !matrix.is_hyperbolic() {
            return Err(Error::invalid("mapping torus requires a hyperbolic matrix"));
        }
        Ok(ManifoldDescriptor {
            kind: ManifoldKind::MappingTorus,
            matrix: Some(matrix),
            period: 1.0,
        })
    }

    pub fn hhu_quotient(matrix: IntMat2) -> Result<Self> {
        if !matrix.is_hyperbolic() {
            return Err(Error::invalid("quotient requires a hyperbolic matrix"));
        }
        Ok(ManifoldDescriptor {
            kind: ManifoldKind::HhuQuotient,
            matrix: Some(matrix),
            period: 2.0,
        })
    }

    /// Lower bound of the half-open theta interval.
    pub fn theta_lo(&self) -> f64 {
        match self.kind {
            ManifoldKind::ProductTorus | ManifoldKind::MappingTorus => 0.0,
            ManifoldKind::HhuQuotient => -1.0,
        }
    }

    fn matrix_or_err(&self) -> Result<IntMat2> {
        self.matrix
            .ok_or_else(|| Error::invalid("manifold descriptor is missing its gluing matrix"))
    }

    /// Deck translate with parameter `n` along the theta direction.
    ///
    /// Product torus: `theta += n p`. Mapping torus: `(A^n x, s - n)`.
    /// Quotient: `(A^n x, theta + 2n)`.
    fn deck_translate(&self, c: [f64; 3], n: i32) -> Result<[f64; 3]> {
        if n == 0 {
            return Ok(c);
        }
        match self.kind {
            ManifoldKind::ProductTorus => Ok([c[0], c[1], c[2] + n as f64 * self.period]),
            ManifoldKind::MappingTorus => {
                let m = self.matrix_or_err()?.pow(n)?.as_f64();
                let b = m * Vector2::new(c[0], c[1]);
                Ok([b.x, b.y, c[2] - n as f64])
            }
            ManifoldKind::HhuQuotient => {
                let m = self.matrix_or_err()?.pow(n)?.as_f64();
                let b = m * Vector2::new(c[0], c[1]);
                Ok([b.x, b.y, c[2] + 2.0 * n as f64])
            }
        }
    }

    /// Power of `A` applied to base vectors by `deck_translate(_, n)`.
    fn deck_base_pow(&self, n: i32) -> i32 {
        match self.kind {
            ManifoldKind::ProductTorus => 0,
            ManifoldKind::MappingTorus | ManifoldKind::HhuQuotient => n,
        }
    }
}

/// Record of the deck transformation applied while normalizing a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Deck {
    /// The base coordinates of the representative were multiplied by
    /// `A^base_pow` relative to the raw input.
    pub base_pow: i32,
}

impl Deck {
    /// Transport a tangent vector from the raw representative to the
    /// normalized one.
    pub fn transport(&self, m: &ManifoldDescriptor, v: Vector3<f64>) -> Result<Vector3<f64>> {
        if self.base_pow == 0 {
            return Ok(v);
        }
        let a = m.matrix_or_err()?.pow(self.base_pow)?.as_f64();
        let b = a * Vector2::new(v.x, v.y);
        Ok(Vector3::new(b.x, b.y, v.z))
    }

    /// Transport a tangent vector from the normalized representative
    /// back to the raw one.
    pub fn transport_inv(&self, m: &ManifoldDescriptor, v: Vector3<f64>) -> Result<Vector3<f64>> {
        Deck {
            base_pow: -self.base_pow,
        }
        .transport(m, v)
    }
}

/// A point of a supported manifold in fundamental-domain coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartPoint {
    pub coords: [f64; 3],
    pub manifold: ManifoldDescriptor,
}

impl ChartPoint {
    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.coords[0], self.coords[1], self.coords[2])
    }

    /// Displace by a chart vector and renormalize.
    pub fn offset(&self, v: Vector3<f64>) -> Result<ChartPoint> {
        normalize(
            [
                self.coords[0] + v.x,
                self.coords[1] + v.y,
                self.coords[2] + v.z,
            ],
            &self.manifold,
        )
    }
}

fn in_unit(x: f64) -> bool {
    (0.0..1.0).contains(&x)
}

/// Reduce raw coordinates to the unique fundamental-domain
/// representative. Crossing the theta boundary applies the gluing map.
pub fn normalize(raw: [f64; 3], m: &ManifoldDescriptor) -> Result<ChartPoint> {
    Ok(normalize_with_deck(raw, m)?.0)
}

/// As [`normalize`], also returning the deck transformation that was
/// applied (needed to transport tangent vectors consistently).
pub fn normalize_with_deck(raw: [f64; 3], m: &ManifoldDescriptor) -> Result<(ChartPoint, Deck)> {
    if raw.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite input coordinates"));
    }
    let lo = m.theta_lo();
    let p = m.period;
    // Fast path: already reduced. Returning the input unchanged makes
    // normalization bitwise idempotent.
    if in_unit(raw[0]) && in_unit(raw[1]) && raw[2] >= lo && raw[2] < lo + p {
        return Ok((
            ChartPoint {
                coords: raw,
                manifold: *m,
            },
            Deck::default(),
        ));
    }
    let k = ((raw[2] - lo) / p).floor();
    if k.abs() > 48.0 {
        return Err(Error::invalid(
            "theta coordinate too many periods away from the fundamental domain",
        ));
    }
    let k = k as i32;
    let (shifted, pow) = match m.kind {
        ManifoldKind::ProductTorus => ([raw[0], raw[1], lo + (raw[2] - lo).rem_euclid(p)], 0),
        // (x, s) with s in [k, k+1) represents (A^k x, s - k).
        ManifoldKind::MappingTorus => (m.deck_translate(raw, k)?, m.deck_base_pow(k)),
        // (x, t) with t in [-1 + 2k, 1 + 2k) represents (A^-k x, t - 2k).
        ManifoldKind::HhuQuotient => (m.deck_translate(raw, -k)?, m.deck_base_pow(-k)),
    };
    let mut c = shifted;
    c[0] = c[0].rem_euclid(1.0);
    c[1] = c[1].rem_euclid(1.0);
    // Guard against rounding at the upper edge of the theta interval.
    if c[2] >= lo + p {
        c[2] = lo;
    }
    if c[2] < lo {
        c[2] = lo;
    }
    if c[0] >= 1.0 {
        c[0] = 0.0;
    }
    if c[1] >= 1.0 {
        c[1] = 0.0;
    }
    Ok((
        ChartPoint {
            coords: c,
            manifold: *m,
        },
        Deck { base_pow: pow },
    ))
}

fn check_same_manifold(p: &ChartPoint, q: &ChartPoint) -> Result<()> {
    if p.manifold != q.manifold {
        return Err(Error::invalid("points live on different manifolds"));
    }
    Ok(())
}

fn diff_against_translates(p: &ChartPoint, q: &ChartPoint) -> Result<(Vector3<f64>, i32)> {
    let m = &p.manifold;
    let mut best = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut best_norm = f64::INFINITY;
    let mut best_n = 0;
    for n in -1..=1 {
        let t = m.deck_translate(q.coords, n)?;
        // Base translations are isometries, so the base difference is
        // wrapped to its minimal representative directly.
        let mut d = Vector3::new(p.coords[0] - t[0], p.coords[1] - t[1], p.coords[2] - t[2]);
        d.x -= d.x.round();
        d.y -= d.y.round();
        let nn = d.norm();
        if nn < best_norm {
            best_norm = nn;
            best = d;
            best_n = n;
        }
    }
    Ok((best, best_n))
}

/// Minimal difference vector `p - q` over deck translates of `q`
/// within one fundamental-domain shift per direction. The vector is
/// expressed in the chart at `q`'s (translated) representative, which
/// at local scales coincides with the chart at `p`.
pub fn chart_diff(p: &ChartPoint, q: &ChartPoint) -> Result<Vector3<f64>> {
    check_same_manifold(p, q)?;
    Ok(diff_against_translates(p, q)?.0)
}

/// As [`chart_diff`], also returning the deck power applied to `q`'s
/// base coordinates by the minimizing translate.
pub fn chart_diff_with_deck(p: &ChartPoint, q: &ChartPoint) -> Result<(Vector3<f64>, Deck)> {
    check_same_manifold(p, q)?;
    let (d, n) = diff_against_translates(p, q)?;
    Ok((
        d,
        Deck {
            base_pow: p.manifold.deck_base_pow(n),
        },
    ))
}

/// Flat quotient distance: length of the shortest representative
/// difference. Symmetrized over translating either argument, since the
/// gluing maps of the non-product kinds are not isometries.
pub fn dist(p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
    check_same_manifold(p, q)?;
    let a = diff_against_translates(p, q)?.0.norm();
    let b = diff_against_translates(q, p)?.0.norm();
    Ok(a.min(b))
}

/// Hausdorff distance between two finite samples: the larger of the
/// two directed sup-inf distances under [`dist`].
pub fn hausdorff_distance(s1: &[ChartPoint], s2: &[ChartPoint]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::invalid("hausdorff distance of an empty sample"));
    }
    check_same_manifold(&s1[0], &s2[0])?;
    let directed = |a: &[ChartPoint], b: &[ChartPoint]| -> Result<f64> {
        let mut sup = 0.0f64;
        for p in a {
            let mut inf = f64::INFINITY;
            for q in b {
                inf = inf.min(dist(p, q)?);
            }
            sup = sup.max(inf);
        }
        Ok(sup)
    };
    Ok(directed(s1, s2)?.max(directed(s2, s1)?))
}

/// Local affine chart anchored at a point.
///
/// All small-scale numerics (leaf integration, intersections, tubular
/// frames) work in a local chart so that wrapping and gluing never
/// interrupt a computation: points are lifted once, vectors are
/// transported by the recorded deck action.
#[derive(Debug, Clone, Copy)]
pub struct LocalChart {
    pub anchor: ChartPoint,
}

impl LocalChart {
    pub fn new(anchor: ChartPoint) -> Self {
        LocalChart { anchor }
    }

    /// Lift a manifold point to anchor-relative coordinates.
    pub fn to_local(&self, p: &ChartPoint) -> Result<Vector3<f64>> {
        chart_diff(p, &self.anchor)
    }

    /// Project anchor-relative coordinates back to the manifold,
    /// together with the deck action the reduction applied (use it to
    /// transport vectors obtained at the reduced representative back
    /// into this chart).
    pub fn from_local(&self, v: Vector3<f64>) -> Result<(ChartPoint, Deck)> {
        normalize_with_deck(
            [
                self.anchor.coords[0] + v.x,
                self.anchor.coords[1] + v.y,
                self.anchor.coords[2] + v.z,
            ],
            &self.anchor.manifold,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t3() -> ManifoldDescriptor {
        ManifoldDescriptor::product_torus(1.0).unwrap()
    }

    #[test]
    fn normalize_identity_on_domain() {
        let p = normalize([0.3, 0.4, 0.5], &t3()).unwrap();
        assert_eq!(p.coords, [0.3, 0.4, 0.5]);
    }

    #[test]
    fn normalize_mod_reduction() {
        let p = normalize([1.3, -0.6, 2.5], &t3()).unwrap();
        assert!((p.coords[0] - 0.3).abs() < 1e-12);
        assert!((p.coords[1] - 0.4).abs() < 1e-12);
        assert!((p.coords[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_bitwise_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let manifolds = [
            t3(),
            ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap(),
            ManifoldDescriptor::hhu_quotient(IntMat2::cat_map()).unwrap(),
        ];
        for m in &manifolds {
            for _ in 0..2000 {
                let raw = [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-5.0..5.0),
                ];
                let p = normalize(raw, m).unwrap();
                let q = normalize(p.coords, m).unwrap();
                assert_eq!(p.coords, q.coords, "raw {raw:?} on {:?}", m.kind);
            }
        }
    }

    #[test]
    fn normalize_applies_gluing_on_hhu_quotient() {
        let m = ManifoldDescriptor::hhu_quotient(IntMat2::cat_map()).unwrap();
        let x = [0.3, 0.7, 2.1];
        let p = normalize(x, &m).unwrap();
        assert!((p.coords[2] - 0.1).abs() < 1e-12);
        // Round trip through the covering map: translate the
        // representative back up one period and compare with the input.
        let back = m.deck_translate(p.coords, 1).unwrap();
        assert!((back[2] - 2.1).abs() < 1e-12);
        assert!((back[0] - x[0]).rem_euclid(1.0).min(1.0 - (back[0] - x[0]).rem_euclid(1.0)) < 1e-12);
        assert!((back[1] - x[1]).rem_euclid(1.0).min(1.0 - (back[1] - x[1]).rem_euclid(1.0)) < 1e-12);
        // Direct check: base part got A^{-1}.
        let ainv = IntMat2::cat_map().inverse().unwrap().as_f64();
        let expect = ainv * Vector2::new(0.3, 0.7);
        assert!((p.coords[0] - expect.x.rem_euclid(1.0)).abs() < 1e-12);
        assert!((p.coords[1] - expect.y.rem_euclid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn normalize_mapping_torus_matches_roof_convention() {
        let m = ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap();
        // (x, 1.3) ~ (A x, 0.3)
        let p = normalize([0.1, 0.2, 1.3], &m).unwrap();
        let a = IntMat2::cat_map().as_f64();
        let e = a * Vector2::new(0.1, 0.2);
        assert!((p.coords[0] - e.x.rem_euclid(1.0)).abs() < 1e-12);
        assert!((p.coords[1] - e.y.rem_euclid(1.0)).abs() < 1e-12);
        assert!((p.coords[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize([f64::NAN, 0.0, 0.0], &t3()).is_err());
        assert!(normalize([0.0, f64::INFINITY, 0.0], &t3()).is_err());
    }

    #[test]
    fn dist_wraparound() {
        let m = t3();
        let p = normalize([0.05, 0.0, 0.0], &m).unwrap();
        let q = normalize([0.95, 0.0, 0.0], &m).unwrap();
        assert!((dist(&p, &q).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(dist(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn dist_symmetric_and_triangle_on_product_torus() {
        // On the product torus the deck group acts by isometries and
        // the chord construction is a genuine flat metric.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = t3();
        for _ in 0..10_000 {
            let rnd = |rng: &mut rand_chacha::ChaCha8Rng| {
                normalize(
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ],
                    &m,
                )
                .unwrap()
            };
            let p = rnd(&mut rng);
            let q = rnd(&mut rng);
            let r = rnd(&mut rng);
            let pq = dist(&p, &q).unwrap();
            assert_eq!(pq, dist(&q, &p).unwrap());
            let pr = dist(&p, &r).unwrap();
            let qr = dist(&q, &r).unwrap();
            assert!(pr <= pq + qr + 1e-12, "triangle violated");
        }
    }

    #[test]
    fn dist_symmetric_and_triangle_locally_on_glued_manifolds() {
        // Across the non-isometric gluings the chord construction is a
        // metric on every region that lifts to a single chart; all
        // toolkit computations stay in that regime. Triples are drawn
        // inside balls of radius well below the chart size.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let manifolds = [
            ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap(),
            ManifoldDescriptor::hhu_quotient(IntMat2::cat_map()).unwrap(),
        ];
        for m in &manifolds {
            for _ in 0..10_000 {
                // Keep the ball clear of the gluing torus: the flat
                // pushforward metric is discontinuous there (the two
                // sides disagree by the stretch of the gluing matrix).
                let center = [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    m.theta_lo() + rng.gen_range(0.1..m.period - 0.1),
                ];
                let rnd = |rng: &mut rand_chacha::ChaCha8Rng| {
                    normalize(
                        [
                            center[0] + rng.gen_range(-0.06..0.06),
                            center[1] + rng.gen_range(-0.06..0.06),
                            center[2] + rng.gen_range(-0.06..0.06),
                        ],
                        m,
                    )
                    .unwrap()
                };
                let p = rnd(&mut rng);
                let q = rnd(&mut rng);
                let r = rnd(&mut rng);
                let pq = dist(&p, &q).unwrap();
                assert_eq!(pq, dist(&q, &p).unwrap());
                let pr = dist(&p, &r).unwrap();
                let qr = dist(&q, &r).unwrap();
                assert!(pr <= pq + qr + 1e-12, "triangle violated on {:?}", m.kind);
            }
        }
    }

    #[test]
    fn dist_invariant_under_simultaneous_deck_translation() {
        let m = ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..0.2),
            ];
            let b = [
                a[0] + rng.gen_range(-0.05..0.05),
                a[1] + rng.gen_range(-0.05..0.05),
                a[2] + rng.gen_range(-0.05..0.05),
            ];
            let p = normalize(a, &m).unwrap();
            let q = normalize(b, &m).unwrap();
            let pt = normalize(m.deck_translate(a, 1).unwrap(), &m).unwrap();
            let qt = normalize(m.deck_translate(b, 1).unwrap(), &m).unwrap();
            // Locally (both points near the same chart region) the
            // quotient distance is invariant under moving both points
            // by the same deck element.
            let d0 = dist(&p, &q).unwrap();
            let d1 = dist(&pt, &qt).unwrap();
            assert!((d0 - d1).abs() < 1e-12, "{d0} vs {d1}");
        }
    }

    #[test]
    fn dist_mismatched_manifolds_is_error() {
        let p = normalize([0.1, 0.1, 0.1], &t3()).unwrap();
        let m2 = ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap();
        let q = normalize([0.1, 0.1, 0.1], &m2).unwrap();
        assert!(dist(&p, &q).is_err());
    }

    #[test]
    fn hausdorff_singletons_and_shifted_circle() {
        let m = t3();
        let p = normalize([0.2, 0.3, 0.4], &m).unwrap();
        let q = normalize([0.25, 0.3, 0.4], &m).unwrap();
        assert_eq!(hausdorff_distance(&[p], &[p]).unwrap(), 0.0);
        let d = hausdorff_distance(&[p], &[q]).unwrap();
        assert!((d - dist(&p, &q).unwrap()).abs() < 1e-15);

        // 100-point circle sample vs the same shifted by 0.01.
        let circle: Vec<ChartPoint> = (0..100)
            .map(|i| {
                let t = i as f64 / 100.0 * std::f64::consts::TAU;
                normalize([0.5 + 0.2 * t.cos(), 0.5 + 0.2 * t.sin(), 0.5], &m).unwrap()
            })
            .collect();
        let shifted: Vec<ChartPoint> = circle
            .iter()
            .map(|p| {
                normalize(
                    [p.coords[0], p.coords[1], p.coords[2] + 0.01],
                    &m,
                )
                .unwrap()
            })
            .collect();
        let d = hausdorff_distance(&circle, &shifted).unwrap();
        assert!((d - 0.01).abs() < 1e-9, "got {d}");
        // Exact symmetry.
        assert_eq!(d, hausdorff_distance(&shifted, &circle).unwrap());
    }

    #[test]
    fn hausdorff_empty_is_error() {
        let p = normalize([0.1, 0.1, 0.1], &t3()).unwrap();
        assert!(hausdorff_distance(&[], &[p]).is_err());
    }

    #[test]
    fn eigen_data_of_cat_map() {
        let a = IntMat2::cat_map();
        let (ls, lu) = a.eigenvalues().unwrap();
        assert!((lu - (3.0 + 5.0f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!((ls - (3.0 - 5.0f64.sqrt()) / 2.0).abs() < 1e-12);
        let es = a.stable_direction().unwrap();
        let eu = a.unstable_direction().unwrap();
        let m = a.as_f64();
        assert!((m * es - ls * es).norm() < 1e-12);
        assert!((m * eu - lu * eu).norm() < 1e-12);
    }

    #[test]
    fn descriptor_json_schema() {
        let m = ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap();
        let v = serde_json::to_value(m).unwrap();
        assert_eq!(v["kind"], "mapping-torus");
        assert_eq!(v["matrix"][0][0], 2);
        assert_eq!(v["period"], 1.0);
        let back: ManifoldDescriptor = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn local_chart_round_trip_across_roof() {
        let m = ManifoldDescriptor::mapping_torus(IntMat2::cat_map()).unwrap();
        let anchor = normalize([0.4, 0.6, 0.98], &m).unwrap();
        let chart = LocalChart::new(anchor);
        // A point across the roof lifts to a nearby local coordinate.
        let p = normalize([0.4, 0.6, 1.03], &m).unwrap();
        let v = chart.to_local(&p).unwrap();
        assert!(v.norm() < 0.1, "lift should be local, got {v:?}");
        let (q, _) = chart.from_local(v).unwrap();
        assert!(dist(&p, &q).unwrap() < 1e-12);
    }
}
