//! Compactly supported vector fields, their flows `Φ_t` and the pullback
//! coefficients `A(t) = ξ (∂Φ_t)⁻¹(∂Φ_t)⁻ᵀ`, `ξ(t) = det ∂Φ_t`.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{mollifier, Expr};
use crate::linalg::{add2, det2, inv2, max_abs2, mul2, scale2, transpose2, Mat2, Vec2, IDENTITY, ZERO2};
use crate::mesh::{Rect, HOLD_ALL};
use crate::sensitivity::fit_slope;

/// Maximal step length of the flow integrator.
pub const MAX_STEP: f64 = 1e-3;
/// Minimal number of integration steps.
pub const MIN_STEPS: usize = 16;

/// A C¹ vector field `X` with compact support inside the hold-all box.
pub trait VectorField: Send + Sync + Debug {
    fn value(&self, p: Vec2) -> Vec2;
    /// `J[i][j] = ∂X_i/∂x_j`.
    fn jacobian(&self, p: Vec2) -> Mat2;
    /// Rectangle outside of which value and jacobian vanish.
    fn support(&self) -> Rect;

    fn divergence(&self, p: Vec2) -> f64 {
        let j = self.jacobian(p);
        j[0][0] + j[1][1]
    }
}

pub type Field = Arc<dyn VectorField>;

/// `X ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField;

impl VectorField for ZeroField {
    fn value(&self, _: Vec2) -> Vec2 {
        [0.0, 0.0]
    }
    fn jacobian(&self, _: Vec2) -> Mat2 {
        ZERO2
    }
    fn support(&self) -> Rect {
        HOLD_ALL
    }
}

/// Field given by two expressions in `x`, `y`, cut off outside `support`.
#[derive(Debug, Clone)]
pub struct ExprField {
    comp: [Expr; 2],
    jac: [[Expr; 2]; 2],
    support: Rect,
}

impl ExprField {
    pub fn new(x_expr: &str, y_expr: &str, support: Rect) -> Result<Self> {
        if !HOLD_ALL.contains_rect(&support) {
            return Err(Error::InvalidArgument("field support must lie inside the hold-all box".into()));
        }
        let vars = ["x", "y"];
        let cx = Expr::parse(x_expr, &vars)?;
        let cy = Expr::parse(y_expr, &vars)?;
        let jac = [[cx.derivative(0)?, cx.derivative(1)?], [cy.derivative(0)?, cy.derivative(1)?]];
        Ok(ExprField { comp: [cx, cy], jac, support })
    }
}

/// Parses a field from its two component expressions.
pub fn parse_field(x_expr: &str, y_expr: &str, support: Rect) -> Result<ExprField> {
    ExprField::new(x_expr, y_expr, support)
}

impl VectorField for ExprField {
    fn value(&self, p: Vec2) -> Vec2 {
        if !self.support.contains(p) {
            return [0.0, 0.0];
        }
        [self.comp[0].eval(&p), self.comp[1].eval(&p)]
    }
    fn jacobian(&self, p: Vec2) -> Mat2 {
        if !self.support.contains(p) {
            return ZERO2;
        }
        [[self.jac[0][0].eval(&p), self.jac[0][1].eval(&p)], [self.jac[1][0].eval(&p), self.jac[1][1].eval(&p)]]
    }
    fn support(&self) -> Rect {
        self.support
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BumpKind {
    /// `X = b(x) d`.
    Translation(Vec2),
    /// `X = ω b(x) (-(y - c_y), x - c_x)`.
    Rotation(f64),
}

/// Fields built from the mollifier bump `b` of a disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpField {
    pub center: Vec2,
    pub radius: f64,
    pub kind: BumpKind,
}

impl BumpField {
    pub fn new(center: Vec2, radius: f64, kind: BumpKind) -> Result<Self> {
        let f = BumpField { center, radius, kind };
        if !(radius > 0.0) || !HOLD_ALL.contains_rect(&f.support()) {
            return Err(Error::InvalidArgument(
                "bump disk must have positive radius and lie inside the hold-all box".into(),
            ));
        }
        Ok(f)
    }

    /// Bump value and gradient.
    fn profile(&self, p: Vec2) -> (f64, Vec2) {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let r2 = self.radius * self.radius;
        let s = (d[0] * d[0] + d[1] * d[1]) / r2;
        if s >= 1.0 {
            return (0.0, [0.0, 0.0]);
        }
        let dm = mollifier(1, s) * 2.0 / r2;
        (mollifier(0, s), [dm * d[0], dm * d[1]])
    }
}

impl VectorField for BumpField {
    fn value(&self, p: Vec2) -> Vec2 {
        let (b, _) = self.profile(p);
        match self.kind {
            BumpKind::Translation(v) => [b * v[0], b * v[1]],
            BumpKind::Rotation(w) => [-w * b * (p[1] - self.center[1]), w * b * (p[0] - self.center[0])],
        }
    }
    fn jacobian(&self, p: Vec2) -> Mat2 {
        let (b, g) = self.profile(p);
        match self.kind {
            BumpKind::Translation(v) => [[v[0] * g[0], v[0] * g[1]], [v[1] * g[0], v[1] * g[1]]],
            BumpKind::Rotation(w) => {
                let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
                [[-w * dy * g[0], -w * (b + dy * g[1])], [w * (b + dx * g[0]), w * dx * g[1]]]
            }
        }
    }
    fn support(&self) -> Rect {
        Rect {
            x0: self.center[0] - self.radius,
            x1: self.center[0] + self.radius,
            y0: self.center[1] - self.radius,
            y1: self.center[1] + self.radius,
        }
    }
}

/// `c X`.
#[derive(Debug, Clone)]
pub struct Scaled {
    pub field: Field,
    pub factor: f64,
}

impl VectorField for Scaled {
    fn value(&self, p: Vec2) -> Vec2 {
        let v = self.field.value(p);
        [self.factor * v[0], self.factor * v[1]]
    }
    fn jacobian(&self, p: Vec2) -> Mat2 {
        scale2(self.factor, &self.field.jacobian(p))
    }
    fn support(&self) -> Rect {
        self.field.support()
    }
}

/// Conjugation of a field by the reflection `(x, y) ↦ (y, x)`.
#[derive(Debug, Clone)]
pub struct Mirrored(pub Field);

impl VectorField for Mirrored {
    fn value(&self, p: Vec2) -> Vec2 {
        let v = self.0.value([p[1], p[0]]);
        [v[1], v[0]]
    }
    fn jacobian(&self, p: Vec2) -> Mat2 {
        let j = self.0.jacobian([p[1], p[0]]);
        [[j[1][1], j[1][0]], [j[0][1], j[0][0]]]
    }
    fn support(&self) -> Rect {
        let r = self.0.support();
        Rect { x0: r.y0, x1: r.y1, y0: r.x0, y1: r.x1 }
    }
}

/// Named fields usable from configuration files.
pub const CATALOG: &[&str] = &["translation_bump", "rotation_bump", "normal_boundary_bump"];

/// Builds a catalog field. `direction` is the translation direction (or the
/// outward normal for the boundary bump); `omega` is the angular speed of the
/// rotation bump.
pub fn catalog_field(name: &str, center: Vec2, radius: f64, direction: Vec2, omega: f64) -> Result<BumpField> {
    match name {
        "translation_bump" | "normal_boundary_bump" => BumpField::new(center, radius, BumpKind::Translation(direction)),
        "rotation_bump" => BumpField::new(center, radius, BumpKind::Rotation(omega)),
        _ => Err(Error::InvalidArgument(format!("unknown field `{name}`"))),
    }
}

/// Number of integration steps used for time `t`.
pub fn step_count(t: f64) -> usize {
    ((t.abs() / MAX_STEP).ceil() as usize).max(MIN_STEPS)
}

/// `(Φ_t(x0), ∂Φ_t(x0))` by classical Runge-Kutta on the flow equation and its
/// variational equation `d(∂Φ)/dt = ∂X(Φ) ∂Φ`.
pub fn integrate_flow(x: &dyn VectorField, t: f64, x0: Vec2) -> Result<(Vec2, Mat2)> {
    if !t.is_finite() {
        return Err(Error::NonFinite("flow time".into()));
    }
    if t == 0.0 {
        return Ok((x0, IDENTITY));
    }
    let support = x.support();
    let n = step_count(t);
    let h = t / n as f64;
    let rhs = |p: Vec2, f: &Mat2| (x.value(p), mul2(&x.jacobian(p), f));
    let shift = |p: Vec2, k: Vec2, s: f64| [p[0] + s * k[0], p[1] + s * k[1]];
    let (mut p, mut f) = (x0, IDENTITY);
    for _ in 0..n {
        let (k1, m1) = rhs(p, &f);
        let (k2, m2) = rhs(shift(p, k1, 0.5 * h), &add2(&f, &scale2(0.5 * h, &m1)));
        let (k3, m3) = rhs(shift(p, k2, 0.5 * h), &add2(&f, &scale2(0.5 * h, &m2)));
        let (k4, m4) = rhs(shift(p, k3, h), &add2(&f, &scale2(h, &m3)));
        for i in 0..2 {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            for j in 0..2 {
                f[i][j] += h / 6.0 * (m1[i][j] + 2.0 * m2[i][j] + 2.0 * m3[i][j] + m4[i][j]);
            }
        }
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinite("flow trajectory".into()));
        }
        if support.contains(x0) && !support.contains(p) {
            return Err(Error::LeftHoldAll { x: x0[0], y: x0[1] });
        }
    }
    Ok((p, f))
}

/// Pullback data at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPullback {
    /// `Φ_t(x)`.
    pub image: Vec2,
    /// `∂Φ_t(x)`.
    pub jac: Mat2,
    /// `(∂Φ_t(x))⁻¹`.
    pub jac_inv: Mat2,
    pub xi: f64,
    pub a: Mat2,
}

impl PointPullback {
    pub fn identity(p: Vec2) -> Self {
        PointPullback { image: p, jac: IDENTITY, jac_inv: IDENTITY, xi: 1.0, a: IDENTITY }
    }

    pub fn from_flow(image: Vec2, jac: Mat2) -> Self {
        let xi = det2(&jac);
        let jac_inv = inv2(&jac);
        let a = scale2(xi, &mul2(&jac_inv, &transpose2(&jac_inv)));
        // Symmetrise exactly; the product above is symmetric up to rounding.
        let off = 0.5 * (a[0][1] + a[1][0]);
        PointPullback { image, jac, jac_inv, xi, a: [[a[0][0], off], [off, a[1][1]]] }
    }
}

/// `A(t)`, `ξ(t)` and `Φ_t` at each point. Fails if `ξ ≤ ½` anywhere, which
/// is outside the regime where the transported problem is uniformly monotone.
pub fn pullback_coeffs(x: &dyn VectorField, t: f64, points: &[Vec2]) -> Result<Vec<PointPullback>> {
    let out = crate::parallel::map_indexed(points.len(), |k| {
        let (image, jac) = integrate_flow(x, t, points[k])?;
        Ok(PointPullback::from_flow(image, jac))
    });
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    for (k, c) in out.iter().enumerate() {
        if !(c.xi > 0.5) {
            return Err(Error::FlowValidity(format!(
                "det of the flow jacobian is {:.6e} <= 1/2 at point {k} for t = {t}",
                c.xi
            )));
        }
    }
    Ok(out)
}

/// `A′(0)`, `ξ′(0)` together with `X` and `∂X` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFirstOrder {
    pub x: Vec2,
    pub dx: Mat2,
    pub xi_prime: f64,
    pub a_prime: Mat2,
}

impl PointFirstOrder {
    pub fn zero() -> Self {
        PointFirstOrder { x: [0.0; 2], dx: ZERO2, xi_prime: 0.0, a_prime: ZERO2 }
    }
}

pub fn first_order_at(x: &dyn VectorField, p: Vec2) -> PointFirstOrder {
    let dx = x.jacobian(p);
    let div = dx[0][0] + dx[1][1];
    let off = -(dx[0][1] + dx[1][0]);
    PointFirstOrder {
        x: x.value(p),
        dx,
        xi_prime: div,
        a_prime: [[div - 2.0 * dx[0][0], off], [off, div - 2.0 * dx[1][1]]],
    }
}

/// `A′(0) = div X I − ∂X − ∂Xᵀ` and `ξ′(0) = div X` at each point.
pub fn first_order_coeffs(x: &dyn VectorField, points: &[Vec2]) -> Vec<PointFirstOrder> {
    points.iter().map(|&p| first_order_at(x, p)).collect()
}

/// Largest `t` in `[0, t_max]` (found by sampling and bisection on a grid over
/// the support) such that `ξ(s) ≥ ½` and `A(s) ≥ ½ I` for all sampled `s ≤ t`.
pub fn validity_time(x: &dyn VectorField, t_max: f64, grid: usize) -> Result<f64> {
    let r = x.support();
    let mut pts = Vec::new();
    for j in 0..=grid {
        for i in 0..=grid {
            pts.push([r.x0 + (r.x1 - r.x0) * i as f64 / grid as f64, r.y0 + (r.y1 - r.y0) * j as f64 / grid as f64]);
        }
    }
    let ok = |t: f64| -> bool {
        pts.iter().all(|&p| match integrate_flow(x, t, p) {
            Ok((img, jac)) => {
                let c = PointPullback::from_flow(img, jac);
                let (tr, det) = (c.a[0][0] + c.a[1][1], det2(&c.a));
                let lmin = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
                c.xi >= 0.5 && lmin >= 0.5
            }
            Err(_) => false,
        })
    };
    // Coarse scan first: the admissible set need not be an interval.
    let samples = 16;
    let mut good = 0.0;
    for k in 1..=samples {
        let t = t_max * k as f64 / samples as f64;
        if ok(t) {
            good = t;
        } else {
            let (mut lo, mut hi) = (good, t);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(lo);
        }
    }
    Ok(good)
}

/// Errors of the first-order expansions of the flow at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRateRow {
    pub t: f64,
    /// `‖(∂Φ_t − I)/t − ∂X‖_∞`.
    pub e_jac: f64,
    /// `‖(det ∂Φ_t − 1)/t − div X‖_∞`.
    pub e_det: f64,
    /// `‖(A(t) − I)/t − A′(0)‖_∞`.
    pub e_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRates {
    pub rows: Vec<FlowRateRow>,
    /// Fitted slopes of the three error columns; absent for fewer than two
    /// times.
    pub slopes: [Option<f64>; 3],
}

/// Sup-norm errors of the first-order flow expansions over `points`.
pub fn verify_flow_rates(x: &dyn VectorField, ts: &[f64], points: &[Vec2]) -> Result<FlowRates> {
    if ts.windows(2).any(|w| !(w[0] > w[1])) || ts.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument("t sequence must be positive and strictly decreasing".into()));
    }
    let first = first_order_coeffs(x, points);
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut row = FlowRateRow { t, e_jac: 0.0, e_det: 0.0, e_a: 0.0 };
        for (p, fo) in points.iter().zip(&first) {
            let (img, jac) = integrate_flow(x, t, *p)?;
            let c = PointPullback::from_flow(img, jac);
            let dj = add2(&scale2(1.0 / t, &add2(&jac, &scale2(-1.0, &IDENTITY))), &scale2(-1.0, &fo.dx));
            let da = add2(&scale2(1.0 / t, &add2(&c.a, &scale2(-1.0, &IDENTITY))), &scale2(-1.0, &fo.a_prime));
            row.e_jac = row.e_jac.max(max_abs2(&dj));
            row.e_det = row.e_det.max(((c.xi - 1.0) / t - fo.xi_prime).abs());
            row.e_a = row.e_a.max(max_abs2(&da));
        }
        rows.push(row);
    }
    let col = |f: fn(&FlowRateRow) -> f64| fit_slope(ts, &rows.iter().map(f).collect::<Vec<_>>());
    let slopes = [col(|r| r.e_jac), col(|r| r.e_det), col(|r| r.e_a)];
    Ok(FlowRates { rows, slopes })
}

/// Central difference jacobian of a field, used as a cross-check.
pub fn fd_jacobian(x: &dyn VectorField, p: Vec2, h: f64) -> Mat2 {
    let mut j = ZERO2;
    for c in 0..2 {
        let mut pp = p;
        let mut pm = p;
        pp[c] += h;
        pm[c] -= h;
        let (vp, vm) = (x.value(pp), x.value(pm));
        for r in 0..2 {
            j[r][c] = (vp[r] - vm[r]) / (2.0 * h);
        }
    }
    j
}

/// Grid of `(k+1)²` points over a rectangle.
pub fn sample_grid(r: Rect, k: usize) -> Vec<Vec2> {
    let mut pts = Vec::with_capacity((k + 1) * (k + 1));
    for j in 0..=k {
        for i in 0..=k {
            pts.push([r.x0 + (r.x1 - r.x0) * i as f64 / k as f64, r.y0 + (r.y1 - r.y0) * j as f64 / k as f64]);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stretch() -> ExprField {
        parse_field("x", "0", HOLD_ALL).unwrap()
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let (p, f) = integrate_flow(&ZeroField, 0.3, [0.2, 0.7]).unwrap();
        assert_eq!(p, [0.2, 0.7]);
        assert_eq!(f, IDENTITY);
        let (p, f) = integrate_flow(&stretch(), 0.0, [0.2, 0.7]).unwrap();
        assert_eq!((p, f), ([0.2, 0.7], IDENTITY));
    }

    #[test]
    fn linear_flow_closed_form() {
        let e = 0.2f64.exp();
        let (p, f) = integrate_flow(&stretch(), 0.2, [1.0, 1.0]).unwrap();
        assert!((p[0] - e).abs() < 1e-9 && (p[1] - 1.0).abs() < 1e-15);
        assert!((f[0][0] - e).abs() < 1e-9 && (f[1][1] - 1.0).abs() < 1e-15);
        assert_eq!((f[0][1], f[1][0]), (0.0, 0.0));
        let c = pullback_coeffs(&stretch(), 0.1, &[[0.5, 0.5]]).unwrap()[0];
        assert!((c.xi - 0.1f64.exp()).abs() < 1e-9);
        assert!((c.a[0][0] - (-0.1f64).exp()).abs() < 1e-9);
        assert!((c.a[1][1] - 0.1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn first_order_examples() {
        let fo = first_order_at(&stretch(), [0.3, 0.4]);
        assert_eq!(fo.xi_prime, 1.0);
        assert_eq!(fo.a_prime, [[-1.0, 0.0], [0.0, 1.0]]);
        let rot = parse_field("-y", "x", HOLD_ALL).unwrap();
        let fo = first_order_at(&rot, [0.3, 0.4]);
        assert_eq!(fo.xi_prime, 0.0);
        assert_eq!(fo.a_prime, ZERO2);
        assert_eq!(first_order_at(&ZeroField, [0.1, 0.1]), PointFirstOrder::zero());
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let fields: Vec<Box<dyn VectorField>> = vec![
            Box::new(catalog_field("translation_bump", [0.5, 0.5], 0.3, [1.0, 0.5], 0.0).unwrap()),
            Box::new(catalog_field("rotation_bump", [0.4, 0.6], 0.35, [0.0, 0.0], 1.5).unwrap()),
            Box::new(Mirrored(Arc::new(catalog_field("translation_bump", [0.3, 0.6], 0.25, [0.2, 1.0], 0.0).unwrap()))),
        ];
        for f in &fields {
            for p in sample_grid(Rect::new(0.05, 0.95, 0.05, 0.95).unwrap(), 12) {
                let d = add2(&f.jacobian(p), &scale2(-1.0, &fd_jacobian(f.as_ref(), p, 1e-6)));
                assert!(max_abs2(&d) < 1e-6, "{f:?} at {p:?}");
            }
        }
    }

    #[test]
    fn leaving_support_is_an_error() {
        let f = parse_field("1", "0", Rect::new(0.0, 1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(matches!(integrate_flow(&f, 0.5, [0.8, 0.5]), Err(Error::LeftHoldAll { .. })));
    }

    #[test]
    fn rates_of_a_bump() {
        let f = catalog_field("translation_bump", [0.5, 0.5], 0.3, [1.0, 0.0], 0.0).unwrap();
        let ts: Vec<f64> = (3..8).map(|k| 0.5f64.powi(k)).collect();
        let r = verify_flow_rates(&f, &ts, &sample_grid(f.support(), 10)).unwrap();
        for s in r.slopes {
            assert!(s.unwrap() >= 0.9, "{:?}", r.slopes);
        }
        let single = verify_flow_rates(&f, &[0.1], &[[0.5, 0.5]]).unwrap();
        assert_eq!(single.slopes, [None, None, None]);
    }

    #[test]
    fn validity_time_is_positive() {
        let f = catalog_field("translation_bump", [0.5, 0.5], 0.3, [1.0, 0.0], 0.0).unwrap();
        let t = validity_time(&f, 1.0, 16).unwrap();
        assert!(t > 0.05 && t <= 1.0, "{t}");
    }
}
