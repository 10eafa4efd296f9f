//! Assembly of the P1 forms: the pulled-back bilinear form, semilinear terms,
//! loads, damage-dependent elasticity, and Dirichlet elimination.
//!
//! Quadrature: diffusion and consistent mass use the three edge midpoints
//! (exact for quadratics). Semilinear terms default to vertex quadrature, so
//! that their Jacobian is diagonal and the complementarity system is nodal.
//! Everything that has a shape derivative is assembled by the same loop as
//! its derivative, with the coefficients swapped for their first-order
//! counterparts; discrete derivatives are therefore exact derivatives of the
//! discrete operators.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flow::{first_order_at, pullback_coeffs, PointFirstOrder, PointPullback, VectorField};
use crate::linalg::{ddot2, matvec2, mul2, sym2, transpose2, Mat2, SparseMatrix, Vec2, IDENTITY};
use crate::mesh::{Element, Mesh};

/// Quadrature for semilinear terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Vertex rule, weight `|T|/3` per vertex.
    #[default]
    Lumped,
    /// Edge-midpoint rule, weight `|T|/3` per midpoint.
    Midpoint,
}

/// How the zero-order term `λ ∫ ξ v z` is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassKind {
    #[default]
    Consistent,
    Lumped,
}

/// Pullback coefficients of a flow at the vertices and edge midpoints of a
/// mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Transport {
    pub t: f64,
    pub vertex: Vec<PointPullback>,
    pub edge: Vec<PointPullback>,
}

impl Transport {
    pub fn identity(mesh: &Mesh) -> Self {
        Transport {
            t: 0.0,
            vertex: mesh.vertices().iter().map(|&p| PointPullback::identity(p)).collect(),
            edge: (0..mesh.edges().len()).map(|e| PointPullback::identity(mesh.edge_midpoint(e))).collect(),
        }
    }

    /// Pullback for the flow of `x` at time `t`. At `t = 0` this is exactly
    /// the identity.
    pub fn new(mesh: &Mesh, x: &dyn VectorField, t: f64) -> Result<Self> {
        if t == 0.0 {
            return Ok(Self::identity(mesh));
        }
        let vertex = pullback_coeffs(x, t, mesh.vertices())?;
        let mids: Vec<Vec2> = (0..mesh.edges().len()).map(|e| mesh.edge_midpoint(e)).collect();
        let edge = pullback_coeffs(x, t, &mids)?;
        Ok(Transport { t, vertex, edge })
    }

    pub fn vertex_images(&self) -> Vec<Vec2> {
        self.vertex.iter().map(|c| c.image).collect()
    }
}

/// `X`, `∂X`, `A′(0)` and `ξ′(0)` at the vertices and edge midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrder {
    pub vertex: Vec<PointFirstOrder>,
    pub edge: Vec<PointFirstOrder>,
}

impl FirstOrder {
    pub fn new(mesh: &Mesh, x: &dyn VectorField) -> Self {
        FirstOrder {
            vertex: mesh.vertices().iter().map(|&p| first_order_at(x, p)).collect(),
            edge: (0..mesh.edges().len()).map(|e| first_order_at(x, mesh.edge_midpoint(e))).collect(),
        }
    }
}

/// Value of local basis function `a` at the midpoint of local edge `e`.
#[inline]
fn phi_mid(a: usize, e: usize) -> f64 {
    if a == e || a == (e + 1) % 3 {
        0.5
    } else {
        0.0
    }
}

/// `Σ_T Σ_q |T|/3 [A_q ∇φ_i·∇φ_j + λ ξ_q φ_i φ_j]`, with `A`, `ξ` given per
/// edge and, for lumped mass, `ξ` per vertex.
pub fn assemble_bilinear_coeffs(
    mesh: &Mesh,
    a_edge: &[Mat2],
    xi_edge: &[f64],
    xi_vertex: &[f64],
    lambda: f64,
    mass: MassKind,
) -> SparseMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for (k, el) in mesh.elements().enumerate() {
        let te = mesh.triangle_edges()[k];
        let w = el.area / 3.0;
        for a in 0..3 {
            for b in 0..3 {
                let mut v = 0.0;
                for (e, &ed) in te.iter().enumerate() {
                    let ag = matvec2(&a_edge[ed], &el.grads[b]);
                    v += w * (el.grads[a][0] * ag[0] + el.grads[a][1] * ag[1]);
                    if mass == MassKind::Consistent {
                        v += w * lambda * xi_edge[ed] * phi_mid(a, e) * phi_mid(b, e);
                    }
                }
                if mass == MassKind::Lumped && a == b {
                    v += w * lambda * xi_vertex[el.nodes[a]];
                }
                trip.push((el.nodes[a], el.nodes[b], v));
            }
        }
    }
    SparseMatrix::from_triplets(mesh.n_vertices(), trip)
}

/// Matrix of the pulled-back form `∫ A(t)∇v·∇z + λ ξ(t) v z`.
pub fn assemble_bilinear(mesh: &Mesh, tr: &Transport, lambda: f64, mass: MassKind) -> Result<SparseMatrix> {
    for (e, c) in tr.edge.iter().enumerate() {
        let a = c.a;
        if !(a[0][0] > 0.0 && a[0][0] * a[1][1] - a[0][1] * a[1][0] > 0.0) {
            return Err(Error::InvalidArgument(format!("coefficient matrix not positive definite at edge {e}")));
        }
    }
    let a: Vec<Mat2> = tr.edge.iter().map(|c| c.a).collect();
    let xi_e: Vec<f64> = tr.edge.iter().map(|c| c.xi).collect();
    let xi_v: Vec<f64> = tr.vertex.iter().map(|c| c.xi).collect();
    Ok(assemble_bilinear_coeffs(mesh, &a, &xi_e, &xi_v, lambda, mass))
}

/// Matrix of `∫ A′(0)∇v·∇z + λ ξ′(0) v z`, the `t`-derivative at zero of the
/// pulled-back form.
pub fn assemble_bilinear_derivative(mesh: &Mesh, fo: &FirstOrder, lambda: f64, mass: MassKind) -> SparseMatrix {
    let a: Vec<Mat2> = fo.edge.iter().map(|c| c.a_prime).collect();
    let xi_e: Vec<f64> = fo.edge.iter().map(|c| c.xi_prime).collect();
    let xi_v: Vec<f64> = fo.vertex.iter().map(|c| c.xi_prime).collect();
    assemble_bilinear_coeffs(mesh, &a, &xi_e, &xi_v, lambda, mass)
}

/// Semilinear density `w(x, u)`, the derivative of a convex potential `W`
/// in `u`.
pub trait Density: Send + Sync + Debug {
    fn w(&self, x: Vec2, u: f64) -> f64;
    /// `∂_u w`.
    fn dw(&self, x: Vec2, u: f64) -> f64;
    /// `∇_x w`.
    fn grad_x(&self, x: Vec2, u: f64) -> Vec2;
    /// `W(x, u) = ∫_0^u w(x, s) ds`.
    fn potential(&self, x: Vec2, u: f64) -> f64;
}

pub type DensityRef = Arc<dyn Density>;

/// `w ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDensity;

impl Density for ZeroDensity {
    fn w(&self, _: Vec2, _: f64) -> f64 {
        0.0
    }
    fn dw(&self, _: Vec2, _: f64) -> f64 {
        0.0
    }
    fn grad_x(&self, _: Vec2, _: f64) -> Vec2 {
        [0.0, 0.0]
    }
    fn potential(&self, _: Vec2, _: f64) -> f64 {
        0.0
    }
}

/// Density given as an expression in `x`, `y` (position) and `u` (state).
#[derive(Debug, Clone)]
pub struct ExprDensity {
    w: Expr,
    du: Expr,
    dx: Expr,
    dy: Expr,
}

impl ExprDensity {
    pub fn new(src: &str) -> Result<Self> {
        let w = Expr::parse(src, &["x", "y", "u"])?;
        Ok(ExprDensity { du: w.derivative(2)?, dx: w.derivative(0)?, dy: w.derivative(1)?, w })
    }

    pub fn source(&self) -> &str {
        self.w.source()
    }
}

// Gauss-Legendre nodes and weights on [-1, 1], exact for degree 15.
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// `∫_0^u f(s) ds` by composite Gauss-Legendre quadrature.
pub fn integrate_0_to(u: f64, f: impl Fn(f64) -> f64) -> f64 {
    let pieces = ((u.abs() / 0.25).ceil() as usize).clamp(1, 64);
    let h = u / pieces as f64;
    let mut s = 0.0;
    for k in 0..pieces {
        let mid = (k as f64 + 0.5) * h;
        for &(z, w) in &GL8 {
            s += 0.5 * h * w * f(mid + 0.5 * h * z);
        }
    }
    s
}

impl Density for ExprDensity {
    fn w(&self, x: Vec2, u: f64) -> f64 {
        self.w.eval(&[x[0], x[1], u])
    }
    fn dw(&self, x: Vec2, u: f64) -> f64 {
        self.du.eval(&[x[0], x[1], u])
    }
    fn grad_x(&self, x: Vec2, u: f64) -> Vec2 {
        [self.dx.eval(&[x[0], x[1], u]), self.dy.eval(&[x[0], x[1], u])]
    }
    fn potential(&self, x: Vec2, u: f64) -> f64 {
        integrate_0_to(u, |s| self.w(x, s))
    }
}

/// Smallest `∂_u w` over the sample positions and states, with the place
/// where it occurs.
pub fn min_density_slope(d: &dyn Density, points: &[Vec2], states: &[f64]) -> (f64, f64) {
    let mut worst = (f64::INFINITY, 0.0);
    for &p in points {
        for &u in states {
            let s = d.dw(p, u);
            if s < worst.0 {
                worst = (s, u);
            }
        }
    }
    worst
}

/// Vector `∫ ξ w(Φ_t(x), v) φ_i` and its Jacobian `∫ ξ ∂_u w(Φ_t(x), v) φ_i φ_j`
/// for `v = state + shift`.
pub fn assemble_semilinear(
    mesh: &Mesh,
    density: &dyn Density,
    tr: &Transport,
    state: &[f64],
    shift: &[f64],
    quad: Quadrature,
) -> Result<(Vec<f64>, SparseMatrix)> {
    let n = mesh.n_vertices();
    for v in [state, shift] {
        if v.len() != n {
            return Err(Error::SizeMismatch { expected: n, got: v.len() });
        }
    }
    let mut vec = vec![0.0; n];
    let mut trip = Vec::new();
    match quad {
        Quadrature::Lumped => {
            let m = mesh.lumped_mass();
            for i in 0..n {
                let c = &tr.vertex[i];
                let u = state[i] + shift[i];
                vec[i] = m[i] * c.xi * density.w(c.image, u);
                trip.push((i, i, m[i] * c.xi * density.dw(c.image, u)));
            }
        }
        Quadrature::Midpoint => {
            for (k, el) in mesh.elements().enumerate() {
                let te = mesh.triangle_edges()[k];
                let w = el.area / 3.0;
                for (e, &ed) in te.iter().enumerate() {
                    let c = &tr.edge[ed];
                    let u: f64 = (0..3).map(|a| phi_mid(a, e) * (state[el.nodes[a]] + shift[el.nodes[a]])).sum();
                    let (wv, dv) = (density.w(c.image, u), density.dw(c.image, u));
                    for a in 0..3 {
                        vec[el.nodes[a]] += w * c.xi * wv * phi_mid(a, e);
                        for b in 0..3 {
                            trip.push((el.nodes[a], el.nodes[b], w * c.xi * dv * phi_mid(a, e) * phi_mid(b, e)));
                        }
                    }
                }
            }
        }
    }
    if let Some(i) = vec.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("semilinear term at node {i}")));
    }
    Ok((vec, SparseMatrix::from_triplets(n, trip)))
}

/// `∫ ξ(t) W(Φ_t(x), v)` with the same quadrature as [`assemble_semilinear`].
pub fn semilinear_energy(mesh: &Mesh, density: &dyn Density, tr: &Transport, v: &[f64], quad: Quadrature) -> f64 {
    match quad {
        Quadrature::Lumped => {
            let m = mesh.lumped_mass();
            (0..mesh.n_vertices()).map(|i| m[i] * tr.vertex[i].xi * density.potential(tr.vertex[i].image, v[i])).sum()
        }
        Quadrature::Midpoint => {
            let mut s = 0.0;
            for (k, el) in mesh.elements().enumerate() {
                for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
                    let c = &tr.edge[ed];
                    let u: f64 = (0..3).map(|a| phi_mid(a, e) * v[el.nodes[a]]).sum();
                    s += el.area / 3.0 * c.xi * density.potential(c.image, u);
                }
            }
            s
        }
    }
}

/// `t`-derivative at zero of the semilinear vector at fixed nodal values `v`:
/// `∫ [ξ′(0) w(x, v) + ∇_x w(x, v)·X] φ_i`.
pub fn semilinear_derivative(
    mesh: &Mesh,
    density: &dyn Density,
    fo: &FirstOrder,
    v: &[f64],
    quad: Quadrature,
) -> Vec<f64> {
    let n = mesh.n_vertices();
    let mut out = vec![0.0; n];
    match quad {
        Quadrature::Lumped => {
            let m = mesh.lumped_mass();
            for i in 0..n {
                let (p, c) = (mesh.vertex(i), &fo.vertex[i]);
                let g = density.grad_x(p, v[i]);
                out[i] = m[i] * (c.xi_prime * density.w(p, v[i]) + g[0] * c.x[0] + g[1] * c.x[1]);
            }
        }
        Quadrature::Midpoint => {
            for (k, el) in mesh.elements().enumerate() {
                for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
                    let (p, c) = (mesh.edge_midpoint(ed), &fo.edge[ed]);
                    let u: f64 = (0..3).map(|a| phi_mid(a, e) * v[el.nodes[a]]).sum();
                    let g = density.grad_x(p, u);
                    let val = c.xi_prime * density.w(p, u) + g[0] * c.x[0] + g[1] * c.x[1];
                    for a in 0..3 {
                        out[el.nodes[a]] += el.area / 3.0 * val * phi_mid(a, e);
                    }
                }
            }
        }
    }
    out
}

/// Consistent load `∫ ξ(t) f(Φ_t(x)) φ_i` (midpoint rule).
pub fn assemble_load(mesh: &Mesh, f: &dyn Fn(Vec2) -> f64, tr: &Transport) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for (k, el) in mesh.elements().enumerate() {
        for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
            let c = &tr.edge[ed];
            let val = el.area / 3.0 * c.xi * f(c.image);
            for a in 0..3 {
                out[el.nodes[a]] += val * phi_mid(a, e);
            }
        }
    }
    out
}

/// `t`-derivative at zero of [`assemble_load`]: `∫ [ξ′ f + ∇f·X] φ_i`.
pub fn assemble_load_derivative(
    mesh: &Mesh,
    f: &dyn Fn(Vec2) -> f64,
    grad_f: &dyn Fn(Vec2) -> Vec2,
    fo: &FirstOrder,
) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for (k, el) in mesh.elements().enumerate() {
        for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
            let (p, c) = (mesh.edge_midpoint(ed), &fo.edge[ed]);
            let g = grad_f(p);
            let val = el.area / 3.0 * (c.xi_prime * f(p) + g[0] * c.x[0] + g[1] * c.x[1]);
            for a in 0..3 {
                out[el.nodes[a]] += val * phi_mid(a, e);
            }
        }
    }
    out
}

/// Vector load `∫ ξ(t) ℓ(Φ_t(x))·φ` for vector P1 (interleaved components).
pub fn assemble_vector_load(mesh: &Mesh, f: &dyn Fn(Vec2) -> Vec2, tr: &Transport) -> Vec<f64> {
    let mut out = vec![0.0; 2 * mesh.n_vertices()];
    for (k, el) in mesh.elements().enumerate() {
        for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
            let c = &tr.edge[ed];
            let v = f(c.image);
            for a in 0..3 {
                let s = el.area / 3.0 * c.xi * phi_mid(a, e);
                out[2 * el.nodes[a]] += s * v[0];
                out[2 * el.nodes[a] + 1] += s * v[1];
            }
        }
    }
    out
}

/// `t`-derivative at zero of [`assemble_vector_load`]; `grad_f` returns the
/// Jacobian `∂ℓ_i/∂x_j`.
pub fn assemble_vector_load_derivative(
    mesh: &Mesh,
    f: &dyn Fn(Vec2) -> Vec2,
    grad_f: &dyn Fn(Vec2) -> Mat2,
    fo: &FirstOrder,
) -> Vec<f64> {
    let mut out = vec![0.0; 2 * mesh.n_vertices()];
    for (k, el) in mesh.elements().enumerate() {
        for (e, &ed) in mesh.triangle_edges()[k].iter().enumerate() {
            let (p, c) = (mesh.edge_midpoint(ed), &fo.edge[ed]);
            let v = f(p);
            let dv = matvec2(&grad_f(p), &c.x);
            for a in 0..3 {
                let s = el.area / 3.0 * phi_mid(a, e);
                out[2 * el.nodes[a]] += s * (c.xi_prime * v[0] + dv[0]);
                out[2 * el.nodes[a] + 1] += s * (c.xi_prime * v[1] + dv[1]);
            }
        }
    }
    out
}

/// Linear system after eliminating prescribed degrees of freedom.
#[derive(Debug, Clone)]
pub struct Constrained {
    pub free: Vec<usize>,
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    full: Vec<f64>,
}

impl Constrained {
    /// Full vector from values on the free degrees of freedom.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.full.clone();
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = x[k];
        }
        out
    }

    pub fn solve(&self) -> Result<Vec<f64>> {
        let x = crate::linalg::solve_spd(&self.matrix, &self.rhs)?;
        Ok(self.expand(&x))
    }
}

/// Eliminates the degrees of freedom in `fixed` (index, value) from
/// `matrix x = rhs`, keeping the reduced matrix symmetric.
pub fn apply_dirichlet(matrix: &SparseMatrix, rhs: &[f64], fixed: &[(usize, f64)]) -> Result<Constrained> {
    let n = matrix.dim();
    let mut is_fixed = vec![false; n];
    let mut full = vec![0.0; n];
    for &(i, v) in fixed {
        if i >= n {
            return Err(Error::InvalidArgument(format!("boundary index {i} out of range for dimension {n}")));
        }
        is_fixed[i] = true;
        full[i] = v;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();
    let lifted = matrix.mul_vec(&full);
    let red_rhs = free.iter().map(|&i| rhs[i] - lifted[i]).collect();
    Ok(Constrained { matrix: matrix.principal_submatrix(&free), rhs: red_rhs, free, full })
}

/// `C²` ramp: `0` for `x ≤ 0`, `x³/δ² − x⁴/(2δ³)` on `(0, δ)`, `x − δ/2`
/// beyond. Returns value, first and second derivative.
pub fn ramp(delta: f64, x: f64) -> [f64; 3] {
    if x <= 0.0 {
        [0.0; 3]
    } else if x < delta {
        let (d2, d3) = (delta * delta, delta * delta * delta);
        [
            x.powi(3) / d2 - x.powi(4) / (2.0 * d3),
            3.0 * x * x / d2 - 2.0 * x.powi(3) / d3,
            6.0 * x / d2 - 6.0 * x * x / d3,
        ]
    } else {
        [x - 0.5 * delta, 1.0, 0.0]
    }
}

/// Convex monotone `C²` spline with `q = 0` for `x ≤ 0`, `q(1) = 1`,
/// `q″ = κ x (L − x)` on `[0, L]` with `L = 1 + δ`, linear beyond `L`.
pub fn stiffness_spline(delta: f64, x: f64) -> [f64; 3] {
    let l = 1.0 + delta;
    let kappa = 12.0 / (2.0 * l - 1.0);
    let q = |x: f64| kappa * (l * x.powi(3) / 6.0 - x.powi(4) / 12.0);
    let dq = |x: f64| kappa * (l * x * x / 2.0 - x.powi(3) / 3.0);
    if x <= 0.0 {
        [0.0; 3]
    } else if x < l {
        [q(x), dq(x), kappa * x * (l - x)]
    } else {
        [q(l) + dq(l) * (x - l), dq(l), 0.0]
    }
}

/// Damage-dependent stiffness factor `c = c₁ + c₂` with
/// `c₁(χ) = η + (1 − η) q(χ)` and `c₂ ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degradation {
    pub eta: f64,
    pub delta: f64,
}

impl Degradation {
    /// `c₁` and its first two derivatives.
    pub fn c1(&self, x: f64) -> [f64; 3] {
        let q = stiffness_spline(self.delta, x);
        [self.eta + (1.0 - self.eta) * q[0], (1.0 - self.eta) * q[1], (1.0 - self.eta) * q[2]]
    }

    /// `c₂` and its first two derivatives.
    pub fn c2(&self, _x: f64) -> [f64; 3] {
        [0.0; 3]
    }

    pub fn c(&self, x: f64) -> f64 {
        self.c1(x)[0] + self.c2(x)[0]
    }
}

/// Isotropic tensor `𝐂ε = 2μ ε + λ tr(ε) I` with degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticityTensor {
    pub lambda: f64,
    pub mu: f64,
    pub degradation: Degradation,
}

impl ElasticityTensor {
    pub fn new(lambda: f64, mu: f64, eta: f64, delta: f64) -> Result<Self> {
        if !(mu > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Lamé parameters need mu > 0, lambda >= 0 (got {mu}, {lambda})"
            )));
        }
        if !(eta > 0.0 && eta <= 1.0) || !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degradation needs 0 < eta <= 1 and delta > 0 (got {eta}, {delta})"
            )));
        }
        let t = ElasticityTensor { lambda, mu, degradation: Degradation { eta, delta } };
        t.check_samples()?;
        Ok(t)
    }

    /// Sampled check: `c ≥ η`, `c₁` convex and `c₂` concave.
    pub fn check_samples(&self) -> Result<()> {
        let d = &self.degradation;
        let h = 1e-3;
        for k in 0..=400 {
            let x = -1.0 + 3.0 * k as f64 / 400.0;
            let c = d.c(x);
            if c < d.eta - 1e-14 {
                return Err(Error::Degradation { value: c, eta: d.eta });
            }
            let sec = |f: &dyn Fn(f64) -> f64| f(x + h) - 2.0 * f(x) + f(x - h);
            if sec(&|s| d.c1(s)[0]) < -1e-12 || sec(&|s| d.c2(s)[0]) > 1e-12 {
                return Err(Error::InvalidArgument(format!("degradation convexity fails near {x}")));
            }
        }
        Ok(())
    }

    pub fn stress(&self, eps: &Mat2) -> Mat2 {
        let tr = self.lambda * (eps[0][0] + eps[1][1]);
        [
            [2.0 * self.mu * eps[0][0] + tr, 2.0 * self.mu * eps[0][1]],
            [2.0 * self.mu * eps[1][0], 2.0 * self.mu * eps[1][1] + tr],
        ]
    }

    /// `𝐂ε:ε`.
    pub fn energy_density(&self, eps: &Mat2) -> f64 {
        ddot2(&self.stress(eps), eps)
    }
}

/// Gradient of the vector P1 field `u` (interleaved) on an element:
/// `G[c][j] = ∂u_c/∂x_j`.
pub fn element_gradient(el: &Element, u: &[f64]) -> Mat2 {
    let mut g = [[0.0; 2]; 2];
    for a in 0..3 {
        let n = el.nodes[a];
        for c in 0..2 {
            g[c][0] += u[2 * n + c] * el.grads[a][0];
            g[c][1] += u[2 * n + c] * el.grads[a][1];
        }
    }
    g
}

/// `εᵗ = sym(∂u (∂Φ_t)⁻¹)` on each element, evaluated with the flow jacobian
/// of each of its vertices.
pub fn vertex_strains(mesh: &Mesh, u: &[f64], tr: &Transport) -> Vec<[Mat2; 3]> {
    mesh.elements()
        .map(|el| {
            let g = element_gradient(&el, u);
            el.nodes.map(|n| sym2(&mul2(&g, &tr.vertex[n].jac_inv)))
        })
        .collect()
}

/// Matrix of `∫ ξ c(χ) 𝐂εᵗ(u):εᵗ(φ)` with vertex quadrature.
pub fn assemble_elasticity(
    mesh: &Mesh,
    tensor: &ElasticityTensor,
    chi: &[f64],
    tr: &Transport,
) -> Result<SparseMatrix> {
    let weights: Vec<f64> = (0..mesh.n_vertices())
        .map(|i| {
            let c = tensor.degradation.c(chi[i]);
            if c < tensor.degradation.eta - 1e-14 || !c.is_finite() {
                return Err(Error::Degradation { value: c, eta: tensor.degradation.eta });
            }
            Ok(tr.vertex[i].xi * c)
        })
        .collect::<Result<_>>()?;
    let jinv: Vec<Mat2> = tr.vertex.iter().map(|c| c.jac_inv).collect();
    Ok(assemble_elasticity_weighted(mesh, tensor, &weights, &jinv))
}

/// Vector-P1 matrix of `Σ_T Σ_i |T|/3 s_i 𝐂 sym(∂u F_i)ᵀ : sym(∂φ F_i)` with
/// per-vertex weights `s_i` and matrices `F_i` (the inverse flow jacobians).
pub fn assemble_elasticity_weighted(
    mesh: &Mesh,
    tensor: &ElasticityTensor,
    weights: &[f64],
    jinv: &[Mat2],
) -> SparseMatrix {
    let (lam, mu) = (tensor.lambda, tensor.mu);
    let mut trip = Vec::with_capacity(36 * mesh.n_triangles());
    for el in mesh.elements() {
        let mut ke = [[0.0; 6]; 6];
        for &n in &el.nodes {
            let w = el.area / 3.0 * weights[n];
            let ft = transpose2(&jinv[n]);
            let g: [Vec2; 3] = [0, 1, 2].map(|a| matvec2(&ft, &el.grads[a]));
            for a in 0..3 {
                for b in 0..3 {
                    let gh = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                    for c in 0..2 {
                        for d in 0..2 {
                            let delta = if c == d { gh } else { 0.0 };
                            ke[2 * a + c][2 * b + d] +=
                                w * (mu * (delta + g[a][d] * g[b][c]) + lam * g[a][c] * g[b][d]);
                        }
                    }
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..2 {
                        trip.push((2 * el.nodes[a] + c, 2 * el.nodes[b] + d, ke[2 * a + c][2 * b + d]));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(2 * mesh.n_vertices(), trip)
}

/// Identity transport jacobians for the reference configuration.
pub fn identity_jacobians(mesh: &Mesh) -> Vec<Mat2> {
    vec![IDENTITY; mesh.n_vertices()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_square_mesh;

    fn k0(mesh: &Mesh, lambda: f64) -> SparseMatrix {
        assemble_bilinear(mesh, &Transport::identity(mesh), lambda, MassKind::Consistent).unwrap()
    }

    #[test]
    fn bilinear_constants() {
        let m = unit_square_mesh(1).unwrap();
        let stiff = k0(&m, 0.0);
        assert_eq!(stiff.dim(), 4);
        for i in 0..4 {
            assert!(stiff.row(i).map(|(_, v)| v).sum::<f64>().abs() < 1e-12);
        }
        let m4 = unit_square_mesh(4).unwrap();
        let one = vec![1.0; m4.n_vertices()];
        assert!((k0(&m4, 2.5).form(&one, &one) - 2.5).abs() < 1e-12);
        let lumped = assemble_bilinear(&m4, &Transport::identity(&m4), 2.5, MassKind::Lumped).unwrap();
        assert!((lumped.form(&one, &one) - 2.5).abs() < 1e-12);
        assert!(k0(&m4, 1.0).symmetry_defect() < 1e-12);
    }

    #[test]
    fn doubling_a_doubles_stiffness() {
        let m = unit_square_mesh(3).unwrap();
        let ne = m.edges().len();
        let one = assemble_bilinear_coeffs(&m, &vec![IDENTITY; ne], &vec![1.0; ne], &[], 0.0, MassKind::Consistent);
        let two = assemble_bilinear_coeffs(
            &m,
            &vec![[[2.0, 0.0], [0.0, 2.0]]; ne],
            &vec![1.0; ne],
            &[],
            0.0,
            MassKind::Consistent,
        );
        assert_eq!(one.scaled(2.0), two);
    }

    #[test]
    fn semilinear_examples() {
        let m = unit_square_mesh(3).unwrap();
        let tr = Transport::identity(&m);
        let n = m.n_vertices();
        let zero = vec![0.0; n];
        let (v, mat) = assemble_semilinear(&m, &ZeroDensity, &tr, &zero, &zero, Quadrature::Lumped).unwrap();
        assert!(v.iter().all(|&x| x == 0.0) && mat.triplets().all(|(_, _, x)| x == 0.0));

        let lin = ExprDensity::new("u").unwrap();
        let one = vec![1.0; n];
        let (v, mat) = assemble_semilinear(&m, &lin, &tr, &one, &zero, Quadrature::Lumped).unwrap();
        let lumped = m.lumped_mass();
        for i in 0..n {
            assert!((v[i] - lumped[i]).abs() < 1e-15);
            assert!((mat.get(i, i) - lumped[i]).abs() < 1e-15);
        }
        let (v, mat) = assemble_semilinear(&m, &lin, &tr, &zero, &one, Quadrature::Midpoint).unwrap();
        let mass = k0(&m, 1.0).add_scaled(-1.0, &k0(&m, 0.0));
        for i in 0..n {
            assert!((v[i] - lumped[i]).abs() < 1e-14);
            for (j, x) in mass.row(i) {
                assert!((mat.get(i, j) - x).abs() < 1e-14);
            }
        }
        let cubic = ExprDensity::new("u^3").unwrap();
        let s: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, mat) = assemble_semilinear(&m, &cubic, &tr, &s, &zero, Quadrature::Lumped).unwrap();
        assert!((0..n).all(|i| mat.get(i, i) >= 0.0));
    }

    #[test]
    fn newton_linearisation_matches_differences() {
        let m = unit_square_mesh(4).unwrap();
        let tr = Transport::identity(&m);
        let d = ExprDensity::new("u^3 + sin(x*u) + y*u").unwrap();
        let n = m.n_vertices();
        let s: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let dir: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
        let zero = vec![0.0; n];
        for quad in [Quadrature::Lumped, Quadrature::Midpoint] {
            let (_, jac) = assemble_semilinear(&m, &d, &tr, &s, &zero, quad).unwrap();
            let h = 1e-6;
            let sp: Vec<f64> = s.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let sm: Vec<f64> = s.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let (vp, _) = assemble_semilinear(&m, &d, &tr, &sp, &zero, quad).unwrap();
            let (vm, _) = assemble_semilinear(&m, &d, &tr, &sm, &zero, quad).unwrap();
            let fd: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let an = jac.mul_vec(&dir);
            let err: f64 = fd.iter().zip(&an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let nrm: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err <= 1e-5 * nrm, "{quad:?}: {err} vs {nrm}");
        }
    }

    #[test]
    fn potential_integrates_density() {
        let d = ExprDensity::new("u^3 - 2*u + x").unwrap();
        let p = [0.3, 0.1];
        let u: f64 = 1.7;
        let exact = u.powi(4) / 4.0 - u * u + 0.3 * u;
        assert!((d.potential(p, u) - exact).abs() < 1e-13);
        assert!((d.potential(p, -u) - (u.powi(4) / 4.0 - u * u - 0.3 * u)).abs() < 1e-13);
    }

    #[test]
    fn load_and_dirichlet() {
        let m = unit_square_mesh(4).unwrap();
        let tr = Transport::identity(&m);
        assert!(assemble_load(&m, &|_| 0.0, &tr).iter().all(|&v| v == 0.0));
        let total: f64 = assemble_load(&m, &|_| 1.0, &tr).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let k = k0(&m, 0.0);
        let fixed: Vec<(usize, f64)> = m.boundary_nodes().iter().map(|&i| (i, 2.5)).collect();
        let sys = apply_dirichlet(&k, &vec![0.0; m.n_vertices()], &fixed).unwrap();
        assert!(sys.matrix.symmetry_defect() < 1e-12);
        let u = sys.solve().unwrap();
        assert!(u.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(apply_dirichlet(&k, &[0.0; 25], &[(99, 0.0)]).is_err());
    }

    #[test]
    fn splines() {
        for delta in [0.2, 0.5, 1.0] {
            let q = |x| stiffness_spline(delta, x);
            assert!((q(1.0)[0] - 1.0).abs() < 1e-14);
            let l = 1.0 + delta;
            for x in [0.0, delta, l] {
                for k in 0..2 {
                    let (a, b) = (q(x - 1e-9), q(x + 1e-9));
                    assert!((a[k] - b[k]).abs() < 1e-6, "q^{k} jumps at {x}");
                    let (a, b) = (ramp(delta, x - 1e-9), ramp(delta, x + 1e-9));
                    assert!((a[k] - b[k]).abs() < 1e-6, "m^{k} jumps at {x}");
                }
            }
        }
        assert_eq!(stiffness_spline(0.5, 0.5)[0], 1.5 * 0.125 - 0.5 * 0.0625);
    }

    #[test]
    fn elasticity_kernel() {
        let m = unit_square_mesh(3).unwrap();
        let tr = Transport::identity(&m);
        let tensor = ElasticityTensor::new(1.0, 1.0, 0.1, 0.5).unwrap();
        let chi = vec![1.0; m.n_vertices()];
        let k = assemble_elasticity(&m, &tensor, &chi, &tr).unwrap();
        assert!(k.symmetry_defect() < 1e-12);
        let trans: Vec<f64> = (0..m.n_vertices()).flat_map(|_| [0.3, -1.2]).collect();
        assert!(k.mul_vec(&trans).iter().all(|v| v.abs() < 1e-12));
        let rot: Vec<f64> = m.vertices().iter().flat_map(|p| [-p[1], p[0]]).collect();
        assert!(k.mul_vec(&rot).iter().all(|v| v.abs() < 1e-12));

        let t1 = ElasticityTensor::new(0.0, 1.0, 0.1, 0.5).unwrap();
        let t2 = ElasticityTensor::new(0.0, 2.0, 0.1, 0.5).unwrap();
        let k1 = assemble_elasticity(&m, &t1, &chi, &tr).unwrap();
        let k2 = assemble_elasticity(&m, &t2, &chi, &tr).unwrap();
        assert_eq!(k1.scaled(2.0), k2);
        assert!(ElasticityTensor::new(1.0, 0.0, 0.1, 0.5).is_err());
    }

    #[test]
    fn transported_stiffness_is_monotone() {
        let m = unit_square_mesh(6).unwrap();
        let x = crate::flow::catalog_field("translation_bump", [0.5, 0.5], 0.3, [1.0, 0.0], 0.0).unwrap();
        let tr = Transport::new(&m, &x, 0.05).unwrap();
        let kt = assemble_bilinear(&m, &tr, 1.0, MassKind::Consistent).unwrap();
        let k = k0(&m, 1.0);
        for s in 0..20 {
            let v: Vec<f64> = (0..m.n_vertices()).map(|i| ((i * (s + 3)) as f64 * 0.91).sin()).collect();
            assert!(kt.form(&v, &v) >= 0.5 * k.form(&v, &v));
        }
    }
}
