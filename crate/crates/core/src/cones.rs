//! Discrete tangent and critical cones at a VI solution, the material
//! derivative VI over the shifted cone, and shape derivatives of the state.

use crate::error::{Error, Result};
use crate::fem::{assemble_bilinear_derivative, semilinear_derivative, FirstOrder, Transport};
use crate::flow::VectorField;
use crate::functions::ScalarField;
use crate::io;
use crate::linalg::{norm_inf, SparseMatrix};
use crate::mesh::Mesh;
use crate::parallel;
use crate::sensitivity::fit_slope;
use crate::vi::{
    self, kkt_residuals, solve_box, solve_transported_with, BoxSolution, Constraint, ObstacleProblem, Operator,
    Quadratic, Residuals, SolverOptions, VISolution,
};

/// How nodes with `u_i = ψ_i` and `μ_i ≤ tol` are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiactiveRule {
    /// Kept as inequalities (tangent cone intersected with the kernel).
    #[default]
    Conical,
    /// Treated as free, as under strict complementarity.
    Linearised,
}

/// Closed convex cone given nodewise: prescribed values, upper bounds or free.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCone {
    pub constraints: Vec<Constraint>,
}

impl DiscreteCone {
    pub fn whole_space(n: usize) -> Self {
        DiscreteCone { constraints: vec![Constraint::Free; n] }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn equality_nodes(&self) -> Vec<usize> {
        self.indices(|c| matches!(c, Constraint::Fixed(_)))
    }

    pub fn inequality_nodes(&self) -> Vec<usize> {
        self.indices(|c| matches!(c, Constraint::Upper(_)))
    }

    pub fn free_nodes(&self) -> Vec<usize> {
        self.indices(|c| matches!(c, Constraint::Free))
    }

    fn indices(&self, f: impl Fn(&Constraint) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| f(&self.constraints[i])).collect()
    }

    /// Largest violation of the nodal conditions by `v`.
    pub fn violation(&self, v: &[f64]) -> f64 {
        self.constraints
            .iter()
            .zip(v)
            .map(|(c, &x)| match *c {
                Constraint::Free => 0.0,
                Constraint::Upper(g) => (x - g).max(0.0),
                Constraint::Fixed(g) => (x - g).abs(),
            })
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.len() && self.violation(v) <= tol
    }

    /// The same cone with every bound shifted by `-shift`.
    pub fn shifted(&self, shift: &[f64]) -> DiscreteCone {
        DiscreteCone {
            constraints: self
                .constraints
                .iter()
                .zip(shift)
                .map(|(c, s)| match *c {
                    Constraint::Free => Constraint::Free,
                    Constraint::Upper(g) => Constraint::Upper(g - s),
                    Constraint::Fixed(g) => Constraint::Fixed(g - s),
                })
                .collect(),
        }
    }
}

/// `T_u(K) ∩ kern(μ) + ψ̇`: strongly active nodes (`μ_i > tol`) get
/// `φ_i = ψ̇_i`, biactive nodes `φ_i ≤ ψ̇_i`, the rest are free.
pub fn tangent_kern_cone(sol: &VISolution, psidot: &[f64], tol: f64) -> Result<DiscreteCone> {
    tangent_kern_cone_with(sol, psidot, tol, BiactiveRule::Conical)
}

pub fn tangent_kern_cone_with(sol: &VISolution, psidot: &[f64], tol: f64, rule: BiactiveRule) -> Result<DiscreteCone> {
    let n = sol.state.len();
    if psidot.len() != n {
        return Err(Error::SizeMismatch { expected: n, got: psidot.len() });
    }
    if psidot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("obstacle derivative".into()));
    }
    let mut constraints = Vec::with_capacity(n);
    for i in 0..n {
        let (u, psi, mu) = (sol.state[i], sol.obstacle[i], sol.multiplier[i]);
        if u > psi + tol || mu < -tol || (psi - u > tol && mu.abs() > tol) {
            return Err(Error::InconsistentSolution(format!("node {i}: u = {u:e}, psi = {psi:e}, mu = {mu:e}")));
        }
        let c = if psi.is_finite() && psi - u <= tol {
            if mu > tol {
                Constraint::Fixed(psidot[i])
            } else if rule == BiactiveRule::Conical {
                Constraint::Upper(psidot[i])
            } else {
                Constraint::Free
            }
        } else {
            Constraint::Free
        };
        constraints.push(c);
    }
    Ok(DiscreteCone { constraints })
}

/// First-order data of a scalar problem along `X`.
#[derive(Debug, Clone)]
pub struct MaterialDerivativeData {
    pub first_order: FirstOrder,
    /// `ψ̇_X` at the vertices (zero where unconstrained).
    pub psidot: Vec<f64>,
}

impl MaterialDerivativeData {
    /// Data for a static obstacle: `ψ̇_X = ∇ψ·X` nodally.
    pub fn new(problem: &ObstacleProblem, x: &dyn VectorField) -> Result<Self> {
        let mesh = &problem.mesh;
        let first_order = FirstOrder::new(mesh, x);
        let psidot = match &problem.obstacle {
            vi::Obstacle::None => vec![0.0; mesh.n_vertices()],
            vi::Obstacle::Function(f) => mesh
                .vertices()
                .iter()
                .zip(&first_order.vertex)
                .map(|(&p, c)| {
                    let g = f.gradient(p);
                    g[0] * c.x[0] + g[1] * c.x[1]
                })
                .collect(),
            vi::Obstacle::Nodal(_) => return Err(Error::DynamicObstacle),
        };
        Ok(MaterialDerivativeData { first_order, psidot })
    }
}

/// Solution of the material derivative VI.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDerivative {
    /// `u̇` (material derivative of the unshifted state).
    pub udot: Vec<f64>,
    /// `ẏ = u̇ − ψ̇`.
    pub ydot: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub cone: DiscreteCone,
    pub residuals: Residuals,
}

/// Solves `find u̇ ∈ S: ⟨H u̇ − b, φ − u̇⟩ ≥ 0 ∀φ ∈ S` for a symmetric
/// positive definite `H` and a nodal cone `S`.
pub fn solve_cone_vi(
    h: SparseMatrix,
    b: Vec<f64>,
    cone: &DiscreteCone,
    tol: f64,
    initial: Option<Vec<f64>>,
) -> Result<BoxSolution> {
    let op = Quadratic { h, b };
    let mut opts = SolverOptions::new(tol);
    opts.initial = initial;
    solve_box(&op, &cone.constraints, &opts)
}

/// Bilinear part `𝔞 + ∫∂_y w(x, u)` and right side
/// `−∫A′∇u·∇φ − ∫ξ′(λu + w(x, u))φ − ∫ẇ_X(x, u)φ` of the material
/// derivative VI.
pub fn material_derivative_system(
    problem: &ObstacleProblem,
    sol: &VISolution,
    data: &MaterialDerivativeData,
) -> Result<(SparseMatrix, Vec<f64>)> {
    let mesh = &problem.mesh;
    let tr = Transport::identity(mesh);
    let op = problem.operator(&tr)?;
    let h = op.jacobian(&sol.state)?;
    let kp = assemble_bilinear_derivative(mesh, &data.first_order, problem.lambda, problem.mass);
    let sp = semilinear_derivative(mesh, problem.density.as_ref(), &data.first_order, &sol.state, problem.quadrature);
    let b: Vec<f64> = kp.mul_vec(&sol.state).iter().zip(&sp).map(|(a, c)| -a - c).collect();
    Ok((h, b))
}

/// Classification of contact nodes in the material derivative cone.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConeOptions {
    /// Multiplier threshold between strongly active and biactive nodes;
    /// `None` uses [`VISolution::default_tol_act`].
    pub tol_act: Option<f64>,
    pub rule: BiactiveRule,
}

/// Material derivative of the state along the data of `data`.
pub fn solve_material_derivative(
    problem: &ObstacleProblem,
    sol: &VISolution,
    data: &MaterialDerivativeData,
    tol: f64,
) -> Result<MaterialDerivative> {
    solve_material_derivative_with(problem, sol, data, tol, ConeOptions::default(), None)
}

pub fn solve_material_derivative_with(
    problem: &ObstacleProblem,
    sol: &VISolution,
    data: &MaterialDerivativeData,
    tol: f64,
    opts: ConeOptions,
    initial: Option<Vec<f64>>,
) -> Result<MaterialDerivative> {
    let tol_act = opts.tol_act.unwrap_or_else(|| sol.default_tol_act());
    let rule = opts.rule;
    let cone = tangent_kern_cone_with(sol, &data.psidot, tol_act, rule)?;
    let (h, b) = material_derivative_system(problem, sol, data)?;
    let bs = solve_cone_vi(h, b, &cone, tol, initial)?;
    let ydot = bs.state.iter().zip(&data.psidot).map(|(u, p)| u - p).collect();
    Ok(MaterialDerivative { udot: bs.state, ydot, multiplier: bs.multiplier, cone, residuals: bs.residuals })
}

/// One row of the finite difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuotientRow {
    pub t: f64,
    /// `‖(yᵗ − y)/t − ẏ‖_{H¹}`.
    pub error_h1: f64,
    /// `‖(yᵗ − y)/t‖_{H¹}`.
    pub quotient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialOracle {
    pub rows: Vec<QuotientRow>,
    pub slope: Option<f64>,
    /// Errors strictly decrease along the (decreasing) `t` sequence.
    pub monotone: bool,
    /// Violation of the unshifted cone `T ∩ kern` by the quotient at the
    /// smallest `t`.
    pub cone_violation: f64,
    pub derivative: MaterialDerivative,
    pub last_quotient: Vec<f64>,
}

impl MaterialOracle {
    pub fn csv(&self) -> String {
        io::float_table(
            &["t", "error_h1", "quotient_norm"],
            &self.rows.iter().map(|r| vec![r.t, r.error_h1, r.quotient_norm]).collect::<Vec<_>>(),
        )
    }
}

/// Solves the transported problems for each `t`, forms `(yᵗ − y)/t` and
/// compares with the material derivative.
pub fn fd_material_oracle(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    ts: &[f64],
    tol: f64,
) -> Result<MaterialOracle> {
    fd_material_oracle_with(problem, x, ts, tol, ConeOptions::default())
}

pub fn fd_material_oracle_with(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    ts: &[f64],
    tol: f64,
    opts: ConeOptions,
) -> Result<MaterialOracle> {
    if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0)) || ts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("t sequence must be positive and strictly decreasing".into()));
    }
    let mesh = &problem.mesh;
    let base = vi::solve_obstacle_semilinear(problem, tol)?;
    let data = MaterialDerivativeData::new(problem, x)?;
    let md = solve_material_derivative_with(problem, &base, &data, tol, opts, None)?;
    let y0 = base.y();
    let warm = base.active_set(base.default_tol_act());
    let sols = parallel::map_indexed(ts.len(), |k| solve_transported_with(problem, x, ts[k], tol, Some(warm.clone())));
    let mut rows = Vec::with_capacity(ts.len());
    let mut last = Vec::new();
    for (k, s) in sols.into_iter().enumerate() {
        let s = s?;
        let q: Vec<f64> = s.y().iter().zip(&y0).map(|(a, b)| (a - b) / ts[k]).collect();
        let diff: Vec<f64> = q.iter().zip(&md.ydot).map(|(a, b)| a - b).collect();
        rows.push(QuotientRow { t: ts[k], error_h1: mesh.h1_norm(&diff)?, quotient_norm: mesh.h1_norm(&q)? });
        last = q;
    }
    let monotone = rows.windows(2).all(|w| w[1].error_h1 < w[0].error_h1);
    let slope =
        fit_slope(&rows.iter().map(|r| r.t).collect::<Vec<_>>(), &rows.iter().map(|r| r.error_h1).collect::<Vec<_>>());
    let unshifted = md.cone.shifted(&data.psidot);
    let cone_violation = unshifted.violation(&last);
    Ok(MaterialOracle { rows, slope, monotone, cone_violation, derivative: md, last_quotient: last })
}

/// `u′ = u̇ − ∇u·X` with the area-weighted recovered gradient of `u`.
pub fn state_shape_derivative(udot: &[f64], u: &[f64], x: &dyn VectorField, mesh: &Mesh) -> Result<Vec<f64>> {
    if udot.len() != mesh.n_vertices() {
        return Err(Error::SizeMismatch { expected: mesh.n_vertices(), got: udot.len() });
    }
    let g = mesh.recovered_gradient(u)?;
    Ok(mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let xv = x.value(p);
            udot[i] - (g[i][0] * xv[0] + g[i][1] * xv[1])
        })
        .collect())
}

/// `−∫_Γ [∇_Γu·∇_Γφ + (λu + w(x, u))φ] (X·n) ds` with midpoint quadrature on
/// each boundary edge.
pub fn boundary_form_value(problem: &ObstacleProblem, u: &[f64], x: &dyn VectorField, phi: &[f64]) -> Result<f64> {
    if matches!(problem.obstacle, vi::Obstacle::Nodal(_)) {
        return Err(Error::DynamicObstacle);
    }
    let mesh = &problem.mesh;
    for v in [u, phi] {
        if v.len() != mesh.n_vertices() {
            return Err(Error::SizeMismatch { expected: mesh.n_vertices(), got: v.len() });
        }
    }
    let mut s = 0.0;
    for &([a, b], _) in mesh.boundary_edges() {
        let (pa, pb) = (mesh.vertex(a), mesh.vertex(b));
        let d = [pb[0] - pa[0], pb[1] - pa[1]];
        let len = d[0].hypot(d[1]);
        // Boundary edges run counter-clockwise, so the outward normal is the
        // clockwise rotation of the tangent.
        let n = [d[1] / len, -d[0] / len];
        let m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        let xv = x.value(m);
        let xn = xv[0] * n[0] + xv[1] * n[1];
        if xn == 0.0 {
            continue;
        }
        let (um, pm) = (0.5 * (u[a] + u[b]), 0.5 * (phi[a] + phi[b]));
        let tang = (u[b] - u[a]) * (phi[b] - phi[a]) / (len * len);
        let w = problem.density.w(m, um);
        s += len * (tang + (problem.lambda * um + w) * pm) * xn;
    }
    Ok(-s)
}

/// Largest nodal difference between two solutions of the cone VI obtained
/// from different starting points.
pub fn restart_spread(
    problem: &ObstacleProblem,
    sol: &VISolution,
    data: &MaterialDerivativeData,
    tol: f64,
    starts: &[Vec<f64>],
) -> Result<f64> {
    let reference = solve_material_derivative(problem, sol, data, tol)?;
    let mut worst = 0.0_f64;
    for s in starts {
        let r = solve_material_derivative_with(problem, sol, data, tol, ConeOptions::default(), Some(s.clone()))?;
        let d: Vec<f64> = r.udot.iter().zip(&reference.udot).map(|(a, b)| a - b).collect();
        worst = worst.max(norm_inf(&d));
    }
    Ok(worst)
}

/// Checks the complementarity conditions of a cone VI solution.
pub fn cone_residuals(h: &SparseMatrix, b: &[f64], cone: &DiscreteCone, v: &[f64], mu: &[f64]) -> Result<Residuals> {
    let op = Quadratic { h: h.clone(), b: b.to_vec() };
    kkt_residuals(&op as &dyn Operator, &cone.constraints, v, mu)
}

/// `∇ψ·X` at the vertices for a scalar field `ψ`.
pub fn nodal_directional_derivative(mesh: &Mesh, f: &dyn ScalarField, x: &dyn VectorField) -> Vec<f64> {
    mesh.vertices()
        .iter()
        .map(|&p| {
            let (g, v) = (f.gradient(p), x.value(p));
            g[0] * v[0] + g[1] * v[1]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::ExprDensity;
    use crate::flow::{BumpField, BumpKind, ExprField, ZeroField};
    use crate::functions::{Constant, ExprScalar};
    use crate::mesh::{unit_square_mesh, Rect};
    use crate::vi::{scalar, Obstacle};
    use std::sync::Arc;

    fn problem(n: usize, density: &str, obstacle: Obstacle) -> ObstacleProblem {
        ObstacleProblem::new(unit_square_mesh(n).unwrap(), 1.0, Arc::new(ExprDensity::new(density).unwrap()), obstacle)
            .unwrap()
    }

    #[test]
    fn cone_shapes() {
        let p = problem(3, "u + 1", Obstacle::Function(scalar(Constant(0.0))));
        let s = vi::solve_obstacle_semilinear(&p, 1e-10).unwrap();
        let c = tangent_kern_cone(&s, &[0.0; 16], 1e-8).unwrap();
        assert_eq!(c.free_nodes().len(), 16);
        let p = problem(3, "u - 1", Obstacle::Function(scalar(Constant(0.0))));
        let s = vi::solve_obstacle_semilinear(&p, 1e-10).unwrap();
        let c = tangent_kern_cone(&s, &[0.5; 16], 1e-8).unwrap();
        assert_eq!(c.equality_nodes().len(), 16);
        let m =
            solve_material_derivative(&p, &s, &MaterialDerivativeData::new(&p, &ZeroField).unwrap(), 1e-10).unwrap();
        assert!(m.udot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_active_derivative_is_obstacle_derivative() {
        let p = problem(4, "u - 3", Obstacle::Function(scalar(ExprScalar::new("0.2*x + 0.1*y^2").unwrap())));
        let s = vi::solve_obstacle_semilinear(&p, 1e-10).unwrap();
        let x = BumpField::new([0.5, 0.5], 0.4, BumpKind::Translation([1.0, 0.3])).unwrap();
        let data = MaterialDerivativeData::new(&p, &x).unwrap();
        let m = solve_material_derivative(&p, &s, &data, 1e-10).unwrap();
        assert!(m.udot.iter().zip(&data.psidot).all(|(a, b)| a == b));
    }

    #[test]
    fn unconstrained_quotients_converge() {
        let p = problem(6, "u^3 + u - 2*x", Obstacle::None);
        let x = BumpField::new([0.5, 0.5], 0.35, BumpKind::Rotation(1.0)).unwrap();
        let o = fd_material_oracle(&p, &x, &[1e-2, 1e-3, 1e-4], 1e-11).unwrap();
        assert!(o.monotone);
        assert!(o.rows[2].error_h1 < 1e-3);
    }

    #[test]
    fn boundary_form_closed_form() {
        let p = problem(4, "0", Obstacle::None);
        let x = ExprField::new("x", "0", Rect::new(-1.0, 2.0, -1.0, 2.0).unwrap()).unwrap();
        let u = vec![2.0; 25];
        let phi = vec![3.0; 25];
        // X·n = 1 on x = 1 and 0 elsewhere (x = 0 on the left side).
        let v = boundary_form_value(&p, &u, &x, &phi).unwrap();
        assert!((v + 6.0).abs() < 1e-12);
        let xm = ExprField::new("-x", "0", Rect::new(-1.0, 2.0, -1.0, 2.0).unwrap()).unwrap();
        assert_eq!(boundary_form_value(&p, &u, &xm, &phi).unwrap(), -v);
    }
}
