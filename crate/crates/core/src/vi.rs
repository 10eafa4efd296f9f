//! Discrete obstacle problems: a primal-dual active set method wrapped around
//! Newton's method, a projected Newton fallback, an enumeration oracle and the
//! regularised p-Laplace minimisation.
//!
//! The generic problem is `F(v) + μ = 0` with per-node constraints: free,
//! upper bound `v_i ≤ g_i` with `μ_i ≥ 0` and `μ_i (g_i − v_i) = 0`, or fixed
//! `v_i = g_i`. `F` is the gradient of a strictly convex energy.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_bilinear, assemble_semilinear, semilinear_energy, DensityRef, MassKind, Quadrature, Transport,
};
use crate::flow::{VectorField, ZeroField};
use crate::functions::{ScalarField, ScalarRef};
use crate::linalg::{dot, norm_inf, Cholesky, Mat2, SparseMatrix};
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    Free,
    Upper(f64),
    Fixed(f64),
}

/// Gradient map of a strictly convex energy.
pub trait Operator {
    fn dim(&self) -> usize;
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, v: &[f64]) -> Result<SparseMatrix>;
    fn energy(&self, v: &[f64]) -> Result<f64>;
    fn is_quadratic(&self) -> bool {
        false
    }
}

/// `F(v) = H v − b`, energy `½ vᵀHv − bᵀv`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub h: SparseMatrix,
    pub b: Vec<f64>,
}

impl Operator for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.h.mul_vec(v).iter().zip(&self.b).map(|(a, b)| a - b).collect())
    }
    fn jacobian(&self, _: &[f64]) -> Result<SparseMatrix> {
        Ok(self.h.clone())
    }
    fn energy(&self, v: &[f64]) -> Result<f64> {
        Ok(0.5 * self.h.form(v, v) - dot(&self.b, v))
    }
    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Sup-norm violations of the complementarity conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    /// `max(v_i − g_i)` over upper-bounded nodes.
    pub feasibility: f64,
    /// `max(−μ_i)` over upper-bounded nodes.
    pub sign: f64,
    /// `max |μ_i (g_i − v_i)|`.
    pub complementarity: f64,
    /// `‖F(v) + μ‖_∞` over non-fixed nodes.
    pub stationarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.feasibility.max(self.sign).max(self.complementarity).max(self.stationarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn kkt_residuals(op: &dyn Operator, cons: &[Constraint], v: &[f64], mu: &[f64]) -> Result<Residuals> {
    let f = op.residual(v)?;
    let mut r = Residuals::default();
    for (i, c) in cons.iter().enumerate() {
        match *c {
            Constraint::Upper(g) => {
                r.feasibility = r.feasibility.max(v[i] - g);
                r.sign = r.sign.max(-mu[i]);
                r.complementarity = r.complementarity.max((mu[i] * (g - v[i])).abs());
                r.stationarity = r.stationarity.max((f[i] + mu[i]).abs());
            }
            Constraint::Free => r.stationarity = r.stationarity.max((f[i] + mu[i]).abs()),
            Constraint::Fixed(_) => {}
        }
    }
    Ok(r)
}

/// Which algorithm produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ActiveSet,
    ProjectedNewton,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSolution {
    pub state: Vec<f64>,
    /// `μ = −F(v)` on active and fixed nodes, zero elsewhere.
    pub multiplier: Vec<f64>,
    /// Nodes held at their bound in the final linear system.
    pub active: Vec<bool>,
    pub residuals: Residuals,
    pub iterations: usize,
    pub method: Method,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial active set (upper-bounded nodes only).
    pub warm_active: Option<Vec<bool>>,
    /// Starting point for Newton iterations.
    pub initial: Option<Vec<f64>>,
}

impl SolverOptions {
    pub fn new(tol: f64) -> Self {
        SolverOptions { tol, max_iters: 200, warm_active: None, initial: None }
    }
}

fn check_cons(op: &dyn Operator, cons: &[Constraint]) -> Result<()> {
    if cons.len() != op.dim() {
        return Err(Error::SizeMismatch { expected: op.dim(), got: cons.len() });
    }
    for (i, c) in cons.iter().enumerate() {
        match *c {
            Constraint::Upper(g) if g.is_nan() || g == f64::NEG_INFINITY => {
                return Err(Error::InvalidArgument(format!("bound at node {i} is not usable")))
            }
            Constraint::Fixed(g) if !g.is_finite() => return Err(Error::NonFinite(format!("fixed value at node {i}"))),
            _ => {}
        }
    }
    Ok(())
}

/// Minimises the energy with the prescribed values `eq` (None = free) by
/// damped Newton, starting from `v`.
pub fn solve_equality(op: &dyn Operator, eq: &[Option<f64>], v: &mut [f64]) -> Result<()> {
    for (vi, e) in v.iter_mut().zip(eq) {
        if let Some(g) = e {
            *vi = *g;
        }
    }
    let free: Vec<usize> = (0..eq.len()).filter(|&i| eq[i].is_none()).collect();
    if free.is_empty() {
        return Ok(());
    }
    let restrict = |x: &[f64]| -> Vec<f64> { free.iter().map(|&i| x[i]).collect() };

    if op.is_quadratic() {
        let jac = op.jacobian(v)?.principal_submatrix(&free);
        let chol = Cholesky::factor(&jac)?;
        // One solve plus one step of iterative refinement.
        for _ in 0..2 {
            let rhs: Vec<f64> = restrict(&op.residual(v)?).iter().map(|r| -r).collect();
            let d = chol.solve(&rhs);
            for (k, &i) in free.iter().enumerate() {
                v[i] += d[k];
            }
        }
        return Ok(());
    }

    let max_newton = 100;
    for it in 0..max_newton {
        let f = op.residual(v)?;
        let f_free = restrict(&f);
        let fnorm = norm_inf(&f_free);
        if fnorm == 0.0 {
            return Ok(());
        }
        let jac = op.jacobian(v)?.principal_submatrix(&free);
        let d = Cholesky::factor(&jac)?.solve(&f_free.iter().map(|r| -r).collect::<Vec<_>>());
        // At round-off level the energy test can reject every step.
        if norm_inf(&d) <= 1e-13 * (1.0 + norm_inf(v)) {
            for (k, &i) in free.iter().enumerate() {
                v[i] += d[k];
            }
            return Ok(());
        }
        let slope = dot(&f_free, &d);
        let e0 = op.energy(v)?;
        let mut alpha = 1.0;
        let mut trial = v.to_vec();
        let mut accepted = false;
        for _ in 0..50 {
            for (k, &i) in free.iter().enumerate() {
                trial[i] = v[i] + alpha * d[k];
            }
            let e1 = op.energy(&trial)?;
            let ok_energy = e1 <= e0 + 1e-4 * alpha * slope;
            let ok_res = !ok_energy && norm_inf(&restrict(&op.residual(&trial)?)) < (1.0 - 1e-4 * alpha) * fnorm;
            if e1.is_finite() && (ok_energy || ok_res) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearch { iteration: it });
        }
        v.copy_from_slice(&trial);
    }
    let res = norm_inf(&restrict(&op.residual(v)?));
    Err(Error::NoConvergence { iterations: max_newton, residual: res })
}

fn multipliers(op: &dyn Operator, cons: &[Constraint], active: &[bool], v: &[f64]) -> Result<Vec<f64>> {
    let f = op.residual(v)?;
    Ok((0..cons.len())
        .map(|i| match cons[i] {
            Constraint::Fixed(_) => -f[i],
            Constraint::Upper(_) if active[i] => -f[i],
            _ => 0.0,
        })
        .collect())
}

fn equality_pattern(cons: &[Constraint], active: &[bool]) -> Vec<Option<f64>> {
    cons.iter()
        .zip(active)
        .map(|(c, &a)| match *c {
            Constraint::Fixed(g) => Some(g),
            Constraint::Upper(g) if a => Some(g),
            _ => None,
        })
        .collect()
}

/// Primal-dual active set iteration. Returns `Ok(None)` when the active sets
/// cycle.
fn active_set_loop(
    op: &dyn Operator,
    cons: &[Constraint],
    mut active: Vec<bool>,
    mut v: Vec<f64>,
    opts: &SolverOptions,
) -> Result<Option<BoxSolution>> {
    let delta = 1e-3 * opts.tol;
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    for it in 1..=opts.max_iters {
        seen.insert(active.clone());
        solve_equality(op, &equality_pattern(cons, &active), &mut v)?;
        let mu = multipliers(op, cons, &active, &v)?;
        let next: Vec<bool> = cons
            .iter()
            .enumerate()
            .map(|(i, c)| match *c {
                Constraint::Upper(g) => {
                    if active[i] {
                        mu[i] > -delta
                    } else {
                        v[i] > g + delta
                    }
                }
                _ => false,
            })
            .collect();
        if next == active {
            let residuals = kkt_residuals(op, cons, &v, &mu)?;
            return Ok(Some(BoxSolution {
                state: v,
                multiplier: mu,
                active,
                residuals,
                iterations: it,
                method: Method::ActiveSet,
            }));
        }
        if seen.contains(&next) {
            return Ok(None);
        }
        active = next;
    }
    Err(Error::NoConvergence { iterations: opts.max_iters, residual: f64::NAN })
}

fn project(cons: &[Constraint], v: &mut [f64]) {
    for (vi, c) in v.iter_mut().zip(cons) {
        match *c {
            Constraint::Upper(g) => *vi = vi.min(g),
            Constraint::Fixed(g) => *vi = g,
            Constraint::Free => {}
        }
    }
}

/// Bertsekas' projected Newton method for the bound constrained problem.
fn projected_newton(op: &dyn Operator, cons: &[Constraint], mut v: Vec<f64>, opts: &SolverOptions) -> Result<Vec<f64>> {
    project(cons, &mut v);
    let n = cons.len();
    for it in 0..opts.max_iters.max(500) {
        let g = op.residual(&v)?;
        // Distance to the projected gradient step measures stationarity.
        let mut pg = 0.0_f64;
        for i in 0..n {
            let r = match cons[i] {
                Constraint::Upper(b) => v[i] - (v[i] - g[i]).min(b),
                Constraint::Free => g[i],
                Constraint::Fixed(_) => 0.0,
            };
            pg = pg.max(r.abs());
        }
        if pg <= 1e-3 * opts.tol {
            return Ok(v);
        }
        let eps = pg.min(1e-6);
        let binding: Vec<bool> = (0..n)
            .map(|i| match cons[i] {
                Constraint::Upper(b) => v[i] >= b - eps && g[i] < 0.0,
                Constraint::Fixed(_) => true,
                Constraint::Free => false,
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !binding[i]).collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if binding[i] && !matches!(cons[i], Constraint::Fixed(_)) {
                d[i] = -g[i];
            }
        }
        if !free.is_empty() {
            let jac = op.jacobian(&v)?.principal_submatrix(&free);
            let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
            let df = Cholesky::factor(&jac)?.solve(&rhs);
            for (k, &i) in free.iter().enumerate() {
                d[i] = df[k];
            }
        }
        let e0 = op.energy(&v)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            project(cons, &mut trial);
            let decrease: f64 =
                (0..n).map(|i| if binding[i] { g[i] * (v[i] - trial[i]) } else { -alpha * g[i] * d[i] }).sum();
            let e1 = op.energy(&trial)?;
            if e1 <= e0 - 1e-4 * decrease || (e1 <= e0 && decrease.abs() < 1e-300) {
                v = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearch { iteration: it });
        }
    }
    let g = op.residual(&v)?;
    Err(Error::NoConvergence { iterations: opts.max_iters.max(500), residual: norm_inf(&g) })
}

/// Solves the box-constrained problem: active set iteration first; on
/// cycling, projected Newton followed by an active set polish.
pub fn solve_box(op: &dyn Operator, cons: &[Constraint], opts: &SolverOptions) -> Result<BoxSolution> {
    check_cons(op, cons)?;
    let n = cons.len();
    let mut v = opts.initial.clone().unwrap_or_else(|| vec![0.0; n]);
    if v.len() != n {
        return Err(Error::SizeMismatch { expected: n, got: v.len() });
    }
    project(cons, &mut v);
    let active = match &opts.warm_active {
        Some(a) if a.len() == n => a.iter().zip(cons).map(|(&a, c)| a && matches!(c, Constraint::Upper(_))).collect(),
        _ => vec![false; n],
    };
    if let Some(sol) = active_set_loop(op, cons, active, v.clone(), opts)? {
        if sol.residuals.within(opts.tol) {
            return Ok(sol);
        }
    }
    let pn = projected_newton(op, cons, v, opts)?;
    let active: Vec<bool> = cons
        .iter()
        .enumerate()
        .map(|(i, c)| matches!(*c, Constraint::Upper(g) if pn[i] >= g - 1e-3 * opts.tol))
        .collect();
    if let Some(mut sol) = active_set_loop(op, cons, active.clone(), pn.clone(), opts)? {
        if sol.residuals.within(opts.tol) {
            sol.method = Method::ProjectedNewton;
            return Ok(sol);
        }
    }
    let g = op.residual(&pn)?;
    let mu: Vec<f64> = (0..n)
        .map(|i| match cons[i] {
            Constraint::Upper(_) if active[i] => (-g[i]).max(0.0),
            Constraint::Fixed(_) => -g[i],
            _ => 0.0,
        })
        .collect();
    let residuals = kkt_residuals(op, cons, &pn, &mu)?;
    if residuals.within(opts.tol) {
        return Ok(BoxSolution {
            state: pn,
            multiplier: mu,
            active,
            residuals,
            iterations: opts.max_iters,
            method: Method::ProjectedNewton,
        });
    }
    Err(Error::NoConvergence { iterations: opts.max_iters, residual: residuals.max() })
}

/// Largest number of bounded nodes accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX: usize = 14;

/// Enumerates all active sets of the bounded nodes and returns the first one
/// (in binary order) that is KKT consistent.
pub fn brute_force(op: &dyn Operator, cons: &[Constraint]) -> Result<BoxSolution> {
    check_cons(op, cons)?;
    let upper: Vec<usize> = (0..cons.len()).filter(|&i| matches!(cons[i], Constraint::Upper(_))).collect();
    let m = upper.len();
    if m > BRUTE_FORCE_MAX {
        return Err(Error::InvalidArgument(format!(
            "{m} bounded nodes exceed the enumeration limit of {BRUTE_FORCE_MAX}"
        )));
    }
    let tol = 1e-10;
    for mask in 0u32..(1u32 << m) {
        let mut active = vec![false; cons.len()];
        for (k, &i) in upper.iter().enumerate() {
            active[i] = mask & (1 << k) != 0;
        }
        let mut v = vec![0.0; cons.len()];
        if solve_equality(op, &equality_pattern(cons, &active), &mut v).is_err() {
            continue;
        }
        let mu = multipliers(op, cons, &active, &v)?;
        let ok = upper.iter().all(|&i| {
            let Constraint::Upper(g) = cons[i] else { unreachable!() };
            if active[i] {
                mu[i] >= -tol
            } else {
                v[i] <= g + tol
            }
        });
        if ok {
            let residuals = kkt_residuals(op, cons, &v, &mu)?;
            return Ok(BoxSolution {
                state: v,
                multiplier: mu,
                active,
                residuals,
                iterations: mask as usize + 1,
                method: Method::Enumeration,
            });
        }
    }
    Err(Error::NoKktCandidate { candidates: 1 << m })
}

/// Obstacle of a scalar problem.
#[derive(Debug, Clone)]
pub enum Obstacle {
    /// No constraint (`ψ ≡ +∞`).
    None,
    /// Static obstacle defined on the hold-all box; transported as `ψ∘Φ_t`.
    Function(ScalarRef),
    /// Nodal values on the reference mesh; `+∞` entries are unconstrained.
    Nodal(Vec<f64>),
}

/// Semilinear obstacle problem: minimise
/// `½∫|∇u|² + λ/2 ∫u² + ∫W(x, u)` subject to `u ≤ ψ`, with natural boundary
/// conditions.
#[derive(Debug, Clone)]
pub struct ObstacleProblem {
    pub mesh: Mesh,
    pub lambda: f64,
    pub density: DensityRef,
    pub obstacle: Obstacle,
    pub quadrature: Quadrature,
    pub mass: MassKind,
    pub max_iters: usize,
}

impl ObstacleProblem {
    pub fn new(mesh: Mesh, lambda: f64, density: DensityRef, obstacle: Obstacle) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if let Obstacle::Nodal(v) = &obstacle {
            if v.len() != mesh.n_vertices() {
                return Err(Error::SizeMismatch { expected: mesh.n_vertices(), got: v.len() });
            }
            if v.iter().any(|x| x.is_nan() || *x == f64::NEG_INFINITY) {
                return Err(Error::NonFinite("obstacle".into()));
            }
        }
        Ok(ObstacleProblem {
            mesh,
            lambda,
            density,
            obstacle,
            quadrature: Quadrature::Lumped,
            mass: MassKind::Consistent,
            max_iters: 200,
        })
    }

    /// Nodal obstacle `ψ_X^t = ψ∘Φ_t` (`+∞` where unconstrained).
    pub fn obstacle_values(&self, tr: &Transport) -> Result<Vec<f64>> {
        match &self.obstacle {
            Obstacle::None => Ok(vec![f64::INFINITY; self.mesh.n_vertices()]),
            Obstacle::Function(f) => Ok(tr.vertex.iter().map(|c| f.value(c.image)).collect()),
            Obstacle::Nodal(v) => {
                if tr.t != 0.0 {
                    return Err(Error::InvalidArgument("a nodal obstacle cannot be transported".into()));
                }
                Ok(v.clone())
            }
        }
    }

    /// Operator `u ↦ K_t u + S_t(u)` of the pulled-back problem.
    pub fn operator<'a>(&'a self, tr: &'a Transport) -> Result<ScalarOperator<'a>> {
        Ok(ScalarOperator {
            mesh: &self.mesh,
            k: assemble_bilinear(&self.mesh, tr, self.lambda, self.mass)?,
            density: self.density.as_ref(),
            tr,
            quad: self.quadrature,
        })
    }
}

/// `u ↦ K u + S(u)` for a scalar problem on a mesh.
pub struct ScalarOperator<'a> {
    pub mesh: &'a Mesh,
    pub k: SparseMatrix,
    pub density: &'a dyn crate::fem::Density,
    pub tr: &'a Transport,
    pub quad: Quadrature,
}

impl Operator for ScalarOperator<'_> {
    fn dim(&self) -> usize {
        self.mesh.n_vertices()
    }
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let zero = vec![0.0; v.len()];
        let (s, _) = assemble_semilinear(self.mesh, self.density, self.tr, v, &zero, self.quad)?;
        Ok(self.k.mul_vec(v).iter().zip(&s).map(|(a, b)| a + b).collect())
    }
    fn jacobian(&self, v: &[f64]) -> Result<SparseMatrix> {
        for (i, c) in self.tr.vertex.iter().enumerate() {
            let slope = self.density.dw(c.image, v[i]);
            if slope < -1e-12 {
                return Err(Error::NonMonotoneDensity { u: v[i], slope });
            }
        }
        let zero = vec![0.0; v.len()];
        let (_, ds) = assemble_semilinear(self.mesh, self.density, self.tr, v, &zero, self.quad)?;
        Ok(self.k.add_scaled(1.0, &ds))
    }
    fn energy(&self, v: &[f64]) -> Result<f64> {
        Ok(0.5 * self.k.form(v, v) + semilinear_energy(self.mesh, self.density, self.tr, v, self.quad))
    }
}

/// Solution of a (possibly transported) scalar obstacle problem.
#[derive(Debug, Clone, PartialEq)]
pub struct VISolution {
    /// Flow parameter of the transported problem.
    pub t: f64,
    /// `u` (for `t > 0`, the transported `uᵗ = u_t∘Φ_t`).
    pub state: Vec<f64>,
    /// Nodal obstacle `ψ_X^t`; `+∞` on unconstrained nodes.
    pub obstacle: Vec<f64>,
    /// Nodal multiplier `μ ≥ 0`.
    pub multiplier: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
    pub method: Method,
}

impl VISolution {
    /// `y = u − ψ` (equal to `u` on unconstrained nodes).
    pub fn y(&self) -> Vec<f64> {
        self.state.iter().zip(&self.obstacle).map(|(u, p)| if p.is_finite() { u - p } else { *u }).collect()
    }

    /// `{i : ψ_i − u_i ≤ tol}`.
    pub fn active_set(&self, tol: f64) -> Vec<bool> {
        self.state.iter().zip(&self.obstacle).map(|(u, p)| p - u <= tol).collect()
    }

    /// Default strong-activity threshold `1e-8 (1 + ‖μ‖_∞)`.
    pub fn default_tol_act(&self) -> f64 {
        1e-8 * (1.0 + norm_inf(&self.multiplier))
    }

    fn from_box(t: f64, obstacle: Vec<f64>, b: BoxSolution) -> Self {
        VISolution {
            t,
            state: b.state,
            obstacle,
            multiplier: b.multiplier,
            residuals: b.residuals,
            iterations: b.iterations,
            method: b.method,
        }
    }
}

/// States sampled when checking `∂_u w ≥ 0`.
pub const DENSITY_SAMPLES: [f64; 2] = [-10.0, 10.0];

/// Samples `∂_u w` on the transported vertices and 41 states spanning
/// [`DENSITY_SAMPLES`].
pub fn check_density(density: &dyn crate::fem::Density, tr: &Transport) -> Result<()> {
    let [lo, hi] = DENSITY_SAMPLES;
    let states: Vec<f64> = (0..=40).map(|k| lo + (hi - lo) * k as f64 / 40.0).collect();
    let (slope, u) = crate::fem::min_density_slope(density, &tr.vertex_images(), &states);
    if slope < -1e-12 {
        return Err(Error::NonMonotoneDensity { u, slope });
    }
    Ok(())
}

fn constraints(obstacle: &[f64]) -> Vec<Constraint> {
    obstacle.iter().map(|&p| if p.is_finite() { Constraint::Upper(p) } else { Constraint::Free }).collect()
}

/// Solves the problem on the reference domain.
pub fn solve_obstacle_semilinear(problem: &ObstacleProblem, tol: f64) -> Result<VISolution> {
    solve_transported(problem, &ZeroField, 0.0, tol)
}

/// Solves the problem on `Φ_t(Ω)` pulled back to `Ω`.
pub fn solve_transported(problem: &ObstacleProblem, x: &dyn VectorField, t: f64, tol: f64) -> Result<VISolution> {
    solve_transported_with(problem, x, t, tol, None)
}

/// As [`solve_transported`], with an optional initial active set.
pub fn solve_transported_with(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    t: f64,
    tol: f64,
    warm_active: Option<Vec<bool>>,
) -> Result<VISolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let tr = Transport::new(&problem.mesh, x, t)?;
    check_density(problem.density.as_ref(), &tr)?;
    let psi = problem.obstacle_values(&tr)?;
    let op = problem.operator(&tr)?;
    let cons = constraints(&psi);
    let mut opts = SolverOptions::new(tol);
    opts.max_iters = problem.max_iters;
    opts.warm_active = warm_active;
    let sol = solve_box(&op, &cons, &opts)?;
    Ok(VISolution::from_box(t, psi, sol))
}

/// Enumeration oracle for the reference problem.
pub fn brute_force_vi(problem: &ObstacleProblem) -> Result<VISolution> {
    let tr = Transport::identity(&problem.mesh);
    check_density(problem.density.as_ref(), &tr)?;
    let psi = problem.obstacle_values(&tr)?;
    let op = problem.operator(&tr)?;
    let sol = brute_force(&op, &constraints(&psi))?;
    Ok(VISolution::from_box(0.0, psi, sol))
}

/// Regularisation of the gradient norm in the p-Laplace energy.
pub const P_LAPLACE_EPS: f64 = 1e-8;

/// Discrete p-Laplace energy `(1/p)∫ξ(|B∇u|² + ε²)^{p/2} − ∫ξ f∘Φ_t u`,
/// `B = (∂Φ_t)⁻ᵀ`, with zero Dirichlet data on the boundary.
pub struct PLaplace<'a> {
    mesh: &'a Mesh,
    p: f64,
    tr: Transport,
    load: Vec<f64>,
}

impl<'a> PLaplace<'a> {
    pub fn new(mesh: &'a Mesh, p: f64, f: &dyn ScalarField, x: &dyn VectorField, t: f64) -> Result<Self> {
        if !(p > 1.0 && p <= 8.0) {
            return Err(Error::InvalidArgument(format!("p must lie in (1, 8], got {p}")));
        }
        let tr = Transport::new(mesh, x, t)?;
        let load = crate::fem::assemble_load(mesh, &|q| f.value(q), &tr);
        Ok(PLaplace { mesh, p, tr, load })
    }

    /// Per element and midpoint: weight `|T|/3 ξ` and `M = B ᵀB` with `B = F⁻ᵀ`.
    fn quad_points(&self) -> impl Iterator<Item = (crate::mesh::Element, [(f64, Mat2); 3])> + '_ {
        self.mesh.elements().enumerate().map(move |(k, el)| {
            let te = self.mesh.triangle_edges()[k];
            let q = te.map(|ed| {
                let c = &self.tr.edge[ed];
                let b = crate::linalg::transpose2(&c.jac_inv);
                (el.area / 3.0 * c.xi, crate::linalg::mul2(&crate::linalg::transpose2(&b), &b))
            });
            (el, q)
        })
    }
}

impl Operator for PLaplace<'_> {
    fn dim(&self) -> usize {
        self.mesh.n_vertices()
    }
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut r: Vec<f64> = self.load.iter().map(|l| -l).collect();
        let eps2 = P_LAPLACE_EPS * P_LAPLACE_EPS;
        for (el, qs) in self.quad_points() {
            let g = el.gradient(v);
            for (w, m) in qs {
                let mg = crate::linalg::matvec2(&m, &g);
                let s = g[0] * mg[0] + g[1] * mg[1] + eps2;
                let coef = w * s.powf(0.5 * (self.p - 2.0));
                for a in 0..3 {
                    r[el.nodes[a]] += coef * (mg[0] * el.grads[a][0] + mg[1] * el.grads[a][1]);
                }
            }
        }
        Ok(r)
    }
    fn jacobian(&self, v: &[f64]) -> Result<SparseMatrix> {
        let eps2 = P_LAPLACE_EPS * P_LAPLACE_EPS;
        let mut trip = Vec::with_capacity(9 * self.mesh.n_triangles());
        for (el, qs) in self.quad_points() {
            let g = el.gradient(v);
            let mut ke = [[0.0; 3]; 3];
            for (w, m) in qs {
                let mg = crate::linalg::matvec2(&m, &g);
                let s = g[0] * mg[0] + g[1] * mg[1] + eps2;
                let c1 = w * s.powf(0.5 * (self.p - 2.0));
                let c2 = w * (self.p - 2.0) * s.powf(0.5 * (self.p - 4.0));
                for a in 0..3 {
                    let ma = crate::linalg::matvec2(&m, &el.grads[a]);
                    let pa = mg[0] * el.grads[a][0] + mg[1] * el.grads[a][1];
                    for b in 0..3 {
                        let pb = mg[0] * el.grads[b][0] + mg[1] * el.grads[b][1];
                        ke[a][b] += c1 * (ma[0] * el.grads[b][0] + ma[1] * el.grads[b][1]) + c2 * pa * pb;
                    }
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    trip.push((el.nodes[a], el.nodes[b], ke[a][b]));
                }
            }
        }
        Ok(SparseMatrix::from_triplets(self.mesh.n_vertices(), trip))
    }
    fn energy(&self, v: &[f64]) -> Result<f64> {
        let eps2 = P_LAPLACE_EPS * P_LAPLACE_EPS;
        let mut e = -dot(&self.load, v);
        for (el, qs) in self.quad_points() {
            let g = el.gradient(v);
            for (w, m) in qs {
                let mg = crate::linalg::matvec2(&m, &g);
                let s = g[0] * mg[0] + g[1] * mg[1] + eps2;
                e += w * s.powf(0.5 * self.p) / self.p;
            }
        }
        Ok(e)
    }
}

/// Minimiser of the transported p-Laplace energy with zero boundary values,
/// by damped Newton started from the `p = 2` solution.
pub fn solve_p_laplace(
    mesh: &Mesh,
    p: f64,
    f: &dyn ScalarField,
    x: &dyn VectorField,
    t: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let op = PLaplace::new(mesh, p, f, x, t)?;
    let eq: Vec<Option<f64>> =
        (0..mesh.n_vertices()).map(|i| if mesh.is_boundary(i) { Some(0.0) } else { None }).collect();
    let mut v = vec![0.0; mesh.n_vertices()];
    let lin = PLaplace::new(mesh, 2.0, f, x, t)?;
    solve_equality(&Quadratic { h: lin.jacobian(&v)?, b: lin.load.clone() }, &eq, &mut v)?;
    if p == 2.0 {
        return Ok(v);
    }
    damped_newton(&op, &eq, &mut v, tol)?;
    Ok(v)
}

/// Damped Newton with monotone energy decrease; stops when the step falls
/// below `tol (1 + ‖v‖_∞)`.
fn damped_newton(op: &dyn Operator, eq: &[Option<f64>], v: &mut [f64], tol: f64) -> Result<()> {
    let free: Vec<usize> = (0..eq.len()).filter(|&i| eq[i].is_none()).collect();
    let max_iters = 200;
    for it in 0..max_iters {
        let f = op.residual(v)?;
        let ff: Vec<f64> = free.iter().map(|&i| f[i]).collect();
        let jac = op.jacobian(v)?.principal_submatrix(&free);
        let d = Cholesky::factor(&jac)?.solve(&ff.iter().map(|r| -r).collect::<Vec<_>>());
        let slope = dot(&ff, &d);
        let e0 = op.energy(v)?;
        let mut alpha = 1.0;
        let mut trial = v.to_vec();
        let mut accepted = false;
        for _ in 0..60 {
            for (k, &i) in free.iter().enumerate() {
                trial[i] = v[i] + alpha * d[k];
            }
            let e1 = op.energy(&trial)?;
            if e1 <= e0 + 1e-4 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        let step = alpha * norm_inf(&d);
        if !accepted {
            // Energy decrease below rounding: converged if the step is tiny.
            if norm_inf(&d) <= 1e3 * tol * (1.0 + norm_inf(v)) {
                return Ok(());
            }
            return Err(Error::LineSearch { iteration: it });
        }
        v.copy_from_slice(&trial);
        if step <= tol * (1.0 + norm_inf(v)) {
            return Ok(());
        }
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: f64::NAN })
}

/// Reference-to-problem helper: nodal values of a scalar field.
pub fn nodal(mesh: &Mesh, f: &dyn ScalarField) -> Vec<f64> {
    mesh.vertices().iter().map(|&p| f.value(p)).collect()
}

/// Shared handle to a scalar field.
pub fn scalar(f: impl ScalarField + 'static) -> ScalarRef {
    Arc::new(f)
}
