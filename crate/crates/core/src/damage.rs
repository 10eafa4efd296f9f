//! Time-discrete damage model: per step, the damage variable solves a convex
//! obstacle problem whose obstacle is the previous damage (so damage never
//! heals), then the displacement solves linear elastodynamics with the
//! degraded stiffness. Also provides the sensitivity chain along a velocity
//! field, a tracking cost, its Eulerian semi-derivative and a catalog based
//! shape descent.
//!
//! Both variables are P1. The damage equation uses the lumped mass for the
//! time derivative and the potentials; elasticity uses vertex quadrature, so
//! `½ uᵀA(χ)u = Σ_i ½ m_i ξ_i c(χ_i) ē_i(u)` holds exactly with the nodal
//! strain energy `ē`.

use crate::cones::{solve_cone_vi, tangent_kern_cone, DiscreteCone};
use crate::error::{Error, Result};
use crate::fem::{
    apply_dirichlet, assemble_bilinear, assemble_bilinear_derivative, assemble_elasticity, assemble_vector_load,
    assemble_vector_load_derivative, element_gradient, ramp, ElasticityTensor, FirstOrder, MassKind, Transport,
};
use crate::flow::{integrate_flow, BumpField, BumpKind, Field, Mirrored, VectorField, ZeroField};
use crate::functions::{ScalarRef, SpaceTimeRef, SpaceTimeScalarRef};
use crate::io::{csv, fmt_f64};
use crate::linalg::{ddot2, dot, matvec2, mul2, sym2, transpose2, SparseMatrix, Vec2};
use crate::mesh::Mesh;
use crate::parallel::map_indexed;
use crate::vi::{solve_box, Constraint, Method, Operator, Residuals, SolverOptions, VISolution};

/// Tolerance of the maximum principle check.
pub const MAX_PRINCIPLE_TOL: f64 = 1e-10;
/// Lower bound on the relative slack of the energy-dissipation inequality.
pub const DISSIPATION_TOL: f64 = 1e-8;

/// Damage potential `g = g₁ + g₂` with `g₁ = β ramp_δ` convex and `g₂ ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DamagePotential {
    pub beta: f64,
    pub delta: f64,
}

impl DamagePotential {
    pub fn g1(&self, x: f64) -> [f64; 3] {
        ramp(self.delta, x).map(|v| self.beta * v)
    }

    pub fn g2(&self, _x: f64) -> [f64; 3] {
        [0.0; 3]
    }

    pub fn g(&self, x: f64) -> f64 {
        self.g1(x)[0] + self.g2(x)[0]
    }
}

/// Data of the damage model. Loads and Dirichlet data are functions of
/// position and time `kτ`; the initial fields are evaluated at time zero.
/// Dirichlet data are imposed on every boundary node.
#[derive(Debug, Clone)]
pub struct DamageSpec {
    pub mesh: Mesh,
    pub tau: f64,
    pub steps: usize,
    pub tensor: ElasticityTensor,
    pub potential: DamagePotential,
    pub load: SpaceTimeRef,
    pub dirichlet: SpaceTimeRef,
    pub u0: SpaceTimeRef,
    pub v0: SpaceTimeRef,
    pub chi0: ScalarRef,
    /// Tolerance of the per-step obstacle problems.
    pub tol: f64,
}

impl DamageSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive (got {})", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        let p = &self.potential;
        if !(p.beta >= 0.0 && p.beta.is_finite()) || !(p.delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "damage potential needs beta >= 0 and delta > 0 (got {}, {})",
                p.beta, p.delta
            )));
        }
        self.tensor.check_samples()?;
        for (i, &q) in self.mesh.vertices().iter().enumerate() {
            let c = self.chi0.value(q);
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidArgument(format!("initial damage {c} at vertex {i} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn with_mesh(&self, mesh: Mesh) -> Self {
        DamageSpec { mesh, ..self.clone() }
    }
}

/// Per-step record. For `k = 0` the multiplier is zero and the work and
/// dissipation entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageState {
    /// Displacement, interleaved components.
    pub u: Vec<f64>,
    pub chi: Vec<f64>,
    pub multiplier: Vec<f64>,
    /// Nodes where `χ^k = χ^{k−1}`.
    pub active: Vec<bool>,
    pub residuals: Residuals,
    pub iterations: usize,
    /// `E^k`: kinetic, elastic, gradient and potential energy.
    pub energy: f64,
    /// Work of loads and boundary data over the step.
    pub work: f64,
    /// `τ ‖(χ^k − χ^{k−1})/τ‖²`.
    pub dissipation: f64,
    /// `E^{k−1} + W^k − E^k − D^k`.
    pub slack: f64,
}

impl DamageState {
    fn relative_slack(&self, prev_energy: f64) -> f64 {
        self.slack / (1.0 + prev_energy.abs() + self.work.abs())
    }
}

/// Discrete trajectory on `Φ_t(Ω)`, pulled back to the reference mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageTrajectory {
    pub t: f64,
    pub tau: f64,
    /// `u^{−1} = u⁰ + τ v⁰`.
    pub u_prev: Vec<f64>,
    /// `states[k]` for `k = 0..=N`.
    pub states: Vec<DamageState>,
    /// Lumped mass times `ξ(t)` per vertex.
    pub weights: Vec<f64>,
    /// Vertex images under `Φ_t`.
    pub images: Vec<Vec2>,
}

impl DamageTrajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Largest violation of `0 ≤ χ^k ≤ χ^{k−1} ≤ 1` over all steps.
    pub fn max_principle_violation(&self) -> f64 {
        let mut v: f64 = 0.0;
        for c in &self.states[0].chi {
            v = v.max(-c).max(c - 1.0);
        }
        for w in self.states.windows(2) {
            for (a, b) in w[0].chi.iter().zip(&w[1].chi) {
                v = v.max(-b).max(b - a).max(a - 1.0);
            }
        }
        v
    }

    pub fn max_principle_ok(&self) -> bool {
        self.max_principle_violation() <= MAX_PRINCIPLE_TOL
    }

    /// Smallest `slack / (1 + |E^{k−1}| + |W^k|)`; `+∞` without steps.
    pub fn min_relative_slack(&self) -> f64 {
        self.states.windows(2).map(|w| w[1].relative_slack(w[0].energy)).fold(f64::INFINITY, f64::min)
    }

    pub fn dissipation_ok(&self) -> bool {
        self.min_relative_slack() >= -DISSIPATION_TOL
    }

    /// Per-step diagnostics.
    pub fn csv(&self) -> String {
        let header = [
            "k",
            "time",
            "chi_min",
            "chi_max",
            "active",
            "iterations",
            "energy",
            "work",
            "dissipation",
            "slack",
            "relative_slack",
        ];
        let rows = self.states.iter().enumerate().map(|(k, s)| {
            let rel = if k == 0 { 0.0 } else { s.relative_slack(self.states[k - 1].energy) };
            vec![
                k.to_string(),
                fmt_f64(k as f64 * self.tau),
                fmt_f64(s.chi.iter().copied().fold(f64::INFINITY, f64::min)),
                fmt_f64(s.chi.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                s.active.iter().filter(|&&a| a).count().to_string(),
                s.iterations.to_string(),
                fmt_f64(s.energy),
                fmt_f64(s.work),
                fmt_f64(s.dissipation),
                fmt_f64(s.slack),
                fmt_f64(rel),
            ]
        });
        csv(&header, rows)
    }

    /// Nodal fields of every step: `k,node,x,y,u_x,u_y,chi,multiplier`.
    pub fn fields_csv(&self, mesh: &Mesh) -> String {
        let header = ["k", "node", "x", "y", "u_x", "u_y", "chi", "multiplier"];
        let mut rows = Vec::new();
        for (k, s) in self.states.iter().enumerate() {
            for (i, p) in mesh.vertices().iter().enumerate() {
                rows.push(vec![
                    k.to_string(),
                    i.to_string(),
                    fmt_f64(p[0]),
                    fmt_f64(p[1]),
                    fmt_f64(s.u[2 * i]),
                    fmt_f64(s.u[2 * i + 1]),
                    fmt_f64(s.chi[i]),
                    fmt_f64(s.multiplier[i]),
                ]);
            }
        }
        csv(&header, rows)
    }
}

/// Nodal strain energy `ē_i = Σ_{T∋i} |T|/3 𝐂ε:ε / m_i`, with the strain
/// evaluated using the inverse flow jacobian of vertex `i`.
pub fn nodal_strain_energy(
    mesh: &Mesh,
    tensor: &ElasticityTensor,
    u: &[f64],
    tr: &Transport,
    mass: &[f64],
) -> Vec<f64> {
    let mut e = vec![0.0; mesh.n_vertices()];
    for el in mesh.elements() {
        let g = element_gradient(&el, u);
        for &n in &el.nodes {
            let eps = sym2(&mul2(&g, &tr.vertex[n].jac_inv));
            e[n] += el.area / 3.0 * tensor.energy_density(&eps);
        }
    }
    e.iter().zip(mass).map(|(a, m)| a / m).collect()
}

/// Derivative of [`nodal_strain_energy`] at `t = 0` when `u` moves with
/// velocity `udot`: `ε̇ = sym(∂u̇) − sym(∂u ∂X)`.
fn nodal_strain_energy_derivative(
    mesh: &Mesh,
    tensor: &ElasticityTensor,
    u: &[f64],
    udot: &[f64],
    fo: &FirstOrder,
    mass: &[f64],
) -> Vec<f64> {
    let mut e = vec![0.0; mesh.n_vertices()];
    for el in mesh.elements() {
        let g = element_gradient(&el, u);
        let gd = element_gradient(&el, udot);
        for &n in &el.nodes {
            let eps = sym2(&g);
            let epsdot = sym2(&gd);
            let corr = sym2(&mul2(&g, &fo.vertex[n].dx));
            let epsdot = [
                [epsdot[0][0] - corr[0][0], epsdot[0][1] - corr[0][1]],
                [epsdot[1][0] - corr[1][0], epsdot[1][1] - corr[1][1]],
            ];
            e[n] += el.area / 3.0 * 2.0 * ddot2(&tensor.stress(&eps), &epsdot);
        }
    }
    e.iter().zip(mass).map(|(a, m)| a / m).collect()
}

/// `(A′ u)` at `t = 0` for the elasticity matrix with damage `χ` moving
/// with velocity `χ̇`.
fn elasticity_derivative_apply(
    mesh: &Mesh,
    tensor: &ElasticityTensor,
    chi: &[f64],
    chidot: &[f64],
    fo: &FirstOrder,
    u: &[f64],
) -> Vec<f64> {
    let deg = &tensor.degradation;
    let mut r = vec![0.0; u.len()];
    for el in mesh.elements() {
        let g = element_gradient(&el, u);
        let sig = tensor.stress(&sym2(&g));
        for &n in &el.nodes {
            let w = el.area / 3.0;
            let c = deg.c(chi[n]);
            let dc = deg.c1(chi[n])[1] + deg.c2(chi[n])[1];
            let s = fo.vertex[n].xi_prime * c + dc * chidot[n];
            let dx = fo.vertex[n].dx;
            let sigdot = tensor.stress(&sym2(&mul2(&g, &dx)));
            let dxt = transpose2(&dx);
            for b in 0..3 {
                let gb = el.grads[b];
                let gbx = matvec2(&dxt, &gb);
                let nb = el.nodes[b];
                for k in 0..2 {
                    let a = sig[k][0] * gb[0] + sig[k][1] * gb[1];
                    let ad = -(sigdot[k][0] * gb[0] + sigdot[k][1] * gb[1]);
                    let ax = sig[k][0] * gbx[0] + sig[k][1] * gbx[1];
                    r[2 * nb + k] += w * (s * a + c * (ad - ax));
                }
            }
        }
    }
    r
}

/// Gradient of the per-step damage energy
/// `½ yᵀK y + Σ_i d_i [−χ^{k−1}_i y_i/τ + ½(c₁(y_i) + c₂′(χ^{k−1}_i) y_i) ē_i + g₁(y_i) + g₂′(χ^{k−1}_i) y_i]`
/// with `K = S + diag(d)/τ`.
struct DamageOperator<'a> {
    k: &'a SparseMatrix,
    weights: &'a [f64],
    prev: &'a [f64],
    ebar: &'a [f64],
    tau: f64,
    tensor: &'a ElasticityTensor,
    potential: &'a DamagePotential,
}

impl DamageOperator<'_> {
    /// `w_i(y)` and `∂_y w_i(y)`.
    fn density(&self, i: usize, y: f64) -> (f64, f64) {
        let deg = &self.tensor.degradation;
        let p = self.prev[i];
        let c1 = deg.c1(y);
        let g1 = self.potential.g1(y);
        let w = -p / self.tau + 0.5 * (c1[1] + deg.c2(p)[1]) * self.ebar[i] + g1[1] + self.potential.g2(p)[1];
        (w, 0.5 * c1[2] * self.ebar[i] + g1[2])
    }
}

impl Operator for DamageOperator<'_> {
    fn dim(&self) -> usize {
        self.prev.len()
    }
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut r = self.k.mul_vec(v);
        for (i, ri) in r.iter_mut().enumerate() {
            *ri += self.weights[i] * self.density(i, v[i]).0;
        }
        Ok(r)
    }
    fn jacobian(&self, v: &[f64]) -> Result<SparseMatrix> {
        let d: Vec<f64> = (0..v.len()).map(|i| self.weights[i] * self.density(i, v[i]).1).collect();
        let mut j = self.k.clone();
        j.add_diagonal(&d);
        Ok(j)
    }
    fn energy(&self, v: &[f64]) -> Result<f64> {
        let deg = &self.tensor.degradation;
        let mut e = 0.5 * self.k.form(v, v);
        for (i, &y) in v.iter().enumerate() {
            let p = self.prev[i];
            e += self.weights[i]
                * (-p * y / self.tau
                    + 0.5 * (deg.c1(y)[0] + deg.c2(p)[1] * y) * self.ebar[i]
                    + self.potential.g1(y)[0]
                    + self.potential.g2(p)[1] * y);
        }
        Ok(e)
    }
}

/// Operators of the transported model that do not change between steps.
struct Frame<'a> {
    spec: &'a DamageSpec,
    tr: Transport,
    images: Vec<Vec2>,
    /// `m_i`.
    mass: Vec<f64>,
    /// `m_i ξ_i`.
    weights: Vec<f64>,
    /// `S`, the pulled-back stiffness of the damage gradient term.
    stiff: SparseMatrix,
    /// `S + diag(weights)/τ`.
    k: SparseMatrix,
    /// Displacement mass, interleaved.
    mass_u: Vec<f64>,
}

impl<'a> Frame<'a> {
    fn new(spec: &'a DamageSpec, x: &dyn VectorField, t: f64) -> Result<Self> {
        let mesh = &spec.mesh;
        let tr = Transport::new(mesh, x, t)?;
        let mass = mesh.lumped_mass();
        let weights: Vec<f64> = mass.iter().zip(&tr.vertex).map(|(m, c)| m * c.xi).collect();
        let stiff = assemble_bilinear(mesh, &tr, 0.0, MassKind::Lumped)?;
        let k = assemble_bilinear(mesh, &tr, 1.0 / spec.tau, MassKind::Lumped)?;
        let mass_u = weights.iter().flat_map(|&w| [w, w]).collect();
        Ok(Frame { spec, images: tr.vertex_images(), tr, mass, weights, stiff, k, mass_u })
    }

    fn time(&self, k: usize) -> f64 {
        k as f64 * self.spec.tau
    }

    fn load(&self, k: usize) -> Vec<f64> {
        let s = self.time(k);
        let f = |p: Vec2| self.spec.load.value(p, s);
        assemble_vector_load(&self.spec.mesh, &f, &self.tr)
    }

    fn boundary_values(&self, k: usize) -> Vec<(usize, f64)> {
        let s = self.time(k);
        let mut out = Vec::new();
        for &i in self.spec.mesh.boundary_nodes() {
            let d = self.spec.dirichlet.value(self.images[i], s);
            out.push((2 * i, d[0]));
            out.push((2 * i + 1, d[1]));
        }
        out
    }

    fn initial(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let tau = self.spec.tau;
        let mut u0 = Vec::with_capacity(2 * self.images.len());
        let mut um = Vec::with_capacity(2 * self.images.len());
        for &p in &self.images {
            let a = self.spec.u0.value(p, 0.0);
            let v = self.spec.v0.value(p, 0.0);
            u0.extend_from_slice(&a);
            um.extend_from_slice(&[a[0] + tau * v[0], a[1] + tau * v[1]]);
        }
        let chi = self.images.iter().map(|&p| self.spec.chi0.value(p)).collect();
        (u0, um, chi)
    }

    fn strain_energy(&self, u: &[f64]) -> Vec<f64> {
        nodal_strain_energy(&self.spec.mesh, &self.spec.tensor, u, &self.tr, &self.mass)
    }

    fn elasticity(&self, chi: &[f64]) -> Result<SparseMatrix> {
        assemble_elasticity(&self.spec.mesh, &self.spec.tensor, chi, &self.tr)
    }

    fn operator<'b>(&'b self, prev: &'b [f64], ebar: &'b [f64]) -> DamageOperator<'b> {
        DamageOperator {
            k: &self.k,
            weights: &self.weights,
            prev,
            ebar,
            tau: self.spec.tau,
            tensor: &self.spec.tensor,
            potential: &self.spec.potential,
        }
    }

    /// `E = ½|v|²_M + ½uᵀA(χ)u + ½χᵀSχ + Σ d_i g(χ_i)` with
    /// `v = (u − u_prev)/τ`.
    fn energy(&self, u: &[f64], u_prev: &[f64], chi: &[f64], a: &SparseMatrix) -> f64 {
        let tau = self.spec.tau;
        let kinetic: f64 = (0..u.len()).map(|j| 0.5 * self.mass_u[j] * ((u[j] - u_prev[j]) / tau).powi(2)).sum();
        let pot: f64 = chi.iter().zip(&self.weights).map(|(&c, w)| w * self.spec.potential.g(c)).sum();
        kinetic + 0.5 * a.form(u, u) + 0.5 * self.stiff.form(chi, chi) + pot
    }

    /// Solves step `k` from `u^{k−1}`, `u^{k−2}`, `χ^{k−1}`.
    fn step(
        &self,
        k: usize,
        u1: &[f64],
        u2: &[f64],
        chi1: &[f64],
        warm: Option<Vec<bool>>,
    ) -> Result<(Vec<f64>, Vec<f64>, crate::vi::BoxSolution, SparseMatrix)> {
        let tau = self.spec.tau;
        let ebar = self.strain_energy(u1);
        let op = self.operator(chi1, &ebar);
        let cons: Vec<Constraint> = chi1.iter().map(|&p| Constraint::Upper(p)).collect();
        let mut opts = SolverOptions::new(self.spec.tol);
        opts.initial = Some(chi1.to_vec());
        opts.warm_active = warm;
        let sol = solve_box(&op, &cons, &opts)?;
        let chi = sol.state.clone();
        let a = self.elasticity(&chi)?;
        let mut m = a.clone();
        m.add_diagonal(&self.mass_u.iter().map(|w| w / (tau * tau)).collect::<Vec<_>>());
        let load = self.load(k);
        let rhs: Vec<f64> =
            (0..u1.len()).map(|j| load[j] + self.mass_u[j] * (2.0 * u1[j] - u2[j]) / (tau * tau)).collect();
        let u = apply_dirichlet(&m, &rhs, &self.boundary_values(k))?.solve()?;
        Ok((u, chi, sol, a))
    }
}

/// One step of the scheme on the reference domain: returns `χ^k`, `u^k`
/// and the damage multiplier.
pub fn damage_step(
    spec: &DamageSpec,
    k: usize,
    u1: &[f64],
    u2: &[f64],
    chi1: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let n = spec.mesh.n_vertices();
    for (len, want) in [(u1.len(), 2 * n), (u2.len(), 2 * n), (chi1.len(), n)] {
        if len != want {
            return Err(Error::SizeMismatch { expected: want, got: len });
        }
    }
    let frame = Frame::new(spec, &ZeroField, 0.0)?;
    let (u, chi, sol, _) = frame.step(k, u1, u2, chi1, None).map_err(|e| e.at_step(k))?;
    Ok((chi, u, sol.multiplier))
}

/// Runs the scheme on the reference domain.
pub fn run(spec: &DamageSpec) -> Result<DamageTrajectory> {
    run_transported(spec, &ZeroField, 0.0)
}

/// Runs the scheme on `Φ_t(Ω)`, pulled back to the reference mesh.
pub fn run_transported(spec: &DamageSpec, x: &dyn VectorField, t: f64) -> Result<DamageTrajectory> {
    spec.validate()?;
    let frame = Frame::new(spec, x, t)?;
    let tau = spec.tau;
    let (u0, u_prev, chi0) = frame.initial();
    for (i, c) in chi0.iter().enumerate() {
        if !(0.0..=1.0).contains(c) {
            return Err(Error::InvalidArgument(format!("initial damage {c} at vertex {i} is outside [0, 1]")));
        }
    }
    let a0 = frame.elasticity(&chi0)?;
    let n = chi0.len();
    let mut states = vec![DamageState {
        energy: frame.energy(&u0, &u_prev, &chi0, &a0),
        u: u0,
        chi: chi0,
        multiplier: vec![0.0; n],
        active: vec![false; n],
        residuals: Residuals::default(),
        iterations: 0,
        work: 0.0,
        dissipation: 0.0,
        slack: 0.0,
    }];
    let boundary: Vec<usize> = spec.mesh.boundary_nodes().iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    for k in 1..=spec.steps {
        let last = &states[k - 1];
        let u2 = if k == 1 { &u_prev } else { &states[k - 2].u };
        let warm = (k > 1).then(|| last.active.clone());
        let (u, chi, sol, a) = frame.step(k, &last.u, u2, &last.chi, warm).map_err(|e| e.at_step(k))?;
        let u1 = &last.u;
        let mut dd = vec![0.0; u.len()];
        for &j in &boundary {
            dd[j] = u[j] - u1[j];
        }
        let z: Vec<f64> = (0..u.len()).map(|j| u[j] - u1[j] - dd[j]).collect();
        let load = frame.load(k);
        let accel: f64 =
            (0..u.len()).map(|j| frame.mass_u[j] * ((u[j] - u1[j]) - (u1[j] - u2[j])) / (tau * tau) * dd[j]).sum();
        let work = dot(&load, &z) + accel + a.form(&u, &dd);
        let dissipation: f64 = (0..n).map(|i| frame.weights[i] * (chi[i] - last.chi[i]).powi(2) / tau).sum();
        let energy = frame.energy(&u, u1, &chi, &a);
        let slack = last.energy + work - energy - dissipation;
        let active = chi.iter().zip(&last.chi).map(|(c, p)| p - c <= spec.tol).collect();
        states.push(DamageState {
            u,
            chi,
            multiplier: sol.multiplier,
            active,
            residuals: sol.residuals,
            iterations: sol.iterations,
            energy,
            work,
            dissipation,
            slack,
        });
    }
    Ok(DamageTrajectory { t, tau, u_prev, states, weights: frame.weights, images: frame.images })
}

/// Material derivatives along `X` of a reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTrajectory {
    /// `u̇^{−1}`.
    pub udot_prev: Vec<f64>,
    /// `u̇^k` for `k = 0..=N`.
    pub udot: Vec<Vec<f64>>,
    /// `χ̇^k` for `k = 0..=N`.
    pub chidot: Vec<Vec<f64>>,
    /// Cone of step `k` at index `k − 1`.
    pub cones: Vec<DiscreteCone>,
    /// Complementarity residuals of the cone problems.
    pub residuals: Vec<Residuals>,
}

impl SensitivityTrajectory {
    /// Largest distance of `χ̇^k` from its cone.
    pub fn cone_violation(&self) -> f64 {
        self.cones.iter().zip(&self.chidot[1..]).map(|(c, v)| c.violation(v)).fold(0.0, f64::max)
    }
}

/// Sensitivity chain: per step, the cone problem for `χ̇^k` over
/// `T ∩ kern(μ^k) + χ̇^{k−1}`, then the linear problem for `u̇^k` with
/// boundary values `∂d·X`.
pub fn sensitivity_chain(
    spec: &DamageSpec,
    traj: &DamageTrajectory,
    x: &dyn VectorField,
) -> Result<SensitivityTrajectory> {
    if traj.t != 0.0 {
        return Err(Error::InvalidArgument("sensitivities need the reference trajectory (t = 0)".into()));
    }
    let mesh = &spec.mesh;
    let n = mesh.n_vertices();
    if traj.states[0].chi.len() != n {
        return Err(Error::SizeMismatch { expected: n, got: traj.states[0].chi.len() });
    }
    let frame = Frame::new(spec, &ZeroField, 0.0)?;
    let fo = FirstOrder::new(mesh, x);
    let tau = spec.tau;
    let tensor = &spec.tensor;
    let deg = &tensor.degradation;
    let pot = &spec.potential;
    let dweights: Vec<f64> = frame.mass.iter().zip(&fo.vertex).map(|(m, c)| m * c.xi_prime).collect();
    let dmass_u: Vec<f64> = dweights.iter().flat_map(|&w| [w, w]).collect();
    let kp = assemble_bilinear_derivative(mesh, &fo, 1.0 / tau, MassKind::Lumped);

    let mut udot0 = Vec::with_capacity(2 * n);
    let mut udot_prev = Vec::with_capacity(2 * n);
    let mut chidot0 = Vec::with_capacity(n);
    for (i, &p) in mesh.vertices().iter().enumerate() {
        let xv = fo.vertex[i].x;
        let a = matvec2(&spec.u0.jacobian(p, 0.0), &xv);
        let v = matvec2(&spec.v0.jacobian(p, 0.0), &xv);
        udot0.extend_from_slice(&a);
        udot_prev.extend_from_slice(&[a[0] + tau * v[0], a[1] + tau * v[1]]);
        let g = spec.chi0.gradient(p);
        chidot0.push(g[0] * xv[0] + g[1] * xv[1]);
    }
    let mut udot = vec![udot0];
    let mut chidot = vec![chidot0];
    let mut cones = Vec::with_capacity(traj.steps());
    let mut residuals = Vec::with_capacity(traj.steps());

    for k in 1..=traj.steps() {
        let step = || -> Result<(Vec<f64>, Vec<f64>, DiscreteCone, Residuals)> {
            let st = &traj.states[k];
            let prev = &traj.states[k - 1];
            let (u1, u2) = (&prev.u, if k == 1 { &traj.u_prev } else { &traj.states[k - 2].u });
            let (ud1, ud2) = (&udot[k - 1], if k == 1 { &udot_prev } else { &udot[k - 2] });
            let cd1 = &chidot[k - 1];

            let ebar = frame.strain_energy(u1);
            let edot = nodal_strain_energy_derivative(mesh, tensor, u1, ud1, &fo, &frame.mass);
            let op = frame.operator(&prev.chi, &ebar);
            let h = op.jacobian(&st.chi)?;
            let kchi = kp.mul_vec(&st.chi);
            let b: Vec<f64> = (0..n)
                .map(|i| {
                    let (y, p) = (st.chi[i], prev.chi[i]);
                    let w = op.density(i, y).0;
                    let wdot = -cd1[i] / tau
                        + 0.5 * deg.c2(p)[2] * cd1[i] * ebar[i]
                        + 0.5 * (deg.c1(y)[1] + deg.c2(p)[1]) * edot[i]
                        + pot.g2(p)[2] * cd1[i];
                    -(kchi[i] + dweights[i] * w + frame.weights[i] * wdot)
                })
                .collect();
            let sol = VISolution {
                t: 0.0,
                state: st.chi.clone(),
                obstacle: prev.chi.clone(),
                multiplier: st.multiplier.clone(),
                residuals: st.residuals,
                iterations: st.iterations,
                method: Method::ActiveSet,
            };
            let cone = tangent_kern_cone(&sol, cd1, sol.default_tol_act())?;
            let bs = solve_cone_vi(h, b, &cone, spec.tol, None)?;
            let cd = bs.state;

            let a = frame.elasticity(&st.chi)?;
            let mut m = a.clone();
            m.add_diagonal(&frame.mass_u.iter().map(|w| w / (tau * tau)).collect::<Vec<_>>());
            let s = k as f64 * tau;
            let lf = |p: Vec2| spec.load.value(p, s);
            let lj = |p: Vec2| spec.load.jacobian(p, s);
            let ldot = assemble_vector_load_derivative(mesh, &lf, &lj, &fo);
            let apu = elasticity_derivative_apply(mesh, tensor, &st.chi, &cd, &fo, &st.u);
            let rhs: Vec<f64> = (0..2 * n)
                .map(|j| {
                    let acc = (st.u[j] - 2.0 * u1[j] + u2[j]) / (tau * tau);
                    ldot[j] - dmass_u[j] * acc - apu[j] + frame.mass_u[j] * (2.0 * ud1[j] - ud2[j]) / (tau * tau)
                })
                .collect();
            let mut fixed = Vec::new();
            for &i in mesh.boundary_nodes() {
                let d = matvec2(&spec.dirichlet.jacobian(mesh.vertex(i), s), &fo.vertex[i].x);
                fixed.push((2 * i, d[0]));
                fixed.push((2 * i + 1, d[1]));
            }
            let ud = apply_dirichlet(&m, &rhs, &fixed)?.solve()?;
            Ok((ud, cd, cone, bs.residuals))
        };
        let (ud, cd, cone, res) = step().map_err(|e| e.at_step(k))?;
        udot.push(ud);
        chidot.push(cd);
        cones.push(cone);
        residuals.push(res);
    }
    Ok(SensitivityTrajectory { udot_prev, udot, chidot, cones, residuals })
}

/// Tracking cost `λ_u/2 Σ_k ‖u^k − u_r^k‖² + λ_χ/2 Σ_k ‖χ^k − χ_r^k‖²`,
/// `k = 1..=N`, with lumped quadrature.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub lambda_u: f64,
    pub lambda_chi: f64,
    pub u_ref: SpaceTimeRef,
    pub chi_ref: SpaceTimeScalarRef,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_chi >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost weights must be nonnegative (got {}, {})",
                self.lambda_u, self.lambda_chi
            )));
        }
        Ok(())
    }
}

/// Cost of a (possibly transported) trajectory.
pub fn cost(traj: &DamageTrajectory, spec: &CostSpec) -> f64 {
    let mut j = 0.0;
    for (k, st) in traj.states.iter().enumerate().skip(1) {
        let s = k as f64 * traj.tau;
        for (i, &p) in traj.images.iter().enumerate() {
            let ur = spec.u_ref.value(p, s);
            let du = (st.u[2 * i] - ur[0]).powi(2) + (st.u[2 * i + 1] - ur[1]).powi(2);
            let dc = (st.chi[i] - spec.chi_ref.value(p, s)).powi(2);
            j += traj.weights[i] * (0.5 * spec.lambda_u * du + 0.5 * spec.lambda_chi * dc);
        }
    }
    j
}

/// Eulerian semi-derivative `dJ(Ω)(X)` from the reference trajectory and
/// its sensitivities along `X`.
pub fn eulerian_semiderivative(
    mesh: &Mesh,
    traj: &DamageTrajectory,
    sens: &SensitivityTrajectory,
    spec: &CostSpec,
    x: &dyn VectorField,
) -> f64 {
    let fo = FirstOrder::new(mesh, x);
    let mass = mesh.lumped_mass();
    let mut dj = 0.0;
    for (k, st) in traj.states.iter().enumerate().skip(1) {
        let s = k as f64 * traj.tau;
        for (i, &p) in mesh.vertices().iter().enumerate() {
            let c = &fo.vertex[i];
            let ur = spec.u_ref.value(p, s);
            let urx = matvec2(&spec.u_ref.jacobian(p, s), &c.x);
            let e = [st.u[2 * i] - ur[0], st.u[2 * i + 1] - ur[1]];
            let ed = [sens.udot[k][2 * i] - urx[0], sens.udot[k][2 * i + 1] - urx[1]];
            let cr = spec.chi_ref.value(p, s);
            let g = spec.chi_ref.gradient(p, s);
            let f = st.chi[i] - cr;
            let fd = sens.chidot[k][i] - (g[0] * c.x[0] + g[1] * c.x[1]);
            let u_part = 0.5 * c.xi_prime * (e[0] * e[0] + e[1] * e[1]) + e[0] * ed[0] + e[1] * ed[1];
            let chi_part = 0.5 * c.xi_prime * f * f + f * fd;
            dj += mass[i] * (spec.lambda_u * u_part + spec.lambda_chi * chi_part);
        }
    }
    dj
}

/// `dJ(Ω)(X)` computed from scratch.
pub fn shape_derivative(spec: &DamageSpec, cost_spec: &CostSpec, x: &dyn VectorField) -> Result<f64> {
    let traj = run(spec)?;
    let sens = sensitivity_chain(spec, &traj, x)?;
    Ok(eulerian_semiderivative(&spec.mesh, &traj, &sens, cost_spec, x))
}

/// Comparison of `dJ` with difference quotients of transported re-runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeCheck {
    pub cost: f64,
    pub dj: f64,
    pub ts: Vec<f64>,
    pub quotients: Vec<f64>,
    /// `|dJ − (J(Ω_t) − J(Ω))/t|`.
    pub errors: Vec<f64>,
}

impl DerivativeCheck {
    pub fn csv(&self) -> String {
        let rows = (0..self.ts.len())
            .map(|i| vec![fmt_f64(self.ts[i]), fmt_f64(self.quotients[i]), fmt_f64(self.dj), fmt_f64(self.errors[i])]);
        csv(&["t", "quotient", "dj", "error"], rows)
    }
}

pub fn derivative_check(
    spec: &DamageSpec,
    cost_spec: &CostSpec,
    x: &dyn VectorField,
    ts: &[f64],
) -> Result<DerivativeCheck> {
    cost_spec.validate()?;
    let traj = run(spec)?;
    let j0 = cost(&traj, cost_spec);
    let sens = sensitivity_chain(spec, &traj, x)?;
    let dj = eulerian_semiderivative(&spec.mesh, &traj, &sens, cost_spec, x);
    let quotients: Vec<f64> =
        map_indexed(ts.len(), |i| run_transported(spec, x, ts[i]).map(|tr| (cost(&tr, cost_spec) - j0) / ts[i]))
            .into_iter()
            .collect::<Result<_>>()?;
    let errors = quotients.iter().map(|q| (dj - q).abs()).collect();
    Ok(DerivativeCheck { cost: j0, dj, ts: ts.to_vec(), quotients, errors })
}

/// Named velocity field of a descent catalog.
#[derive(Debug, Clone)]
pub struct Direction {
    pub name: String,
    pub field: Field,
}

/// `±e₁`, `±e₂` translation bumps at four interior points, `±n` normal
/// bumps at the side midpoints and `±` diagonal bumps at the corners of the
/// bounding box of `mesh`. Entries come in mirror pairs under
/// `(x, y) ↦ (y, x)` when the box is a square.
pub fn default_catalog(mesh: &Mesh) -> Result<Vec<Direction>> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in mesh.vertices() {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let r = 0.25 * w.min(h);
    let mut out = Vec::new();
    for (fx, fy) in [(0.35, 0.35), (0.65, 0.35), (0.35, 0.65), (0.65, 0.65)] {
        let c = [x0 + fx * w, y0 + fy * h];
        for (label, d) in [("+x", [1.0, 0.0]), ("-x", [-1.0, 0.0]), ("+y", [0.0, 1.0]), ("-y", [0.0, -1.0])] {
            out.push(Direction {
                name: format!("translation({fx},{fy}){label}"),
                field: std::sync::Arc::new(BumpField::new(c, r, BumpKind::Translation(d))?),
            });
        }
    }
    let sides = [
        ("bottom", [x0 + 0.5 * w, y0], [0.0, -1.0]),
        ("right", [x1, y0 + 0.5 * h], [1.0, 0.0]),
        ("top", [x0 + 0.5 * w, y1], [0.0, 1.0]),
        ("left", [x0, y0 + 0.5 * h], [-1.0, 0.0]),
    ];
    for (side, c, n) in sides {
        for (label, s) in [("out", 1.0), ("in", -1.0)] {
            out.push(Direction {
                name: format!("normal({side}){label}"),
                field: std::sync::Arc::new(BumpField::new(c, r, BumpKind::Translation([s * n[0], s * n[1]]))?),
            });
        }
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let corners = [
        ("lower-left", [x0, y0], [-s, -s]),
        ("lower-right", [x1, y0], [s, -s]),
        ("upper-left", [x0, y1], [-s, s]),
        ("upper-right", [x1, y1], [s, s]),
    ];
    for (corner, c, n) in corners {
        for (label, f) in [("out", 1.0), ("in", -1.0)] {
            out.push(Direction {
                name: format!("diagonal({corner}){label}"),
                field: std::sync::Arc::new(BumpField::new(c, r, BumpKind::Translation([f * n[0], f * n[1]]))?),
            });
        }
    }
    Ok(out)
}

/// Mirror image of a catalog entry.
pub fn mirrored(d: &Direction) -> Direction {
    Direction { name: format!("mirror:{}", d.name), field: std::sync::Arc::new(Mirrored(d.field.clone())) }
}

/// `dJ` over a catalog, its minimum and the index of the minimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityResidual {
    pub cost: f64,
    pub values: Vec<f64>,
    pub min: f64,
    pub worst: usize,
}

pub fn optimality_residual(
    spec: &DamageSpec,
    cost_spec: &CostSpec,
    catalog: &[Direction],
) -> Result<OptimalityResidual> {
    if catalog.is_empty() {
        return Err(Error::InvalidArgument("direction catalog is empty".into()));
    }
    cost_spec.validate()?;
    let traj = run(spec)?;
    let values: Vec<f64> = map_indexed(catalog.len(), |i| {
        let x = catalog[i].field.as_ref();
        sensitivity_chain(spec, &traj, x).map(|s| eulerian_semiderivative(&spec.mesh, &traj, &s, cost_spec, x))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut worst = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[worst] {
            worst = i;
        }
    }
    Ok(OptimalityResidual { cost: cost(&traj, cost_spec), min: values[worst], worst, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOptions {
    pub max_iters: usize,
    pub step: f64,
    pub tol_opt: f64,
    pub max_halvings: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions { max_iters: 20, step: 0.05, tol_opt: 1e-4, max_halvings: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct DescentIteration {
    pub cost: f64,
    pub min_dj: f64,
    pub direction: String,
    /// Flow time of the accepted deformation (zero for the final record).
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct DescentReport {
    pub iterations: Vec<DescentIteration>,
    pub meshes: Vec<Mesh>,
    pub converged: bool,
}

impl DescentReport {
    pub fn csv(&self) -> String {
        let rows = self.iterations.iter().enumerate().map(|(i, it)| {
            vec![i.to_string(), fmt_f64(it.cost), fmt_f64(it.min_dj), it.direction.clone(), fmt_f64(it.step)]
        });
        csv(&["iteration", "cost", "min_dj", "direction", "step"], rows)
    }
}

fn deform(mesh: &Mesh, x: &dyn VectorField, s: f64) -> Result<Mesh> {
    mesh.deform(|p| integrate_flow(x, s, p).map(|(q, _)| q))
}

/// Steepest catalog descent: moves the mesh along the catalog direction with
/// the most negative `dJ`, halving the step until the cost decreases and the
/// mesh stays valid. Directions with larger negative `dJ` are tried in turn
/// when no step of the best one decreases the cost. Stops when
/// `min dJ ≥ −tol_opt`, or without convergence when no direction decreases
/// the cost.
pub fn shape_descent(
    spec: &DamageSpec,
    cost_spec: &CostSpec,
    catalog: impl Fn(&Mesh) -> Result<Vec<Direction>>,
    opts: &DescentOptions,
) -> Result<DescentReport> {
    let mut current = spec.clone();
    let mut iterations = Vec::new();
    let mut meshes = vec![current.mesh.clone()];
    for _ in 0..=opts.max_iters {
        let dirs = catalog(&current.mesh)?;
        let res = optimality_residual(&current, cost_spec, &dirs)?;
        let dir = &dirs[res.worst];
        if res.min >= -opts.tol_opt || iterations.len() == opts.max_iters {
            let converged = res.min >= -opts.tol_opt;
            iterations.push(DescentIteration {
                cost: res.cost,
                min_dj: res.min,
                direction: dir.name.clone(),
                step: 0.0,
            });
            return Ok(DescentReport { iterations, meshes, converged });
        }
        // Candidates by increasing dJ; a later one is tried when the cost on
        // the deformed mesh does not decrease along an earlier one.
        let mut order: Vec<usize> = (0..dirs.len()).filter(|&i| res.values[i] < -opts.tol_opt).collect();
        order.sort_by(|&a, &b| res.values[a].total_cmp(&res.values[b]));
        let mut accepted = None;
        'search: for &i in &order {
            let mut s = opts.step;
            for _ in 0..=opts.max_halvings {
                if let Ok(mesh) = deform(&current.mesh, dirs[i].field.as_ref(), s) {
                    let trial = current.with_mesh(mesh);
                    if let Ok(traj) = run(&trial) {
                        if cost(&traj, cost_spec) < res.cost {
                            accepted = Some((trial, i, s));
                            break 'search;
                        }
                    }
                }
                s *= 0.5;
            }
        }
        match accepted {
            Some((next, i, s)) => {
                iterations.push(DescentIteration {
                    cost: res.cost,
                    min_dj: res.min,
                    direction: dirs[i].name.clone(),
                    step: s,
                });
                meshes.push(next.mesh.clone());
                current = next;
            }
            None => {
                iterations.push(DescentIteration {
                    cost: res.cost,
                    min_dj: res.min,
                    direction: dir.name.clone(),
                    step: 0.0,
                });
                return Ok(DescentReport { iterations, meshes, converged: false });
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// `Φ_t`-transported damage difference quotient `(χ^{N,t} − χ^N)/t`.
pub fn damage_quotient(spec: &DamageSpec, x: &dyn VectorField, t: f64) -> Result<Vec<f64>> {
    let a = run(spec)?;
    let b = run_transported(spec, x, t)?;
    let (ca, cb) = (&a.states.last().expect("initial state").chi, &b.states.last().expect("initial state").chi);
    Ok(ca.iter().zip(cb).map(|(p, q)| (q - p) / t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{Constant, ExprScalarTime, ExprVector};
    use crate::mesh::unit_square_mesh;
    use std::sync::Arc;

    fn spec(n: usize, beta: f64, stretch: &str) -> DamageSpec {
        DamageSpec {
            mesh: unit_square_mesh(n).unwrap(),
            tau: 0.1,
            steps: 3,
            tensor: ElasticityTensor::new(1.0, 1.0, 0.05, 0.1).unwrap(),
            potential: DamagePotential { beta, delta: 0.05 },
            load: Arc::new(ExprVector::zero()),
            dirichlet: Arc::new(ExprVector::new(&format!("{stretch}*t*x"), &format!("{stretch}*t*y")).unwrap()),
            u0: Arc::new(ExprVector::zero()),
            v0: Arc::new(ExprVector::zero()),
            chi0: Arc::new(Constant(1.0)),
            tol: 1e-11,
        }
    }

    #[test]
    fn zero_data_is_stationary() {
        let s = spec(4, 0.0, "0");
        let tr = run(&s).unwrap();
        for st in &tr.states {
            assert!(st.chi.iter().all(|&c| (c - 1.0).abs() < 1e-12));
            assert!(st.u.iter().all(|&u| u.abs() < 1e-12));
        }
    }

    #[test]
    fn constant_ramp_drift() {
        let mut s = spec(3, 2.0, "0");
        s.steps = 2;
        let tr = run(&s).unwrap();
        for (k, st) in tr.states.iter().enumerate() {
            for c in &st.chi {
                assert!((c - (1.0 - 0.2 * k as f64)).abs() < 1e-9, "{c}");
            }
        }
    }

    #[test]
    fn stretch_damages_and_keeps_invariants() {
        let s = spec(4, 0.1, "1.5");
        let tr = run(&s).unwrap();
        let last = tr.states.last().unwrap();
        assert!(last.chi.iter().any(|&c| c < 0.99));
        assert!(tr.max_principle_ok(), "{}", tr.max_principle_violation());
        assert!(tr.dissipation_ok(), "{}", tr.min_relative_slack());
    }

    #[test]
    fn zero_field_has_zero_sensitivity() {
        let s = spec(4, 0.1, "1.5");
        let tr = run(&s).unwrap();
        let sens = sensitivity_chain(&s, &tr, &ZeroField).unwrap();
        assert!(sens.chidot.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(sens.udot.iter().flatten().all(|v| v.abs() < 1e-12));
        let c = CostSpec {
            lambda_u: 1.0,
            lambda_chi: 1.0,
            u_ref: Arc::new(ExprVector::zero()),
            chi_ref: Arc::new(ExprScalarTime::new("1").unwrap()),
        };
        assert_eq!(eulerian_semiderivative(&s.mesh, &tr, &sens, &c, &ZeroField), 0.0);
    }
}
