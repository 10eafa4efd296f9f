//! Empirical rate harness: sweeps over the flow parameter, log-log slope fits
//! and sampled checks of the monotonicity and Lipschitz hypotheses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::Transport;
use crate::flow::VectorField;
use crate::functions::ScalarField;
use crate::io;
use crate::linalg::dot;
use crate::mesh::Mesh;
use crate::parallel;
use crate::vi::{self, ObstacleProblem, Operator};

/// Points with `t` below this floor are dropped before fitting; there the
/// discretisation error dominates the quotient.
pub const T_FLOOR: f64 = 1.0 / 4096.0;

/// Least-squares slope and residual (root mean square) of `log e` against
/// `log t`.
///
/// Points below [`T_FLOOR`] and points with zero error are ignored. When
/// fewer than two points remain the slope is absent, unless errors vanished
/// identically, which is reported as `+∞`.
pub fn fit_loglog(ts: &[f64], es: &[f64]) -> Option<(f64, f64)> {
    let kept: Vec<(f64, f64)> = ts.iter().zip(es).filter(|(t, _)| **t >= T_FLOOR).map(|(&t, &e)| (t, e)).collect();
    if kept.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = kept.iter().filter(|(_, e)| *e > 0.0).map(|(t, e)| (t.ln(), e.ln())).collect();
    if pts.len() < 2 {
        return if pts.len() < kept.len() { Some((f64::INFINITY, 0.0)) } else { None };
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let res = (pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum::<f64>() / n).sqrt();
    Some((slope, res))
}

pub fn fit_slope(ts: &[f64], es: &[f64]) -> Option<f64> {
    fit_loglog(ts, es).map(|f| f.0)
}

/// Default sweep `2⁻³, …, 2⁻⁹`.
pub fn default_ts() -> Vec<f64> {
    (3..=9).map(|k| 0.5f64.powi(k)).collect()
}

/// Norm used to measure `uᵗ − u⁰`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    L2,
    H1,
    /// `W¹_p` seminorm `(∫|∇v|^p)^{1/p}`.
    W1pSeminorm(f64),
}

impl Norm {
    pub fn eval(&self, mesh: &Mesh, v: &[f64]) -> Result<f64> {
        match *self {
            Norm::L2 => mesh.l2_norm(v),
            Norm::H1 => mesh.h1_norm(v),
            Norm::W1pSeminorm(p) => {
                if v.len() != mesh.n_vertices() {
                    return Err(Error::SizeMismatch { expected: mesh.n_vertices(), got: v.len() });
                }
                let s: f64 =
                    mesh.elements().map(|el| el.area * el.gradient(v)[0].hypot(el.gradient(v)[1]).powf(p)).sum();
                Ok(s.powf(1.0 / p))
            }
        }
    }
}

/// Errors of a sweep with their log-log fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// Strictly decreasing.
    pub ts: Vec<f64>,
    /// `None` where the solve at that `t` failed.
    pub errors: Vec<Option<f64>>,
    pub failures: Vec<(f64, String)>,
    pub slope: Option<f64>,
    pub fit_residual: Option<f64>,
    /// Exponent the slope is compared against.
    pub exponent: f64,
    pub pass: bool,
}

impl RateReport {
    fn new(ts: Vec<f64>, errors: Vec<Option<f64>>, failures: Vec<(f64, String)>, exponent: f64) -> Self {
        let (ft, fe): (Vec<f64>, Vec<f64>) = ts.iter().zip(&errors).filter_map(|(t, e)| e.map(|e| (*t, e))).unzip();
        let fit = fit_loglog(&ft, &fe);
        let slope = fit.map(|f| f.0);
        let pass = failures.is_empty() && slope.is_some_and(|s| s >= exponent - 0.1);
        RateReport { ts, errors, failures, slope, fit_residual: fit.map(|f| f.1), exponent, pass }
    }

    /// `t,error,slope_cum`, where `slope_cum` is the fit over the rows so far.
    pub fn csv(&self) -> String {
        let mut rows = Vec::new();
        for k in 0..self.ts.len() {
            let (ft, fe): (Vec<f64>, Vec<f64>) =
                self.ts[..=k].iter().zip(&self.errors[..=k]).filter_map(|(t, e)| e.map(|e| (*t, e))).unzip();
            rows.push(vec![
                io::fmt_f64(self.ts[k]),
                self.errors[k].map_or_else(|| "failed".to_string(), io::fmt_f64),
                fit_slope(&ft, &fe).map_or_else(|| "nan".to_string(), io::fmt_f64),
            ]);
        }
        io::csv(&["t", "error", "slope_cum"], rows)
    }
}

fn sorted_ts(ts: &[f64]) -> Result<Vec<f64>> {
    if ts.len() < 3 {
        return Err(Error::InvalidArgument(format!("a rate sweep needs at least 3 t values, got {}", ts.len())));
    }
    if ts.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument("t values must be positive".into()));
    }
    let mut ts = ts.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    Ok(ts)
}

/// Solves the family at each `t` (possibly concurrently) and measures
/// `‖uᵗ − u⁰‖` in the given norm. Failed solves are recorded, not raised.
pub fn rate_sweep(
    mesh: &Mesh,
    family: impl Fn(f64) -> Result<Vec<f64>> + Sync,
    reference: &[f64],
    ts: &[f64],
    norm: Norm,
    exponent: f64,
) -> Result<RateReport> {
    let ts = sorted_ts(ts)?;
    let results = parallel::map_indexed(ts.len(), |k| {
        family(ts[k]).and_then(|u| {
            let d: Vec<f64> = u.iter().zip(reference).map(|(a, b)| a - b).collect();
            norm.eval(mesh, &d)
        })
    });
    let mut errors = Vec::with_capacity(ts.len());
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => errors.push(Some(e)),
            Err(e) => {
                errors.push(None);
                failures.push((ts[k], e.to_string()));
            }
        }
    }
    Ok(RateReport::new(ts, errors, failures, exponent))
}

/// `‖yᵗ − y‖_{H¹}` for the transported obstacle problem; Lipschitz exponent.
pub fn semilinear_rate(problem: &ObstacleProblem, x: &dyn VectorField, ts: &[f64], tol: f64) -> Result<RateReport> {
    let base = vi::solve_obstacle_semilinear(problem, tol)?;
    let warm = base.active_set(base.default_tol_act());
    rate_sweep(
        &problem.mesh,
        |t| vi::solve_transported_with(problem, x, t, tol, Some(warm.clone())).map(|s| s.y()),
        &base.y(),
        ts,
        Norm::H1,
        1.0,
    )
}

/// Exponents for the p-Laplace sweep: `1/p` from the energy argument and
/// `1/(p−1)` from the operator argument.
pub fn p_laplace_exponents(p: f64) -> (f64, f64) {
    (1.0 / p, 1.0 / (p - 1.0))
}

/// Exponent asserted for the p-Laplace sweep: `1/(p−1)` for `p ≤ 2`, the
/// larger of the two exponents otherwise.
pub fn p_laplace_binding_exponent(p: f64) -> f64 {
    let (e, o) = p_laplace_exponents(p);
    if p <= 2.0 {
        o
    } else {
        e.max(o)
    }
}

/// `‖∇(uᵗ − u)‖_{L^p}` for the transported p-Laplace problem.
pub fn p_laplace_rate(
    mesh: &Mesh,
    p: f64,
    f: &dyn ScalarField,
    x: &dyn VectorField,
    ts: &[f64],
    tol: f64,
) -> Result<RateReport> {
    let base = vi::solve_p_laplace(mesh, p, f, x, 0.0, tol)?;
    rate_sweep(
        mesh,
        |t| vi::solve_p_laplace(mesh, p, f, x, t, tol),
        &base,
        ts,
        Norm::W1pSeminorm(p),
        p_laplace_binding_exponent(p),
    )
}

/// Sampled constant of `|⟨𝒜_t(u) − 𝒜_0(u), u − v⟩| ≤ c t ‖u − v‖_{H¹}`.
#[derive(Debug, Clone, PartialEq)]
pub struct O2Report {
    pub ts: Vec<f64>,
    /// Largest pairing quotient over the probes at each `t`.
    pub pairings: Vec<f64>,
    pub slope: Option<f64>,
    /// `max_t pairing(t)/t`.
    pub constant: f64,
    pub pass: bool,
}

pub fn check_o2(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    probes: &[(Vec<f64>, Vec<f64>)],
    ts: &[f64],
) -> Result<O2Report> {
    let ts = sorted_ts(ts)?;
    let mesh = &problem.mesh;
    let id = Transport::identity(mesh);
    let op0 = problem.operator(&id)?;
    let base: Vec<Vec<f64>> = probes.iter().map(|(u, _)| op0.residual(u)).collect::<Result<_>>()?;
    let pairings = parallel::map_indexed(ts.len(), |k| -> Result<f64> {
        let tr = Transport::new(mesh, x, ts[k])?;
        let op = problem.operator(&tr)?;
        let mut worst = 0.0_f64;
        for ((u, v), a0) in probes.iter().zip(&base) {
            let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            let nd = mesh.h1_norm(&d)?;
            if nd == 0.0 {
                continue;
            }
            let at: Vec<f64> = op.residual(u)?.iter().zip(a0).map(|(a, b)| a - b).collect();
            worst = worst.max(dot(&at, &d).abs() / nd);
        }
        Ok(worst)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let slope = fit_slope(&ts, &pairings);
    let constant = ts.iter().zip(&pairings).map(|(t, p)| p / t).fold(0.0, f64::max);
    Ok(O2Report { pass: slope.is_some_and(|s| s >= 0.9), ts, pairings, slope, constant })
}

/// Random feasible probe pairs below the reference obstacle.
pub fn random_probes(problem: &ObstacleProblem, count: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let psi = problem.obstacle_values(&Transport::identity(&problem.mesh))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { psi.iter().map(|&p| rng.gen_range(-1.0..1.0_f64).min(p)).collect() };
    Ok((0..count).map(|_| (draw(&mut rng), draw(&mut rng))).collect())
}

/// Sampled constants of the density hypotheses: `‖w(Φ_t·, v) − w(·, v)‖ ≤ c t`
/// and `‖w(Φ_t·, v) − w(Φ_t·, z)‖ ≤ c ‖v − z‖_{H¹}`, both in lumped `L²`.
/// Samples cannot prove the bounds; failures are reported as warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub ts: Vec<f64>,
    /// Largest shift `‖w(Φ_t·, v) − w(·, v)‖` over the probes at each `t`.
    pub shift: Vec<f64>,
    pub shift_slope: Option<f64>,
    /// Largest state quotient over probes and times.
    pub state_constant: f64,
    pub warnings: Vec<String>,
}

pub fn check_density_lipschitz(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    ts: &[f64],
    probes: &[(Vec<f64>, Vec<f64>)],
) -> Result<DensityReport> {
    let ts = sorted_ts(ts)?;
    let mesh = &problem.mesh;
    let m = mesh.lumped_mass();
    let d = problem.density.as_ref();
    let norm = |v: &[f64]| v.iter().zip(&m).map(|(a, w)| w * a * a).sum::<f64>().sqrt();
    let rows = parallel::map_indexed(ts.len(), |k| -> Result<(f64, f64)> {
        let images = Transport::new(mesh, x, ts[k])?.vertex_images();
        let (mut shift, mut quotient) = (0.0_f64, 0.0_f64);
        for (u, v) in probes {
            let wu: Vec<f64> = images.iter().zip(u).map(|(&p, &a)| d.w(p, a)).collect();
            let du: Vec<f64> = mesh.vertices().iter().zip(u).zip(&wu).map(|((&p, &a), wt)| wt - d.w(p, a)).collect();
            shift = shift.max(norm(&du));
            let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            let nd = mesh.h1_norm(&diff)?;
            if nd > 0.0 {
                let dw: Vec<f64> = images.iter().zip(v).zip(&wu).map(|((&p, &b), wa)| wa - d.w(p, b)).collect();
                quotient = quotient.max(norm(&dw) / nd);
            }
        }
        Ok((shift, quotient))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let shift: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let state_constant = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let shift_slope = fit_slope(&ts, &shift);
    let mut warnings = Vec::new();
    if shift.iter().any(|v| !v.is_finite()) || !state_constant.is_finite() {
        warnings.push("density is not finite on the sampled states".to_string());
    } else if shift_slope.is_some_and(|s| s < 0.9) {
        warnings.push(format!(
            "sampled density shift is not first order in t (slope {:.3})",
            shift_slope.unwrap_or(f64::NAN)
        ));
    }
    Ok(DensityReport { ts, shift, shift_slope, state_constant, warnings })
}

/// Worst sampled quotient `⟨𝒜_t(v) − 𝒜_t(z), v − z⟩ / ‖v − z‖²_{H¹}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    pub alpha: f64,
    /// `min(½, λ/2)`.
    pub bound: f64,
    pub pass: bool,
}

pub fn check_monotonicity(
    problem: &ObstacleProblem,
    x: &dyn VectorField,
    t: f64,
    samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    let mesh = &problem.mesh;
    let tr = Transport::new(mesh, x, t)?;
    let op = problem.operator(&tr)?;
    let psi = problem.obstacle_values(&tr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha = f64::INFINITY;
    for _ in 0..samples {
        let v: Vec<f64> = psi.iter().map(|&p| rng.gen_range(-1.0..1.0_f64).min(p)).collect();
        let z: Vec<f64> = psi.iter().map(|&p| rng.gen_range(-1.0..1.0_f64).min(p)).collect();
        let d: Vec<f64> = v.iter().zip(&z).map(|(a, b)| a - b).collect();
        let nd = mesh.h1_norm(&d)?;
        if nd == 0.0 {
            continue;
        }
        let fv = op.residual(&v)?;
        let fz = op.residual(&z)?;
        let diff: Vec<f64> = fv.iter().zip(&fz).map(|(a, b)| a - b).collect();
        alpha = alpha.min(dot(&diff, &d) / (nd * nd));
    }
    let bound = 0.5f64.min(0.5 * problem.lambda);
    Ok(MonotonicityReport { alpha, bound, pass: alpha >= bound - 1e-10 })
}
