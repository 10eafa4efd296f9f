//! Builders from configuration sections and the command implementations.

use std::sync::Arc;

use serde_json::{json, Value};
use vishape::cones::{
    fd_material_oracle_with, solve_material_derivative, state_shape_derivative, BiactiveRule, ConeOptions,
    MaterialDerivativeData,
};
use vishape::damage::{
    self, cost, default_catalog, derivative_check, eulerian_semiderivative, mirrored, optimality_residual,
    sensitivity_chain, shape_descent, CostSpec, DamagePotential, DamageSpec, DescentOptions, Direction,
};
use vishape::fem::{ElasticityTensor, ExprDensity, MassKind, Quadrature};
use vishape::flow::{catalog_field, ExprField, Field, Mirrored, Scaled, CATALOG};
use vishape::functions::{ExprScalar, ExprScalarTime, ExprVector};
use vishape::io::{csv, fmt_f64};
use vishape::mesh::{disk_mesh, unit_square_mesh, Mesh, Rect};
use vishape::sensitivity::{
    check_density_lipschitz, default_ts, p_laplace_exponents, p_laplace_rate, random_probes, semilinear_rate,
    RateReport,
};
use vishape::vi::{scalar, solve_transported, Constraint, Obstacle, ObstacleProblem};

use crate::{num, nums, CliError, Config, Context, Output};

type R<T> = Result<T, CliError>;

pub fn run(command: &str, cfg: &Config) -> R<Output> {
    match command {
        "solve-vi" => solve_vi(cfg),
        "rate-sweep" => rate_sweep(cfg),
        "material-derivative" => material_derivative(cfg),
        "shape-derivative" => shape_derivative(cfg),
        "damage-run" => damage_run(cfg),
        "derivative-check" => derivative_check_cmd(cfg),
        "shape-descent" => shape_descent_cmd(cfg),
        other => Err(CliError::config("command", format!("unknown command `{other}`"))),
    }
}

pub fn mesh(cfg: &Config) -> R<Mesh> {
    let kind = cfg.str_or("mesh", "kind", "square")?;
    let n = cfg.usize_or("mesh", "n", None)?;
    if n == 0 {
        return Err(CliError::config("mesh.n", "must be at least 1"));
    }
    match kind.as_str() {
        "square" => unit_square_mesh(n).key("mesh.n"),
        "disk" => {
            let c = cfg.f64_array("mesh", "center", Some([0.5, 0.5]))?;
            let r = cfg.f64_checked("mesh", "radius", Some(0.5), |r| r > 0.0, "positive")?;
            disk_mesh(n, c, r).key("mesh.radius")
        }
        _ => Err(CliError::config("mesh.kind", format!("unknown mesh kind `{kind}` (square, disk)"))),
    }
}

/// Velocity field from a section: a catalog bump or an expression pair,
/// optionally scaled and mirrored in the diagonal.
pub fn field(cfg: &Config, section: &str) -> R<Field> {
    let kind = cfg.str(section, "kind")?;
    let key = |k: &str| format!("{section}.{k}");
    let base: Field = if kind == "expression" {
        let [x, y] = cfg.str_pair_or(section, "components", None)?;
        let s = cfg.f64_array::<4>(section, "support", None)?;
        let rect = Rect::new(s[0], s[1], s[2], s[3]).key(&key("support"))?;
        Arc::new(ExprField::new(&x, &y, rect).key(&key("components"))?)
    } else if CATALOG.contains(&kind.as_str()) {
        let center = cfg.f64_array(section, "center", None)?;
        let radius = cfg.f64_checked(section, "radius", None, |r| r > 0.0, "positive")?;
        let (direction, omega) = if kind == "rotation_bump" {
            ([0.0, 0.0], cfg.f64(section, "omega")?)
        } else {
            (cfg.f64_array(section, "direction", None)?, 0.0)
        };
        Arc::new(catalog_field(&kind, center, radius, direction, omega).key(&key("center"))?)
    } else {
        return Err(CliError::config(&key("kind"), format!("unknown field kind `{kind}`")));
    };
    let factor = cfg.f64_or(section, "scale", 1.0)?;
    let scaled: Field = if factor == 1.0 { base } else { Arc::new(Scaled { field: base, factor }) };
    Ok(if cfg.bool_or(section, "mirror", false)? { Arc::new(Mirrored(scaled)) } else { scaled })
}

fn tol(cfg: &Config, section: &str, default: f64) -> R<f64> {
    cfg.f64_checked(section, "tol", Some(default), |t| t > 0.0, "positive")
}

pub fn obstacle_problem(cfg: &Config, mesh: Mesh) -> R<ObstacleProblem> {
    let lambda = cfg.f64_checked("problem", "lambda", None, |l| l > 0.0, "positive")?;
    let density = cfg.str_or("problem", "density", "0")?;
    let density = Arc::new(ExprDensity::new(&density).key("problem.density")?);
    let obstacle = match cfg.str_or("problem", "obstacle", "none")?.as_str() {
        "none" => Obstacle::None,
        src => Obstacle::Function(scalar(ExprScalar::new(src).key("problem.obstacle")?)),
    };
    let mut p = ObstacleProblem::new(mesh, lambda, density, obstacle).key("problem.lambda")?;
    p.quadrature = match cfg.str_or("problem", "quadrature", "lumped")?.as_str() {
        "lumped" => Quadrature::Lumped,
        "midpoint" => Quadrature::Midpoint,
        q => {
            return Err(CliError::config("problem.quadrature", format!("unknown quadrature `{q}` (lumped, midpoint)")))
        }
    };
    p.mass = match cfg.str_or("problem", "mass", "consistent")?.as_str() {
        "consistent" => MassKind::Consistent,
        "lumped" => MassKind::Lumped,
        m => return Err(CliError::config("problem.mass", format!("unknown mass `{m}` (consistent, lumped)"))),
    };
    p.max_iters = cfg.usize_or("problem", "max_iters", Some(200))?;
    Ok(p)
}

fn vector_expr(cfg: &Config, section: &str, key: &str, default: Option<[&str; 2]>) -> R<Arc<ExprVector>> {
    let [x, y] = cfg.str_pair_or(section, key, default)?;
    Ok(Arc::new(ExprVector::new(&x, &y).key(&format!("{section}.{key}"))?))
}

pub fn damage_spec(cfg: &Config, mesh: Mesh) -> R<DamageSpec> {
    let s = "damage";
    let tensor = ElasticityTensor::new(
        cfg.f64(s, "lame_lambda")?,
        cfg.f64(s, "lame_mu")?,
        cfg.f64_or(s, "eta", 0.05)?,
        cfg.f64_or(s, "stiffness_delta", 0.1)?,
    )
    .key("damage.lame_mu")?;
    let chi0 = cfg.str(s, "chi0")?;
    let spec = DamageSpec {
        mesh,
        tau: cfg.f64_checked(s, "tau", None, |t| t > 0.0, "positive")?,
        steps: cfg.usize_or(s, "steps", None)?,
        tensor,
        potential: DamagePotential {
            beta: cfg.f64_checked(s, "beta", None, |b| b >= 0.0, "nonnegative")?,
            delta: cfg.f64_checked(s, "potential_delta", Some(0.05), |d| d > 0.0, "positive")?,
        },
        load: vector_expr(cfg, s, "load", Some(["0", "0"]))?,
        dirichlet: vector_expr(cfg, s, "dirichlet", None)?,
        u0: vector_expr(cfg, s, "u0", Some(["0", "0"]))?,
        v0: vector_expr(cfg, s, "v0", Some(["0", "0"]))?,
        chi0: Arc::new(ExprScalar::new(&chi0).key("damage.chi0")?),
        tol: tol(cfg, s, 1e-11)?,
    };
    spec.validate().key("damage.chi0")?;
    Ok(spec)
}

pub fn cost_spec(cfg: &Config) -> R<CostSpec> {
    let s = "cost";
    let chi_ref = cfg.str(s, "chi_ref")?;
    Ok(CostSpec {
        lambda_u: cfg.f64_checked(s, "lambda_u", None, |l| l >= 0.0, "nonnegative")?,
        lambda_chi: cfg.f64_checked(s, "lambda_chi", None, |l| l >= 0.0, "nonnegative")?,
        u_ref: vector_expr(cfg, s, "u_ref", Some(["0", "0"]))?,
        chi_ref: Arc::new(ExprScalarTime::new(&chi_ref).key("cost.chi_ref")?),
    })
}

fn residuals_json(r: &vishape::vi::Residuals) -> Value {
    json!({
        "feasibility": num(r.feasibility),
        "sign": num(r.sign),
        "complementarity": num(r.complementarity),
        "stationarity": num(r.stationarity),
    })
}

fn opt(v: Option<f64>) -> Value {
    v.map(num).unwrap_or(Value::Null)
}

fn solve_vi(cfg: &Config) -> R<Output> {
    let problem = obstacle_problem(cfg, mesh(cfg)?)?;
    let tol = tol(cfg, "problem", 1e-10)?;
    let t = cfg.f64_or("problem", "t", 0.0)?;
    let x: Field = if cfg.has_section("field") { field(cfg, "field")? } else { Arc::new(vishape::flow::ZeroField) };
    cfg.check_unused()?;
    let sol = solve_transported(&problem, x.as_ref(), t, tol).ctx("vi")?;
    let act = sol.active_set(sol.default_tol_act());
    let rows = problem.mesh.vertices().iter().enumerate().map(|(i, p)| {
        vec![
            i.to_string(),
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(sol.state[i]),
            fmt_f64(sol.obstacle[i]),
            fmt_f64(sol.multiplier[i]),
            (act[i] as u8).to_string(),
        ]
    });
    let table = csv(&["node", "x", "y", "u", "psi", "multiplier", "active"], rows);
    let active = act.iter().filter(|&&a| a).count();
    let summary = json!({
        "command": "solve-vi",
        "t": num(t),
        "vertices": problem.mesh.n_vertices(),
        "active": active,
        "iterations": sol.iterations,
        "method": format!("{:?}", sol.method),
        "residuals": residuals_json(&sol.residuals),
        "max_residual": num(sol.residuals.max()),
    });
    Ok(Output {
        command: "solve-vi".into(),
        files: vec![("solution.csv".into(), table)],
        line: format!(
            "solve-vi: {} vertices, {active} active, max KKT residual {:.3e}",
            problem.mesh.n_vertices(),
            sol.residuals.max()
        ),
        summary,
    })
}

fn report_json(r: &RateReport) -> Value {
    json!({
        "ts": nums(&r.ts),
        "errors": r.errors.iter().map(|e| opt(*e)).collect::<Vec<_>>(),
        "failures": r.failures.iter().map(|(t, m)| json!({"t": num(*t), "message": m})).collect::<Vec<_>>(),
        "slope": opt(r.slope),
        "fit_residual": opt(r.fit_residual),
        "exponent": num(r.exponent),
        "pass": r.pass,
    })
}

/// Sampled density hypotheses along `x`; the warnings are also returned.
fn density_json(problem: &ObstacleProblem, x: &dyn vishape::flow::VectorField, ts: &[f64]) -> R<(Value, Value)> {
    let probes = random_probes(problem, 8, 0).ctx("sensitivity")?;
    let r = check_density_lipschitz(problem, x, ts, &probes).ctx("sensitivity")?;
    let warnings = Value::from(r.warnings.clone());
    let v = json!({
        "ts": nums(&r.ts),
        "shift": nums(&r.shift),
        "shift_slope": opt(r.shift_slope),
        "state_constant": num(r.state_constant),
    });
    Ok((v, warnings))
}

fn rate_sweep(cfg: &Config) -> R<Output> {
    let kind = cfg.str("problem", "kind")?;
    let mesh = mesh(cfg)?;
    let x = field(cfg, "field")?;
    let ts = cfg.f64_list_or("sweep", "ts", Some(default_ts()))?;
    match kind.as_str() {
        "semilinear" => {
            let problem = obstacle_problem(cfg, mesh)?;
            let tol = tol(cfg, "problem", 1e-10)?;
            cfg.check_unused()?;
            let r = semilinear_rate(&problem, x.as_ref(), &ts, tol).ctx("sensitivity")?;
            let (density, warnings) = density_json(&problem, x.as_ref(), &ts)?;
            let mut run = report_json(&r);
            run["kind"] = "semilinear".into();
            Ok(Output {
                command: "rate-sweep".into(),
                files: vec![("rates.csv".into(), r.csv())],
                line: format!(
                    "rate-sweep: semilinear slope {} (required {}), pass={}",
                    r.slope.map_or("n/a".into(), |s| format!("{s:.4}")),
                    r.exponent - 0.1,
                    r.pass
                ),
                summary: json!({
                    "command": "rate-sweep",
                    "kind": "semilinear",
                    "runs": [run],
                    "density_check": density,
                    "warnings": warnings,
                    "pass": r.pass,
                }),
            })
        }
        "p-laplace" => {
            let ps = cfg.f64_list_or("problem", "p", None)?;
            if let Some(p) = ps.iter().find(|&&p| !(p > 1.0 && p.is_finite())) {
                return Err(CliError::config("problem.p", format!("must be > 1 (got {p})")));
            }
            let f = ExprScalar::new(&cfg.str("problem", "f")?).key("problem.f")?;
            let tol = tol(cfg, "problem", 1e-10)?;
            cfg.check_unused()?;
            let mut files = Vec::new();
            let mut runs = Vec::new();
            let mut parts = Vec::new();
            for &p in &ps {
                let r = p_laplace_rate(&mesh, p, &f, x.as_ref(), &ts, tol).ctx("sensitivity")?;
                let (e, o) = p_laplace_exponents(p);
                let mut run = report_json(&r);
                run["p"] = num(p);
                run["exponent_energy"] = num(e);
                run["exponent_operator"] = num(o);
                runs.push(run);
                files.push((format!("rates_p{p}.csv"), r.csv()));
                parts.push(format!(
                    "p={p}: slope {} ({})",
                    r.slope.map_or("n/a".into(), |s| format!("{s:.4}")),
                    if r.pass { "pass" } else { "FAIL" }
                ));
            }
            let pass = runs.iter().all(|r| r["pass"] == Value::Bool(true));
            Ok(Output {
                command: "rate-sweep".into(),
                files,
                line: format!("rate-sweep: {}", parts.join(", ")),
                summary: json!({"command": "rate-sweep", "kind": "p-laplace", "runs": runs, "pass": pass}),
            })
        }
        _ => Err(CliError::config("problem.kind", format!("unknown kind `{kind}` (semilinear, p-laplace)"))),
    }
}

fn material_derivative(cfg: &Config) -> R<Output> {
    let problem = obstacle_problem(cfg, mesh(cfg)?)?;
    let tol = tol(cfg, "problem", 1e-11)?;
    let x = field(cfg, "field")?;
    let ts = cfg.f64_list_or("sweep", "ts", Some(vec![1e-1, 1e-2, 1e-3]))?;
    let final_tol = cfg.f64_or("check", "final_error", 5e-3)?;
    let cone_tol = cfg.f64_or("check", "cone", 1e-6)?;
    cfg.check_unused()?;
    let cone = ConeOptions {
        tol_act: match cfg.f64_opt("cone", "tol_act")? {
            Some(v) if !(v >= 0.0 && v.is_finite()) => {
                return Err(CliError::config("cone.tol_act", format!("must be nonnegative (got {v})")))
            }
            v => v,
        },
        rule: match cfg.str_or("cone", "biactive", "conical")?.as_str() {
            "conical" => BiactiveRule::Conical,
            "linearised" => BiactiveRule::Linearised,
            other => {
                return Err(CliError::config("cone.biactive", format!("unknown rule `{other}` (conical, linearised)")))
            }
        },
    };
    let o = fd_material_oracle_with(&problem, x.as_ref(), &ts, tol, cone).ctx("cones")?;
    let (density, warnings) = density_json(&problem, x.as_ref(), &ts)?;
    let md = &o.derivative;
    let rows = problem.mesh.vertices().iter().enumerate().map(|(i, p)| {
        let c = match md.cone.constraints[i] {
            Constraint::Free => "free",
            Constraint::Upper(_) => "upper",
            Constraint::Fixed(_) => "fixed",
        };
        vec![
            i.to_string(),
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(md.udot[i]),
            fmt_f64(md.ydot[i]),
            fmt_f64(md.multiplier[i]),
            c.to_string(),
        ]
    });
    let table = csv(&["node", "x", "y", "udot", "ydot", "multiplier", "cone"], rows);
    let final_error = o.rows.last().map_or(f64::NAN, |r| r.error_h1);
    let pass = o.monotone && final_error <= final_tol && o.cone_violation <= cone_tol;
    let summary = json!({
        "command": "material-derivative",
        "ts": nums(&o.rows.iter().map(|r| r.t).collect::<Vec<_>>()),
        "errors_h1": nums(&o.rows.iter().map(|r| r.error_h1).collect::<Vec<_>>()),
        "monotone": o.monotone,
        "slope": opt(o.slope),
        "final_error": num(final_error),
        "cone_violation": num(o.cone_violation),
        "residuals": residuals_json(&md.residuals),
        "density_check": density,
        "warnings": warnings,
        "pass": pass,
    });
    Ok(Output {
        command: "material-derivative".into(),
        files: vec![("quotients.csv".into(), o.csv()), ("material_derivative.csv".into(), table)],
        line: format!(
            "material-derivative: final H1 error {final_error:.3e}, monotone={}, cone violation {:.1e}, pass={pass}",
            o.monotone, o.cone_violation
        ),
        summary,
    })
}

fn shape_derivative(cfg: &Config) -> R<Output> {
    let base = mesh(cfg)?;
    let problem = obstacle_problem(cfg, base.clone())?;
    let tol = tol(cfg, "problem", 1e-11)?;
    let x = field(cfg, "field")?;
    let levels = cfg.usize_or("refine", "levels", Some(3))?;
    let min_ratio = cfg.f64_or("check", "min_ratio", 1.7)?;
    cfg.check_unused()?;
    let mut meshes = vec![base];
    for _ in 0..levels {
        let next = meshes.last().expect("nonempty").refine_uniform();
        meshes.push(next);
    }
    let norms: Vec<f64> = meshes
        .into_iter()
        .map(|m| {
            let p = ObstacleProblem { mesh: m, ..problem.clone() };
            let sol = vishape::vi::solve_obstacle_semilinear(&p, tol)?;
            let data = MaterialDerivativeData::new(&p, x.as_ref())?;
            let md = solve_material_derivative(&p, &sol, &data, tol)?;
            let up = state_shape_derivative(&md.udot, &sol.state, x.as_ref(), &p.mesh)?;
            p.mesh.l2_norm(&up)
        })
        .collect::<vishape::Result<_>>()
        .ctx("cones")?;
    let ratios: Vec<f64> = norms.windows(2).map(|w| w[0] / w[1]).collect();
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = !ratios.is_empty() && worst >= min_ratio;
    let rows = norms
        .iter()
        .enumerate()
        .map(|(l, &v)| vec![l.to_string(), fmt_f64(v), if l == 0 { String::new() } else { fmt_f64(ratios[l - 1]) }]);
    Ok(Output {
        command: "shape-derivative".into(),
        files: vec![("shape_derivative.csv".into(), csv(&["level", "norm_l2", "ratio"], rows))],
        line: format!(
            "shape-derivative: |u'| ratios {:?}, pass={pass}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
        summary: json!({
            "command": "shape-derivative",
            "norms_l2": nums(&norms),
            "ratios": nums(&ratios),
            "min_ratio": num(worst),
            "pass": pass,
        }),
    })
}

fn catalog_json(dirs: &[Direction], values: &[f64]) -> Value {
    Value::Array(dirs.iter().zip(values).map(|(d, v)| json!({"name": d.name, "dj": num(*v)})).collect())
}

fn damage_run(cfg: &Config) -> R<Output> {
    let spec = damage_spec(cfg, mesh(cfg)?)?;
    let cost_spec = cfg.has_section("cost").then(|| cost_spec(cfg)).transpose()?;
    cfg.check_unused()?;
    let traj = damage::run(&spec).ctx("damage")?;
    let mut summary = json!({
        "command": "damage-run",
        "steps": spec.steps,
        "max_principle_ok": traj.max_principle_ok(),
        "max_principle_violation": num(traj.max_principle_violation()),
        "dissipation_ok": traj.dissipation_ok(),
        "min_relative_slack": num(traj.min_relative_slack()),
        "final_chi_min": num(traj.states.last().expect("initial state").chi.iter().copied().fold(f64::INFINITY, f64::min)),
    });
    let mut line = format!(
        "damage-run: {} steps, max principle {}, dissipation {}",
        spec.steps,
        if traj.max_principle_ok() { "ok" } else { "VIOLATED" },
        if traj.dissipation_ok() { "ok" } else { "VIOLATED" }
    );
    if let Some(c) = &cost_spec {
        let dirs = default_catalog(&spec.mesh).ctx("damage")?;
        let res = optimality_residual(&spec, c, &dirs).ctx("damage")?;
        summary["J"] = num(res.cost);
        summary["dJ_catalog"] = catalog_json(&dirs, &res.values);
        summary["min_dJ"] = num(res.min);
        summary["worst_direction"] = dirs[res.worst].name.clone().into();
        line.push_str(&format!(", J = {:.6e}, min dJ = {:.3e}", res.cost, res.min));
    }
    Ok(Output {
        command: "damage-run".into(),
        files: vec![("trajectory.csv".into(), traj.csv()), ("fields.csv".into(), traj.fields_csv(&spec.mesh))],
        line,
        summary,
    })
}

fn derivative_check_cmd(cfg: &Config) -> R<Output> {
    let spec = damage_spec(cfg, mesh(cfg)?)?;
    let cs = cost_spec(cfg)?;
    let x = field(cfg, "field")?;
    let ts = cfg.f64_list_or("check", "ts", Some(vec![1e-2, 1e-3, 1e-4]))?;
    if ts.iter().any(|&t| t <= 0.0 || t.is_nan()) {
        return Err(CliError::config("check.ts", "values must be positive"));
    }
    let t_assert = cfg.f64_or("check", "t_assert", 1e-3)?;
    let scales = cfg.f64_list_or("check", "scales", Some(vec![0.5, 2.0, 10.0]))?;
    cfg.check_unused()?;
    let check = derivative_check(&spec, &cs, x.as_ref(), &ts).ctx("damage")?;
    let traj = damage::run(&spec).ctx("damage")?;
    let dj_of = |f: &dyn vishape::flow::VectorField| -> R<f64> {
        let s = sensitivity_chain(&spec, &traj, f).ctx("damage")?;
        Ok(eulerian_semiderivative(&spec.mesh, &traj, &s, &cs, f))
    };
    let mut homogeneity = Vec::new();
    let mut worst_rel: f64 = 0.0;
    for &l in &scales {
        let v = dj_of(&Scaled { field: x.clone(), factor: l })?;
        let want = l * check.dj;
        let rel = if v == want { 0.0 } else { (v - want).abs() / want.abs().max(f64::MIN_POSITIVE) };
        worst_rel = worst_rel.max(rel);
        homogeneity.push(json!({"scale": num(l), "dj": num(v), "relative_error": num(rel)}));
    }
    let mirror = dj_of(&Mirrored(x.clone()))?;
    let idx = ts.iter().position(|&t| t == t_assert);
    let fd_error = idx.map(|i| check.errors[i]);
    let bound = 1e-2 * (1.0 + check.dj.abs());
    let fd_pass = fd_error.is_some_and(|e| e <= bound);
    let homogeneity_pass = worst_rel <= 1e-8;
    let summary = json!({
        "command": "derivative-check",
        "J": num(check.cost),
        "dj": num(check.dj),
        "ts": nums(&check.ts),
        "quotients": nums(&check.quotients),
        "errors": nums(&check.errors),
        "fd_error": opt(fd_error),
        "fd_bound": num(bound),
        "fd_pass": fd_pass,
        "homogeneity": homogeneity,
        "homogeneity_max_relative_error": num(worst_rel),
        "homogeneity_pass": homogeneity_pass,
        "mirror_dj": num(mirror),
        "max_principle_ok": traj.max_principle_ok(),
        "dissipation_ok": traj.dissipation_ok(),
        "min_relative_slack": num(traj.min_relative_slack()),
        "pass": fd_pass && homogeneity_pass,
    });
    Ok(Output {
        command: "derivative-check".into(),
        files: vec![("derivative_check.csv".into(), check.csv())],
        line: format!(
            "derivative-check: dJ = {:.6e}, FD error at t={t_assert:e}: {}, homogeneity rel. error {worst_rel:.1e}",
            check.dj,
            fd_error.map_or("n/a".into(), |e| format!("{e:.3e}"))
        ),
        summary,
    })
}

fn shape_descent_cmd(cfg: &Config) -> R<Output> {
    let spec = damage_spec(cfg, mesh(cfg)?)?;
    let cs = cost_spec(cfg)?;
    let d = DescentOptions::default();
    let opts = DescentOptions {
        max_iters: cfg.usize_or("descent", "max_iters", Some(d.max_iters))?,
        step: cfg.f64_checked("descent", "step", Some(d.step), |s| s > 0.0, "positive")?,
        tol_opt: cfg.f64_checked("descent", "tol_opt", Some(d.tol_opt), |s| s >= 0.0, "nonnegative")?,
        max_halvings: cfg.usize_or("descent", "max_halvings", Some(d.max_halvings))?,
    };
    cfg.check_unused()?;
    let rep = shape_descent(&spec, &cs, default_catalog, &opts).ctx("damage")?;
    let first = rep.iterations.first().expect("at least one record");
    let last = rep.iterations.last().expect("at least one record");
    let decrease = if first.cost > 0.0 { 1.0 - last.cost / first.cost } else { 0.0 };
    let monotone = rep.iterations.windows(2).all(|w| w[1].cost < w[0].cost);
    let final_mesh = rep.meshes.last().expect("initial mesh");
    let trajs =
        vishape::parallel::map_indexed(rep.meshes.len(), |k| damage::run(&spec.with_mesh(rep.meshes[k].clone())))
            .into_iter()
            .collect::<vishape::Result<Vec<_>>>()
            .ctx("damage")?;
    let final_traj = trajs.last().expect("initial mesh");
    let max_principle_ok = trajs.iter().all(|t| t.max_principle_ok());
    let dissipation_ok = trajs.iter().all(|t| t.dissipation_ok());
    let summary = json!({
        "command": "shape-descent",
        "initial_J": num(first.cost),
        "final_J": num(last.cost),
        "final_J_check": num(cost(final_traj, &cs)),
        "max_principle_ok": max_principle_ok,
        "dissipation_ok": dissipation_ok,
        "min_relative_slack": num(trajs.iter().map(|t| t.min_relative_slack()).fold(f64::INFINITY, f64::min)),
        "relative_decrease": num(decrease),
        "accepted_steps": rep.meshes.len() - 1,
        "converged": rep.converged,
        "monotone": monotone,
        "final_min_dJ": num(last.min_dj),
    });
    Ok(Output {
        command: "shape-descent".into(),
        files: vec![("descent.csv".into(), rep.csv()), ("final_mesh.txt".into(), final_mesh.to_text())],
        line: format!(
            "shape-descent: J {:.6e} -> {:.6e} ({:.1}% decrease) in {} steps, converged={}",
            first.cost,
            last.cost,
            100.0 * decrease,
            rep.meshes.len() - 1,
            rep.converged
        ),
        summary,
    })
}

/// Mirror images of a catalog, for symmetry checks.
pub fn mirrored_catalog(dirs: &[Direction]) -> Vec<Direction> {
    dirs.iter().map(mirrored).collect()
}
