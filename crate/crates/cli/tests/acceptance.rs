//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use vishape::fem::ExprDensity;
use vishape::flow::{integrate_flow, sample_grid, verify_flow_rates, ExprField};
use vishape::functions::ExprScalar;
use vishape::mesh::{unit_square_mesh, Rect};
use vishape::vi::{brute_force_vi, solve_obstacle_semilinear, Obstacle, ObstacleProblem};
use vishape_cli::{commands, demos, run_config, Config, Output};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn demo(name: &str) -> Result<Output, String> {
    let d = demos::find(name).ok_or_else(|| format!("missing demo {name}"))?;
    run_config(None, d.config).map(|(o, _)| o).map_err(|e| e.to_string())
}

fn flag(o: &Output, key: &str) -> bool {
    o.get(key) == Some(&Value::Bool(true))
}

fn number(o: &Output, key: &str) -> f64 {
    o.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> ObstacleProblem {
    let a = rng.gen_range(0.0..2.0);
    let c = rng.gen_range(1.0..12.0);
    let (cx, cy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let density = format!("{a}*u^3 + u - {c}*exp(-8*((x-{cx})^2 + (y-{cy})^2))");
    let obstacle =
        format!("{} + {}*x + {}*y", rng.gen_range(0.0..0.4), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    ObstacleProblem::new(
        unit_square_mesh(n).unwrap(),
        rng.gen_range(0.5..2.0),
        Arc::new(ExprDensity::new(&density).unwrap()),
        Obstacle::Function(Arc::new(ExprScalar::new(&obstacle).unwrap())),
    )
    .unwrap()
}

fn complementarity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    let mut active = 0;
    for k in 0..50 {
        let p = random_problem(&mut rng, if k % 2 == 0 { 8 } else { 16 });
        match solve_obstacle_semilinear(&p, 1e-11) {
            Ok(s) => {
                worst = worst.max(s.residuals.max());
                active += s.active_set(s.default_tol_act()).iter().any(|&a| a) as usize;
            }
            Err(e) => return verdict(false, format!("problem {k}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-8 && secs < 30.0,
        format!("50 problems, {active} with contact, worst residual {worst:.2e}, {secs:.1} s"),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for k in 0..50 {
        let base = random_problem(&mut rng, 4);
        let bounded = rng.gen_range(4..=14);
        let mut nodes: Vec<usize> = (0..base.mesh.n_vertices()).collect();
        for i in 0..bounded {
            let j = rng.gen_range(i..nodes.len());
            nodes.swap(i, j);
        }
        let mut psi = vec![f64::INFINITY; base.mesh.n_vertices()];
        for &i in &nodes[..bounded] {
            psi[i] = rng.gen_range(-0.1..0.5);
        }
        let p = ObstacleProblem { obstacle: Obstacle::Nodal(psi), ..base };
        let (a, b) = match (solve_obstacle_semilinear(&p, 1e-12), brute_force_vi(&p)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return verdict(false, format!("instance {k}: {e}")),
        };
        let d = a.state.iter().zip(&b.state).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    verdict(worst <= 1e-9, format!("50 instances, max |PDAS - enumeration| {worst:.2e}"))
}

fn lipschitz_rate() -> Verdict {
    let start = Instant::now();
    match demo("semilinear-lipschitz") {
        Ok(o) => {
            let slope = number(&o, "runs/0/slope");
            let secs = start.elapsed().as_secs_f64();
            verdict(slope >= 0.9 && secs < 60.0, format!("slope {slope:.4} (need 0.9), {secs:.1} s"))
        }
        Err(e) => verdict(false, e),
    }
}

fn p_laplace_rates() -> Verdict {
    let start = Instant::now();
    let o = match demo("p-laplace-rates") {
        Ok(o) => o,
        Err(e) => return verdict(false, e),
    };
    let runs = o.get("runs").and_then(Value::as_array).cloned().unwrap_or_default();
    let mut pass = !runs.is_empty();
    let mut parts = Vec::new();
    for r in &runs {
        let p = r["p"].as_f64().unwrap_or(f64::NAN);
        let slope = r["slope"].as_f64().unwrap_or(f64::NAN);
        let need = if p == 2.0 { 0.9 } else { r["exponent"].as_f64().unwrap_or(f64::NAN) - 0.1 };
        let ok = slope >= need && r["failures"].as_array().is_some_and(|f| f.is_empty());
        pass &= ok;
        parts.push(format!(
            "p={p}: slope {slope:.3} need {need:.3} (1/p {:.3}, 1/(p-1) {:.3})",
            r["exponent_energy"].as_f64().unwrap_or(f64::NAN),
            r["exponent_operator"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(pass && secs < 120.0, format!("{}; {secs:.1} s", parts.join("; ")))
}

fn material_derivative() -> Verdict {
    match demo("material-derivative") {
        Ok(o) => verdict(
            flag(&o, "pass"),
            format!(
                "errors {:?}, monotone {}, cone violation {:.1e}",
                o.get("errors_h1")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect::<Vec<_>>()),
                flag(&o, "monotone"),
                number(&o, "cone_violation")
            ),
        ),
        Err(e) => verdict(false, e),
    }
}

fn flow_lemmas() -> Verdict {
    let d = demos::find("semilinear-lipschitz").expect("shipped demo");
    let cfg = Config::parse(d.config).unwrap();
    let x = commands::field(&cfg, "field").unwrap();
    let ts: Vec<f64> = (3..10).map(|k| 0.5f64.powi(k)).collect();
    let rates = match verify_flow_rates(x.as_ref(), &ts, &sample_grid(x.support(), 16)) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let slopes: Vec<f64> = rates.slopes.iter().map(|s| s.unwrap_or(f64::NAN)).collect();
    let stretch = ExprField::new("x", "0", Rect::new(-1.0, 2.0, -1.0, 2.0).unwrap()).unwrap();
    let mut closed = 0.0_f64;
    for &t in &[0.1, 0.25, 0.5] {
        for p in sample_grid(Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(), 8) {
            let (img, jac) = integrate_flow(&stretch, t, p).unwrap();
            let e = f64::exp(t);
            let errs = [img[0] - e * p[0], img[1] - p[1], jac[0][0] - e, jac[0][1], jac[1][0], jac[1][1] - 1.0];
            closed = errs.iter().fold(closed, |m, v| m.max(v.abs()));
        }
    }
    verdict(
        slopes.iter().all(|&s| s >= 0.9) && closed <= 1e-9,
        format!("slopes {slopes:.3?}, closed-form error {closed:.1e}"),
    )
}

fn zero_shape_derivative() -> Verdict {
    match demo("static-shape-derivative") {
        Ok(o) => verdict(flag(&o, "pass"), format!("{} (need every ratio >= 1.7)", o.line)),
        Err(e) => verdict(false, e),
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "complementarity", complementarity()),
        (2, "oracle equivalence", oracle_equivalence()),
        (3, "Lipschitz rate", lipschitz_rate()),
        (4, "p-Laplace rates", p_laplace_rates()),
        (5, "material derivative", material_derivative()),
        (6, "flow expansions", flow_lemmas()),
        (7, "zero shape derivative", zero_shape_derivative()),
    ];

    let start = Instant::now();
    let dj = demo("damage-dj");
    let dj_secs = start.elapsed().as_secs_f64();
    results.push((
        8,
        "1-homogeneity",
        match &dj {
            Ok(o) => verdict(
                flag(o, "homogeneity_pass"),
                format!(
                    "max relative error {:.1e} over scales 0.5, 2, 10",
                    number(o, "homogeneity_max_relative_error")
                ),
            ),
            Err(e) => verdict(false, e.clone()),
        },
    ));
    results.push((
        9,
        "derivative vs differences",
        match &dj {
            Ok(o) => verdict(
                flag(o, "fd_pass") && dj_secs < 300.0,
                format!(
                    "dJ {:.6e}, |dJ - dQ/t| at t=1e-3 {:.2e} (bound {:.2e}), {dj_secs:.1} s",
                    number(o, "dj"),
                    number(o, "fd_error"),
                    number(o, "fd_bound")
                ),
            ),
            Err(e) => verdict(false, e.clone()),
        },
    ));

    let mut invariants = Vec::new();
    let mut all = true;
    for (name, out) in
        [("damage-run", demo("damage-run")), ("damage-dj", dj.clone()), ("shape-descent", demo("shape-descent"))]
    {
        match out {
            Ok(o) => {
                let ok = flag(&o, "max_principle_ok") && flag(&o, "dissipation_ok");
                all &= ok;
                invariants.push(format!(
                    "{name} {} (min slack {:.1e})",
                    if ok { "ok" } else { "violated" },
                    number(&o, "min_relative_slack")
                ));
            }
            Err(e) => {
                all = false;
                invariants.push(format!("{name}: {e}"));
            }
        }
    }
    results.push((10, "damage invariants", verdict(all, invariants.join(", "))));
    results.push((11, "determinism", determinism()));

    let mut failed = 0;
    for (k, name, v) in &results {
        println!("{} criterion {k:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn determinism() -> Verdict {
    let names = ["material-derivative", "damage-run"];
    let snapshot = |threads: usize| -> Result<Vec<(String, String)>, String> {
        vishape::parallel::set_threads(threads);
        let mut files = Vec::new();
        for n in names {
            let o = demo(n)?;
            files.push((format!("{n}/summary.json"), o.summary_json()));
            files.extend(o.files.into_iter().map(|(f, c)| (format!("{n}/{f}"), c)));
        }
        Ok(files)
    };
    let runs = [snapshot(1), snapshot(1), snapshot(4)];
    vishape::parallel::set_threads(1);
    match runs {
        [Ok(a), Ok(b), Ok(c)] => {
            let same = a == b && a == c;
            verdict(same, format!("{} files identical over 2 runs and 1 vs 4 threads: {same}", a.len()))
        }
        _ => verdict(false, "a run failed"),
    }
}
