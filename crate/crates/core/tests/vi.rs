use std::sync::Arc;

use proptest::prelude::*;
use vishape::fem::{assemble_bilinear, ExprDensity, MassKind, Transport, ZeroDensity};
use vishape::linalg::{solve_spd, SparseMatrix};
use vishape::mesh::unit_square_mesh;
use vishape::vi::{
    brute_force, brute_force_vi, kkt_residuals, solve_box, solve_obstacle_semilinear, Constraint, Obstacle,
    ObstacleProblem, Quadratic, SolverOptions,
};

fn stiffness(n: usize, lambda: f64) -> SparseMatrix {
    let mesh = unit_square_mesh(n).unwrap();
    assemble_bilinear(&mesh, &Transport::identity(&mesh), lambda, MassKind::Consistent).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn box_solver_matches_enumeration(
        lambda in 0.2..3.0_f64,
        b in prop::collection::vec(-2.0..2.0_f64, 16),
        bounds in prop::collection::vec(prop::option::of(-0.5..0.5_f64), 16),
    ) {
        let op = Quadratic { h: stiffness(3, lambda), b };
        let cons: Vec<Constraint> = bounds.iter().map(|g| g.map_or(Constraint::Free, Constraint::Upper)).collect();
        let pdas = solve_box(&op, &cons, &SolverOptions::new(1e-12)).unwrap();
        let enumerated = brute_force(&op, &cons).unwrap();
        prop_assert!(max_diff(&pdas.state, &enumerated.state) <= 1e-9);
        prop_assert!(pdas.residuals.within(1e-8), "{:?}", pdas.residuals);
        let r = kkt_residuals(&op, &cons, &enumerated.state, &enumerated.multiplier).unwrap();
        prop_assert!(r.within(1e-8), "{:?}", r);
    }

    #[test]
    fn semilinear_problems_are_complementary(
        a in 0.0..2.0_f64,
        c in 1.0..10.0_f64,
        cx in 0.2..0.8_f64,
        cy in 0.2..0.8_f64,
        psi in prop::array::uniform3(-0.3..0.3_f64),
        lambda in 0.5..2.0_f64,
    ) {
        let density = format!("{a}*u^3 + u - {c}*exp(-8*((x-{cx})^2 + (y-{cy})^2))");
        let obstacle = format!("{} + {}*x + {}*y", 0.2 + psi[0], psi[1], psi[2]);
        let p = ObstacleProblem::new(
            unit_square_mesh(6).unwrap(),
            lambda,
            Arc::new(ExprDensity::new(&density).unwrap()),
            Obstacle::Function(Arc::new(vishape::functions::ExprScalar::new(&obstacle).unwrap())),
        )
        .unwrap();
        let s = solve_obstacle_semilinear(&p, 1e-11).unwrap();
        prop_assert!(s.residuals.within(1e-8), "{:?}", s.residuals);
        prop_assert!(s.state.iter().zip(&s.obstacle).all(|(u, g)| *u <= g + 1e-8));
        prop_assert!(s.multiplier.iter().all(|&m| m >= -1e-8));
    }
}

#[test]
fn unconstrained_problem_is_a_linear_solve() {
    let mesh = unit_square_mesh(8).unwrap();
    let f = |p: [f64; 2]| 1.0 + p[0] - 2.0 * p[1] * p[1];
    let p = ObstacleProblem::new(
        mesh.clone(),
        1.5,
        Arc::new(ExprDensity::new("u - (1 + x - 2*y^2)").unwrap()),
        Obstacle::None,
    )
    .unwrap();
    let s = solve_obstacle_semilinear(&p, 1e-12).unwrap();
    // Vertex quadrature of the density adds the lumped mass to the matrix.
    let m = mesh.lumped_mass();
    let mut k = assemble_bilinear(&mesh, &Transport::identity(&mesh), 1.5, MassKind::Consistent).unwrap();
    k.add_diagonal(&m);
    let rhs: Vec<f64> = mesh.vertices().iter().zip(&m).map(|(&q, w)| w * f(q)).collect();
    let want = solve_spd(&k, &rhs).unwrap();
    assert!(max_diff(&s.state, &want) < 1e-10);
}

#[test]
fn semilinear_enumeration_agrees() {
    let mesh = unit_square_mesh(3).unwrap();
    let psi: Vec<f64> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, q)| if i % 2 == 0 { 0.1 + 0.2 * q[0] } else { f64::INFINITY })
        .collect();
    let p = ObstacleProblem::new(
        mesh,
        1.0,
        Arc::new(ExprDensity::new("u^3 - 4*exp(-5*((x-0.4)^2 + (y-0.6)^2))").unwrap()),
        Obstacle::Nodal(psi),
    )
    .unwrap();
    let a = solve_obstacle_semilinear(&p, 1e-12).unwrap();
    let b = brute_force_vi(&p).unwrap();
    assert!(max_diff(&a.state, &b.state) <= 1e-9);
    assert!(a.active_set(1e-9).iter().any(|&x| x));
}

#[test]
fn invalid_inputs_are_rejected() {
    let mesh = unit_square_mesh(2).unwrap();
    assert!(ObstacleProblem::new(mesh.clone(), 0.0, Arc::new(ZeroDensity), Obstacle::None).is_err());
    assert!(ObstacleProblem::new(mesh.clone(), 1.0, Arc::new(ZeroDensity), Obstacle::Nodal(vec![0.0; 3])).is_err());
    let decreasing =
        ObstacleProblem::new(mesh, 1.0, Arc::new(ExprDensity::new("-u^3").unwrap()), Obstacle::None).unwrap();
    assert!(solve_obstacle_semilinear(&decreasing, 1e-10).is_err());
}
