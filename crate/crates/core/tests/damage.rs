use std::sync::Arc;

use proptest::prelude::*;
use vishape::damage::{
    cost, default_catalog, derivative_check, eulerian_semiderivative, mirrored, run, sensitivity_chain, CostSpec,
    DamagePotential, DamageSpec,
};
use vishape::fem::ElasticityTensor;
use vishape::flow::{BumpField, BumpKind, Scaled, ZeroField};
use vishape::functions::{Constant, ExprScalar, ExprScalarTime, ExprVector};
use vishape::mesh::unit_square_mesh;

fn spec(n: usize, steps: usize, stretch: f64, beta: f64) -> DamageSpec {
    DamageSpec {
        mesh: unit_square_mesh(n).unwrap(),
        tau: 0.1,
        steps,
        tensor: ElasticityTensor::new(1.0, 1.0, 0.05, 0.1).unwrap(),
        potential: DamagePotential { beta, delta: 0.05 },
        load: Arc::new(ExprVector::new("0.5*t*(1 - 2*x)", "0.5*t*(1 - 2*y)").unwrap()),
        dirichlet: Arc::new(ExprVector::new(&format!("{stretch}*t*x"), &format!("{stretch}*t*y")).unwrap()),
        u0: Arc::new(ExprVector::zero()),
        v0: Arc::new(ExprVector::zero()),
        chi0: Arc::new(ExprScalar::new("1 - 0.3*exp(-20*((x-0.5)^2 + (y-0.5)^2))").unwrap()),
        tol: 1e-11,
    }
}

fn tracking(lambda_u: f64, lambda_chi: f64, chi_ref: &str) -> CostSpec {
    CostSpec {
        lambda_u,
        lambda_chi,
        u_ref: Arc::new(ExprVector::new("t*x", "t*y").unwrap()),
        chi_ref: Arc::new(ExprScalarTime::new(chi_ref).unwrap()),
    }
}

#[test]
fn constant_offset_cost() {
    // Undamaged, unloaded body stays at χ = 1; the cost is a lumped integral
    // of a constant over N steps.
    let mut s = spec(5, 3, 0.0, 0.0);
    s.load = Arc::new(ExprVector::zero());
    s.chi0 = Arc::new(Constant(1.0));
    let traj = run(&s).unwrap();
    let delta = 0.3;
    let c = CostSpec {
        lambda_u: 2.0,
        lambda_chi: 4.0,
        u_ref: Arc::new(ExprVector::zero()),
        chi_ref: Arc::new(ExprScalarTime::new(&format!("1 - {delta}")).unwrap()),
    };
    let want = 0.5 * 4.0 * 3.0 * delta * delta;
    assert!((cost(&traj, &c) - want).abs() < 1e-12);
    let same = CostSpec { lambda_chi: 0.0, ..c };
    assert_eq!(cost(&traj, &same), 0.0);
}

#[test]
fn zero_field_has_zero_derivative() {
    let s = spec(6, 2, 1.5, 0.05);
    let traj = run(&s).unwrap();
    let sens = sensitivity_chain(&s, &traj, &ZeroField).unwrap();
    assert_eq!(eulerian_semiderivative(&s.mesh, &traj, &sens, &tracking(1.0, 1.0, "1 - 0.5*t"), &ZeroField), 0.0);
}

#[test]
fn derivative_matches_difference_quotients() {
    let s = spec(6, 3, 1.5, 0.05);
    let x = BumpField::new([0.35, 0.65], 0.25, BumpKind::Translation([1.0, 0.0])).unwrap();
    let c = tracking(1.0, 1.0, "1 - 0.5*t");
    let check = derivative_check(&s, &c, &x, &[1e-2, 1e-3]).unwrap();
    assert!(check.dj != 0.0);
    assert!(check.errors[1] <= 1e-2 * (1.0 + check.dj.abs()), "{check:?}");
    assert!(check.errors[1] < check.errors[0]);
}

#[test]
fn symmetric_data_give_mirror_symmetric_derivatives() {
    let s = spec(6, 2, 1.5, 0.05);
    let c = tracking(1.0, 1.0, "1 - 0.5*t");
    let traj = run(&s).unwrap();
    let dirs = default_catalog(&s.mesh).unwrap();
    for d in dirs.iter().step_by(5) {
        let a = sensitivity_chain(&s, &traj, d.field.as_ref()).unwrap();
        let m = mirrored(d);
        let b = sensitivity_chain(&s, &traj, m.field.as_ref()).unwrap();
        let ja = eulerian_semiderivative(&s.mesh, &traj, &a, &c, d.field.as_ref());
        let jb = eulerian_semiderivative(&s.mesh, &traj, &b, &c, m.field.as_ref());
        assert!((ja - jb).abs() <= 1e-9 * (1.0 + ja.abs()), "{}: {ja} vs {jb}", d.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn damage_stays_monotone_and_dissipative(
        stretch in 0.0..3.0_f64, beta in 0.0..0.2_f64, steps in 1usize..5,
    ) {
        let traj = run(&spec(4, steps, stretch, beta)).unwrap();
        prop_assert!(traj.max_principle_ok(), "{}", traj.max_principle_violation());
        prop_assert!(traj.dissipation_ok(), "{}", traj.min_relative_slack());
        prop_assert_eq!(traj.states.len(), steps + 1);
    }

    #[test]
    fn derivative_is_positively_homogeneous(scale in 0.1..10.0_f64, dx in -1.0..1.0_f64, dy in -1.0..1.0_f64) {
        let s = spec(4, 2, 1.5, 0.05);
        let c = tracking(1.0, 1.0, "1 - 0.5*t");
        let traj = run(&s).unwrap();
        let x: vishape::flow::Field = Arc::new(BumpField::new([0.5, 0.5], 0.3, BumpKind::Translation([dx, dy])).unwrap());
        let xs = Scaled { field: x.clone(), factor: scale };
        let a = eulerian_semiderivative(&s.mesh, &traj, &sensitivity_chain(&s, &traj, x.as_ref()).unwrap(), &c, x.as_ref());
        let b = eulerian_semiderivative(&s.mesh, &traj, &sensitivity_chain(&s, &traj, &xs).unwrap(), &c, &xs);
        prop_assert!((b - scale * a).abs() <= 1e-8 * (scale * a).abs().max(1e-12));
    }
}
