use proptest::prelude::*;
use vishape::fem::{assemble_bilinear, MassKind, Transport};
use vishape::flow::{BumpField, BumpKind};
use vishape::linalg::{dot, solve_spd, SparseMatrix};
use vishape::mesh::{disk_mesh, unit_square_mesh};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stiffness_integrates_affine_gradients(
        n in 1usize..8, a in -2.0..2.0_f64, b in -2.0..2.0_f64, c in -2.0..2.0_f64,
    ) {
        let mesh = unit_square_mesh(n).unwrap();
        let k = assemble_bilinear(&mesh, &Transport::identity(&mesh), 0.0, MassKind::Consistent).unwrap();
        let u = mesh.interpolate(|p| a + b * p[0] + c * p[1]);
        prop_assert!((k.form(&u, &u) - (b * b + c * c)).abs() <= 1e-10);
        let ones = vec![1.0; mesh.n_vertices()];
        prop_assert!(k.mul_vec(&ones).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn mass_integrates_constants(n in 1usize..8, lambda in 0.1..5.0_f64) {
        let mesh = unit_square_mesh(n).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        for kind in [MassKind::Consistent, MassKind::Lumped] {
            let k = assemble_bilinear(&mesh, &Transport::identity(&mesh), lambda, kind).unwrap();
            prop_assert!((k.form(&ones, &ones) - lambda).abs() <= 1e-12);
            prop_assert!(k.symmetry_defect() <= 1e-14);
        }
    }

    #[test]
    fn transported_area_is_the_image_area(d in prop::array::uniform2(-0.3..0.3_f64), t in 0.0..0.2_f64) {
        // ∫ξ over Ω is |Φ_t(Ω)|; a bump inside Ω leaves the boundary fixed.
        let mesh = unit_square_mesh(16).unwrap();
        let x = BumpField::new([0.5, 0.5], 0.3, BumpKind::Translation(d)).unwrap();
        let tr = Transport::new(&mesh, &x, t).unwrap();
        let k = assemble_bilinear(&mesh, &tr, 1.0, MassKind::Lumped).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        prop_assert!((k.form(&ones, &ones) - 1.0).abs() <= 5e-3);
    }

    #[test]
    fn cholesky_solves_spd_systems(
        diag in prop::collection::vec(0.5..3.0_f64, 12),
        off in prop::collection::vec(-0.2..0.2_f64, 11),
        x in prop::collection::vec(-1.0..1.0_f64, 12),
    ) {
        let mut trip: Vec<(usize, usize, f64)> = diag.iter().enumerate().map(|(i, &d)| (i, i, d)).collect();
        for (i, &o) in off.iter().enumerate() {
            trip.push((i, i + 1, o));
            trip.push((i + 1, i, o));
        }
        let a = SparseMatrix::from_triplets(12, trip);
        let b = a.mul_vec(&x);
        let y = solve_spd(&a, &b).unwrap();
        prop_assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-12));
    }
}

#[test]
fn indefinite_matrix_is_rejected() {
    let a = SparseMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
    assert!(solve_spd(&a, &[1.0, 1.0]).is_err());
}

#[test]
fn refinement_keeps_the_domain() {
    let mesh = unit_square_mesh(4).unwrap();
    let fine = mesh.refine_uniform();
    assert_eq!(fine.n_vertices(), 81);
    assert_eq!(fine.n_triangles(), 4 * mesh.n_triangles());
    assert!((fine.total_area() - 1.0).abs() < 1e-14);
    let disk = disk_mesh(16, [0.5, 0.5], 0.5).unwrap();
    let area = disk.total_area();
    assert!((area - std::f64::consts::PI * 0.25).abs() < 0.02, "{area}");
    let ones = vec![1.0; disk.n_vertices()];
    assert!((dot(&disk.lumped_mass(), &ones) - area).abs() < 1e-12);
}
