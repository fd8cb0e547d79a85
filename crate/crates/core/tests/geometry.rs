use posefield::diffgeo::{
    build_cotan_laplacian, build_gradient, build_mass, jacobian_from_vertices, JacobianField,
};
use posefield::mesh::{format_obj, parse_obj, TriMesh, Vec3};
use posefield::poisson::PoissonSystem;
use posefield::synth::{gen_pose, PoseParams, WormSpec};
use proptest::prelude::*;

fn worm() -> impl Strategy<Value = TriMesh> {
    (3usize..9, 6usize..14, 0.5f64..4.0, 0.05f64..0.6)
        .prop_flat_map(|(s, r, len, rad)| {
            let j = s - 2;
            (
                Just(WormSpec::uniform(s, r, len, rad)),
                prop::collection::vec(-1.2f64..1.2, j),
                prop::collection::vec(-0.6f64..0.6, j),
            )
        })
        .prop_map(|(spec, bend, twist)| gen_pose(&spec, &PoseParams { bend, twist }).unwrap())
}

fn rotation(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn obj_text_round_trips_exactly(mesh in worm()) {
        let back = parse_obj(&format_obj(&mesh)).unwrap();
        prop_assert_eq!(back, mesh);
    }

    #[test]
    fn laplacian_is_gradient_stiffness(mesh in worm()) {
        let l = build_cotan_laplacian(&mesh);
        let g = build_gradient(&mesh).matrix.to_dense();
        let area = build_mass(&mesh).diagonal;
        let n = mesh.vertex_count();
        let scale = l.max_abs();
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..g.len()).map(|r| g[r][i] * area[r] * g[r][j]).sum();
                prop_assert!((l.get(i, j) - s).abs() <= 1e-10 * scale);
                prop_assert_eq!(l.get(i, j), l.get(j, i));
            }
        }
        let ones = l.mul_dense(&vec![1.0; n], 1).unwrap();
        prop_assert!(ones.iter().all(|x| x.abs() <= 1e-12 * scale));
    }

    #[test]
    fn rotated_copy_has_the_rotation_as_jacobian(mesh in worm(), axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-2);
        let r = rotation(axis, angle);
        let rotated: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .map(|v| [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]))
            .collect();
        let op = build_gradient(&mesh);
        let own = jacobian_from_vertices(&op, mesh.vertices()).unwrap();
        let jac = jacobian_from_vertices(&op, &rotated).unwrap();
        // on the template itself J is the tangent projector, so the rotated
        // copy gives R times it
        for (jf, pf) in jac.0.iter().zip(&own.0) {
            for i in 0..3 {
                for j in 0..3 {
                    let expect: f64 = (0..3).map(|k| r[i][k] * pf[k][j]).sum();
                    prop_assert!((jf[i][j] - expect).abs() < 1e-9);
                }
            }
        }
        let system = PoissonSystem::build(&mesh, 0, rotated[0]).unwrap();
        let solved = system.solve(&jac).unwrap();
        let diag = mesh.bbox_diag();
        for (a, b) in solved.iter().zip(&rotated) {
            prop_assert!((0..3).all(|k| (a[k] - b[k]).abs() <= 1e-8 * diag));
        }
    }

    #[test]
    fn solve_is_adjoint_and_translation_covariant(mesh in worm(), seed in 0u64..1000) {
        let system = PoissonSystem::for_template(&mesh).unwrap();
        let (nv, nf) = (mesh.vertex_count(), mesh.face_count());
        let wave = |i: usize, k: u64| ((i as f64 + 1.0) * (seed + k) as f64 * 0.618).sin();
        let x: Vec<f64> = (0..9 * nf).map(|i| wave(i, 1)).collect();
        let y: Vec<f64> = (0..3 * nv).map(|i| wave(i, 2)).collect();
        let sx = system.solve_linear_flat(&x).unwrap();
        let sty = system.solve_adjoint_flat(&y).unwrap();
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));

        let jac = JacobianField::from_flat(&x);
        let base = system.solve(&jac).unwrap();
        let (pin, at) = system.pin();
        let shift = [0.5, -2.0, 1.25];
        let moved = system
            .with_pin_position([at[0] + shift[0], at[1] + shift[1], at[2] + shift[2]])
            .solve(&jac)
            .unwrap();
        prop_assert_eq!(moved[pin], [at[0] + shift[0], at[1] + shift[1], at[2] + shift[2]]);
        for (a, b) in moved.iter().zip(&base) {
            prop_assert!((0..3).all(|k| (a[k] - b[k] - shift[k]).abs() < 1e-9));
        }
        prop_assert_eq!(system.factorization_count(), 1);
    }
}
