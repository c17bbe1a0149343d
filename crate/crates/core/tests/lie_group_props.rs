use dynsplat::geometry::{
    project, rot6d_to_matrix, se3_exp, se3_interpolate, se3_log, unproject, CameraIntrinsics, Pixel, Rotation6D,
    SE3Transform,
};
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

fn config() -> Config {
    Config {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x5e3),
        failure_persistence: None,
        ..Config::default()
    }
}

fn twist(max_angle: f64, max_trans: f64) -> impl Strategy<Value = SE3Transform> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0..max_angle,
        prop::array::uniform3(-max_trans..max_trans),
    )
        .prop_filter("axis", |(a, _, _)| Vector3::from(*a).norm() > 1e-3)
        .prop_map(|(a, angle, v)| {
            let w = Vector3::from(a).normalize() * angle;
            se3_exp(&Vector6::new(v[0], v[1], v[2], w.x, w.y, w.z))
        })
}

fn close(a: &SE3Transform, b: &SE3Transform) -> f64 {
    (a.rotation() - b.rotation()).amax().max((a.translation() - b.translation()).amax())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn compose_is_associative(a in twist(3.0, 3.0), b in twist(3.0, 3.0), c in twist(3.0, 3.0)) {
        prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) < 1e-9);
    }

    #[test]
    fn identity_and_inverse(a in twist(3.0, 3.0)) {
        let id = SE3Transform::identity();
        prop_assert!(close(&a.compose(&id), &a) < 1e-9);
        prop_assert!(close(&id.compose(&a), &a) < 1e-9);
        prop_assert!(close(&a.compose(&a.inverse()), &id) < 1e-9);
        prop_assert!(close(&a.inverse().compose(&a), &id) < 1e-9);
    }

    #[test]
    fn action_is_an_isometry(a in twist(3.0, 3.0), p in prop::array::uniform3(-5.0f64..5.0), q in prop::array::uniform3(-5.0f64..5.0)) {
        let (p, q) = (Vector3::from(p), Vector3::from(q));
        prop_assert!(((a.apply(&p) - a.apply(&q)).norm() - (p - q).norm()).abs() < 1e-9);
    }

    #[test]
    fn exp_log_round_trip(a in twist(3.0, 3.0)) {
        let back = se3_exp(&se3_log(&a).unwrap());
        prop_assert!(close(&back, &a) < 1e-8);
    }

    #[test]
    fn rot6d_round_trip(a in twist(3.1, 1.0)) {
        let r = a.rotation();
        let m = rot6d_to_matrix(&Rotation6D::from_matrix(r)).unwrap();
        prop_assert!((m - r).amax() < 1e-9);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn interpolation_is_a_subgroup(t in twist(2.0, 3.0), x in 0.0f64..1.0, frac in 0.0f64..1.0) {
        let y = frac * (1.0 - x);
        let lhs = se3_interpolate(&t, x + y).unwrap();
        let rhs = se3_interpolate(&t, x).unwrap().compose(&se3_interpolate(&t, y).unwrap());
        prop_assert!(close(&lhs, &rhs) < 1e-7);
        let half = se3_interpolate(&t, 0.5).unwrap();
        prop_assert!(close(&half.compose(&half), &t) < 1e-8);
        prop_assert!(close(&se3_interpolate(&t, 1.0).unwrap(), &t) < 1e-8);
    }

    #[test]
    fn unproject_then_project(x in 0.0f64..63.0, y in 0.0f64..47.0, d in 0.1f64..50.0) {
        let k = CameraIntrinsics::new(60.0, 55.0, 31.5, 23.5, 64, 48).unwrap();
        let p = Pixel::new(x, y);
        let back = project(&k, &unproject(&k, &p, d).unwrap()).unwrap();
        prop_assert!((back - p).norm() < 1e-9);
    }
}
