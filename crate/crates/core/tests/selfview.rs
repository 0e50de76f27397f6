use pcomplete::selfview::{
    framing_fov_deg, jitter_viewpoints, orthogonal_viewpoints, project_all, read_depth, render_depth, write_depth, Viewpoint,
};
use pcomplete::PointCloud;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64, half: f64) -> PointCloud<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| r.gen_range(-half..half))).collect()).unwrap()
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[test]
fn orthogonal_viewpoints_at_profile_distances() {
    for d in [0.7, 1.5] {
        let views = orthogonal_viewpoints(d);
        assert_eq!(views.len(), 3);
        for v in &views {
            assert!((norm(v.position) - d).abs() < 1e-15);
            assert_eq!(v.look_at, [0.0; 3]);
            v.basis().unwrap();
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (views[i].position, views[j].position);
                assert_eq!(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], 0.0);
            }
        }
    }
}

#[test]
fn origin_point_lands_on_principal_pixel() {
    let cloud = PointCloud::<f64>::from_f64(&[[0.0; 3]]).unwrap();
    let view = Viewpoint {
        position: [0.0, 0.0, 0.7],
        look_at: [0.0; 3],
        up: [1.0, 0.0, 0.0],
    };
    let map = render_depth(&cloud, &view, 224, framing_fov_deg(0.7, 0.5)).unwrap();
    assert_eq!(map.at(112, 112), 0.7);
    assert_eq!(map.occupied(), 1);
}

#[test]
fn z_buffer_keeps_nearest_on_a_ray() {
    let view = orthogonal_viewpoints(0.7)[2];
    // camera on +z: depths 0.3 and 0.6 along the optical axis
    let cloud = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.1], [0.0, 0.0, 0.4]]).unwrap();
    let map = render_depth(&cloud, &view, 64, 60.0).unwrap();
    assert!((map.at(32, 32) - 0.3).abs() < 1e-12);
    assert_eq!(map.occupied(), 1);
}

#[test]
fn degenerate_views_and_bad_arguments_fail() {
    let cloud = PointCloud::<f64>::from_f64(&[[0.0; 3]]).unwrap();
    let parallel = Viewpoint {
        position: [0.0, 0.0, 1.0],
        look_at: [0.0; 3],
        up: [0.0, 0.0, 1.0],
    };
    assert!(render_depth(&cloud, &parallel, 32, 60.0).is_err());
    let same = Viewpoint {
        position: [0.0; 3],
        look_at: [0.0; 3],
        up: [0.0, 0.0, 1.0],
    };
    assert!(render_depth(&cloud, &same, 32, 60.0).is_err());
    let ok = orthogonal_viewpoints(0.7)[0];
    assert!(render_depth(&cloud, &ok, 4, 60.0).is_err());
    assert!(render_depth(&cloud, &ok, 32, 180.0).is_err());
}

#[test]
fn project_all_shapes() {
    let cloud = random_cloud(300, 1, 0.5);
    for (res, d) in [(224, 0.7), (64, 0.7)] {
        let set = project_all(&cloud, &orthogonal_viewpoints(d), res, framing_fov_deg(d, 0.5)).unwrap();
        assert_eq!(set.depth_tensor().unwrap().shape(), &[3, 1, res, res]);
        assert_eq!(set.positions().shape(), &[3, 3]);
        assert!(set.maps.iter().all(|m| m.occupied() <= 300));
    }
}

/// Applies an axis permutation with sign flips.
fn rotate(p: [f64; 3], perm: [usize; 3], sign: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| sign[i] * p[perm[i]])
}

#[test]
fn permutation_rotation_is_bit_identical() {
    let cloud = random_cloud(500, 2, 0.5);
    let fov = framing_fov_deg(0.7, 0.5);
    // proper rotations: cyclic permutations, and a 90 degree turn about z
    let rots = [([1, 2, 0], [1.0, 1.0, 1.0]), ([2, 0, 1], [1.0, 1.0, 1.0]), ([1, 0, 2], [-1.0, 1.0, 1.0])];
    for view in orthogonal_viewpoints(0.7) {
        let base = render_depth(&cloud, &view, 64, fov).unwrap();
        for (perm, sign) in rots {
            let rc = cloud.map(|p| rotate(p, perm, sign));
            let rv = Viewpoint {
                position: rotate(view.position, perm, sign),
                look_at: view.look_at,
                up: rotate(view.up, perm, sign),
            };
            let m = render_depth(&rc, &rv, 64, fov).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&m.depth), bits(&base.depth));
        }
    }
}

#[test]
fn depth_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cloud: PointCloud<f32> = random_cloud(400, 3, 0.5).cast();
    let view = orthogonal_viewpoints(0.7f32)[1];
    let map = render_depth(&cloud, &view, 32, 70.0).unwrap();
    let stem = dir.path().join("v1");
    write_depth(&stem, &map, &view, 70.0).unwrap();
    let (back, bview, fov) = read_depth(&stem).unwrap();
    assert_eq!(
        back.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        map.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!((back.width, back.height), (32, 32));
    assert_eq!(bview, view);
    assert_eq!(fov, 70.0);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v1.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["background"], 0.0);
    assert_eq!(meta["look_at"], serde_json::json!([0.0, 0.0, 0.0]));
}

#[test]
fn jitter_is_bounded() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let views = orthogonal_viewpoints(0.7);
    for _ in 0..50 {
        for (j, v) in jitter_viewpoints(&views, 10.0, 0.1, &mut r).iter().zip(&views) {
            let d = norm(j.position);
            assert!((d - 0.7).abs() <= 0.1 + 1e-12);
            let cos = (0..3).map(|i| j.position[i] * v.position[i]).sum::<f64>() / (d * 0.7);
            assert!(cos >= 10f64.to_radians().cos() - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn depth_bounded_by_distance_and_radius(seed in 0u64..1000, n in 1usize..300) {
        let cloud = random_cloud(n, seed, 0.5);
        let r = cloud.radius();
        for view in orthogonal_viewpoints(0.7) {
            let m = render_depth(&cloud, &view, 48, framing_fov_deg(0.7, 0.5)).unwrap();
            prop_assert!(m.occupied() <= n);
            for &d in m.depth.iter().filter(|&&d| d > 0.0) {
                prop_assert!(d <= 0.7 + r + 1e-12 && d >= 0.7 - r - 1e-12);
            }
        }
    }
}
