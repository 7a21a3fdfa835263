use didigan_core::manifold::ClassLabel;
use didigan_core::morphometry::*;
use didigan_core::phantom::{render, sample_anatomy};
use ndarray::Array2;
use proptest::prelude::*;

fn textured(n: usize, shift_y: f64) -> Array2<f64> {
    let t = std::f64::consts::TAU;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 + shift_y, j as f64);
        0.4 * (t * y / 17.0).sin() * (t * x / 23.0).cos() + 0.3 * (t * (x + 0.5 * y) / 13.0).sin() + 0.2 * (t * (y - x) / 29.0).cos()
    })
}

#[test]
fn identity_warp_has_unit_determinant() {
    let j = jacobian_map(&WarpField::identity(32, 32));
    assert!(j.det.iter().all(|d| (d - 1.0).abs() <= 1e-12));
    assert!(j.log_det.iter().all(|l| l.abs() <= 1e-12));
    assert_eq!(j.n_folded(), 0);
}

#[test]
fn uniform_scaling_determinant() {
    let j = jacobian_map(&WarpField::from_map(32, 32, |y, x| (1.1 * y, 1.1 * x)));
    for i in 1..31 {
        for k in 1..31 {
            assert!((j.det[[i, k]] - 1.21).abs() < 1e-6);
        }
    }
}

#[test]
fn rotation_preserves_area() {
    let (s, c) = 0.3f64.sin_cos();
    let j = jacobian_map(&WarpField::from_map(32, 32, |y, x| {
        let (y, x) = (y - 16.0, x - 16.0);
        (c * y - s * x + 16.0, s * y + c * x + 16.0)
    }));
    for i in 1..31 {
        for k in 1..31 {
            assert!((j.det[[i, k]] - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn shear_determinant_is_one() {
    let j = jacobian_map(&WarpField::from_map(24, 24, |y, x| (y + 0.2 * x, x)));
    assert!(j.det.iter().all(|d| (d - 1.0).abs() < 1e-3));
}

#[test]
fn folding_is_flagged() {
    let j = jacobian_map(&WarpField::from_map(16, 16, |y, x| (-y, x)));
    assert_eq!(j.n_folded(), 256);
    assert!(j.log_det.iter().all(|l| l.is_nan()));
}

#[test]
fn registration_recovers_translation() {
    let fixed = textured(64, 0.0);
    let moving = textured(64, 3.0);
    let r = register(&fixed, &moving, &DemonsConfig::default()).unwrap();
    // Interior mean; the clamped border cannot express a translation.
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for i in 8..56 {
        for j in 8..56 {
            sy += r.warp.uy[[i, j]];
            sx += r.warp.ux[[i, j]];
            n += 1.0;
        }
    }
    let (my, mx) = (sy / n, sx / n);
    assert!((my + 3.0).abs() < 0.5 && mx.abs() < 0.5, "mean displacement ({my}, {mx})");
    assert!(r.residual < r.initial_residual);
}

#[test]
fn identical_images_barely_move() {
    for seed in 0..3 {
        let x = render(&sample_anatomy(seed, 64).unwrap(), ClassLabel::CN, 64).unwrap().image;
        let r = register(&x, &x, &DemonsConfig::default()).unwrap();
        assert!(r.warp.mean_magnitude() < 0.05, "seed {seed}: {}", r.warp.mean_magnitude());
        assert!(r.converged);
    }
}

#[test]
fn dilated_ventricles_read_as_expansion() {
    let spec = sample_anatomy(4, 64).unwrap();
    let cn = render(&spec, ClassLabel::CN, 64).unwrap();
    let ad = render(&spec, ClassLabel::AD, 64).unwrap();
    let r = register(&cn.clean, &ad.clean, &DemonsConfig::default()).unwrap();
    let j = jacobian_map(&r.warp);
    let v = roi_change(&j, &cn.masks.ventricle, "ventricle").unwrap();
    let h = roi_change(&j, &cn.masks.hippocampus, "hippocampus").unwrap();
    assert!(v.mean_log_jac > 0.0, "{v:?}");
    assert!(h.mean_log_jac < 0.0, "{h:?}");
}

#[test]
fn swapping_images_negates_roi_change() {
    let spec = sample_anatomy(8, 64).unwrap();
    let cn = render(&spec, ClassLabel::CN, 64).unwrap();
    let mut small = spec.clone();
    small.effects.ventricle_expand = 0.1;
    small.effects.hippocampus_shrink = 0.0;
    small.effects.cortex_thin = 0.0;
    let ad = render(&small, ClassLabel::AD, 64).unwrap();
    let fwd = register(&cn.clean, &ad.clean, &DemonsConfig::default()).unwrap();
    let bwd = register(&ad.clean, &cn.clean, &DemonsConfig::default()).unwrap();
    // Union of both ventricle masks so the ROI is comparable in either direction.
    let roi = Array2::from_shape_fn((64, 64), |(i, k)| cn.masks.ventricle[[i, k]] || ad.masks.ventricle[[i, k]]);
    let a = roi_change(&jacobian_map(&fwd.warp), &roi, "v").unwrap().mean_log_jac;
    let b = roi_change(&jacobian_map(&bwd.warp), &roi, "v").unwrap().mean_log_jac;
    assert!(a > 0.0 && b < 0.0, "{a} {b}");
    assert!((a + b).abs() <= 0.2 * a.abs(), "forward {a}, backward {b}");
}

#[test]
fn roi_change_arithmetic() {
    let mk = |v: f64| JacobianMap { det: Array2::from_elem((4, 4), v.exp()), log_det: Array2::from_elem((4, 4), v), folding: Array2::from_elem((4, 4), false) };
    let roi = Array2::from_elem((4, 4), true);
    assert!((roi_change(&mk(1.29f64.ln()), &roi, "v").unwrap().pct_change - 29.0).abs() < 1e-9);
    assert!((roi_change(&mk(0.847f64.ln()), &roi, "h").unwrap().pct_change + 15.3).abs() < 1e-9);
    assert_eq!(roi_change(&mk(0.0), &roi, "z").unwrap().pct_change, 0.0);
    assert!(roi_change(&mk(0.0), &Array2::from_elem((4, 4), false), "e").is_err());
    assert!(roi_change(&mk(0.0), &Array2::from_elem((3, 4), true), "s").is_err());
}

#[test]
fn warp_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = WarpField::from_map(8, 8, |y, x| (y + 0.25, x - 0.5));
    w.fixed_id = "cn".into();
    w.moving_id = "ad".into();
    save_warp(&dir.path().join("w"), &w).unwrap();
    assert_eq!(load_warp(&dir.path().join("w")).unwrap(), w);
    save_jacobian(&dir.path().join("j"), &jacobian_map(&w)).unwrap();
}

#[test]
fn register_rejects_shape_mismatch() {
    assert!(register(&Array2::zeros((16, 16)), &Array2::zeros((16, 8)), &DemonsConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn affine_determinants_match(a in 0.7f64..1.3, b in -0.3f64..0.3, c in -0.3f64..0.3, d in 0.7f64..1.3) {
        let j = jacobian_map(&WarpField::from_map(16, 16, |y, x| (a * y + b * x, c * y + d * x)));
        let expect = a * d - b * c;
        for v in j.det.iter() {
            prop_assert!((v - expect).abs() < 1e-3);
        }
    }
}
