use morphatlas::atlas::{shrink_velocity, update_atlas, Cohort};
use morphatlas::grid::{compose_maps, jacobian_determinant, warp_image};
use morphatlas::io::{read_scalar, read_vector, write_scalar, write_vector};
use morphatlas::registration::ncc;
use morphatlas::{DeformationPair, Field, GridShape, Image, MetricOperator, MetricParams, NormVariant};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = GridShape> {
    prop_oneof![
        (4usize..10, 4usize..10).prop_map(|(a, b)| GridShape::new(&[a, b]).unwrap()),
        (4usize..7, 4usize..7, 4usize..7).prop_map(|(a, b, c)| GridShape::new(&[a, b, c]).unwrap()),
    ]
}

fn image(shape: GridShape, lo: f64, hi: f64) -> impl Strategy<Value = Image> {
    prop::collection::vec(lo..hi, shape.len()).prop_map(move |v| Image::new(shape.clone(), v).unwrap())
}

fn field(shape: GridShape, amp: f64) -> impl Strategy<Value = Field> {
    let d = shape.ndim();
    prop::collection::vec(prop::collection::vec(-amp..amp, shape.len()), d)
        .prop_map(move |c| Field::new(shape.clone(), c).unwrap())
}

fn image_any() -> impl Strategy<Value = Image> {
    shape_strategy().prop_flat_map(|s| image(s, -5.0, 5.0))
}

fn field_any(amp: f64) -> impl Strategy<Value = Field> {
    shape_strategy().prop_flat_map(move |s| field(s, amp))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rawf32_roundtrip_is_lossless_in_f32(img in image_any()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rawf32");
        let img32 = img.cast::<f32>();
        write_scalar(&img32, &p).unwrap();
        prop_assert_eq!(read_scalar::<f32>(&p).unwrap(), img32);
    }

    #[test]
    fn nifti_roundtrip_is_lossless_in_f32(v in field_any(3.0)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v32 = v.cast::<f32>();
        write_vector(&v32, &p).unwrap();
        prop_assert_eq!(read_vector::<f32>(&p).unwrap(), v32);
    }

    #[test]
    fn shrinkage_weights_are_complementary(g in field_any(10.0), lambda in 0.0f64..1e3) {
        let a = shrink_velocity(&g, lambda);
        let b = shrink_velocity(&g, 1.0 / lambda.max(1e-9));
        let sum = a.add(&b).unwrap();
        prop_assert!(sum.max_abs_diff(&g) <= 1e-9 * g.max_abs().max(1.0));
        prop_assert!(a.max_abs() <= g.max_abs());
    }

    #[test]
    fn ncc_is_symmetric_and_affine_invariant(
        (a, b) in shape_strategy().prop_flat_map(|s| (image(s.clone(), 0.0, 1.0), image(s, 0.0, 1.0))),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        let ab = ncc(&a, &b).unwrap();
        prop_assert!((ab - ncc(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - ncc(&a, &b.map(|x| scale * x + offset)).unwrap()).abs() < 1e-9);
        prop_assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composing_with_identity_is_a_no_op(u in field_any(4.0)) {
        let zero = Field::zeros(u.shape());
        prop_assert_eq!(compose_maps(&u, &zero).unwrap(), u.clone());
        prop_assert!(compose_maps(&zero, &u).unwrap().max_abs_diff(&u) == 0.0);
    }

    #[test]
    fn integer_shift_warp_is_a_roll((img, shift) in shape_strategy().prop_flat_map(|s| {
        let d = s.ndim();
        (image(s, -1.0, 1.0), prop::collection::vec(-3i64..4, d))
    })) {
        let shape = img.shape().clone();
        let disp: Vec<f64> = shift.iter().map(|&k| k as f64).collect();
        let moved = warp_image(&img, &Field::constant(&shape, &disp)).unwrap();
        let expect = Image::from_fn(&shape, |c| {
            let src: Vec<usize> = c
                .iter()
                .zip(&shift)
                .zip(shape.dims())
                .map(|((&x, &k), &n)| (x as i64 + k).rem_euclid(n as i64) as usize)
                .collect();
            img.get(&src)
        });
        prop_assert_eq!(moved, expect);
    }

    #[test]
    fn sine_mode_jacobian_on_its_crest(a in -0.4f64..0.4, b in -0.4f64..0.4) {
        let shape = GridShape::new(&[16, 16]).unwrap();
        let u = Field::from_fn(&shape, |axis, c| {
            let t = std::f64::consts::TAU * c[0] as f64 / 16.0;
            if axis == 0 { a * t.sin() * 16.0 / std::f64::consts::TAU } else { b * t.sin() }
        });
        let det = jacobian_determinant(&u);
        let h = std::f64::consts::TAU / 16.0;
        let expect = 1.0 + a * h.sin() / h;
        prop_assert!((det.get(&[0, 5]) - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_deformations_average_the_cohort(
        images in shape_strategy().prop_flat_map(|s| prop::collection::vec(image(s, -1.0, 1.0), 1..5))
    ) {
        let shape = images[0].shape().clone();
        let ids: Vec<DeformationPair<f64>> = images.iter().map(|_| DeformationPair::identity(&shape)).collect();
        let cohort = Cohort::numbered(images).unwrap();
        let atlas = update_atlas(&cohort, &ids).unwrap();
        prop_assert!(atlas.max_abs_diff(&cohort.voxelwise_mean()) < 1e-14);
    }

    #[test]
    fn sobolev_norm_is_nonnegative_and_quadratic(v in field_any(2.0), c in -3.0f64..3.0, lv in any::<bool>()) {
        let norm = if lv { NormVariant::LvV } else { NormVariant::LvLv };
        let op = MetricOperator::<f64>::new(v.shape(), MetricParams { norm, ..Default::default() }).unwrap();
        let n = op.sobolev_norm_sq(&v).unwrap();
        prop_assert!(n >= 0.0);
        let scaled = op.sobolev_norm_sq(&v.scaled(c)).unwrap();
        prop_assert!((scaled - c * c * n).abs() <= 1e-9 * n.max(1e-300));
    }
}
