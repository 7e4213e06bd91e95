//! Property tests for the set-arithmetic layer.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tube_mpc_core::ellipsoid::{Ellipsoid, SummandList};

fn shape_from(seed: [f64; 4], dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |i, j| seed[(i * dim + j) % 4].sin() * 0.9);
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

prop_compose! {
    fn arb_ellipsoid()(s in prop::array::uniform4(-3.0f64..3.0), r in 0.01f64..4.0) -> Ellipsoid {
        Ellipsoid::centered(shape_from(s, 2), r).unwrap()
    }
}

prop_compose! {
    fn arb_direction()(x in -5.0f64..5.0, y in -5.0f64..5.0) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }
}

proptest! {
    #[test]
    fn support_additive_under_minkowski_sum(e1 in arb_ellipsoid(), e2 in arb_ellipsoid(), c in arb_direction()) {
        let mut s = SummandList::new();
        s.push(DMatrix::identity(2, 2), e1.clone()).unwrap();
        s.push(DMatrix::identity(2, 2), e2.clone()).unwrap();
        let lhs = s.support(&c).unwrap();
        let rhs = e1.support(&c).unwrap() + e2.support(&c).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn support_symmetric_for_centered_sets(e in arb_ellipsoid(), c in arb_direction()) {
        let plus = e.support(&c).unwrap();
        let minus = e.support(&(-&c)).unwrap();
        prop_assert!((plus - minus).abs() <= 1e-12 * (1.0 + plus.abs()));
    }

    #[test]
    fn sampled_members_respect_support(e in arb_ellipsoid(), c in arb_direction(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = e.support(&c).unwrap();
        for _ in 0..100 {
            let x = e.sample_uniform(&mut rng);
            prop_assert!(c.dot(&x) <= h + 1e-9);
        }
    }

    #[test]
    fn image_summand_matches_explicit_transform(
        e in arb_ellipsoid(),
        m in prop::array::uniform4(-2.0f64..2.0),
        c in arb_direction(),
    ) {
        let mat = DMatrix::from_row_slice(2, 2, &m);
        // keep the map comfortably invertible
        prop_assume!(mat.determinant().abs() > 0.05);
        let mut s = SummandList::new();
        s.push(mat.clone(), e.clone()).unwrap();
        let via_summand = s.support(&c).unwrap();
        let explicit = Ellipsoid::centered(&mat * e.shape() * mat.transpose(), e.radius()).unwrap();
        let via_image = explicit.support(&c).unwrap();
        prop_assert!((via_summand - via_image).abs() <= 1e-9 * (1.0 + via_image.abs()));
    }

    #[test]
    fn bounding_box_contains_samples(e in arb_ellipsoid(), seed in 0u64..1000) {
        let b = e.min_bounding_box().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let x = e.sample_uniform(&mut rng);
            for i in 0..2 {
                prop_assert!(x[i].abs() <= b[i] + 1e-9);
            }
        }
    }
}
