//! lp-ball projection and image clipping invariants.

mod common;

use common::lpcheck::*;
use consistency_at::lp::{project_slice, sample_norms};
use consistency_at::{clip_to_image, project_lp, RngState};
use ndarray::Array4;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn ten_thousand_points_per_norm() {
    sweep_norms(10_000);
}

#[test]
fn l1_matches_grid_search_up_to_five_dimensions() {
    l1_grid_oracle();
}

#[test]
fn l1_matches_bisection_up_to_five_dimensions() {
    l1_bisection_agreement();
}

#[test]
fn batched_projection_is_per_sample() {
    let mut g = RngState::new(4).generator();
    let delta = Array4::from_shape_fn((5, 3, 4, 4), |_| g.gen_range(-1.0f64..1.0));
    for norm in NORMS {
        let out = project_lp(&delta, norm, 0.5).unwrap();
        for (i, n) in sample_norms(&out, norm).into_iter().enumerate() {
            assert!(n <= 0.5 + 1e-12);
            let mut one = delta.index_axis(ndarray::Axis(0), i).iter().copied().collect::<Vec<_>>();
            project_slice(&mut one, norm, 0.5);
            let got: Vec<f64> = out.index_axis(ndarray::Axis(0), i).iter().copied().collect();
            assert_eq!(got, one);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn projection_idempotent_and_bounded(
        v in prop::collection::vec(-5.0f64..5.0, 1..64),
        eps in 0.001f64..3.0,
        which in 0usize..3,
    ) {
        let norm = NORMS[which];
        let mut p = v.clone();
        project_slice(&mut p, norm, eps);
        prop_assert!(norm.of(&p) <= eps * (1.0 + 1e-9) + 1e-12);
        let mut q = p.clone();
        project_slice(&mut q, norm, eps);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn clip_to_image_is_idempotent(v in prop::collection::vec(-2.0f64..3.0, 12)) {
        let x = Array4::from_shape_vec((1, 3, 2, 2), v).unwrap();
        let once = clip_to_image(&x);
        prop_assert!(once.data().iter().all(|p| (0.0..=1.0).contains(p)));
        let twice = clip_to_image(once.data());
        prop_assert_eq!(once, twice);
    }
}
