use ddpet_core::metrics::{activity_error, evaluate, z_consistency};
use ddpet_core::prior::smooth_prior;
use ddpet_core::sampler::plan_substeps;
use ddpet_core::volume::{extract_window, Volume3D, DEFAULT_DOSE_BQ, DEFAULT_VOXEL_SIZE_MM};
use proptest::prelude::*;

fn volume(w: usize, s: usize, data: Vec<f32>) -> Volume3D {
    Volume3D::new(w, w, s, data, DEFAULT_VOXEL_SIZE_MM, DEFAULT_DOSE_BQ, 1.0).unwrap()
}

fn arb_volume() -> impl Strategy<Value = Volume3D> {
    (2usize..6, 2usize..6).prop_flat_map(|(w, s)| {
        prop::collection::vec(0.0f32..500.0, w * w * s).prop_map(move |d| volume(w, s, d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_strictly_decreasing_to_zero(num in 1usize..60, start in 1usize..1000, every in 1usize..8) {
        prop_assume!(num <= start);
        let plan = plan_substeps(num, start, every).unwrap();
        prop_assert_eq!(plan.len(), num);
        prop_assert_eq!(plan[0].t, start);
        prop_assert_eq!(plan[num - 1].t_prev, 0);
        for w in plan.windows(2) {
            prop_assert_eq!(w[0].t_prev, w[1].t);
        }
        for p in &plan {
            prop_assert!(p.t_prev < p.t);
        }
    }

    #[test]
    fn windows_clamp_and_stay_ordered(s in 1usize..12, center in 0usize..12, half in 0usize..6) {
        prop_assume!(center < s);
        let n = 2 * half + 1;
        prop_assume!(n < 2 * s);
        let vol = volume(1, s, (0..s).map(|z| z as f32).collect());
        let win = extract_window(&vol, center, n).unwrap();
        prop_assert_eq!(win.indices().len(), n);
        prop_assert_eq!(win.indices()[half], center);
        for w in win.indices().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (k, &i) in win.indices().iter().enumerate() {
            prop_assert!(i < s);
            prop_assert_eq!(win.channel(k)[0], i as f64);
        }
    }

    #[test]
    fn smoothing_preserves_total_activity(vol in arb_volume(), sigma in 0.5f64..6.0) {
        let out = smooth_prior(&vol, sigma).unwrap();
        prop_assert!(activity_error(&vol, &out).unwrap().abs() < 1e-4);
        prop_assert!(out.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn self_comparison_is_perfect(vol in arb_volume()) {
        prop_assume!(vol.data().iter().any(|v| *v > 0.0));
        let r = evaluate(&vol, &vol).unwrap();
        prop_assert_eq!(r.nrmse, 0.0);
        prop_assert_eq!(r.psnr, 300.0);
        prop_assert_eq!(r.activity_ratio, 1.0);
        prop_assert!(z_consistency(&vol).unwrap() >= 0.0);
    }
}
