use grpg_core::config::LossWeights;
use grpg_core::geometry::{masks_from_ratios, RegionLayout};
use grpg_core::tensor::Tensor;
use grpg_core::training::{alpha_loss, alpha_target, diversity_loss, lambda_alpha_schedule, rank_loss, rank_margin};
use proptest::prelude::*;

fn tensor(shape: [usize; 3]) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, shape.iter().product::<usize>())
        .prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

proptest! {
    #[test]
    fn margin_stays_in_its_clip(delta in -1.0f64..10.0, dbar in 0.01f64..2.0) {
        let m = rank_margin(delta, dbar, 0.05).unwrap();
        prop_assert!((0.005 - 1e-15..=0.15 + 1e-15).contains(&m));
    }

    #[test]
    fn rank_loss_is_a_hinge(z in tensor([2, 3, 4]), zp in tensor([2, 3, 4]), zn in tensor([2, 3, 4]), delta in 0.0f64..2.0) {
        let l = rank_loss(&z, &zp, &zn, delta, 0.5, 0.05).unwrap();
        prop_assert!(l >= 0.0);
        // At the positive target the hinge is active only if z⁻ is closer than the margin.
        let at_pos = rank_loss(&zp, &zp, &zn, delta, 0.5, 0.05).unwrap();
        let d: f64 = zp.data().iter().zip(zn.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let m = rank_margin(delta, 0.5, 0.05).unwrap();
        prop_assert!((at_pos - (m - d).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn diversity_is_non_positive(z in tensor([2, 3, 6]), k in 1usize..=3) {
        let hard = masks_from_ratios(&RegionLayout::even(k, 3, 6).unwrap()).unwrap();
        let d = diversity_loss(&z, &hard).unwrap();
        prop_assert!(d <= 0.0);
        if k == 1 {
            prop_assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn alpha_target_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (tl, th) = (alpha_target(lo, 0.05, 0.6), alpha_target(hi, 0.05, 0.6));
        prop_assert!(tl <= th);
        prop_assert!((0.0..=0.6).contains(&tl) && (0.0..=0.6).contains(&th));
    }

    #[test]
    fn alpha_loss_vanishes_only_at_target(alpha in 0.0f64..0.6, delta in -0.2f64..0.2) {
        let w = LossWeights::default();
        let l = alpha_loss(alpha, delta, &w).unwrap();
        let t = alpha_target(delta, w.tau_alpha, w.alpha_max);
        prop_assert!((l - 0.5 * (alpha - t).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn schedule_never_increases(total in 1usize..400, warm_frac in 0.0f64..1.0, lambda in 0.0f64..2.0) {
        let warm = (warm_frac * total as f64) as usize;
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let v = lambda_alpha_schedule(e, lambda, warm, total).unwrap();
            prop_assert!(v <= prev && (0.0..=lambda).contains(&v));
            prev = v;
        }
        prop_assert_eq!(prev, 0.0);
    }
}

#[test]
fn schedule_examples() {
    assert_eq!(lambda_alpha_schedule(0, 1.0, 60, 200).unwrap(), 1.0);
    assert_eq!(lambda_alpha_schedule(59, 1.0, 60, 200).unwrap(), 1.0);
    assert!((lambda_alpha_schedule(130, 1.0, 60, 200).unwrap() - 0.5).abs() < 1e-15);
    assert!(lambda_alpha_schedule(201, 1.0, 60, 200).is_err());
}

#[test]
fn alpha_target_examples() {
    assert!((alpha_target(0.0, 0.05, 0.6) - 0.3).abs() < 1e-15);
    let s1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((alpha_target(0.05, 0.05, 0.6) - 0.6 * s1).abs() < 1e-15);
    assert!((alpha_target(50.0, 0.05, 0.6) - 0.6).abs() < 1e-15);
}

#[test]
fn diversity_examples() {
    let hard = masks_from_ratios(&RegionLayout::even(2, 1, 2).unwrap()).unwrap();
    let z = Tensor::new(vec![4, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((diversity_loss(&z, &hard).unwrap() + 1.0).abs() < 1e-15);
}
