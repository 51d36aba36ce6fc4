use ndarray::{Array2, Array3};
use proptest::prelude::*;

use stageprompt_core::metrics::{
    ber, dice_iou, e_measure_mean, mae_metric, s_measure, weighted_fbeta,
};
use stageprompt_core::prompt::extract_hfc;
use stageprompt_core::training::{balanced_bce, cosine_lr, soft_iou_loss};

fn map(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..=1.0, n * n)
        .prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn mask(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::bool::ANY, n * n).prop_map(move |v| {
        Array2::from_shape_vec((n, n), v.into_iter().map(f64::from).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_range(p in map(10), g in mask(10)) {
        let (d, i) = dice_iou(&p, &g, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        prop_assert!(i <= d + 1e-12);
        let b = ber(&p, &g, 0.5).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        let m = mae_metric(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        for v in [s_measure(&p, &g, 0.5).unwrap(), e_measure_mean(&p, &g).unwrap(), weighted_fbeta(&p, &g, 1.0).unwrap()] {
            prop_assert!(v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(&v), "{v}");
        }
    }

    #[test]
    fn ber_is_symmetric_under_complement(p in mask(8), g in mask(8)) {
        let flip = |a: &Array2<f64>| a.mapv(|v| 1.0 - v);
        let a = ber(&p, &g, 0.5).unwrap();
        let b = ber(&flip(&p), &flip(&g), 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn hfc_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 6 * 5 * 2),
        b in prop::collection::vec(-1.0f64..1.0, 6 * 5 * 2),
        s in -3.0f64..3.0,
    ) {
        let a = Array3::from_shape_vec((6, 5, 2), a).unwrap();
        let b = Array3::from_shape_vec((6, 5, 2), b).unwrap();
        let joint = extract_hfc(&(&a * s + &b), 0.4).unwrap();
        let split = extract_hfc(&a, 0.4).unwrap() * s + extract_hfc(&b, 0.4).unwrap();
        for (x, y) in joint.iter().zip(split.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_are_non_negative(
        l in prop::collection::vec(-20.0f64..20.0, 36),
        g in mask(6),
    ) {
        let l = Array2::from_shape_vec((6, 6), l).unwrap();
        prop_assert!(balanced_bce(&l, &g).unwrap() >= 0.0);
        let iou = soft_iou_loss(&l, &g, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, lr0 in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, total, lr0).unwrap();
            prop_assert!(lr <= prev + 1e-18 && lr >= 0.0);
            prev = lr;
        }
    }
}
