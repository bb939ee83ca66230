use evhand_core::metrics::{auc, pck_curve, uniform_thresholds, JointLayout, JointSet, NUM_JOINTS};
use proptest::prelude::*;

fn joint_set(coords: Vec<f64>) -> JointSet {
    JointSet::new(3, coords).unwrap()
}

fn sets(n: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    prop::collection::vec(
        (
            prop::collection::vec(-1.0f64..1.0, NUM_JOINTS * 3),
            prop::collection::vec(-1.0f64..1.0, NUM_JOINTS * 3),
        ),
        1..n,
    )
}

/// Counts correct joints directly from coordinates.
fn recount(pairs: &[(Vec<f64>, Vec<f64>)], tau: f64) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in pairs {
        let palm =
            ((g[27] - g[0]).powi(2) + (g[28] - g[1]).powi(2) + (g[29] - g[2]).powi(2)).sqrt();
        for j in 1..NUM_JOINTS {
            let mut e2 = 0.0;
            for k in 0..3 {
                let d = (p[j * 3 + k] - p[k]) - (g[j * 3 + k] - g[k]);
                e2 += d * d;
            }
            total += 1;
            if e2.sqrt() <= tau * palm {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

fn curve_of(pairs: &[(Vec<f64>, Vec<f64>)], thresholds: &[f64]) -> Vec<f64> {
    let preds: Vec<_> = pairs.iter().map(|(p, _)| joint_set(p.clone())).collect();
    let gts: Vec<_> = pairs.iter().map(|(_, g)| joint_set(g.clone())).collect();
    pck_curve(&preds, &gts, thresholds, JointLayout::default())
        .unwrap()
        .curve
        .values
}

proptest! {
    #[test]
    fn curve_matches_recount(pairs in sets(6)) {
        let t = uniform_thresholds(100, 1.0);
        let values = curve_of(&pairs, &t);
        for (tau, v) in t.iter().zip(&values) {
            prop_assert_eq!(*v, recount(&pairs, *tau));
        }
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn invariant_to_shared_translation_and_scale(
        pairs in sets(4),
        shift in prop::array::uniform3(-5.0f64..5.0),
        pred_shift in prop::array::uniform3(-5.0f64..5.0),
        scale in 0.25f64..4.0,
    ) {
        let t = uniform_thresholds(25, 1.0);
        let base = curve_of(&pairs, &t);
        let moved: Vec<_> = pairs
            .iter()
            .map(|(p, g)| {
                let tp = p.iter().enumerate().map(|(i, v)| scale * v + shift[i % 3] + pred_shift[i % 3]).collect();
                let tg = g.iter().enumerate().map(|(i, v)| scale * v + shift[i % 3]).collect();
                (tp, tg)
            })
            .collect();
        let after = curve_of(&moved, &t);
        // Rounding can flip joints that sit exactly on a threshold.
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1.0 / 20.0 + 1e-12);
        }
    }
}

#[test]
fn perfect_and_half_palm_errors() {
    let gt: Vec<f64> = (0..NUM_JOINTS * 3)
        .map(|i| (i as f64 * 0.37).sin())
        .collect();
    let t = uniform_thresholds(100, 1.0);
    let perfect = curve_of(&[(gt.clone(), gt.clone())], &t);
    let c = evhand_core::metrics::PckCurve {
        thresholds: t.clone(),
        values: perfect,
    };
    assert_eq!(auc(&c, 1.0).unwrap(), 1.0);

    let palm =
        ((gt[27] - gt[0]).powi(2) + (gt[28] - gt[1]).powi(2) + (gt[29] - gt[2]).powi(2)).sqrt();
    let mut pred = gt.clone();
    for j in 1..NUM_JOINTS {
        pred[j * 3] += 0.5 * palm;
    }
    let values = curve_of(&[(pred, gt)], &t);
    let c = evhand_core::metrics::PckCurve {
        thresholds: t,
        values,
    };
    assert!((auc(&c, 1.0).unwrap() - 0.5).abs() <= 0.01);
}
