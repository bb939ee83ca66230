use evhand_core::geomstats::GeoStats7;
use evhand_core::loss::{
    loss_aux, loss_aux_grad, loss_main, loss_main_grad, loss_total, LossWeights,
};
use evhand_core::nn::PoseOutput;
use proptest::prelude::*;

fn pose(v: &[f64]) -> PoseOutput {
    PoseOutput::from_slice(v).unwrap()
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_zero_at_target(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 12),
        s in prop::array::uniform7(-1.0f64..1.0),
    ) {
        let w = LossWeights::default();
        prop_assert!(loss_main(&pose(&a), &pose(&b), &w) >= 0.0);
        prop_assert_eq!(loss_main(&pose(&a), &pose(&a), &w), 0.0);
        let g = GeoStats7::from_array(s);
        prop_assert!(loss_aux(&g, &GeoStats7::default()) >= 0.0);
        prop_assert_eq!(loss_aux(&g, &g), 0.0);
    }

    #[test]
    fn gradients_match_central_differences(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let w = LossWeights::default();
        let grad = loss_main_grad(&pose(&a), &pose(&b), &w);
        for i in 0..12 {
            let h = 1e-6;
            let (mut up, mut dn) = (a.clone(), a.clone());
            up[i] += h;
            dn[i] -= h;
            let num = (loss_main(&pose(&up), &pose(&b), &w) - loss_main(&pose(&dn), &pose(&b), &w)) / (2.0 * h);
            prop_assert!((num - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1.0));
        }
    }
}

#[test]
fn unit_component_losses_combine_to_2510() {
    let w = LossWeights::default();
    let zero = pose(&[0.0; 12]);
    let ones = pose(&[1.0; 12]);
    // Each component MSE is 1.
    let main = loss_main(&ones, &zero, &w);
    assert_eq!(main, (10.0 * 6.0 + 10_000.0 * 3.0 + 20.0 * 3.0) / 12.0);
    assert_eq!(loss_total(2510.0, 1.0, &w), 2510.5);
    let aux = loss_aux(&GeoStats7::from_array([1.0; 7]), &GeoStats7::default());
    assert_eq!(aux, 1.0);
    let g = loss_aux_grad(&GeoStats7::from_array([1.0; 7]), &GeoStats7::default(), &w);
    assert!(g.iter().all(|v| (v - 0.5 * 2.0 / 7.0).abs() < 1e-15));
}
