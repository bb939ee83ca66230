//! Weighted multi-task loss.
//!
//! The main loss combines per-component mean squared errors over the six
//! pose coefficients, three translation and three rotation slots:
//!
//! ```text
//! main  = (6 * w_mano * l_mano + 3 * w_trans * l_trans + 3 * w_rot * l_rot) / 12
//! total = main + w_aux * aux
//! ```
//!
//! where `aux` is the unweighted mean squared error over the seven
//! geometric statistics.

use crate::geomstats::GeoStats7;
use crate::nn::PoseOutput;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mano: f64,
    pub trans: f64,
    pub rot: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mano: 10.0,
            trans: 10_000.0,
            rot: 20.0,
            aux: 0.5,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.mano, self.trans, self.rot, self.aux]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
    }
}

/// Per-component mean squared errors of the main task.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MainComponents {
    pub mano: f64,
    pub trans: f64,
    pub rot: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn main_components(pred: &PoseOutput, target: &PoseOutput) -> MainComponents {
    MainComponents {
        mano: mse(&pred.mano_pca, &target.mano_pca),
        trans: mse(&pred.trans, &target.trans),
        rot: mse(&pred.rot, &target.rot),
    }
}

pub fn combine_main(c: &MainComponents, w: &LossWeights) -> f64 {
    (6.0 * w.mano * c.mano + 3.0 * w.trans * c.trans + 3.0 * w.rot * c.rot) / 12.0
}

pub fn loss_main(pred: &PoseOutput, target: &PoseOutput, w: &LossWeights) -> f64 {
    combine_main(&main_components(pred, target), w)
}

pub fn loss_aux(pred: &GeoStats7, target: &GeoStats7) -> f64 {
    mse(&pred.to_array(), &target.to_array())
}

pub fn loss_total(main: f64, aux: f64, w: &LossWeights) -> f64 {
    main + w.aux * aux
}

/// Gradient of [`loss_main`] with respect to the 12 predicted values.
///
/// Each slot of a component with `n` slots and weight `w` contributes
/// `n * w * (p - t)^2 / n / 12`, so its derivative is `2 w (p - t) / 12`.
pub fn loss_main_grad(pred: &PoseOutput, target: &PoseOutput, w: &LossWeights) -> [f64; 12] {
    let p = pred.to_array();
    let t = target.to_array();
    let mut g = [0.0; 12];
    for i in 0..12 {
        let weight = match i {
            0..=5 => w.mano,
            6..=8 => w.trans,
            _ => w.rot,
        };
        g[i] = 2.0 * weight * (p[i] - t[i]) / 12.0;
    }
    g
}

/// Gradient of `w_aux * loss_aux` with respect to the 7 predicted values.
pub fn loss_aux_grad(pred: &GeoStats7, target: &GeoStats7, w: &LossWeights) -> [f64; 7] {
    let p = pred.to_array();
    let t = target.to_array();
    let mut g = [0.0; 7];
    for i in 0..7 {
        g[i] = w.aux * 2.0 * (p[i] - t[i]) / 7.0;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(v: f64) -> PoseOutput {
        PoseOutput::from_array([v; 12])
    }

    #[test]
    fn equal_predictions_have_zero_loss() {
        let w = LossWeights::default();
        assert_eq!(loss_main(&pose(0.3), &pose(0.3), &w), 0.0);
        let g = GeoStats7::from_array([0.2; 7]);
        assert_eq!(loss_aux(&g, &g), 0.0);
    }

    #[test]
    fn unit_component_losses() {
        let w = LossWeights::default();
        assert_eq!(loss_main(&pose(1.0), &pose(0.0), &w), 2510.0);
        assert_eq!(loss_total(2510.0, 0.0, &w), 2510.0);
    }

    #[test]
    fn rotation_only_error() {
        let target = pose(0.0);
        let mut pred = target;
        pred.rot = [1.0, -1.0, 1.0];
        assert_eq!(loss_main(&pred, &target, &LossWeights::default()), 5.0);
    }

    #[test]
    fn aux_mse() {
        let zero = GeoStats7::default();
        let mut one = [0.0; 7];
        one[3] = 1.0;
        assert_eq!(loss_aux(&GeoStats7::from_array(one), &zero), 1.0 / 7.0);
        assert_eq!(loss_aux(&GeoStats7::from_array([0.5; 7]), &zero), 0.25);
    }

    #[test]
    fn total_adds_half_aux() {
        let w = LossWeights::default();
        assert_eq!(loss_total(0.0, 1.0, &w), 0.5);
        assert_eq!(loss_total(5.0, 1.0 / 7.0, &w), 5.0 + 0.5 / 7.0);
    }

    #[test]
    fn doubling_translation_loss() {
        let w = LossWeights::default();
        let c = MainComponents {
            mano: 0.3,
            trans: 0.002,
            rot: 0.1,
        };
        let doubled = MainComponents {
            trans: 2.0 * c.trans,
            ..c
        };
        let delta = combine_main(&doubled, &w) - combine_main(&c, &w);
        assert!((delta - 3.0 * w.trans * c.trans / 12.0).abs() < 1e-12);
    }
}
