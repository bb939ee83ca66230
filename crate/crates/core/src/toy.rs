//! Synthetic toy training set and the seeded smoke-training run.
//!
//! Each sample is a random arm-and-palm silhouette pushed through the full
//! frame, ROI and statistics chain. Pose targets are fixed functions of the
//! silhouette parameters so the network has something learnable to fit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::event_io::{synth_hand_events, SensorGeometry, SynthParams};
use crate::geomstats::aux_labels;
use crate::loss::LossWeights;
use crate::nn::train::{self, Adam, Sample, StepLosses};
use crate::nn::{NetConfig, PoseOutput, Weights};
use crate::representation::{build_frame, ReprSpec};
use crate::roi::{crop, find_roi, RoiParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub samples: usize,
    pub geometry: SensorGeometry,
    pub roi: RoiParams,
    pub repr: ReprSpec,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            samples: 200,
            geometry: SensorGeometry {
                width: 64,
                height: 48,
            },
            roi: RoiParams {
                roi_h: 32,
                roi_w: 32,
                active_threshold: 0.05,
                boundary_count: 1,
            },
            repr: ReprSpec::default(),
        }
    }
}

/// Random silhouette that fits `geometry` (sized for the 64x48 toy sensor).
pub fn random_params(rng: &mut ChaCha8Rng, geometry: SensorGeometry) -> SynthParams {
    let h = geometry.height;
    let wrist_row = rng.random_range(h * 5 / 8..=h * 6 / 8);
    let wrist_half_width = rng.random_range(2.0..4.0);
    let arm_flare = rng.random_range(0.0..0.3);
    let palm_half_width = wrist_half_width + rng.random_range(2.5..6.0);
    let arm_bottom = wrist_half_width + arm_flare * (h - 1 - wrist_row) as f64;
    let motion_px = rng.random_range(0.0..2.0);
    let margin = arm_bottom.max(palm_half_width) + motion_px + 2.0;
    let center_x = rng.random_range(margin..geometry.width as f64 - 1.0 - margin);
    SynthParams {
        geometry,
        wrist_row,
        center_x,
        wrist_half_width,
        arm_flare,
        palm_half_width,
        palm_height: rng.random_range(wrist_row / 2..=wrist_row * 3 / 4),
        motion_px,
        count: rng.random_range(800..1600),
        ..SynthParams::default()
    }
}

/// Pose target tied to the silhouette: shape terms in the PCA slots,
/// position in the translation (meters-scale) and a mix in the rotation.
pub fn pose_target(p: &SynthParams) -> PoseOutput {
    let g = p.geometry;
    let u = 2.0 * p.center_x / g.width as f64 - 1.0;
    let v = 2.0 * p.wrist_row as f64 / g.height as f64 - 1.0;
    let palm = (p.palm_half_width - p.wrist_half_width - 2.5) / 3.5;
    let wrist = (p.wrist_half_width - 2.0) / 2.0;
    let height = p.palm_height as f64 / p.wrist_row as f64;
    PoseOutput {
        mano_pca: [
            palm,
            wrist,
            p.arm_flare / 0.3,
            height,
            p.motion_px / 2.0,
            u * v,
        ],
        trans: [0.05 * u, 0.05 * v, 0.3 + 0.02 * palm],
        rot: [0.5 * palm - 0.2, 0.3 * u, -0.3 * v],
    }
}

/// Builds one sample from silhouette parameters.
pub fn make_sample(p: &SynthParams, seed: u64, spec: &ToySpec) -> Result<Sample> {
    let (bin, _) = synth_hand_events(p, seed)?;
    let (frame, _) = build_frame(&bin, &spec.repr)?;
    let (roi, _) = find_roi(&frame, &spec.roi)?;
    let (patch, _) = crop(&frame, &roi)?;
    Ok(Sample {
        frame: patch,
        offsets: roi.normalized_offsets(spec.geometry),
        pose: pose_target(p),
        aux: aux_labels(&bin, &roi),
    })
}

pub fn toy_dataset(spec: &ToySpec, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.samples)
        .map(|i| {
            let p = random_params(&mut rng, spec.geometry);
            make_sample(
                &p,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                spec,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub with_aux: bool,
    pub weights: LossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 1e-4,
            seed: 42,
            with_aux: true,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    /// Batch losses before each update.
    pub steps: Vec<StepLosses>,
    /// Mean losses over the whole toy set before training and after.
    pub initial: StepLosses,
    pub last: StepLosses,
    pub weights: Weights<f32>,
}

/// Seeded training on the toy set. `on_step` sees each step's batch losses.
pub fn train_toy(
    cfg: &NetConfig,
    spec: &ToySpec,
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, &StepLosses),
) -> Result<ToyRun> {
    cfg.validate()?;
    let data = toy_dataset(spec, opts.seed)?;
    let mut weights = Weights::<f32>::init(&cfg.param_specs(), opts.seed.wrapping_add(1));
    let mut adam = Adam::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let initial = train::evaluate(cfg, &weights, &data, &opts.weights, opts.with_aux)?;

    let batch = opts.batch.clamp(1, data.len().max(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut steps = Vec::with_capacity(opts.steps);
    let mut chunk = Vec::with_capacity(batch);
    for step in 0..opts.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        chunk.clear();
        chunk.extend(
            order[cursor..cursor + batch]
                .iter()
                .map(|&i| data[i].clone()),
        );
        cursor += batch;
        let losses = train::train_step(
            cfg,
            &mut weights,
            &mut adam,
            &chunk,
            &opts.weights,
            opts.with_aux,
        )?;
        on_step(step, &losses);
        steps.push(losses);
    }
    let last = train::evaluate(cfg, &weights, &data, &opts.weights, opts.with_aux)?;
    Ok(ToyRun {
        steps,
        initial,
        last,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_match_network_input() {
        let spec = ToySpec {
            samples: 5,
            ..ToySpec::default()
        };
        let data = toy_dataset(&spec, 3).unwrap();
        assert_eq!(data.len(), 5);
        let cfg = NetConfig::toy();
        for s in &data {
            assert_eq!(
                (s.frame.width(), s.frame.height()),
                (cfg.input_w, cfg.input_h)
            );
            assert!(s.offsets.iter().all(|o| (0.0..1.0).contains(o)));
        }
    }

    #[test]
    fn random_params_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = ToySpec::default().geometry;
        for i in 0..200 {
            let p = random_params(&mut rng, g);
            synth_hand_events(&p, i).unwrap();
        }
    }
}
