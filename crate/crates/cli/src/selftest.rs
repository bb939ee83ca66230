//! Runtime oracle, invariant and gradient checks behind `evhand selftest`.

use std::time::Instant;

use evhand_core::event_io::{
    synth_hand_events, Event, EventBin, Polarity, SensorGeometry, SynthParams,
};
use evhand_core::geomstats::Moments2;
use evhand_core::loss::{self, LossWeights};
use evhand_core::metrics::{self, JointLayout, JointSet};
use evhand_core::nn::gradcheck::{self, GradCase};
use evhand_core::nn::ops;
use evhand_core::nn::{count_flops, NetConfig, PoseOutput, Tensor};
use evhand_core::representation::{
    build_frame, gaussian_blur, gaussian_kernel_1d, lnes_fast, Frame, ReprSpec,
};
use evhand_core::roi::{locate_wrist, RoiParams};
use evhand_core::toy::{train_toy, ToySpec, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    pub taylor_order: usize,
    /// Relative perturbation added to analytic gradients.
    pub grad_fault: f64,
    pub gradcheck_instances: usize,
    pub train_steps: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            taylor_order: 2,
            grad_fault: 0.0,
            gradcheck_instances: 20,
            train_steps: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<34} {}", self.name, self.detail)
    }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_bin(rng: &mut ChaCha8Rng, g: SensorGeometry, n: usize, t0: u64, span: u64) -> EventBin {
    let mut events: Vec<Event> = (0..n)
        .map(|_| {
            let p = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(
                t0 - rng.random_range(0..span),
                rng.random_range(0..g.width) as u16,
                rng.random_range(0..g.height) as u16,
                p,
            )
        })
        .collect();
    events.sort_by_key(|e| e.t);
    EventBin::new(events, t0, g).expect("valid bin")
}

/// Per-pixel maximum of the linear recency weight over the whole window.
fn brute_lnes(bin: &EventBin, window: u64) -> Vec<f64> {
    let g = bin.geometry();
    let mut v = vec![0.0; g.pixel_count()];
    for e in bin.events() {
        let age = bin.t0() - e.t;
        if age <= window {
            let w = (window - age) as f64 / window as f64;
            let i = e.y as usize * g.width as usize + e.x as usize;
            v[i] = f64::max(v[i], w);
        }
    }
    v
}

fn lnes_oracle(rng: &mut ChaCha8Rng) -> CheckLine {
    let g = SensorGeometry::new(64, 48).unwrap();
    let mut mismatches = 0;
    for _ in 0..50 {
        let window = rng.random_range(1_000..200_000);
        let n = rng.random_range(0..3_000);
        let bin = random_bin(rng, g, n, 500_000, 2 * window);
        let spec = ReprSpec {
            window_us: window,
            count_limit: None,
            ..ReprSpec::default()
        };
        if lnes_fast(&bin, &spec).0.values() != brute_lnes(&bin, window).as_slice() {
            mismatches += 1;
        }
    }
    line(
        "lnes_oracle",
        mismatches == 0,
        format!("{mismatches}/50 bins differ"),
    )
}

fn early_stop(rng: &mut ChaCha8Rng) -> CheckLine {
    let g = SensorGeometry::new(64, 48).unwrap();
    let bin = random_bin(rng, g, 1_000, 500_000, 100_000);
    let spec = ReprSpec {
        count_limit: Some(100),
        ..ReprSpec::default()
    };
    let (frame, count) = lnes_fast(&bin, &spec);
    let newest = EventBin::new(bin.events()[900..].to_vec(), bin.t0(), g).unwrap();
    let full = ReprSpec {
        count_limit: None,
        ..spec
    };
    let ok = count == 100
        && frame == lnes_fast(&newest, &full).0
        && frame.values().iter().all(|v| (0.0..=1.0).contains(v));
    line("early_stop", ok, format!("{count} contributing events"))
}

fn channel_compression(rng: &mut ChaCha8Rng) -> CheckLine {
    let g = SensorGeometry::new(32, 32).unwrap();
    let base = random_bin(rng, g, 300, 100_000, 50_000);
    let dup = |flip: bool| {
        let events: Vec<Event> = base
            .events()
            .iter()
            .flat_map(|e| {
                let mut d = *e;
                if flip {
                    d.p = if e.p == Polarity::On {
                        Polarity::Off
                    } else {
                        Polarity::On
                    };
                }
                [*e, d]
            })
            .collect();
        EventBin::new(events, base.t0(), g).unwrap()
    };
    let spec = ReprSpec::default();
    let a = build_frame(&dup(true), &spec).unwrap().0;
    let b = build_frame(&dup(false), &spec).unwrap().0;
    let same = a
        .values()
        .iter()
        .zip(b.values())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    line(
        "channel_compression",
        same,
        "opposite vs same polarity duplicates".into(),
    )
}

fn blur_mass(rng: &mut ChaCha8Rng) -> CheckLine {
    let mut worst_kernel = 0.0f64;
    let mut worst_mass = 0.0f64;
    for k in [3, 5, 7] {
        for sigma in [0.5, 1.0, 2.0] {
            let taps = gaussian_kernel_1d(k, sigma).unwrap();
            worst_kernel = worst_kernel.max((taps.iter().sum::<f64>() - 1.0).abs());
            let (w, h) = (24, 20);
            let mut f = Frame::zeros(w, h);
            for y in k..h - k {
                for x in k..w - k {
                    f.set(x, y, rng.random_range(0.0..1.0));
                }
            }
            let out = gaussian_blur(&f, k, sigma).unwrap();
            worst_mass = worst_mass.max((out.sum() - f.sum()).abs());
        }
    }
    line(
        "blur_mass",
        worst_kernel < 1e-9 && worst_mass < 1e-6,
        format!("kernel sum err {worst_kernel:.1e}, mass err {worst_mass:.1e}"),
    )
}

fn wrist_roi(rng: &mut ChaCha8Rng) -> CheckLine {
    let params = RoiParams::default();
    // Unbounded so the silhouette is densely sampled; at 5000 events the
    // sparse edge rows trip the search.
    let spec = ReprSpec {
        count_limit: None,
        ..ReprSpec::default()
    };
    let n = 100;
    let mut hits = 0;
    for i in 0..n {
        let p = SynthParams {
            wrist_row: rng.random_range(150..220),
            center_x: rng.random_range(120.0..226.0),
            wrist_half_width: rng.random_range(10.0..18.0),
            palm_half_width: rng.random_range(26.0..40.0),
            palm_height: rng.random_range(60..100),
            ..SynthParams::default()
        };
        let (bin, truth) = synth_hand_events(&p, i).unwrap();
        let frame = build_frame(&bin, &spec).unwrap().0;
        let found = locate_wrist(&frame, params.active_threshold, params.boundary_count).unwrap();
        if let (Some(f), Some(t)) = (found, truth) {
            if f.y.abs_diff(t.y) <= 5 {
                hits += 1;
            }
        }
    }
    let empty = Frame::for_geometry(SensorGeometry::DAVIS346);
    let none = locate_wrist(&empty, params.active_threshold, params.boundary_count)
        .unwrap()
        .is_none();
    line(
        "wrist_roi",
        hits * 100 >= 95 * n && none,
        format!("{hits}/{n} within 5 rows, empty frame -> none: {none}"),
    )
}

fn geomstats_oracle(rng: &mut ChaCha8Rng) -> CheckLine {
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(2..40);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0..160) as f64,
                    rng.random_range(0..160) as f64,
                )
            })
            .collect();
        let m = Moments2::from_points(pts.iter().copied());
        let cov = nalgebra::Matrix2::new(m.cxx, m.cxy, m.cxy, m.cyy);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let (i_max, i_min) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
            (0, 1)
        } else {
            (1, 0)
        };
        let (major, minor) = m.eigenvalues();
        let scale = m.cxx.max(m.cyy).max(1.0);
        worst = worst.max((major - eig.eigenvalues[i_max]).abs() / scale);
        worst = worst.max((minor - eig.eigenvalues[i_min]).abs() / scale);
        if eig.eigenvalues[i_max] - eig.eigenvalues[i_min] > 1e-6 * scale {
            let v = eig.eigenvectors.column(i_max);
            let pi = std::f64::consts::PI;
            let diff = (v[1].atan2(v[0]) - m.orientation()).rem_euclid(pi);
            worst = worst.max(diff.min(pi - diff));
        }
    }
    line(
        "geomstats_oracle",
        worst < 1e-9,
        format!("max deviation {worst:.1e}"),
    )
}

fn taylor(rng: &mut ChaCha8Rng, order: usize) -> CheckLine {
    if let Err(e) = ops::check_taylor_order(order) {
        return line("taylor_softmax", false, format!("order {order}: {e}"));
    }
    let mut worst_dev = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut positive = true;
    for _ in 0..2_000 {
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = ops::taylor_softmax(&Tensor::<f64>::from_f64(&[8], &x).unwrap(), 0, order).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (yi, xi) in y.data().iter().zip(&x) {
            positive &= *yi > 0.0;
            worst_dev = worst_dev.max((*yi - xi.exp() / z).abs());
        }
        worst_sum = worst_sum.max((y.sum() - 1.0).abs());
    }
    // The deviation from the exact softmax is reported, not gated: a
    // renormalized order-2 polynomial cannot stay within 0.02 on [-2, 2].
    line(
        "taylor_softmax",
        positive && worst_sum < 1e-6,
        format!("order {order}, sum err {worst_sum:.1e}, max |dev| from exact {worst_dev:.4}"),
    )
}

fn gradchecks(opts: &SelftestOptions) -> Vec<CheckLine> {
    let cfg = gradcheck::check_config();
    GradCase::ALL
        .iter()
        .map(|&case| {
            let name = format!("gradcheck.{}", case.name());
            match gradcheck::check(
                case,
                opts.gradcheck_instances,
                opts.seed,
                &cfg,
                opts.grad_fault,
            ) {
                Ok(r) => line(
                    &name,
                    r.passed(),
                    format!(
                        "{} instances, max rel err {:.2e} ({})",
                        r.instances, r.max_rel_error, r.worst
                    ),
                ),
                Err(e) => line(&name, false, e.to_string()),
            }
        })
        .collect()
}

fn flop_ratio() -> CheckLine {
    let cfg = NetConfig::default();
    match (count_flops(&cfg, 160, 160), count_flops(&cfg, 180, 240)) {
        (Ok(roi), Ok(full)) => {
            let r = roi.total() as f64 / full.total() as f64;
            line(
                "flop_ratio",
                (0.52..=0.62).contains(&r),
                format!("160x160 / 240x180 = {r:.4}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => line("flop_ratio", false, e.to_string()),
    }
}

fn loss_arithmetic() -> CheckLine {
    let w = LossWeights::default();
    let main = loss::loss_main(
        &PoseOutput::from_array([1.0; 12]),
        &PoseOutput::default(),
        &w,
    );
    let total = loss::loss_total(main, 1.0, &w);
    line(
        "loss_arithmetic",
        main == 2510.0 && total == 2510.5,
        format!("main {main}, total {total}"),
    )
}

fn metrics_check() -> CheckLine {
    let mut gt = vec![0.0; 42];
    for j in 1..21 {
        gt[2 * j] = j as f64;
        gt[2 * j + 1] = 2.0;
    }
    gt[18] = 0.0;
    let palm = 2.0;
    let pred: Vec<f64> = gt
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if i >= 2 && i % 2 == 0 {
                v + 0.5 * palm
            } else {
                *v
            }
        })
        .collect();
    let g = JointSet::new(2, gt).unwrap();
    let p = JointSet::new(2, pred).unwrap();
    let t = metrics::uniform_thresholds(100, 1.0);
    let perfect = metrics::pck_curve(
        std::slice::from_ref(&g),
        std::slice::from_ref(&g),
        &t,
        JointLayout::default(),
    )
    .and_then(|r| metrics::auc(&r.curve, 1.0));
    let half = metrics::pck_curve(&[p], &[g], &t, JointLayout::default())
        .and_then(|r| metrics::auc(&r.curve, 1.0));
    match (perfect, half) {
        (Ok(a), Ok(b)) => line(
            "metrics",
            a == 1.0 && (b - 0.5).abs() <= 0.01,
            format!("perfect AUC {a}, half-palm AUC {b:.4}"),
        ),
        (Err(e), _) | (_, Err(e)) => line("metrics", false, e.to_string()),
    }
}

fn toy_training(opts: &SelftestOptions) -> CheckLine {
    let start = Instant::now();
    let train = TrainOptions {
        seed: opts.seed,
        steps: opts.train_steps,
        ..TrainOptions::default()
    };
    match train_toy(&NetConfig::toy(), &ToySpec::default(), &train, |_, _| {}) {
        Ok(run) => {
            let ratio = run.last.total / run.initial.total;
            line(
                "toy_training",
                ratio <= 0.5,
                format!(
                    "total {:.3} -> {:.3} ({:.1}% lower) in {:.1}s",
                    run.initial.total,
                    run.last.total,
                    100.0 * (1.0 - ratio),
                    start.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => line("toy_training", false, e.to_string()),
    }
}

/// Runs every check; `emit` sees each result as soon as it is known.
pub fn run(opts: &SelftestOptions, mut emit: impl FnMut(&CheckLine)) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lines = Vec::new();
    let mut push = |l: CheckLine| {
        emit(&l);
        lines.push(l);
    };
    push(lnes_oracle(&mut rng));
    push(early_stop(&mut rng));
    push(channel_compression(&mut rng));
    push(blur_mass(&mut rng));
    push(wrist_roi(&mut rng));
    push(geomstats_oracle(&mut rng));
    push(taylor(&mut rng, opts.taylor_order));
    for l in gradchecks(opts) {
        push(l);
    }
    push(flop_ratio());
    push(loss_arithmetic());
    push(metrics_check());
    push(toy_training(opts));
    lines
}
