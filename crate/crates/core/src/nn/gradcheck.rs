//! Central finite-difference checks of the analytic gradients, in `f64`.
//!
//! Every coordinate of every input and weight tensor is perturbed by `±h`.
//! The error of one tensor is `|a - n| / max(|a|, |n|)` over its whole
//! gradient (0 when both vanish); a check reports the worst tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Graph};
use super::net::{self, NetConfig};
use super::ops::Conv2dSpec;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::weights::{ParamSpec, Weights};
use super::PoseOutput;
use crate::error::{Error, Result};
use crate::geomstats::GeoStats7;
use crate::loss::{self, LossWeights};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCase {
    LossTotal,
    Linear,
    Conv2d,
    InvertedResidual,
    Attention,
    Network,
}

impl GradCase {
    pub const ALL: [GradCase; 6] = [
        GradCase::LossTotal,
        GradCase::Linear,
        GradCase::Conv2d,
        GradCase::InvertedResidual,
        GradCase::Attention,
        GradCase::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::LossTotal => "loss_total",
            GradCase::Linear => "linear",
            GradCase::Conv2d => "conv2d",
            GradCase::InvertedResidual => "inverted_residual",
            GradCase::Attention => "separable_attention",
            GradCase::Network => "network",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub case: GradCase,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Tensor with the largest absolute mismatch in the worst instance.
    pub worst: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>) -> Result<Vec<Var>> + 'a;
type Objective<'a> = dyn Fn(&[&Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> + 'a;

fn evaluate(w: &Weights<f64>, build: &Build, objective: &Objective) -> Result<f64> {
    let mut g = Graph::new(Tape::inference(), w);
    let outs = build(&mut g)?;
    let vals: Vec<_> = outs.iter().map(|v| g.tape.value(*v)).collect();
    Ok(objective(&vals)?.0)
}

/// Compares analytic and numeric gradients of `objective(build(w))` over
/// all tensors of `w` as one vector, and names the tensor with the largest
/// absolute mismatch. `fault` scales the analytic gradients by `1 + fault`.
fn check_problem(
    w: &Weights<f64>,
    build: &Build,
    objective: &Objective,
    fault: f64,
) -> Result<(f64, String)> {
    let mut g = Graph::new(Tape::recording(), w);
    let outs = build(&mut g)?;
    let vals: Vec<_> = outs.iter().map(|v| g.tape.value(*v)).collect();
    let (_, seeds) = objective(&vals)?;
    let seeds: Vec<_> = outs.iter().copied().zip(seeds).collect();
    let (tape, params) = g.into_parts();
    let grads = tape.backward(&seeds)?;

    let mut probe = w.clone();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut worst = (-1.0, String::new());
    for (name, t) in w.iter() {
        let analytic: Vec<f64> = match params.get(name).and_then(|v| grads.get(*v)) {
            Some(g) => g.data().iter().map(|v| v * (1.0 + fault)).collect(),
            None => vec![0.0; t.len()],
        };
        let mut numeric = vec![0.0; t.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let fp = evaluate(&probe, build, objective)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let fm = evaluate(&probe, build, objective)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            *n = (fp - fm) / (2.0 * STEP);
        }
        let gap: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum();
        if gap > worst.0 {
            worst = (gap, name.to_string());
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok((relative_error(&all_a, &all_n), worst.1))
}

/// Objective `sum(probe_k * y_k)` with fixed random probes.
fn projection<'a>(probes: &'a [Tensor<f64>]) -> Box<Objective<'a>> {
    Box::new(move |vals: &[&Tensor<f64>]| {
        let mut total = 0.0;
        for (p, y) in probes.iter().zip(vals) {
            if p.shape() != y.shape() {
                return Err(Error::Shape("probe shape".into()));
            }
            total += p
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok((total, probes.to_vec()))
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Random weights for `specs`, with non-zero biases so ReLU inputs avoid 0.
fn random_weights(rng: &mut ChaCha8Rng, specs: &[ParamSpec]) -> Weights<f64> {
    let mut w = Weights::new();
    for s in specs {
        let scale = if s.fan_in == 0 {
            0.2
        } else {
            (3.0 / s.fan_in as f64).sqrt()
        };
        w.insert(s.name.clone(), random_tensor(rng, &s.shape, scale));
    }
    w
}

fn run_projection(
    w: &Weights<f64>,
    rng: &mut ChaCha8Rng,
    build: &Build,
    fault: f64,
) -> Result<(f64, String)> {
    let mut g = Graph::new(Tape::inference(), w);
    let shapes: Vec<Vec<usize>> = build(&mut g)?
        .iter()
        .map(|v| g.tape.value(*v).shape().to_vec())
        .collect();
    let probes: Vec<_> = shapes.iter().map(|s| random_tensor(rng, s, 1.0)).collect();
    let objective = projection(&probes);
    check_problem(w, build, &*objective, fault)
}

fn instance(
    case: GradCase,
    rng: &mut ChaCha8Rng,
    net_cfg: &NetConfig,
    fault: f64,
) -> Result<(f64, String)> {
    match case {
        GradCase::LossTotal => {
            let mut w = Weights::new();
            w.insert("pose", random_tensor(rng, &[12], 1.0));
            w.insert("aux", random_tensor(rng, &[7], 1.0));
            let target = PoseOutput::from_slice(random_tensor(rng, &[12], 1.0).data())?;
            let aux_t = random_tensor(rng, &[7], 1.0);
            let aux_t = GeoStats7::from_array(aux_t.data().try_into().unwrap());
            let lw = LossWeights::default();
            let build = |g: &mut Graph<f64>| Ok(vec![g.param("pose")?, g.param("aux")?]);
            let objective = move |vals: &[&Tensor<f64>]| {
                let p = PoseOutput::from_slice(vals[0].data())?;
                let a = GeoStats7::from_array(vals[1].data().try_into().unwrap());
                let total = loss::loss_total(
                    loss::loss_main(&p, &target, &lw),
                    loss::loss_aux(&a, &aux_t),
                    &lw,
                );
                let gp = Tensor::from_f64(&[12], &loss::loss_main_grad(&p, &target, &lw))?;
                let ga = Tensor::from_f64(&[7], &loss::loss_aux_grad(&a, &aux_t, &lw))?;
                Ok((total, vec![gp, ga]))
            };
            check_problem(&w, &build, &objective, fault)
        }
        GradCase::Linear => {
            let (n, t) = (rng.random_range(1..=2), rng.random_range(1..=4));
            let (din, dout) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let mut w = random_weights(rng, &layers::dense_specs("fc", din, dout));
            w.insert("input", random_tensor(rng, &[n, t, din], 1.0));
            let build = |g: &mut Graph<f64>| {
                let x = g.param("input")?;
                Ok(vec![layers::dense(g, "fc", x)?])
            };
            run_projection(&w, rng, &build, fault)
        }
        GradCase::Conv2d => {
            let groups = rng.random_range(1..=2);
            let cin = groups * rng.random_range(1..=2);
            let cout = groups * rng.random_range(1..=2);
            let k = [1, 3][rng.random_range(0..2)];
            let spec = Conv2dSpec {
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=k / 2 + 1),
                groups,
            };
            let (h, wd) = (rng.random_range(3..=6), rng.random_range(3..=6));
            let mut w = random_weights(rng, &layers::conv_specs("c", cin, cout, k, groups));
            let n = rng.random_range(1..=2);
            w.insert("input", random_tensor(rng, &[n, cin, h, wd], 1.0));
            let build = move |g: &mut Graph<f64>| {
                let x = g.param("input")?;
                Ok(vec![layers::conv(g, "c", x, spec)?])
            };
            run_projection(&w, rng, &build, fault)
        }
        GradCase::InvertedResidual => {
            let cin = rng.random_range(1..=3);
            let residual = rng.random_bool(0.5);
            let cout = if residual {
                cin
            } else {
                rng.random_range(1..=3)
            };
            let stride = if residual { 1 } else { rng.random_range(1..=2) };
            let e = rng.random_range(1..=2);
            let mut w = random_weights(rng, &layers::inverted_residual_specs("ir", cin, cout, e));
            let (h, wd) = (rng.random_range(3..=6), rng.random_range(3..=6));
            w.insert("input", random_tensor(rng, &[1, cin, h, wd], 1.0));
            let build = move |g: &mut Graph<f64>| {
                let x = g.param("input")?;
                Ok(vec![layers::inverted_residual(g, "ir", x, stride)?])
            };
            run_projection(&w, rng, &build, fault)
        }
        GradCase::Attention => {
            let (n, t, d) = (
                rng.random_range(1..=2),
                rng.random_range(1..=6),
                rng.random_range(1..=4),
            );
            let mut w = random_weights(rng, &layers::attention_specs("attn", d));
            w.insert("input", random_tensor(rng, &[n, t, d], 1.0));
            let build = |g: &mut Graph<f64>| {
                let x = g.param("input")?;
                Ok(vec![layers::separable_attention(g, "attn", x, 2)?])
            };
            run_projection(&w, rng, &build, fault)
        }
        GradCase::Network => {
            let mut w = random_weights(rng, &net_cfg.param_specs());
            w.insert(
                "input",
                random_tensor(rng, &[1, 1, net_cfg.input_h, net_cfg.input_w], 1.0).map(f64::abs),
            );
            w.insert("offsets", random_tensor(rng, &[1, 2], 1.0).map(f64::abs));
            let target = PoseOutput::from_slice(random_tensor(rng, &[12], 0.1).data())?;
            let aux_t =
                GeoStats7::from_array(random_tensor(rng, &[7], 1.0).data().try_into().unwrap());
            let lw = LossWeights::default();
            let build = |g: &mut Graph<f64>| {
                let (x, off) = (g.param("input")?, g.param("offsets")?);
                let (pose, aux) = net::build(g, net_cfg, x, off, true)?;
                Ok(vec![pose, aux.expect("aux requested")])
            };
            let objective = move |vals: &[&Tensor<f64>]| {
                let p = PoseOutput::from_slice(vals[0].data())?;
                let a = GeoStats7::from_array(vals[1].data().try_into().unwrap());
                let total = loss::loss_total(
                    loss::loss_main(&p, &target, &lw),
                    loss::loss_aux(&a, &aux_t),
                    &lw,
                );
                let gp = Tensor::from_f64(&[1, 12], &loss::loss_main_grad(&p, &target, &lw))?;
                let ga = Tensor::from_f64(&[1, 7], &loss::loss_aux_grad(&a, &aux_t, &lw))?;
                Ok((total, vec![gp, ga]))
            };
            check_problem(&w, &build, &objective, fault)
        }
    }
}

/// Runs `instances` random instances of `case`. `net_cfg` sizes the
/// network case; `fault` perturbs the analytic gradients for harness tests.
pub fn check(
    case: GradCase,
    instances: usize,
    seed: u64,
    net_cfg: &NetConfig,
    fault: f64,
) -> Result<CheckReport> {
    net_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        case,
        instances,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for _ in 0..instances {
        let (err, name) = instance(case, &mut rng, net_cfg, fault)?;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name;
        }
    }
    Ok(report)
}

/// Small network used by the network gradient check.
pub fn check_config() -> NetConfig {
    NetConfig {
        input_h: 12,
        input_w: 10,
        stem_channels: [2, 3],
        ir_channels: [3, 4],
        expansion: 2,
        aux_channels: 3,
        stage_channels: vec![4],
        stage_dims: vec![3],
        stage_depths: vec![1],
        ffn_mult: 2,
        hidden: 5,
        taylor_order: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_case_passes() {
        let cfg = check_config();
        for case in GradCase::ALL {
            let r = check(case, 3, 17, &cfg, 0.0).unwrap();
            assert!(r.passed(), "{case:?}: {} in {}", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let r = check(GradCase::Linear, 2, 1, &check_config(), 1e-2).unwrap();
        assert!(!r.passed());
    }
}
