//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evhand_core::event_io::{bin_fixed_time, parse_events, EventBin};
use evhand_core::geomstats::{aux_labels, GeoStats7};
use evhand_core::metrics::{auc, parse_joint_file, pck_curve, uniform_thresholds, JointLayout};
use evhand_core::nn::{count_flops, forward_frame, NetConfig, Weights};
use evhand_core::representation::{build_frame, Frame};
use evhand_core::roi::{build_roi, crop, locate_wrist, RoiBox, WristLoc};
use evhand_core::toy::{train_toy, ToySpec, TrainOptions};
use log::warn;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::selftest::{self, SelftestOptions};
use crate::{Command, Status, UsageError};

pub fn dispatch(
    cmd: &Command,
    cfg: &PipelineConfig,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    match cmd {
        Command::Convert { events, out: dir } => convert(cfg, events, dir, limit, out),
        Command::Roi { events } => roi(cfg, events, limit, out),
        Command::Stats { events } => stats(cfg, events, limit, out),
        Command::Infer {
            weights,
            events,
            frames,
            aux,
        } => {
            let source = match (events, frames) {
                (Some(e), None) => Source::Events(e.clone()),
                (None, Some(f)) => Source::Frames(f.clone()),
                _ => {
                    return Err(
                        UsageError("give exactly one of --events or --frames".into()).into(),
                    )
                }
            };
            infer(cfg, weights, &source, *aux, limit, out)
        }
        Command::Eval { pred, gt } => eval(cfg, pred, gt, limit, out),
        Command::Flops => flops(cfg, out),
        Command::Selftest {
            taylor_order,
            inject_grad_fault,
        } => {
            let opts = SelftestOptions {
                seed: cfg.seed,
                taylor_order: taylor_order.unwrap_or(cfg.net.taylor_order),
                grad_fault: if *inject_grad_fault { 0.05 } else { 0.0 },
                ..SelftestOptions::default()
            };
            run_selftest(&opts, out)
        }
        Command::TrainToy {
            out: path,
            steps,
            no_aux,
            write_config,
        } => train(cfg, path, *steps, *no_aux, write_config.as_deref(), out),
    }
}

fn load_bins(cfg: &PipelineConfig, path: &Path, limit: Option<usize>) -> Result<Vec<EventBin>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let source = parse_events(&text, cfg.geometry()?)
        .with_context(|| format!("parsing {}", path.display()))?;
    if source.is_empty() {
        warn!("{} contains no events", path.display());
    }
    let mut bins = bin_fixed_time(&source, &cfg.bin_spec()?)?;
    if let Some(n) = limit {
        bins.truncate(n);
    }
    Ok(bins)
}

/// Frame, wrist and ROI of one bin or stored frame.
struct Processed {
    frame: Frame,
    wrist: Option<WristLoc>,
    roi: RoiBox,
}

fn locate(cfg: &PipelineConfig, frame: Frame) -> Result<Processed> {
    let r = cfg.roi_params();
    let geometry =
        evhand_core::event_io::SensorGeometry::new(frame.width() as u32, frame.height() as u32)?;
    let wrist = locate_wrist(&frame, r.active_threshold, r.boundary_count)?;
    let roi = match &wrist {
        Some(w) => build_roi(w, r.roi_h, r.roi_w, geometry)?,
        None => RoiBox::centered(geometry, r.roi_h, r.roi_w)?,
    };
    Ok(Processed { frame, wrist, roi })
}

fn process_bins(cfg: &PipelineConfig, bins: &[EventBin]) -> Result<Vec<Processed>> {
    let spec = cfg.repr_spec();
    bins.par_iter()
        .enumerate()
        .map(|(k, bin)| {
            let (frame, _) = build_frame(bin, &spec).with_context(|| format!("frame {k}"))?;
            locate(cfg, frame).with_context(|| format!("frame {k}"))
        })
        .collect()
}

fn stats_row(s: &GeoStats7) -> String {
    s.to_array()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn roi_row(p: &Processed) -> String {
    let r = &p.roi;
    let wrist = match &p.wrist {
        Some(w) => format!("1,{},{},{}", w.y, w.x_left, w.x_right),
        None => "0,,,".to_string(),
    };
    format!("{wrist},{},{},{},{}", r.x0, r.y0, r.w, r.h)
}

const ROI_HEADER: &str = "index,t0_us,found,wrist_y,x_left,x_right,x0,y0,w,h";
const STATS_HEADER: &str = "index,t0_us,mean_x,mean_y,std_x,std_y,eig_major,eig_minor,theta";

fn convert(
    cfg: &PipelineConfig,
    events: &Path,
    dir: &Path,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let bins = load_bins(cfg, events, limit)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = cfg.repr_spec();
    let rows = bins
        .par_iter()
        .enumerate()
        .map(|(k, bin)| -> Result<(String, String)> {
            let (frame, _) = build_frame(bin, &spec).with_context(|| format!("frame {k}"))?;
            let base = dir.join(format!("frame_{k:06}"));
            frame.write_pgm(BufWriter::new(File::create(base.with_extension("pgm"))?))?;
            frame.write_raw(BufWriter::new(File::create(base.with_extension("raw"))?))?;
            let p = locate(cfg, frame).with_context(|| format!("frame {k}"))?;
            let stats = aux_labels(bin, &p.roi);
            Ok((
                format!("{k},{},{}", bin.t0(), roi_row(&p)),
                format!("{k},{},{}", bin.t0(), stats_row(&stats)),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rois = format!("{ROI_HEADER}\n");
    let mut stats = format!("{STATS_HEADER}\n");
    for (r, s) in &rows {
        writeln!(rois, "{r}")?;
        writeln!(stats, "{s}")?;
    }
    fs::write(dir.join("rois.csv"), rois)?;
    fs::write(dir.join("stats.csv"), stats)?;
    writeln!(out, "wrote {} frames to {}", rows.len(), dir.display())?;
    Ok(Status::Ok)
}

fn roi(
    cfg: &PipelineConfig,
    events: &Path,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let bins = load_bins(cfg, events, limit)?;
    let processed = process_bins(cfg, &bins)?;
    writeln!(out, "{ROI_HEADER}")?;
    for (k, (bin, p)) in bins.iter().zip(&processed).enumerate() {
        writeln!(out, "{k},{},{}", bin.t0(), roi_row(p))?;
    }
    Ok(Status::Ok)
}

fn stats(
    cfg: &PipelineConfig,
    events: &Path,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let bins = load_bins(cfg, events, limit)?;
    let processed = process_bins(cfg, &bins)?;
    writeln!(out, "{STATS_HEADER}")?;
    for (k, (bin, p)) in bins.iter().zip(&processed).enumerate() {
        writeln!(
            out,
            "{k},{},{}",
            bin.t0(),
            stats_row(&aux_labels(bin, &p.roi))
        )?;
    }
    Ok(Status::Ok)
}

enum Source {
    Events(PathBuf),
    Frames(PathBuf),
}

fn read_frames(dir: &Path, limit: Option<usize>) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "raw"));
    paths.sort();
    if let Some(n) = limit {
        paths.truncate(n);
    }
    paths
        .iter()
        .map(|p| {
            let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Frame::read_raw(std::io::BufReader::new(file))
                .with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

fn infer(
    cfg: &PipelineConfig,
    weights_path: &Path,
    source: &Source,
    with_aux: bool,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let net = &cfg.net;
    if (net.input_h, net.input_w) != (cfg.roi.height as usize, cfg.roi.width as usize) {
        bail!(
            "network input {}x{} does not match ROI {}x{}",
            net.input_w,
            net.input_h,
            cfg.roi.width,
            cfg.roi.height
        );
    }
    let file =
        File::open(weights_path).with_context(|| format!("opening {}", weights_path.display()))?;
    let weights = Weights::<f32>::read_from(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", weights_path.display()))?;
    weights.validate(&net.param_specs()).with_context(|| {
        format!(
            "{} does not match the network config",
            weights_path.display()
        )
    })?;

    let processed = match source {
        Source::Events(path) => process_bins(cfg, &load_bins(cfg, path, limit)?)?,
        Source::Frames(dir) => read_frames(dir, limit)?
            .into_par_iter()
            .enumerate()
            .map(|(k, f)| locate(cfg, f).with_context(|| format!("frame {k}")))
            .collect::<Result<_>>()?,
    };
    let rows = processed
        .par_iter()
        .enumerate()
        .map(|(k, p)| -> Result<String> {
            let (patch, _) = crop(&p.frame, &p.roi)?;
            let geometry = evhand_core::event_io::SensorGeometry::new(
                p.frame.width() as u32,
                p.frame.height() as u32,
            )?;
            let [ox, oy] = p.roi.normalized_offsets(geometry);
            let (pose, aux) = forward_frame(net, &weights, &patch, (ox, oy), with_aux)
                .with_context(|| format!("frame {k}"))?;
            let mut row = format!("{k}");
            for v in pose
                .to_array()
                .iter()
                .chain(aux.map(|a| a.to_array()).iter().flatten())
            {
                write!(row, ",{v:.6}")?;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(Status::Ok)
}

fn eval(
    cfg: &PipelineConfig,
    pred: &Path,
    gt: &Path,
    limit: Option<usize>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let read = |p: &Path| -> Result<_> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let mut sets =
            parse_joint_file(&text).with_context(|| format!("parsing {}", p.display()))?;
        if let Some(n) = limit {
            sets.truncate(n);
        }
        Ok(sets)
    };
    let (preds, gts) = (read(pred)?, read(gt)?);
    let tau_max = cfg.metrics.tau_max;
    let thresholds = uniform_thresholds(cfg.metrics.thresholds, tau_max);
    let report = pck_curve(&preds, &gts, &thresholds, JointLayout::default())?;
    if report.skipped > 0 {
        warn!("{} samples skipped for zero palm length", report.skipped);
    }
    writeln!(
        out,
        "# samples {} skipped {} joints {}",
        gts.len(),
        report.skipped,
        report.evaluated_joints
    )?;
    writeln!(out, "tau,pck")?;
    for (t, v) in report.curve.thresholds.iter().zip(&report.curve.values) {
        writeln!(out, "{t:.6},{v:.6}")?;
    }
    writeln!(out, "auc,{:.6}", auc(&report.curve, tau_max)?)?;
    Ok(Status::Ok)
}

fn flops(cfg: &PipelineConfig, out: &mut (dyn Write + Send)) -> Result<Status> {
    let net = &cfg.net;
    let roi = count_flops(net, net.input_h, net.input_w)?;
    let full = count_flops(net, cfg.flops.full_h, cfg.flops.full_w)?;
    writeln!(
        out,
        "layer,branch,macs_{}x{},macs_{}x{}",
        net.input_w, net.input_h, cfg.flops.full_w, cfg.flops.full_h
    )?;
    for (a, b) in roi.layers.iter().zip(&full.layers) {
        let branch = if a.aux { "aux" } else { "main" };
        writeln!(out, "{},{branch},{},{}", a.name, a.macs, b.macs)?;
    }
    let ratio = roi.total() as f64 / full.total() as f64;
    writeln!(
        out,
        "# deployment total {} vs {}",
        roi.total(),
        full.total()
    )?;
    writeln!(
        out,
        "# aux branch {} vs {}",
        roi.aux_total(),
        full.aux_total()
    )?;
    writeln!(
        out,
        "# ratio {ratio:.4} ({:.2}% reduction)",
        100.0 * (1.0 - ratio)
    )?;
    Ok(Status::Ok)
}

fn run_selftest(opts: &SelftestOptions, out: &mut (dyn Write + Send)) -> Result<Status> {
    let mut io_err = None;
    let lines = selftest::run(opts, |l| {
        if let Err(e) = writeln!(out, "{l}").and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    writeln!(out, "{} checks, {failed} failed", lines.len())?;
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::ChecksFailed
    })
}

/// Config matching the toy sensor, ROI and network.
pub fn toy_config(base: &PipelineConfig) -> PipelineConfig {
    let spec = ToySpec::default();
    let mut cfg = base.clone();
    cfg.sensor.width = spec.geometry.width;
    cfg.sensor.height = spec.geometry.height;
    cfg.roi.height = spec.roi.roi_h;
    cfg.roi.width = spec.roi.roi_w;
    cfg.roi.threshold = spec.roi.active_threshold;
    cfg.roi.boundary_count = spec.roi.boundary_count;
    cfg.net = NetConfig::toy();
    cfg
}

fn train(
    cfg: &PipelineConfig,
    path: &Path,
    steps: Option<usize>,
    no_aux: bool,
    write_config: Option<&Path>,
    out: &mut (dyn Write + Send),
) -> Result<Status> {
    let spec = ToySpec {
        samples: cfg.train.samples,
        ..ToySpec::default()
    };
    let opts = TrainOptions {
        steps: steps.unwrap_or(cfg.train.steps),
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        seed: cfg.seed,
        with_aux: !no_aux,
        weights: cfg.loss_weights(),
    };
    writeln!(
        out,
        "{}",
        if no_aux {
            "step,main"
        } else {
            "step,total,main,aux"
        }
    )?;
    let mut io_err = None;
    let run = train_toy(&NetConfig::toy(), &spec, &opts, |step, l| {
        let r = if no_aux {
            writeln!(out, "{},{:.6}", step + 1, l.main)
        } else {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                step + 1,
                l.total,
                l.main,
                l.aux
            )
        };
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let (first, last) = if no_aux {
        (run.initial.main, run.last.main)
    } else {
        (run.initial.total, run.last.total)
    };
    writeln!(
        out,
        "# toy-set loss {first:.6} -> {last:.6} ({:.1}% lower)",
        100.0 * (1.0 - last / first)
    )?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    run.weights.write_to(&mut w)?;
    w.flush()?;
    if let Some(p) = write_config {
        fs::write(p, toy_config(cfg).to_flat_string()?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Status::Ok)
}
