//! The multi-task pose network.
//!
//! ```text
//! stem:  conv3x3/2 -> conv3x3 -> IR -> IR/2
//! aux:   IR/2 -> pool -> linear(7)
//! main:  [IR/2 -> attention block] x stages -> pool -> linear -> ReLU
//!        -> concat(offset x, offset y) -> linear(12)
//! ```

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::layers::{self, Graph};
use super::ops::{check_taylor_order, Conv2dSpec};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::weights::{ParamSpec, Weights};
use super::PoseOutput;
use crate::error::{Error, Result};
use crate::geomstats::GeoStats7;
use crate::representation::Frame;

pub const MAIN_OUTPUTS: usize = 12;
pub const AUX_OUTPUTS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of the two stem convolutions.
    pub stem_channels: [usize; 2],
    /// Output channels of the two stem inverted residuals.
    pub ir_channels: [usize; 2],
    pub expansion: usize,
    pub aux_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Token width of each stage's attention block.
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Feed-forward width as a multiple of the token width.
    pub ffn_mult: usize,
    pub hidden: usize,
    pub taylor_order: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_h: 160,
            input_w: 160,
            stem_channels: [16, 32],
            ir_channels: [32, 64],
            expansion: 2,
            aux_channels: 64,
            stage_channels: vec![96, 128, 160],
            stage_dims: vec![64, 80, 96],
            stage_depths: vec![2, 3, 2],
            ffn_mult: 2,
            hidden: 128,
            taylor_order: 2,
        }
    }
}

impl NetConfig {
    /// Small network for gradient checks and the toy training run.
    pub fn toy() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            stem_channels: [4, 4],
            ir_channels: [8, 8],
            expansion: 2,
            aux_channels: 8,
            stage_channels: vec![16],
            stage_dims: vec![8],
            stage_depths: vec![1],
            ffn_mult: 2,
            hidden: 16,
            taylor_order: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_taylor_order(self.taylor_order)?;
        let widths = self
            .stem_channels
            .iter()
            .chain(&self.ir_channels)
            .chain([
                &self.expansion,
                &self.aux_channels,
                &self.ffn_mult,
                &self.hidden,
            ])
            .chain(&self.stage_channels)
            .chain(&self.stage_dims);
        for w in widths {
            if *w == 0 {
                return Err(Error::Param("network widths must be positive".into()));
            }
        }
        if self.stage_channels.is_empty()
            || self.stage_channels.len() != self.stage_dims.len()
            || self.stage_channels.len() != self.stage_depths.len()
        {
            return Err(Error::Param(
                "stage channels, dims and depths must be non-empty and of equal length".into(),
            ));
        }
        if self.input_h < 2 || self.input_w < 2 {
            return Err(Error::Param(format!(
                "input {}x{} is too small",
                self.input_w, self.input_h
            )));
        }
        Ok(())
    }

    /// Every trainable tensor in manifest order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [c0, c1] = self.stem_channels;
        let [i0, i1] = self.ir_channels;
        let e = self.expansion;
        let mut s = layers::conv_specs("stem.conv1", 1, c0, 3, 1);
        s.extend(layers::conv_specs("stem.conv2", c0, c1, 3, 1));
        s.extend(layers::inverted_residual_specs("stem.ir1", c1, i0, e));
        s.extend(layers::inverted_residual_specs("stem.ir2", i0, i1, e));
        s.extend(layers::inverted_residual_specs(
            "aux.ir",
            i1,
            self.aux_channels,
            e,
        ));
        s.extend(layers::dense_specs(
            "aux.fc",
            self.aux_channels,
            AUX_OUTPUTS,
        ));
        let mut cin = i1;
        for (i, ((&c, &d), &depth)) in self
            .stage_channels
            .iter()
            .zip(&self.stage_dims)
            .zip(&self.stage_depths)
            .enumerate()
        {
            s.extend(layers::inverted_residual_specs(
                &format!("stages.{i}.down"),
                cin,
                c,
                e,
            ));
            s.extend(layers::mobilevit_specs(
                &format!("stages.{i}.block"),
                c,
                d,
                depth,
                d * self.ffn_mult,
            ));
            cin = c;
        }
        s.extend(layers::dense_specs("head.fc1", cin, self.hidden));
        s.extend(layers::dense_specs(
            "head.fc2",
            self.hidden + 2,
            MAIN_OUTPUTS,
        ));
        s
    }
}

/// Builds the network graph. Returns the main `[N, 12]` and, if requested,
/// aux `[N, 7]` outputs.
pub fn build<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    input: Var,
    offsets: Var,
    with_aux: bool,
) -> Result<(Var, Option<Var>)> {
    let x = layers::conv(g, "stem.conv1", input, Conv2dSpec::new(2, 1))?;
    let x = g.tape.relu(x);
    let x = layers::conv(g, "stem.conv2", x, Conv2dSpec::new(1, 1))?;
    let x = g.tape.relu(x);
    let x = layers::inverted_residual(g, "stem.ir1", x, 1)?;
    let stem = layers::inverted_residual(g, "stem.ir2", x, 2)?;

    let aux = if with_aux {
        let a = layers::inverted_residual(g, "aux.ir", stem, 2)?;
        let a = g.tape.global_avg_pool(a)?;
        Some(layers::dense(g, "aux.fc", a)?)
    } else {
        None
    };

    let mut m = stem;
    for (i, depth) in cfg.stage_depths.iter().enumerate() {
        m = layers::inverted_residual(g, &format!("stages.{i}.down"), m, 2)?;
        m = layers::mobilevit_block(g, &format!("stages.{i}.block"), m, *depth, cfg.taylor_order)?;
    }
    let m = g.tape.global_avg_pool(m)?;
    let m = layers::dense(g, "head.fc1", m)?;
    let m = g.tape.relu(m);
    let m = g.tape.concat_last(m, offsets)?;
    let pose = layers::dense(g, "head.fc2", m)?;
    Ok((pose, aux))
}

fn check_inputs<T: Scalar>(cfg: &NetConfig, frames: &Tensor<T>, offsets: &Tensor<T>) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.input_h || s[3] != cfg.input_w {
        return Err(Error::Shape(format!(
            "network expects [N, 1, {}, {}] input, got {s:?}",
            cfg.input_h, cfg.input_w
        )));
    }
    if offsets.shape() != [s[0], 2] {
        return Err(Error::Shape(format!(
            "expected [{}, 2] offsets, got {:?}",
            s[0],
            offsets.shape()
        )));
    }
    Ok(())
}

/// A recorded forward pass, ready for [`Tape::backward`].
pub struct Recorded<T> {
    pub tape: Tape<T>,
    pub input: Var,
    pub offsets: Var,
    pub pose: Var,
    pub aux: Option<Var>,
    pub params: IndexMap<String, Var>,
}

fn run<T: Scalar>(
    tape: Tape<T>,
    cfg: &NetConfig,
    weights: &Weights<T>,
    frames: &Tensor<T>,
    offsets: &Tensor<T>,
    with_aux: bool,
) -> Result<Recorded<T>> {
    cfg.validate()?;
    weights.validate(&cfg.param_specs())?;
    check_inputs(cfg, frames, offsets)?;
    let mut g = Graph::new(tape, weights);
    let input = g.tape.leaf(frames.clone());
    let off = g.tape.leaf(offsets.clone());
    let (pose, aux) = build(&mut g, cfg, input, off, with_aux)?;
    let (tape, params) = g.into_parts();
    Ok(Recorded {
        tape,
        input,
        offsets: off,
        pose,
        aux,
        params,
    })
}

/// Forward pass with recording enabled.
pub fn record<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    frames: &Tensor<T>,
    offsets: &Tensor<T>,
    with_aux: bool,
) -> Result<Recorded<T>> {
    run(Tape::recording(), cfg, weights, frames, offsets, with_aux)
}

/// Batched inference: `frames` is `[N, 1, H, W]`, `offsets` `[N, 2]`.
pub fn forward<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    frames: &Tensor<T>,
    offsets: &Tensor<T>,
    with_aux: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let r = run(Tape::inference(), cfg, weights, frames, offsets, with_aux)?;
    let pose = r.tape.value(r.pose).clone();
    let aux = r.aux.map(|a| r.tape.value(a).clone());
    Ok((pose, aux))
}

/// Stacks frames into an `[N, 1, H, W]` tensor.
pub fn frames_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return Err(Error::Shape("no frames".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for f in frames {
        if ({ f.width() }, { f.height() }) != (w, h) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        data.extend(f.values().iter().map(|v| T::lit(*v)));
    }
    Tensor::new(vec![frames.len(), 1, h, w], data)
}

/// Runs one frame with normalized offsets `(x0 / W, y0 / H)`.
pub fn forward_frame<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    frame: &Frame,
    offsets: (f64, f64),
    with_aux: bool,
) -> Result<(PoseOutput, Option<GeoStats7>)> {
    let x = frames_tensor(&[frame])?;
    let off = Tensor::from_f64(&[1, 2], &[offsets.0, offsets.1])?;
    let (pose, aux) = forward(cfg, weights, &x, &off, with_aux)?;
    let pose = PoseOutput::from_slice(&pose.to_f64_vec())?;
    let aux = aux
        .map(|a| {
            let v = a.to_f64_vec();
            <[f64; 7]>::try_from(v.as_slice())
                .map(GeoStats7::from_array)
                .map_err(|_| Error::Shape("aux head width".into()))
        })
        .transpose()?;
    Ok((pose, aux))
}
