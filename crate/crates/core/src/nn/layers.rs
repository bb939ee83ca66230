//! Parameterized layers built on a [`Tape`], with matching parameter specs.
//!
//! Naming: a convolution or linear layer `p` owns `p.weight` and `p.bias`.

use indexmap::IndexMap;

use super::ops::Conv2dSpec;
use super::tape::{Tape, Var};
use super::tensor::Scalar;
use super::weights::{ParamSpec, Weights};
use crate::error::{Error, Result};

/// A tape plus the weights its parameters are read from.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    weights: &'a Weights<T>,
    params: IndexMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(tape: Tape<T>, weights: &'a Weights<T>) -> Self {
        Self {
            tape,
            weights,
            params: IndexMap::new(),
        }
    }

    /// Tape handle of a weight tensor, placed on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.weights.get(name)?.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub fn into_parts(self) -> (Tape<T>, IndexMap<String, Var>) {
        (self.tape, self.params)
    }

    fn shape_of(&self, name: &str) -> Result<&[usize]> {
        Ok(self.weights.get(name)?.shape())
    }
}

pub fn conv_specs(name: &str, cin: usize, cout: usize, k: usize, groups: usize) -> Vec<ParamSpec> {
    let cin_g = cin / groups;
    vec![
        ParamSpec::weight(
            format!("{name}.weight"),
            vec![cout, cin_g, k, k],
            cin_g * k * k,
        ),
        ParamSpec::bias(format!("{name}.bias"), cout),
    ]
}

pub fn dense_specs(name: &str, din: usize, dout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{name}.weight"), vec![din, dout], din),
        ParamSpec::bias(format!("{name}.bias"), dout),
    ]
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    g.tape.conv2d(x, w, Some(b), spec)
}

pub fn dense<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    g.tape.linear(x, w, Some(b))
}

pub fn inverted_residual_specs(
    name: &str,
    cin: usize,
    cout: usize,
    expansion: usize,
) -> Vec<ParamSpec> {
    let hidden = cin * expansion;
    [
        conv_specs(&format!("{name}.expand"), cin, hidden, 1, 1),
        conv_specs(&format!("{name}.dw"), hidden, hidden, 3, hidden),
        conv_specs(&format!("{name}.project"), hidden, cout, 1, 1),
    ]
    .concat()
}

/// Expand 1x1 + ReLU, depthwise 3x3 + ReLU, linear 1x1 projection; the
/// input is added back when the stride is 1 and channel counts agree.
pub fn inverted_residual<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let hidden = g.shape_of(&format!("{name}.dw.weight"))?[0];
    let e = conv(g, &format!("{name}.expand"), x, Conv2dSpec::new(1, 0))?;
    let e = g.tape.relu(e);
    let d = conv(
        g,
        &format!("{name}.dw"),
        e,
        Conv2dSpec::depthwise(stride, 1, hidden),
    )?;
    let d = g.tape.relu(d);
    let y = conv(g, &format!("{name}.project"), d, Conv2dSpec::new(1, 0))?;
    if stride == 1 && g.tape.value(x).shape() == g.tape.value(y).shape() {
        g.tape.add(x, y)
    } else {
        Ok(y)
    }
}

pub fn attention_specs(name: &str, dim: usize) -> Vec<ParamSpec> {
    [
        dense_specs(&format!("{name}.score"), dim, 1),
        dense_specs(&format!("{name}.key"), dim, dim),
        dense_specs(&format!("{name}.value"), dim, dim),
        dense_specs(&format!("{name}.out"), dim, dim),
    ]
    .concat()
}

/// Separable self-attention on tokens `[N, T, D]`.
///
/// One score per token, normalized over tokens; the context vector is the
/// score-weighted sum of key projections and gates the ReLU'd value
/// projection of every token.
pub fn separable_attention<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    x: Var,
    order: usize,
) -> Result<Var> {
    if g.tape.value(x).rank() != 3 {
        return Err(Error::Shape(format!(
            "attention expects [N, T, D] tokens, got {:?}",
            g.tape.value(x).shape()
        )));
    }
    let logits = dense(g, &format!("{name}.score"), x)?;
    let scores = g.tape.taylor_softmax(logits, 1, order)?;
    let keys = dense(g, &format!("{name}.key"), x)?;
    let ctx = g.tape.token_sum(scores, keys)?;
    let values = dense(g, &format!("{name}.value"), x)?;
    let values = g.tape.relu(values);
    let gated = g.tape.gate(values, ctx)?;
    dense(g, &format!("{name}.out"), gated)
}

pub fn mobilevit_specs(
    name: &str,
    channels: usize,
    dim: usize,
    depth: usize,
    ffn: usize,
) -> Vec<ParamSpec> {
    let mut specs = conv_specs(&format!("{name}.local_dw"), channels, channels, 3, channels);
    specs.extend(conv_specs(&format!("{name}.local_pw"), channels, dim, 1, 1));
    for i in 0..depth {
        let p = format!("{name}.layers.{i}");
        specs.extend(attention_specs(&format!("{p}.attn"), dim));
        specs.extend(dense_specs(&format!("{p}.ffn1"), dim, ffn));
        specs.extend(dense_specs(&format!("{p}.ffn2"), ffn, dim));
    }
    specs.extend(conv_specs(&format!("{name}.proj"), dim, channels, 1, 1));
    specs
}

/// Local depthwise and pointwise convolutions, `depth` residual
/// attention/feed-forward layers over spatial tokens, pointwise projection back.
pub fn mobilevit_block<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    x: Var,
    depth: usize,
    order: usize,
) -> Result<Var> {
    let channels = g.tape.value(x).shape()[1];
    let l = conv(
        g,
        &format!("{name}.local_dw"),
        x,
        Conv2dSpec::depthwise(1, 1, channels),
    )?;
    let l = g.tape.relu(l);
    let l = conv(g, &format!("{name}.local_pw"), l, Conv2dSpec::new(1, 0))?;
    let (h, w) = {
        let s = g.tape.value(l).shape();
        (s[2], s[3])
    };
    let mut t = g.tape.to_tokens(l)?;
    for i in 0..depth {
        let p = format!("{name}.layers.{i}");
        let a = separable_attention(g, &format!("{p}.attn"), t, order)?;
        t = g.tape.add(t, a)?;
        let f = dense(g, &format!("{p}.ffn1"), t)?;
        let f = g.tape.relu(f);
        let f = dense(g, &format!("{p}.ffn2"), f)?;
        t = g.tape.add(t, f)?;
    }
    let y = g.tape.from_tokens(t, h, w)?;
    conv(g, &format!("{name}.proj"), y, Conv2dSpec::new(1, 0))
}
