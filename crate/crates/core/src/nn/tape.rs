//! Recording tape for reverse-mode differentiation.

use super::ops::{self, Conv2dSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    AvgPool(Var),
    Concat(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    TaylorSoftmax {
        x: Var,
        axis: usize,
        order: usize,
    },
    TokenSum {
        scores: Var,
        keys: Var,
    },
    Gate {
        values: Var,
        ctx: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Values of a computation, plus the op graph when recording.
#[derive(Debug)]
pub struct Tape<T> {
    recording: bool,
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for values the seeds do not reach.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn recording() -> Self {
        Self {
            recording: true,
            nodes: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_last(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let y = ops::to_tokens(self.value(x))?;
        Ok(self.push(y, Op::ToTokens(x)))
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::from_tokens(self.value(x), h, w)?;
        Ok(self.push(y, Op::FromTokens(x)))
    }

    pub fn taylor_softmax(&mut self, x: Var, axis: usize, order: usize) -> Result<Var> {
        let y = ops::taylor_softmax(self.value(x), axis, order)?;
        Ok(self.push(y, Op::TaylorSoftmax { x, axis, order }))
    }

    pub fn token_sum(&mut self, scores: Var, keys: Var) -> Result<Var> {
        let y = ops::weighted_token_sum(self.value(scores), self.value(keys))?;
        Ok(self.push(y, Op::TokenSum { scores, keys }))
    }

    pub fn gate(&mut self, values: Var, ctx: Var) -> Result<Var> {
        let y = ops::gate_tokens(self.value(values), self.value(ctx))?;
        Ok(self.push(y, Op::Gate { values, ctx }))
    }

    /// Propagates the seed gradients back through the recorded graph.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::State(
                "backward requires a forward pass recorded on this tape".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::State(format!("seed for unknown value {}", v.0)))?;
            if node.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0 + 1);
        }

        for i in (0..last).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), &g, *spec)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), &g)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(val(*x), &g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(val(*x).shape(), &g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::concat_last_backward(val(*a).shape(), val(*b).shape(), &g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::ToTokens(x) => {
                    let s = val(*x).shape();
                    let dx = ops::from_tokens(&g, s[2], s[3])?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::FromTokens(x) => {
                    let dx = ops::to_tokens(&g)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::TaylorSoftmax { x, axis, order } => {
                    let dx = ops::taylor_softmax_backward(val(*x), &g, *axis, *order)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::TokenSum { scores, keys } => {
                    let (ds, dk) = ops::weighted_token_sum_backward(val(*scores), val(*keys), &g)?;
                    accumulate(&mut grads[scores.0], ds);
                    accumulate(&mut grads[keys.0], dk);
                }
                Op::Gate { values, ctx } => {
                    let (dv, dc) = ops::gate_tokens_backward(val(*values), val(*ctx), &g)?;
                    accumulate(&mut grads[values.0], dv);
                    accumulate(&mut grads[ctx.0], dc);
                }
            }
            // Only leaves keep their gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_needs_recording() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.relu(x);
        let err = tape.backward(&[(y, Tensor::full(&[2], 1.0))]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn relu_slopes() {
        let mut tape = Tape::<f64>::recording();
        let x = tape.leaf(Tensor::from_f64(&[2], &[2.0, -1.0]).unwrap());
        let y = tape.relu(x);
        let g = tape.backward(&[(y, Tensor::full(&[2], 1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::recording();
        let x = tape.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(&[(y, Tensor::full(&[1], 1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
