//! Multi-task loss gradients and Adam updates.

use indexmap::IndexMap;
use rayon::prelude::*;

use super::net::{self, NetConfig};
use super::tensor::{Scalar, Tensor};
use super::weights::Weights;
use super::PoseOutput;
use crate::error::{Error, Result};
use crate::geomstats::GeoStats7;
use crate::loss::{self, LossWeights};
use crate::representation::Frame;

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame: Frame,
    /// ROI origin divided by the full frame size.
    pub offsets: [f64; 2],
    pub pose: PoseOutput,
    pub aux: GeoStats7,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
}

/// Losses and parameter gradients of one sample.
pub struct SampleGrad<T> {
    pub losses: StepLosses,
    pub grads: IndexMap<String, Tensor<T>>,
}

/// Forward, loss and backward for a single sample. With `with_aux` false
/// the auxiliary branch is skipped and its gradients are absent.
pub fn sample_gradient<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    sample: &Sample,
    lw: &LossWeights,
    with_aux: bool,
) -> Result<SampleGrad<T>> {
    let x = net::frames_tensor::<T>(&[&sample.frame])?;
    let off = Tensor::from_f64(&[1, 2], &sample.offsets)?;
    let rec = net::record(cfg, weights, &x, &off, with_aux)?;

    let pred = PoseOutput::from_slice(&rec.tape.value(rec.pose).to_f64_vec())?;
    let main = loss::loss_main(&pred, &sample.pose, lw);
    let mut seeds = vec![(
        rec.pose,
        Tensor::from_f64(&[1, 12], &loss::loss_main_grad(&pred, &sample.pose, lw))?,
    )];
    let mut aux = 0.0;
    if let Some(a) = rec.aux {
        let v = rec.tape.value(a).to_f64_vec();
        let pa = GeoStats7::from_array(v.try_into().map_err(|_| Error::Shape("aux head".into()))?);
        aux = loss::loss_aux(&pa, &sample.aux);
        seeds.push((
            a,
            Tensor::from_f64(&[1, 7], &loss::loss_aux_grad(&pa, &sample.aux, lw))?,
        ));
    }
    let total = if with_aux {
        loss::loss_total(main, aux, lw)
    } else {
        main
    };
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {total} (main {main}, aux {aux})"
        )));
    }

    let mut g = rec.tape.backward(&seeds)?;
    let grads = rec
        .params
        .iter()
        .filter_map(|(name, v)| g.take(*v).map(|t| (name.clone(), t)))
        .collect();
    Ok(SampleGrad {
        losses: StepLosses { total, main, aux },
        grads,
    })
}

/// Mean losses and gradients over a batch. Samples run in parallel; the
/// reduction runs in sample order so results do not depend on scheduling.
pub fn batch_gradient<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    batch: &[Sample],
    lw: &LossWeights,
    with_aux: bool,
) -> Result<(StepLosses, IndexMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .map(|s| sample_gradient(cfg, weights, s, lw, with_aux))
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut losses = StepLosses::default();
    let mut grads: IndexMap<String, Tensor<T>> = IndexMap::new();
    for sg in per_sample {
        losses.total += sg.losses.total * scale;
        losses.main += sg.losses.main * scale;
        losses.aux += sg.losses.aux * scale;
        for (name, g) in sg.grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let s = T::lit(scale);
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    Ok((losses, grads))
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one bias-corrected update to every tensor that has a gradient.
    pub fn update(
        &mut self,
        weights: &mut Weights<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps) = (self.lr, self.eps);
        for (name, g) in grads {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if w.shape() != g.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: w.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, m), v), g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let m_hat = m.as_f64() / c1;
                let v_hat = v.as_f64() / c2;
                *w -= T::lit(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// One optimizer step on `batch`; returns the losses before the update.
pub fn train_step<T: Scalar>(
    cfg: &NetConfig,
    weights: &mut Weights<T>,
    adam: &mut Adam<T>,
    batch: &[Sample],
    lw: &LossWeights,
    with_aux: bool,
) -> Result<StepLosses> {
    let (losses, grads) = batch_gradient(cfg, weights, batch, lw, with_aux)?;
    adam.update(weights, &grads)?;
    Ok(losses)
}

/// Mean losses over `samples` without updating anything.
pub fn evaluate<T: Scalar>(
    cfg: &NetConfig,
    weights: &Weights<T>,
    samples: &[Sample],
    lw: &LossWeights,
    with_aux: bool,
) -> Result<StepLosses> {
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let x = net::frames_tensor::<T>(&[&s.frame])?;
            let off = Tensor::from_f64(&[1, 2], &s.offsets)?;
            let (pose, aux) = net::forward(cfg, weights, &x, &off, with_aux)?;
            let main = loss::loss_main(&PoseOutput::from_slice(&pose.to_f64_vec())?, &s.pose, lw);
            let aux = match aux {
                Some(a) => {
                    let v: [f64; 7] = a
                        .to_f64_vec()
                        .try_into()
                        .map_err(|_| Error::Shape("aux head".into()))?;
                    loss::loss_aux(&GeoStats7::from_array(v), &s.aux)
                }
                None => 0.0,
            };
            Ok((main, aux))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len().max(1) as f64;
    let mut out = StepLosses::default();
    for (main, aux) in per_sample {
        out.main += main / n;
        out.aux += aux / n;
    }
    out.total = if with_aux {
        loss::loss_total(out.main, out.aux, lw)
    } else {
        out.main
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::weights::ParamSpec;

    fn specs() -> Vec<ParamSpec> {
        vec![ParamSpec::weight("w", vec![2, 2], 2)]
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = Weights::<f64>::init(&specs(), 3);
        let before = w.clone();
        let mut adam = Adam::new(1e-3);
        let grads = IndexMap::from([("w".to_string(), Tensor::zeros(&[2, 2]))]);
        adam.update(&mut w, &grads).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut w = Weights::<f64>::init(&specs(), 3);
        let before = w.clone();
        let mut adam = Adam::new(0.0);
        let grads = IndexMap::from([("w".to_string(), Tensor::full(&[2, 2], 0.7))]);
        adam.update(&mut w, &grads).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Weights::<f64>::zeros(&specs());
        let mut adam = Adam::new(0.01);
        let grads = IndexMap::from([(
            "w".to_string(),
            Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 0.0]).unwrap(),
        )]);
        adam.update(&mut w, &grads).unwrap();
        let d = w.get("w").unwrap().data();
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn unknown_gradient_name_is_an_error() {
        let mut w = Weights::<f64>::zeros(&specs());
        let grads = IndexMap::from([("v".to_string(), Tensor::zeros(&[1]))]);
        assert!(matches!(
            Adam::new(0.1).update(&mut w, &grads),
            Err(Error::MissingTensor(_))
        ));
    }
}
