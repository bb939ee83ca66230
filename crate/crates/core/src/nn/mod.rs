//! From-scratch tensors, reverse-mode gradients and the pose network.

pub mod flops;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights;

pub use flops::{count_flops, FlopReport, LayerFlops};
pub use net::{forward, forward_frame, record, NetConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::{train_step, Adam, Sample, StepLosses};
pub use weights::{ParamSpec, Weights};

use crate::error::{Error, Result};

/// The 12 main-head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseOutput {
    /// Hand-model pose PCA coefficients.
    pub mano_pca: [f64; 6],
    pub trans: [f64; 3],
    pub rot: [f64; 3],
}

impl PoseOutput {
    pub fn from_array(a: [f64; 12]) -> Self {
        let mut p = Self::default();
        p.mano_pca.copy_from_slice(&a[..6]);
        p.trans.copy_from_slice(&a[6..9]);
        p.rot.copy_from_slice(&a[9..]);
        p
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let a: [f64; 12] = v
            .try_into()
            .map_err(|_| Error::Shape(format!("pose needs 12 values, got {}", v.len())))?;
        Ok(Self::from_array(a))
    }

    pub fn to_array(&self) -> [f64; 12] {
        let mut a = [0.0; 12];
        a[..6].copy_from_slice(&self.mano_pca);
        a[6..9].copy_from_slice(&self.trans);
        a[9..].copy_from_slice(&self.rot);
        a
    }
}
