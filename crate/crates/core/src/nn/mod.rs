//! The light UNet: layer plan, kernels, parameters, optimizer and checkpoints.

pub mod checkpoint;
mod kernels;
pub mod network;
pub mod optim;
pub mod spec;
pub mod tensor;

pub use network::{build_network, Gradients, NetOutput, NetworkState, Param, Trace};
pub use spec::{count_parameters, ConvMode, NetworkSpec};
pub use tensor::Tensor;

use crate::error::Result;
use crate::volume::{voxel_count, Shape3};

/// Per-voxel class probabilities laid out as `[classes, D, W, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField<T = f32> {
    pub num_classes: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl ProbField<f32> {
    pub fn from_logits(logits: &Tensor) -> Self {
        Self {
            num_classes: logits.channels,
            shape: logits.shape,
            data: kernels::softmax_channels(logits),
        }
    }

    pub fn to_f64(&self) -> ProbField<f64> {
        ProbField {
            num_classes: self.num_classes,
            shape: self.shape,
            data: self.data.iter().map(|&p| p as f64).collect(),
        }
    }

    /// Gradient w.r.t. the logits given a gradient w.r.t. these probabilities.
    pub fn softmax_backward(&self, dprob: &[f32]) -> Tensor {
        Tensor::from_data(
            self.num_classes,
            self.shape,
            kernels::softmax_backward(&self.data, dprob, self.num_classes),
        )
    }
}

impl<T: Copy + PartialOrd + Into<f64>> ProbField<T> {
    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn class(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let v = self.voxels();
        let mut best = self.class(0).to_vec();
        let mut out = vec![0u8; v];
        for c in 1..self.num_classes {
            for ((b, o), &p) in best.iter_mut().zip(out.iter_mut()).zip(self.class(c)) {
                if p > *b {
                    *b = p;
                    *o = c as u8;
                }
            }
        }
        out
    }

    /// Largest deviation of a voxel's class sum from 1, and whether all entries are non-negative.
    pub fn simplex_error(&self) -> (f64, bool) {
        let v = self.voxels();
        let mut worst = 0.0f64;
        let mut nonneg = true;
        for i in 0..v {
            let mut s = 0.0f64;
            for c in 0..self.num_classes {
                let p: f64 = self.data[c * v + i].into();
                nonneg &= p >= 0.0;
                s += p;
            }
            worst = worst.max((s - 1.0).abs());
        }
        (worst, nonneg)
    }
}

/// Anything that maps an image patch to a class probability field.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn predict(&self, patch: &Tensor) -> Result<ProbField>;
}

impl Segmenter for NetworkState {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn predict(&self, patch: &Tensor) -> Result<ProbField> {
        Ok(self.forward(std::slice::from_ref(patch))?.remove(0))
    }
}
