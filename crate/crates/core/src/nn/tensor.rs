use crate::volume::{voxel_count, Shape3};

/// A single-sample feature map laid out as `[channels, D, W, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * voxel_count(shape)],
        }
    }

    pub fn from_data(channels: usize, shape: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(shape), "tensor data length");
        Self { channels, shape, data }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            shape: a.shape,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: the first `first` channels and the rest.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let v = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(first * v);
        (
            Tensor {
                channels: first,
                shape: self.shape,
                data,
            },
            Tensor {
                channels: self.channels - first,
                shape: self.shape,
                data: rest,
            },
        )
    }
}
