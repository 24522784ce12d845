//! Dense rank-4 tensors and the fixed set of differentiable operations the
//! generator and the descriptor are assembled from.
//!
//! Layout is channel-major, then `d1`, `d2`, `d3`, with `d3` fastest. A 2D
//! image is a tensor with `d3 == 1`, rows along `d1` and columns along `d2`.

mod graph;
mod kernels;
mod ops;
mod param;
mod tape;

pub use graph::{Eager, Graph};
pub use ops::{
    avgpool2, batch_norm, concat_channels, conv2d_same, conv3d_valid, crop, crop_center,
    leaky_relu, pad2d, slice_axis, upsample_nn2, upsample_nn2_axes, BatchNormStats, Mode,
};
pub use param::{ParamEntry, ParamId, ParamStore, ParamTensor};
pub use tape::{BatchNormRefs, GradTape, Gradients, RecordedStats, Var, Weight};
pub use ops::{BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub(crate) use ops::center_offsets;
pub(crate) use tape::gram_matrix;

use crate::error::{Axis, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f32) -> Self {
        let len = channels * dims.iter().product::<usize>();
        Self {
            channels,
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape {
                op: "Tensor4::from_vec",
                axis: Axis::Channels,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(channel, [i, j, l])` at every entry.
    pub fn from_fn(channels: usize, dims: [usize; 3], mut f: impl FnMut(usize, [usize; 3]) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for c in 0..channels {
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    for l in 0..dims[2] {
                        data.push(f(c, [i, j, l]));
                    }
                }
            }
        }
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            channels: 1,
            dims: [1, 1, 1],
            data: vec![value],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, [i, j, l]: [usize; 3]) -> usize {
        ((c * self.dims[0] + i) * self.dims[1] + j) * self.dims[2] + l
    }

    #[inline]
    pub fn get(&self, c: usize, at: [usize; 3]) -> f32 {
        self.data[self.offset(c, at)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, at: [usize; 3], value: f32) {
        let o = self.offset(c, at);
        self.data[o] = value;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Reinterprets the spatial dims without moving data.
    pub fn reshaped(mut self, dims: [usize; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.spatial_len() {
            return Err(Error::Shape {
                op: "reshape",
                axis: Axis::Dim(0),
                expected: self.spatial_len(),
                actual: n,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.channels, other.channels);
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Copies `src` into this tensor with its origin placed at `at`.
    pub fn paste(&mut self, src: &Tensor4, at: [usize; 3]) -> Result<()> {
        if src.channels != self.channels {
            return Err(Error::Shape {
                op: "paste",
                axis: Axis::Channels,
                expected: self.channels,
                actual: src.channels,
            });
        }
        for d in 0..3 {
            if at[d] + src.dims[d] > self.dims[d] {
                return Err(Error::Shape {
                    op: "paste",
                    axis: Axis::Dim(d),
                    expected: self.dims[d],
                    actual: at[d] + src.dims[d],
                });
            }
        }
        let [_, s1, s2] = src.dims;
        for c in 0..src.channels {
            for i in 0..src.dims[0] {
                for j in 0..s1 {
                    let from = src.offset(c, [i, j, 0]);
                    let to = self.offset(c, [at[0] + i, at[1] + j, at[2]]);
                    self.data[to..to + s2].copy_from_slice(&src.data[from..from + s2]);
                }
            }
        }
        Ok(())
    }
}
