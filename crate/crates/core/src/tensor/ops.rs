//! Forward evaluation of the tensor operations. The tape in `tape.rs` records
//! these and supplies the adjoints.

use super::kernels;
use super::{ParamTensor, Tensor4};
use crate::error::{Axis, Error, Result};

/// Batch-norm epsilon, added to the variance inside the square root.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the newest sample statistics in the running-stat update.
pub const BN_MOMENTUM: f32 = 0.1;
/// Negative-side slope of the generator's leaky ReLU.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Normalize with statistics of the sample at hand.
    Train,
    /// Normalize with running statistics.
    #[default]
    Infer,
}

/// Statistics used by one batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    /// Variance actually used for normalization (biased in train mode).
    pub var: Vec<f32>,
    /// Unbiased sample variance, fed to the running-stat update.
    pub unbiased_var: Vec<f32>,
}

fn kernel_dims(weight: &ParamTensor, op: &'static str, spatial: usize) -> Result<(usize, usize, [usize; 3])> {
    if weight.shape.len() != 2 + spatial {
        return Err(Error::invalid(op, format!("kernel rank {} (expected {})", weight.shape.len(), 2 + spatial)));
    }
    let cout = weight.shape[0];
    let cin = weight.shape[1];
    let mut k = [1usize; 3];
    k[..spatial].copy_from_slice(&weight.shape[2..]);
    Ok((cout, cin, k))
}

fn check_bias(bias: &ParamTensor, cout: usize, op: &'static str) -> Result<()> {
    if bias.len() != cout {
        return Err(Error::Shape {
            op,
            axis: Axis::Channels,
            expected: cout,
            actual: bias.len(),
        });
    }
    Ok(())
}

pub(crate) fn conv_valid_raw(input: &Tensor4, weights: &[f32], bias: &[f32], cout: usize, kernel: [usize; 3], op: &'static str) -> Result<Tensor4> {
    let dims = input.dims();
    for d in 0..3 {
        if dims[d] < kernel[d] {
            return Err(Error::Shape {
                op,
                axis: Axis::Dim(d),
                expected: kernel[d],
                actual: dims[d],
            });
        }
    }
    let cin = input.channels();
    if weights.len() != cout * cin * kernel.iter().product::<usize>() {
        return Err(Error::Shape {
            op,
            axis: Axis::Channels,
            expected: weights.len() / (cout * kernel.iter().product::<usize>()).max(1),
            actual: cin,
        });
    }
    let out_dims = [dims[0] + 1 - kernel[0], dims[1] + 1 - kernel[1], dims[2] + 1 - kernel[2]];
    let data = kernels::conv_valid_forward(input.data(), cin, dims, weights, bias, cout, kernel);
    Tensor4::from_vec(cout, out_dims, data)
}

/// Unpadded 3D cross-correlation plus bias. `weight` is `[cout, cin, k, k, k]`
/// with `k` in `{1, 3}`.
pub fn conv3d_valid(input: &Tensor4, weight: &ParamTensor, bias: &ParamTensor) -> Result<Tensor4> {
    const OP: &str = "conv3d_valid";
    let (cout, cin, k) = kernel_dims(weight, OP, 3)?;
    if !(k[0] == k[1] && k[1] == k[2] && (k[0] == 1 || k[0] == 3)) {
        return Err(Error::invalid(OP, format!("kernel size {k:?} not in {{1, 3}}")));
    }
    if cin != input.channels() {
        return Err(Error::Shape {
            op: OP,
            axis: Axis::Channels,
            expected: cin,
            actual: input.channels(),
        });
    }
    check_bias(bias, cout, OP)?;
    conv_valid_raw(input, &weight.data, &bias.data, cout, k, OP)
}

/// Zero-pads the first two spatial dims by `pad` on both sides.
pub fn pad2d(input: &Tensor4, pad: usize) -> Tensor4 {
    let [d1, d2, d3] = input.dims();
    let mut out = Tensor4::zeros(input.channels(), [d1 + 2 * pad, d2 + 2 * pad, d3]);
    out.paste(input, [pad, pad, 0]).expect("padded tensor encloses input");
    out
}

/// 3x3 convolution over a 2D carrier (`d3 == 1`) with one-pixel zero padding.
/// `weight` is `[cout, cin, 3, 3]`.
pub fn conv2d_same(input: &Tensor4, weight: &ParamTensor, bias: &ParamTensor) -> Result<Tensor4> {
    const OP: &str = "conv2d_same";
    let (cout, cin, k) = kernel_dims(weight, OP, 2)?;
    if k != [3, 3, 1] {
        return Err(Error::invalid(OP, format!("kernel size {:?} (expected 3x3)", &k[..2])));
    }
    if input.dims()[2] != 1 {
        return Err(Error::Shape {
            op: OP,
            axis: Axis::Dim(2),
            expected: 1,
            actual: input.dims()[2],
        });
    }
    if cin != input.channels() {
        return Err(Error::Shape {
            op: OP,
            axis: Axis::Channels,
            expected: cin,
            actual: input.channels(),
        });
    }
    check_bias(bias, cout, OP)?;
    conv_valid_raw(&pad2d(input, 1), &weight.data, &bias.data, cout, k, OP)
}

/// Nearest-neighbour upsampling by two along every spatial dim.
pub fn upsample_nn2(input: &Tensor4) -> Tensor4 {
    upsample_nn2_axes(input, [true; 3])
}

/// Nearest-neighbour upsampling by two along the selected dims.
pub fn upsample_nn2_axes(input: &Tensor4, axes: [bool; 3]) -> Tensor4 {
    let dims = input.dims();
    let f = axes.map(|a| if a { 2 } else { 1 });
    let out_dims = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
    let mut out = Vec::with_capacity(input.channels() * out_dims.iter().product::<usize>());
    for c in 0..input.channels() {
        for i in 0..out_dims[0] {
            for j in 0..out_dims[1] {
                let row = input.offset(c, [i / f[0], j / f[1], 0]);
                let src = &input.data()[row..row + dims[2]];
                if f[2] == 2 {
                    for &v in src {
                        out.push(v);
                        out.push(v);
                    }
                } else {
                    out.extend_from_slice(src);
                }
            }
        }
    }
    Tensor4::from_vec(input.channels(), out_dims, out).expect("upsample shape")
}

/// 2x2 mean pooling with stride 2 on a 2D carrier. A trailing odd row or
/// column is dropped.
pub fn avgpool2(input: &Tensor4) -> Result<Tensor4> {
    let [d1, d2, d3] = input.dims();
    if d3 != 1 {
        return Err(Error::Shape {
            op: "avgpool2",
            axis: Axis::Dim(2),
            expected: 1,
            actual: d3,
        });
    }
    let (h, w) = (d1 / 2, d2 / 2);
    if h == 0 || w == 0 {
        return Err(Error::invalid("avgpool2", format!("input {d1}x{d2} too small to pool")));
    }
    let mut out = Tensor4::zeros(input.channels(), [h, w, 1]);
    for c in 0..input.channels() {
        let x = input.channel(c);
        let o = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let a = x[(2 * i) * d2 + 2 * j];
                let b = x[(2 * i) * d2 + 2 * j + 1];
                let cc = x[(2 * i + 1) * d2 + 2 * j];
                let d = x[(2 * i + 1) * d2 + 2 * j + 1];
                o[i * w + j] = ((a + b) + (cc + d)) * 0.25;
            }
        }
    }
    Ok(out)
}

/// Per-channel batch normalization. In train mode the statistics come from
/// the spatial extent of `input`; in infer mode from `running_mean` and
/// `running_var`. Returns the output and the statistics used.
pub fn batch_norm(
    input: &Tensor4,
    weight: &[f32],
    bias: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    mode: Mode,
) -> Result<(Tensor4, BatchNormStats)> {
    const OP: &str = "batch_norm";
    let c = input.channels();
    for (len, _name) in [(weight.len(), "weight"), (bias.len(), "bias"), (running_mean.len(), "mean"), (running_var.len(), "var")] {
        if len != c {
            return Err(Error::Shape {
                op: OP,
                axis: Axis::Channels,
                expected: len,
                actual: c,
            });
        }
    }
    let n = input.spatial_len();
    if n == 0 {
        return Err(Error::invalid(OP, "zero spatial extent"));
    }
    let stats = match mode {
        Mode::Train => {
            let mut mean = Vec::with_capacity(c);
            let mut var = Vec::with_capacity(c);
            let mut unbiased = Vec::with_capacity(c);
            for ch in 0..c {
                let x = input.channel(ch);
                let m = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let ss = x.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>();
                mean.push(m as f32);
                var.push((ss / n as f64) as f32);
                unbiased.push(if n > 1 { (ss / (n - 1) as f64) as f32 } else { 0.0 });
            }
            BatchNormStats {
                mean,
                var,
                unbiased_var: unbiased,
            }
        }
        Mode::Infer => BatchNormStats {
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
            unbiased_var: running_var.to_vec(),
        },
    };
    let mut out = input.clone();
    for ch in 0..c {
        let inv_std = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
        let (m, w, b) = (stats.mean[ch], weight[ch], bias[ch]);
        for v in out.channel_mut(ch) {
            *v = (*v - m) * inv_std * w + b;
        }
    }
    Ok((out, stats))
}

/// `x` for non-negative entries, `slope * x` otherwise.
pub fn leaky_relu(input: &Tensor4, slope: f32) -> Tensor4 {
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Extracts the box starting at `offset` with extent `dims`.
pub fn crop(input: &Tensor4, offset: [usize; 3], dims: [usize; 3]) -> Result<Tensor4> {
    let in_dims = input.dims();
    for d in 0..3 {
        if offset[d] + dims[d] > in_dims[d] {
            return Err(Error::Shape {
                op: "crop",
                axis: Axis::Dim(d),
                expected: in_dims[d],
                actual: offset[d] + dims[d],
            });
        }
    }
    let mut out = Vec::with_capacity(input.channels() * dims.iter().product::<usize>());
    for c in 0..input.channels() {
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let s = input.offset(c, [offset[0] + i, offset[1] + j, offset[2]]);
                out.extend_from_slice(&input.data()[s..s + dims[2]]);
            }
        }
    }
    Tensor4::from_vec(input.channels(), dims, out)
}

/// Low-side offsets of a centered crop from `from` to `to`; an odd margin
/// loses its extra voxel on the high-index side.
pub(crate) fn center_offsets(from: [usize; 3], to: [usize; 3]) -> Result<[usize; 3]> {
    let mut off = [0; 3];
    for d in 0..3 {
        if to[d] > from[d] {
            return Err(Error::Shape {
                op: "crop_center",
                axis: Axis::Dim(d),
                expected: from[d],
                actual: to[d],
            });
        }
        off[d] = (from[d] - to[d]) / 2;
    }
    Ok(off)
}

/// Symmetric crop to `target`; see [`center_offsets`] for the tie-break.
pub fn crop_center(input: &Tensor4, target: [usize; 3]) -> Result<Tensor4> {
    let off = center_offsets(input.dims(), target)?;
    crop(input, off, target)
}

/// Stacks the channels of `a` then `b`; spatial dims must agree.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    for d in 0..3 {
        if a.dims()[d] != b.dims()[d] && a.channels() > 0 && b.channels() > 0 {
            return Err(Error::Shape {
                op: "concat_channels",
                axis: Axis::Dim(d),
                expected: a.dims()[d],
                actual: b.dims()[d],
            });
        }
    }
    let dims = if a.channels() > 0 { a.dims() } else { b.dims() };
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor4::from_vec(a.channels() + b.channels(), dims, data)
}

/// Dims of the image obtained by slicing a volume orthogonally to `axis`.
pub(crate) fn slice_dims(dims: [usize; 3], axis: usize) -> [usize; 3] {
    match axis {
        0 => [dims[1], dims[2], 1],
        1 => [dims[0], dims[2], 1],
        _ => [dims[0], dims[1], 1],
    }
}

/// The `index`-th slice orthogonal to `axis`, returned as a 2D carrier whose
/// rows and columns are the remaining two dims in ascending order.
pub fn slice_axis(input: &Tensor4, axis: usize, index: usize) -> Result<Tensor4> {
    if axis > 2 {
        return Err(Error::invalid("slice_axis", format!("axis {axis} out of range")));
    }
    let dims = input.dims();
    if index >= dims[axis] {
        return Err(Error::Shape {
            op: "slice_axis",
            axis: Axis::Dim(axis),
            expected: dims[axis],
            actual: index + 1,
        });
    }
    let mut offset = [0; 3];
    offset[axis] = index;
    let mut extent = dims;
    extent[axis] = 1;
    crop(input, offset, extent)?.reshaped(slice_dims(dims, axis))
}
