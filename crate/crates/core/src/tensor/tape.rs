//! Reverse-mode differentiation over the fixed operation set.
//!
//! A [`GradTape`] records every operation with its output value. Calling
//! [`GradTape::backward`] once walks the record in reverse and returns the
//! gradient of a scalar with respect to every parameter of the attached
//! [`ParamStore`] (zero for parameters that did not contribute) and every
//! leaf created with [`GradTape::leaf`].

use super::kernels;
use super::ops::{self, BatchNormStats, Mode, BN_EPS};
use super::{ParamId, ParamStore, ParamTensor, Tensor4};
use crate::error::{Axis, Error, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Where a kernel or bias comes from: a store parameter (receives a
/// gradient) or a borrowed constant (descriptor weights).
#[derive(Debug, Clone, Copy)]
pub enum Weight<'a> {
    Param(ParamId),
    Fixed(&'a ParamTensor),
}

/// Store ids of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormRefs {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct RecordedStats {
    pub refs: BatchNormRefs,
    pub stats: BatchNormStats,
}

enum Op<'a> {
    Leaf,
    Conv {
        x: Var,
        w: Weight<'a>,
        b: Weight<'a>,
        kernel: [usize; 3],
    },
    Pad {
        x: Var,
        pad: usize,
    },
    Upsample {
        x: Var,
        axes: [bool; 3],
    },
    AvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        refs: BatchNormRefs,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Crop {
        x: Var,
        offset: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        axis: usize,
        index: usize,
    },
    Gram {
        x: Var,
    },
    GramDistance {
        g: Var,
        target: &'a Tensor4,
        weight: f64,
    },
    Sum {
        x: Var,
    },
    SquaredNorm {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    ChannelAffine {
        x: Var,
        scale: f32,
    },
}

struct Node<'a> {
    value: Tensor4,
    op: Op<'a>,
    needs_grad: bool,
}

pub struct GradTape<'a> {
    params: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    bn_stats: Vec<RecordedStats>,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Vec<f32>>,
    nodes: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient for a store parameter; all zeros when it did not contribute.
    pub fn param(&self, id: ParamId) -> &[f32] {
        &self.params[id.0]
    }

    pub fn into_params(self) -> Vec<Vec<f32>> {
        self.params
    }

    /// Gradient for a leaf created with [`GradTape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor4> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn add_into(dst: &mut Option<Tensor4>, src: Tensor4) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                *a += *b;
            }
        }
        None => *dst = Some(src),
    }
}

fn add_slice(dst: &mut [f32], src: &[f32]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

impl<'a> GradTape<'a> {
    /// Tape whose `Weight::Param` references resolve against `params`.
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            bn_stats: Vec::new(),
            consumed: false,
        }
    }

    /// Tape without a parameter store; only constants and leaves.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            bn_stats: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn weight_data(&self, w: Weight<'a>) -> &[f32] {
        match w {
            Weight::Param(id) => &self.params.expect("tape has no parameter store").get(id).data,
            Weight::Fixed(t) => &t.data,
        }
    }

    fn weight_shape(&self, w: Weight<'a>) -> &[usize] {
        match w {
            Weight::Param(id) => &self.params.expect("tape has no parameter store").get(id).shape,
            Weight::Fixed(t) => &t.shape,
        }
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Train-mode batch statistics recorded so far, drained.
    pub fn take_bn_stats(&mut self) -> Vec<RecordedStats> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Valid correlation; kernel rank decides 3D (`[co, ci, k, k, k]`) or
    /// 2D (`[co, ci, k, k]`, requires `d3 == 1`).
    pub fn conv_valid(&mut self, x: Var, w: Weight<'a>, b: Weight<'a>) -> Result<Var> {
        let shape = self.weight_shape(w).to_vec();
        let (op_name, spatial) = match shape.len() {
            5 => ("conv3d_valid", 3),
            4 => ("conv2d_same", 2),
            n => return Err(Error::invalid("conv", format!("kernel rank {n}"))),
        };
        let cout = shape[0];
        let cin = shape[1];
        let mut kernel = [1; 3];
        kernel[..spatial].copy_from_slice(&shape[2..]);
        if cin != self.value(x).channels() {
            return Err(Error::Shape {
                op: op_name,
                axis: Axis::Channels,
                expected: cin,
                actual: self.value(x).channels(),
            });
        }
        if self.weight_data(b).len() != cout {
            return Err(Error::Shape {
                op: op_name,
                axis: Axis::Channels,
                expected: cout,
                actual: self.weight_data(b).len(),
            });
        }
        let out = ops::conv_valid_raw(self.value(x), self.weight_data(w), self.weight_data(b), cout, kernel, op_name)?;
        let needs = self.needs(x) || matches!(w, Weight::Param(_)) || matches!(b, Weight::Param(_));
        Ok(self.push(out, Op::Conv { x, w, b, kernel }, needs))
    }

    pub fn conv3d_valid(&mut self, x: Var, w: Weight<'a>, b: Weight<'a>) -> Result<Var> {
        if self.weight_shape(w).len() != 5 {
            return Err(Error::invalid("conv3d_valid", "kernel must be rank 5"));
        }
        self.conv_valid(x, w, b)
    }

    /// Zero-padded 3x3 convolution on a 2D carrier.
    pub fn conv2d_same(&mut self, x: Var, w: Weight<'a>, b: Weight<'a>) -> Result<Var> {
        if self.weight_shape(w).len() != 4 {
            return Err(Error::invalid("conv2d_same", "kernel must be rank 4"));
        }
        if self.value(x).dims()[2] != 1 {
            return Err(Error::Shape {
                op: "conv2d_same",
                axis: Axis::Dim(2),
                expected: 1,
                actual: self.value(x).dims()[2],
            });
        }
        let p = self.pad2d(x, 1);
        self.conv_valid(p, w, b)
    }

    pub fn pad2d(&mut self, x: Var, pad: usize) -> Var {
        let out = ops::pad2d(self.value(x), pad);
        let needs = self.needs(x);
        self.push(out, Op::Pad { x, pad }, needs)
    }

    pub fn upsample_nn2(&mut self, x: Var) -> Var {
        self.upsample_nn2_axes(x, [true; 3])
    }

    pub fn upsample_nn2_axes(&mut self, x: Var, axes: [bool; 3]) -> Var {
        let out = ops::upsample_nn2_axes(self.value(x), axes);
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x, axes }, needs)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avgpool2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x }, needs))
    }

    pub fn batch_norm(&mut self, x: Var, refs: BatchNormRefs, mode: Mode) -> Result<Var> {
        let params = self.params.expect("batch norm needs a parameter store");
        let (out, stats) = ops::batch_norm(
            self.value(x),
            &params.get(refs.weight).data,
            &params.get(refs.bias).data,
            &params.get(refs.mean).data,
            &params.get(refs.var).data,
            mode,
        )?;
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mean = stats.mean.clone();
        let train = mode == Mode::Train;
        if train {
            self.bn_stats.push(RecordedStats { refs, stats });
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                refs,
                mean,
                inv_std,
                train,
            },
            true,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn crop(&mut self, x: Var, offset: [usize; 3], dims: [usize; 3]) -> Result<Var> {
        let out = ops::crop(self.value(x), offset, dims)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Crop { x, offset }, needs))
    }

    pub fn crop_center(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let off = ops::center_offsets(self.value(x).dims(), target)?;
        self.crop(x, off, target)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let out = ops::slice_axis(self.value(x), axis, index)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Slice { x, axis, index }, needs))
    }

    /// `(1/N) F^T F` over the spatial positions of a feature map, accumulated
    /// in f64. Stored as a `1 x [M, M, 1]` tensor.
    pub fn gram(&mut self, x: Var) -> Var {
        let out = gram_matrix(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Gram { x }, needs)
    }

    /// `weight * ||g - target||_F^2` as a scalar.
    pub fn gram_distance(&mut self, g: Var, target: &'a Tensor4, weight: f64) -> Result<Var> {
        let gv = self.value(g);
        if gv.dims() != target.dims() || gv.channels() != target.channels() {
            return Err(Error::Shape {
                op: "gram_distance",
                axis: Axis::Dim(0),
                expected: target.dims()[0],
                actual: gv.dims()[0],
            });
        }
        let d: f64 = gv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let e = a as f64 - b as f64;
                e * e
            })
            .sum();
        let needs = self.needs(g);
        Ok(self.push(Tensor4::scalar((weight * d) as f32), Op::GramDistance { g, target, weight }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor4::scalar(s as f32), Op::Sum { x }, needs)
    }

    pub fn squared_norm(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64 * v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor4::scalar(s as f32), Op::SquaredNorm { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() || va.channels() != vb.channels() {
            return Err(Error::Shape {
                op: "add",
                axis: Axis::Channels,
                expected: va.len(),
                actual: vb.len(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor4::from_vec(va.channels(), va.dims(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    /// `y[c] = x[c] * scale + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: f32, shift: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        if shift.len() != xv.channels() {
            return Err(Error::Shape {
                op: "channel_affine",
                axis: Axis::Channels,
                expected: shift.len(),
                actual: xv.channels(),
            });
        }
        let mut out = xv.clone();
        for (c, &s) in shift.iter().enumerate() {
            for v in out.channel_mut(c) {
                *v = *v * scale + s;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelAffine { x, scale }, needs))
    }

    /// Reverse pass from the scalar `loss`. The tape can be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar"));
        }
        let n_params = self.params.map_or(0, |p| p.len());
        let mut pgrads: Vec<Vec<f32>> = match self.params {
            Some(p) => p.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            None => Vec::new(),
        };
        debug_assert_eq!(pgrads.len(), n_params);
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(1.0));
        let mut leaf_grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(g);
                }
                Op::Conv { x, w, b, kernel } => {
                    let xv = &self.nodes[x.0].value;
                    let cout = node.value.channels();
                    let want_params = matches!(w, Weight::Param(_)) || matches!(b, Weight::Param(_));
                    let (dx, dw, db) = kernels::conv_valid_backward(
                        xv.data(),
                        xv.channels(),
                        xv.dims(),
                        self.weight_data(*w),
                        cout,
                        *kernel,
                        g.data(),
                        self.needs(*x),
                        want_params,
                    );
                    if let Weight::Param(id) = w {
                        add_slice(&mut pgrads[id.0], &dw);
                    }
                    if let Weight::Param(id) = b {
                        add_slice(&mut pgrads[id.0], &db);
                    }
                    if self.needs(*x) {
                        add_into(&mut grads[x.0], Tensor4::from_vec(xv.channels(), xv.dims(), dx)?);
                    }
                }
                Op::Pad { x, pad } => {
                    let dims = self.nodes[x.0].value.dims();
                    add_into(&mut grads[x.0], ops::crop(&g, [*pad, *pad, 0], dims)?);
                }
                Op::Upsample { x, axes } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut grads[x.0], upsample_adjoint(&g, xv.dims(), *axes));
                }
                Op::AvgPool { x } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut grads[x.0], avgpool_adjoint(&g, xv.dims()));
                }
                Op::BatchNorm {
                    x,
                    refs,
                    mean,
                    inv_std,
                    train,
                } => {
                    let params = self.params.expect("batch norm needs a parameter store");
                    let xv = &self.nodes[x.0].value;
                    let weight = &params.get(refs.weight).data;
                    let n = xv.spatial_len() as f64;
                    let mut dx = Tensor4::zeros(xv.channels(), xv.dims());
                    for c in 0..xv.channels() {
                        let xs = xv.channel(c);
                        let gs = g.channel(c);
                        let (m, is) = (mean[c], inv_std[c]);
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for (&xi, &gi) in xs.iter().zip(gs) {
                            let xhat = ((xi - m) * is) as f64;
                            sum_g += gi as f64;
                            sum_gx += gi as f64 * xhat;
                        }
                        pgrads[refs.weight.0][c] += sum_gx as f32;
                        pgrads[refs.bias.0][c] += sum_g as f32;
                        let w = weight[c] as f64 * is as f64;
                        let d = dx.channel_mut(c);
                        if *train {
                            for ((di, &xi), &gi) in d.iter_mut().zip(xs).zip(gs) {
                                let xhat = ((xi - m) * is) as f64;
                                *di = (w * (gi as f64 - sum_g / n - xhat * sum_gx / n)) as f32;
                            }
                        } else {
                            for (di, &gi) in d.iter_mut().zip(gs) {
                                *di = (w * gi as f64) as f32;
                            }
                        }
                    }
                    if self.needs(*x) {
                        add_into(&mut grads[x.0], dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g;
                    for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if xi < 0.0 {
                            *d *= slope;
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::Crop { x, offset } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor4::zeros(xv.channels(), xv.dims());
                    dx.paste(&g, *offset)?;
                    add_into(&mut grads[x.0], dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[a.0].value.channels();
                    let cb = self.nodes[b.0].value.channels();
                    let per = g.spatial_len();
                    let dims = g.dims();
                    let data = g.into_data();
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], Tensor4::from_vec(ca, dims, data[..ca * per].to_vec())?);
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], Tensor4::from_vec(cb, dims, data[ca * per..].to_vec())?);
                    }
                }
                Op::Slice { x, axis, index } => {
                    let xv = &self.nodes[x.0].value;
                    let mut extent = xv.dims();
                    extent[*axis] = 1;
                    let mut offset = [0; 3];
                    offset[*axis] = *index;
                    let mut dx = Tensor4::zeros(xv.channels(), xv.dims());
                    dx.paste(&g.reshaped(extent)?, offset)?;
                    add_into(&mut grads[x.0], dx);
                }
                Op::Gram { x } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut grads[x.0], gram_adjoint(xv, &g));
                }
                Op::GramDistance { g: gv, target, weight } => {
                    let up = g.data()[0] as f64;
                    let v = &self.nodes[gv.0].value;
                    let data = v
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| (2.0 * weight * up * (a as f64 - b as f64)) as f32)
                        .collect();
                    add_into(&mut grads[gv.0], Tensor4::from_vec(v.channels(), v.dims(), data)?);
                }
                Op::Sum { x } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut grads[x.0], Tensor4::filled(xv.channels(), xv.dims(), g.data()[0]));
                }
                Op::SquaredNorm { x } => {
                    let up = g.data()[0];
                    let dx = self.nodes[x.0].value.map(|v| 2.0 * v * up);
                    add_into(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::Scale { x, factor } => {
                    add_into(&mut grads[x.0], g.map(|v| v * factor));
                }
                Op::ChannelAffine { x, scale } => {
                    add_into(&mut grads[x.0], g.map(|v| v * scale));
                }
            }
        }
        Ok(Gradients {
            params: pgrads,
            nodes: leaf_grads,
        })
    }
}

pub(crate) fn gram_matrix(f: &Tensor4) -> Tensor4 {
    let m = f.channels();
    let n = f.spatial_len();
    let mut g = Tensor4::zeros(1, [m, m, 1]);
    let inv = 1.0 / n as f64;
    for a in 0..m {
        let fa = f.channel(a);
        for b in a..m {
            let fb = f.channel(b);
            let s: f64 = fa.iter().zip(fb).map(|(&x, &y)| x as f64 * y as f64).sum();
            let v = (s * inv) as f32;
            g.data_mut()[a * m + b] = v;
            g.data_mut()[b * m + a] = v;
        }
    }
    g
}

fn gram_adjoint(f: &Tensor4, dg: &Tensor4) -> Tensor4 {
    let m = f.channels();
    let n = f.spatial_len();
    let inv = 1.0 / n as f32;
    let dgd = dg.data();
    let mut df = Tensor4::zeros(m, f.dims());
    for a in 0..m {
        let row = df.channel_mut(a);
        for b in 0..m {
            let s = (dgd[a * m + b] + dgd[b * m + a]) * inv;
            if s == 0.0 {
                continue;
            }
            for (r, &x) in row.iter_mut().zip(f.channel(b)) {
                *r += s * x;
            }
        }
    }
    df
}

fn upsample_adjoint(g: &Tensor4, in_dims: [usize; 3], axes: [bool; 3]) -> Tensor4 {
    let f = axes.map(|a| if a { 2 } else { 1 });
    let gd = g.dims();
    let mut dx = Tensor4::zeros(g.channels(), in_dims);
    for c in 0..g.channels() {
        for i in 0..gd[0] {
            for j in 0..gd[1] {
                for l in 0..gd[2] {
                    let at = [i / f[0], j / f[1], l / f[2]];
                    let o = dx.offset(c, at);
                    dx.data_mut()[o] += g.get(c, [i, j, l]);
                }
            }
        }
    }
    dx
}

fn avgpool_adjoint(g: &Tensor4, in_dims: [usize; 3]) -> Tensor4 {
    let [h, w, _] = g.dims();
    let mut dx = Tensor4::zeros(g.channels(), in_dims);
    let d2 = in_dims[1];
    for c in 0..g.channels() {
        let gs = g.channel(c).to_vec();
        let d = dx.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let v = gs[i * w + j] * 0.25;
                d[(2 * i) * d2 + 2 * j] += v;
                d[(2 * i) * d2 + 2 * j + 1] += v;
                d[(2 * i + 1) * d2 + 2 * j] += v;
                d[(2 * i + 1) * d2 + 2 * j + 1] += v;
            }
        }
    }
    dx
}
