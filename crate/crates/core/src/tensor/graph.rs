//! A single forward description, two evaluators: [`Eager`] computes and
//! drops intermediates, [`GradTape`] records them for differentiation. Both
//! call the same kernels, so their outputs are bit-identical.

use super::ops::{self, Mode};
use super::tape::{BatchNormRefs, GradTape, RecordedStats, Var, Weight};
use super::{ParamId, ParamStore, Tensor4};
use crate::error::Result;

pub trait Graph {
    type Node;

    fn input(&mut self, t: Tensor4) -> Self::Node;
    fn dims(&self, n: &Self::Node) -> [usize; 3];
    fn channels(&self, n: &Self::Node) -> usize;
    fn conv3d_valid(&mut self, x: &Self::Node, w: ParamId, b: ParamId) -> Result<Self::Node>;
    fn batch_norm(&mut self, x: &Self::Node, refs: BatchNormRefs, mode: Mode) -> Result<Self::Node>;
    fn leaky_relu(&mut self, x: &Self::Node, slope: f32) -> Self::Node;
    fn upsample_nn2(&mut self, x: &Self::Node) -> Self::Node;
    fn crop(&mut self, x: &Self::Node, offset: [usize; 3], dims: [usize; 3]) -> Result<Self::Node>;
    fn concat_channels(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// Train-mode batch statistics observed since the last call.
    fn take_bn_stats(&mut self) -> Vec<RecordedStats>;
}

/// Direct evaluation against a parameter store.
pub struct Eager<'a> {
    params: &'a ParamStore,
    bn_stats: Vec<RecordedStats>,
}

impl<'a> Eager<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            bn_stats: Vec::new(),
        }
    }
}

impl Graph for Eager<'_> {
    type Node = Tensor4;

    fn input(&mut self, t: Tensor4) -> Tensor4 {
        t
    }

    fn dims(&self, n: &Tensor4) -> [usize; 3] {
        n.dims()
    }

    fn channels(&self, n: &Tensor4) -> usize {
        n.channels()
    }

    fn conv3d_valid(&mut self, x: &Tensor4, w: ParamId, b: ParamId) -> Result<Tensor4> {
        ops::conv3d_valid(x, self.params.get(w), self.params.get(b))
    }

    fn batch_norm(&mut self, x: &Tensor4, refs: BatchNormRefs, mode: Mode) -> Result<Tensor4> {
        let p = self.params;
        let (out, stats) = ops::batch_norm(
            x,
            &p.get(refs.weight).data,
            &p.get(refs.bias).data,
            &p.get(refs.mean).data,
            &p.get(refs.var).data,
            mode,
        )?;
        if mode == Mode::Train {
            self.bn_stats.push(RecordedStats { refs, stats });
        }
        Ok(out)
    }

    fn leaky_relu(&mut self, x: &Tensor4, slope: f32) -> Tensor4 {
        ops::leaky_relu(x, slope)
    }

    fn upsample_nn2(&mut self, x: &Tensor4) -> Tensor4 {
        ops::upsample_nn2(x)
    }

    fn crop(&mut self, x: &Tensor4, offset: [usize; 3], dims: [usize; 3]) -> Result<Tensor4> {
        if offset == [0; 3] && dims == x.dims() {
            return Ok(x.clone());
        }
        ops::crop(x, offset, dims)
    }

    fn concat_channels(&mut self, a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        ops::concat_channels(a, b)
    }

    fn take_bn_stats(&mut self) -> Vec<RecordedStats> {
        std::mem::take(&mut self.bn_stats)
    }
}

impl Graph for GradTape<'_> {
    type Node = Var;

    fn input(&mut self, t: Tensor4) -> Var {
        GradTape::input(self, t)
    }

    fn dims(&self, n: &Var) -> [usize; 3] {
        self.value(*n).dims()
    }

    fn channels(&self, n: &Var) -> usize {
        self.value(*n).channels()
    }

    fn conv3d_valid(&mut self, x: &Var, w: ParamId, b: ParamId) -> Result<Var> {
        GradTape::conv3d_valid(self, *x, Weight::Param(w), Weight::Param(b))
    }

    fn batch_norm(&mut self, x: &Var, refs: BatchNormRefs, mode: Mode) -> Result<Var> {
        GradTape::batch_norm(self, *x, refs, mode)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f32) -> Var {
        GradTape::leaky_relu(self, *x, slope)
    }

    fn upsample_nn2(&mut self, x: &Var) -> Var {
        GradTape::upsample_nn2(self, *x)
    }

    fn crop(&mut self, x: &Var, offset: [usize; 3], dims: [usize; 3]) -> Result<Var> {
        if offset == [0; 3] && dims == self.value(*x).dims() {
            return Ok(*x);
        }
        GradTape::crop(self, *x, offset, dims)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        GradTape::concat_channels(self, *a, *b)
    }

    fn take_bn_stats(&mut self) -> Vec<RecordedStats> {
        GradTape::take_bn_stats(self)
    }
}
