//! Self-checks: patch correspondence maps, per-direction loss reports and a
//! structural summary of a generator.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::descriptor::{loss3d_report, DescriptorNet, DirectionLoss, ExemplarSet, TAPS};
use crate::error::{Axis, Error, Result};
use crate::generator::{GeneratorModel, RegionRequest};
use crate::tensor::Tensor4;

pub const DEFAULT_PATCH: usize = 4;

/// For each patch position of `a` (top-left corner, stride 1), the top-left
/// corner of the closest patch of `b`. Positions are `[row, col]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrespondenceMap {
    pub patch: usize,
    /// Patch positions of `a`: rows, cols.
    pub dims: [usize; 2],
    /// Patch positions of `b`.
    pub target_dims: [usize; 2],
    pub coords: Vec<[usize; 2]>,
}

fn plane_dims(op: &'static str, t: &Tensor4, patch: usize) -> Result<[usize; 2]> {
    if t.channels() != 3 {
        return Err(Error::Shape {
            op,
            axis: Axis::Channels,
            expected: 3,
            actual: t.channels(),
        });
    }
    let [h, w, d] = t.dims();
    if d != 1 || h < patch || w < patch || patch == 0 {
        return Err(Error::invalid(op, format!("need a 2D image of at least {patch}x{patch}, got {:?}", t.dims())));
    }
    Ok([h, w])
}

/// Exhaustive nearest-patch search under squared L2 over RGB. Ties go to the
/// lowest linear index `row * cols + col` of `b`.
pub fn correspondence_map(a: &Tensor4, b: &Tensor4, patch: usize) -> Result<CorrespondenceMap> {
    let [ha, wa] = plane_dims("correspondence_map", a, patch)?;
    let [hb, wb] = plane_dims("correspondence_map", b, patch)?;
    let (ra, ca) = (ha - patch + 1, wa - patch + 1);
    let (rb, cb) = (hb - patch + 1, wb - patch + 1);
    let gather = |t: &Tensor4, i: usize, j: usize| -> Vec<f32> {
        let mut v = Vec::with_capacity(3 * patch * patch);
        for c in 0..3 {
            for di in 0..patch {
                for dj in 0..patch {
                    v.push(t.get(c, [i + di, j + dj, 0]));
                }
            }
        }
        v
    };
    let bank: Vec<Vec<f32>> = (0..rb * cb).map(|n| gather(b, n / cb, n % cb)).collect();
    let coords = (0..ra * ca)
        .into_par_iter()
        .map(|n| {
            let q = gather(a, n / ca, n % ca);
            let mut best = (f64::INFINITY, 0usize);
            for (m, p) in bank.iter().enumerate() {
                let d: f64 = q.iter().zip(p).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, m);
                }
            }
            [best.1 / cb, best.1 % cb]
        })
        .collect();
    Ok(CorrespondenceMap {
        patch,
        dims: [ra, ca],
        target_dims: [rb, cb],
        coords,
    })
}

impl CorrespondenceMap {
    pub fn at(&self, i: usize, j: usize) -> [usize; 2] {
        self.coords[i * self.dims[1] + j]
    }

    pub fn displacement(&self, i: usize, j: usize) -> [i64; 2] {
        let [p, q] = self.at(i, j);
        [p as i64 - i as i64, q as i64 - j as i64]
    }

    pub fn is_identity(&self) -> bool {
        self.coords.iter().enumerate().all(|(n, &c)| c == [n / self.dims[1], n % self.dims[1]])
    }

    /// Longest run of equal displacement vectors along any row or column.
    pub fn longest_run(&self) -> usize {
        let [r, c] = self.dims;
        let mut best = 0;
        let mut scan = |cells: &mut dyn Iterator<Item = [i64; 2]>| {
            let mut prev = None;
            let mut run = 0;
            for d in cells {
                run = if Some(d) == prev { run + 1 } else { 1 };
                prev = Some(d);
                best = best.max(run);
            }
        };
        for i in 0..r {
            scan(&mut (0..c).map(|j| self.displacement(i, j)));
        }
        for j in 0..c {
            scan(&mut (0..r).map(|i| self.displacement(i, j)));
        }
        best
    }

    /// Matched row in red and column in green, both scaled to `[0, 1]`.
    pub fn render(&self) -> Tensor4 {
        let [rb, cb] = self.target_dims;
        let scale = |v: usize, n: usize| if n > 1 { v as f32 / (n - 1) as f32 } else { 0.0 };
        Tensor4::from_fn(3, [self.dims[0], self.dims[1], 1], |c, [i, j, _]| {
            let [p, q] = self.at(i, j);
            match c {
                0 => scale(p, rb),
                1 => scale(q, cb),
                _ => 0.0,
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::image::save_png(&self.render(), path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeReport {
    pub directions: Vec<DirectionLoss>,
    pub total: f64,
}

/// The loss of `volume` against `exemplars`, split by direction and tap.
pub fn evaluate_volume(net: &DescriptorNet, volume: &Tensor4, exemplars: &ExemplarSet) -> Result<VolumeReport> {
    let directions = loss3d_report(net, volume, exemplars)?;
    let total = directions.iter().map(|d| d.total).sum();
    Ok(VolumeReport { directions, total })
}

impl fmt::Display for VolumeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.directions {
            write!(f, "axis {}: {:.6e} (", d.axis, d.total)?;
            for (i, (t, v)) in TAPS.iter().zip(&d.per_tap).enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{t} {v:.4e}")?;
            }
            writeln!(f, ")")?;
        }
        write!(f, "total: {:.6e}", self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScaleFootprint {
    pub scale: usize,
    pub margin: usize,
    /// Noise window of a single voxel at the origin.
    pub extent: [usize; 3],
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InspectReport {
    pub scales: usize,
    pub noise_channels: usize,
    pub block_channels: usize,
    pub margins: Vec<usize>,
    pub footprint: Vec<ScaleFootprint>,
    pub scalars_per_channel: usize,
    pub scalars_total: usize,
    pub parameters: usize,
    pub trainable_parameters: usize,
    pub channel_schedule: Vec<usize>,
}

pub fn inspect(model: &GeneratorModel) -> InspectReport {
    let cfg = model.config();
    let voxel = RegionRequest {
        origin: [0; 3],
        size: [1; 3],
    };
    let spec = model.noise_spec(&voxel, 0);
    let margins = model.margins().as_slice().to_vec();
    let footprint = spec
        .windows
        .iter()
        .enumerate()
        .map(|(k, w)| ScaleFootprint {
            scale: k,
            margin: margins[k],
            extent: w.extent,
            voxels: w.voxels(),
        })
        .collect();
    let trainable = model.params().entries().iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum();
    InspectReport {
        scales: cfg.scales,
        noise_channels: cfg.noise_channels,
        block_channels: cfg.block_channels,
        margins,
        footprint,
        scalars_per_channel: spec.scalars_per_channel(),
        scalars_total: spec.total_scalars(),
        parameters: model.parameter_count(),
        trainable_parameters: trainable,
        channel_schedule: model.channel_schedule(),
    }
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scales K={} noise channels={} block channels={}", self.scales, self.noise_channels, self.block_channels)?;
        writeln!(f, "margins: {:?}", self.margins)?;
        writeln!(f, "single-voxel noise footprint:")?;
        for s in &self.footprint {
            let [a, b, c] = s.extent;
            writeln!(f, "  scale {}: c={} extent {a}x{b}x{c} = {}", s.scale, s.margin, s.voxels)?;
        }
        writeln!(f, "noise scalars: {} per channel, {} total", self.scalars_per_channel, self.scalars_total)?;
        writeln!(f, "parameters: {} ({} trainable)", self.parameters, self.trainable_parameters)?;
        write!(f, "channel schedule: {:?}", self.channel_schedule)
    }
}
