//! The multi-scale generator: architecture, forward pass with shift
//! compensation, on-demand region synthesis, tiling and persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{self, MODEL_MAGIC};
use crate::error::{Axis, Error, Result};
use crate::noise::{self, MarginTable, NoiseSpec, ShiftSchedule};
use crate::tensor::{
    center_offsets, BatchNormRefs, Eager, Graph, Mode, ParamId, ParamStore, ParamTensor, RecordedStats, Tensor4,
    BN_MOMENTUM, LEAKY_SLOPE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of upsamplings `K`; the network has `K + 1` scales.
    pub scales: usize,
    /// Noise channels per scale, `M_i`.
    pub noise_channels: usize,
    /// Channels added per scale, `M_s`.
    pub block_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            noise_channels: 3,
            block_channels: 4,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.noise_channels == 0 || self.block_channels == 0 {
            return Err(Error::invalid("generator", format!("K, M_i and M_s must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Width of the post-concatenation block at scale `k < K`.
    pub fn join_width(&self, k: usize) -> usize {
        (self.scales - k + 1) * self.block_channels
    }

    /// Output channels of the branch leaving scale `k`.
    pub fn branch_width(&self, k: usize) -> usize {
        if k == self.scales {
            self.block_channels
        } else {
            self.join_width(k)
        }
    }
}

/// Box of the infinite texture in finest-scale voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionRequest {
    pub origin: [i64; 3],
    pub size: [usize; 3],
}

impl RegionRequest {
    pub fn new(origin: [i64; 3], size: [usize; 3]) -> Result<Self> {
        if let Some(d) = (0..3).find(|&d| size[d] == 0) {
            return Err(Error::invalid("RegionRequest", format!("size along dim {d} must be >= 1")));
        }
        Ok(Self { origin, size })
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }

    /// Splits into blocks of at most `block` voxels per dim, in
    /// lexicographic block order. Returns each block with its offset.
    pub fn blocks(&self, block: [usize; 3]) -> Result<Vec<([usize; 3], RegionRequest)>> {
        if block.contains(&0) {
            return Err(Error::invalid("blocks", "block size must be >= 1"));
        }
        let mut out = Vec::new();
        for i in (0..self.size[0]).step_by(block[0]) {
            for j in (0..self.size[1]).step_by(block[1]) {
                for l in (0..self.size[2]).step_by(block[2]) {
                    let at = [i, j, l];
                    let mut origin = self.origin;
                    let mut size = [0; 3];
                    for d in 0..3 {
                        origin[d] += at[d] as i64;
                        size[d] = block[d].min(self.size[d] - at[d]);
                    }
                    out.push((at, RegionRequest { origin, size }));
                }
            }
        }
        Ok(out)
    }
}

/// A generated box; values are unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidTexture {
    pub volume: Tensor4,
    pub request: RegionRequest,
}

/// Debug fault for tiling verification: toggles one shift bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftFault {
    /// Upsampling index `k` in `1..=K`.
    pub scale: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    convs: [ConvIds; 3],
    norms: [BatchNormRefs; 3],
}

#[derive(Debug, Clone)]
struct JoinIds {
    bn_coarse: BatchNormRefs,
    bn_noise: BatchNormRefs,
    block: BlockIds,
}

#[derive(Debug, Clone)]
struct ScaleIds {
    zblock: BlockIds,
    join: Option<JoinIds>,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    table: MarginTable,
    params: ParamStore,
    scales: Vec<ScaleIds>,
    final_conv: ConvIds,
    /// Free-form metadata stored with the model (training settings, etc.).
    pub metadata: Value,
}

struct Builder {
    params: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let fan_in = (cin * k * k * k) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let n = cout * cin * k * k * k;
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let weight = self.params.push(format!("{name}.weight"), ParamTensor::new(vec![cout, cin, k, k, k], data), true);
        let bias = self.params.push(format!("{name}.bias"), ParamTensor::filled(vec![cout], 0.0), true);
        ConvIds { weight, bias }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNormRefs {
        let mut push = |field: &str, v: f32, trainable: bool| {
            self.params.push(format!("{name}.{field}"), ParamTensor::filled(vec![c], v), trainable)
        };
        BatchNormRefs {
            weight: push("weight", 1.0, true),
            bias: push("bias", 0.0, true),
            mean: push("mean", 0.0, false),
            var: push("var", 1.0, false),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> BlockIds {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, (ci, k)) in [(cin, 3), (cout, 3), (cout, 1)].into_iter().enumerate() {
            convs.push(self.conv(&format!("{prefix}.conv{}", i + 1), ci, cout, k));
            norms.push(self.bn(&format!("{prefix}.bn{}", i + 1), cout));
        }
        BlockIds {
            convs: convs.try_into().unwrap(),
            norms: norms.try_into().unwrap(),
        }
    }
}

pub fn build(config: GeneratorConfig, init_seed: u64) -> Result<GeneratorModel> {
    GeneratorModel::build(config, init_seed)
}

impl GeneratorModel {
    pub fn build(config: GeneratorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let k_max = config.scales;
        let mut b = Builder {
            params: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        };
        let mut scales = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let zblock = b.block(&format!("scale{k}.zblock"), config.noise_channels, config.block_channels);
            let join = (k < k_max).then(|| {
                let coarse = config.branch_width(k + 1);
                JoinIds {
                    bn_coarse: b.bn(&format!("scale{k}.join.bn_coarse"), coarse),
                    bn_noise: b.bn(&format!("scale{k}.join.bn_noise"), config.block_channels),
                    block: b.block(&format!("scale{k}.join"), config.join_width(k), config.join_width(k)),
                }
            });
            scales.push(ScaleIds { zblock, join });
        }
        let final_conv = b.conv("final", config.branch_width(0), 3, 1);
        Ok(Self {
            config,
            table: MarginTable::new(k_max)?,
            params: b.params,
            scales,
            final_conv,
            metadata: Value::Null,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn margins(&self) -> &MarginTable {
        &self.table
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Kernels, biases and all batch-norm tensors, running stats included.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Output channels after each scale, coarsest first, then the color layer.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=self.config.scales).rev().map(|k| self.config.branch_width(k)).collect();
        v.push(3);
        v
    }

    pub fn noise_spec(&self, request: &RegionRequest, seed: u64) -> NoiseSpec {
        NoiseSpec::for_region(request, &self.table, seed, self.config.noise_channels)
    }

    fn run_block<G: Graph>(&self, g: &mut G, x: &G::Node, ids: &BlockIds, mode: Mode) -> Result<G::Node> {
        let mut h = None;
        for (conv, bn) in ids.convs.iter().zip(&ids.norms) {
            let y = g.conv3d_valid(h.as_ref().unwrap_or(x), conv.weight, conv.bias)?;
            let y = g.batch_norm(&y, *bn, mode)?;
            h = Some(g.leaky_relu(&y, LEAKY_SLOPE));
        }
        Ok(h.unwrap())
    }

    fn check_noise(&self, request: &RegionRequest, noise: &[Tensor4]) -> Result<()> {
        let k_max = self.config.scales;
        if noise.len() != k_max + 1 {
            return Err(Error::invalid("forward", format!("expected {} noise tensors, got {}", k_max + 1, noise.len())));
        }
        let windows = noise::noise_extents(request, &self.table);
        for (k, (z, w)) in noise.iter().zip(&windows).enumerate() {
            if z.channels() != self.config.noise_channels {
                return Err(Error::Shape {
                    op: "forward",
                    axis: Axis::Channels,
                    expected: self.config.noise_channels,
                    actual: z.channels(),
                });
            }
            for d in 0..3 {
                if z.dims()[d] != w.extent[d] {
                    return Err(Error::NoiseExtent {
                        scale: k,
                        dim: d,
                        expected: w.extent[d],
                        actual: z.dims()[d],
                    });
                }
            }
        }
        Ok(())
    }

    /// Evaluates the network on any [`Graph`]. `noise[k]` must cover the
    /// windows [`noise::noise_extents`] reports for `request`; the shift
    /// schedule is derived from `request.origin`.
    pub fn forward_graph<G: Graph>(
        &self,
        g: &mut G,
        request: &RegionRequest,
        noise: Vec<Tensor4>,
        mode: Mode,
        fault: Option<ShiftFault>,
    ) -> Result<G::Node> {
        self.check_noise(request, &noise)?;
        let k_max = self.config.scales;
        let schedules: Vec<ShiftSchedule> = (0..3).map(|d| noise::shift_schedule(request.origin[d], k_max)).collect();
        let mut inputs: Vec<Option<G::Node>> = noise.into_iter().map(|z| Some(g.input(z))).collect();

        let z = inputs[k_max].take().unwrap();
        let mut branch = self.run_block(g, &z, &self.scales[k_max].zblock, mode)?;
        for k in (0..k_max).rev() {
            let ids = &self.scales[k];
            let join = ids.join.as_ref().expect("join block below the coarsest scale");

            let up = g.upsample_nn2(&branch);
            let up_dims = g.dims(&up);
            let mut shift = [0usize; 3];
            for d in 0..3 {
                let mut s = schedules[d].shift(k + 1);
                if fault == Some(ShiftFault { scale: k + 1, dim: d }) {
                    s ^= 1;
                }
                shift[d] = s as usize;
            }
            let kept = [up_dims[0] - shift[0], up_dims[1] - shift[1], up_dims[2] - shift[2]];
            let coarse = g.crop(&up, shift, kept)?;

            let z = inputs[k].take().unwrap();
            let fresh = self.run_block(g, &z, &ids.zblock, mode)?;

            let a_dims = g.dims(&coarse);
            let b_dims = g.dims(&fresh);
            let target = [0, 1, 2].map(|d| a_dims[d].min(b_dims[d]));
            let coarse = g.crop(&coarse, center_offsets(a_dims, target)?, target)?;
            let fresh = g.crop(&fresh, center_offsets(b_dims, target)?, target)?;
            let coarse = g.batch_norm(&coarse, join.bn_coarse, mode)?;
            let fresh = g.batch_norm(&fresh, join.bn_noise, mode)?;
            let cat = g.concat_channels(&coarse, &fresh)?;
            branch = self.run_block(g, &cat, &join.block, mode)?;
        }
        let out = g.conv3d_valid(&branch, self.final_conv.weight, self.final_conv.bias)?;
        let dims = g.dims(&out);
        for d in 0..3 {
            if dims[d] != request.size[d] {
                return Err(Error::Shape {
                    op: "forward output",
                    axis: Axis::Dim(d),
                    expected: request.size[d],
                    actual: dims[d],
                });
            }
        }
        Ok(out)
    }

    /// Eager forward on explicit noise tensors.
    pub fn forward(&self, request: &RegionRequest, noise: Vec<Tensor4>, mode: Mode) -> Result<SolidTexture> {
        let mut g = Eager::new(&self.params);
        let volume = self.forward_graph(&mut g, request, noise, mode, None)?;
        Ok(SolidTexture {
            volume,
            request: *request,
        })
    }

    /// Folds averaged train-mode statistics into the running mean/variance:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, samples: &[Vec<RecordedStats>]) {
        let Some(first) = samples.first() else { return };
        for (i, rec) in first.iter().enumerate() {
            let c = rec.stats.mean.len();
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for s in samples {
                let st = &s[i].stats;
                for ch in 0..c {
                    mean[ch] += st.mean[ch] as f64;
                    var[ch] += st.unbiased_var[ch] as f64;
                }
            }
            let n = samples.len() as f64;
            let m = BN_MOMENTUM;
            for (id, acc) in [(rec.refs.mean, &mean), (rec.refs.var, &var)] {
                for (r, a) in self.params.get_mut(id).data.iter_mut().zip(acc) {
                    *r = (1.0 - m) * *r + m * (a / n) as f32;
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, tensors) = self.container_parts();
        container::write_file(path, MODEL_MAGIC, &meta, &tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, tensors) = self.container_parts();
        container::encode(MODEL_MAGIC, &meta, &tensors)
    }

    /// SHA-256 of the saved file, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    fn container_parts(&self) -> (Value, Vec<(&str, &ParamTensor)>) {
        let meta = json!({
            "K": self.config.scales,
            "M_i": self.config.noise_channels,
            "M_s": self.config.block_channels,
            "metadata": self.metadata,
        });
        let tensors = self.params.entries().iter().map(|e| (e.name.as_str(), &e.tensor)).collect();
        (meta, tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read_file(path, MODEL_MAGIC)?;
        Self::from_container(c).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                msg,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(container::decode(bytes, MODEL_MAGIC)?)
    }

    /// Tensors named `adam.*` (optimizer state in checkpoints) are ignored.
    fn from_container(mut c: container::Container) -> Result<Self> {
        c.tensors.retain(|(n, _)| !n.starts_with("adam."));
        let field = |key: &str| {
            c.metadata
                .get(key)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::format(format!("metadata lacks integer field {key}")))
        };
        let config = GeneratorConfig {
            scales: field("K")?,
            noise_channels: field("M_i")?,
            block_channels: field("M_s")?,
        };
        let mut model = Self::build(config, 0)?;
        model.metadata = c.metadata.get("metadata").cloned().unwrap_or(Value::Null);
        if c.tensors.len() != model.params.len() {
            return Err(Error::format(format!(
                "expected {} tensors for K={} M_i={} M_s={}, found {}",
                model.params.len(),
                config.scales,
                config.noise_channels,
                config.block_channels,
                c.tensors.len()
            )));
        }
        for (name, t) in c.tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::format(format!("unexpected tensor {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape != t.shape {
                return Err(Error::format(format!("tensor {name}: shape {:?}, expected {:?}", t.shape, slot.shape)));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// `name shape` lines for every tensor, in file order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.entries().iter().map(|e| (e.name.clone(), e.tensor.shape.clone())).collect()
    }
}

/// Synthesizes `request` from the coordinate-seeded noise field, with
/// running batch-norm statistics.
pub fn generate_region(model: &GeneratorModel, request: &RegionRequest, seed: u64) -> Result<SolidTexture> {
    generate_region_with_fault(model, request, seed, None)
}

pub fn generate_region_with_fault(
    model: &GeneratorModel,
    request: &RegionRequest,
    seed: u64,
    fault: Option<ShiftFault>,
) -> Result<SolidTexture> {
    let spec = model.noise_spec(request, seed);
    let noise = (0..spec.windows.len()).map(|k| noise::sample_noise(&spec, k)).collect();
    let mut g = Eager::new(&model.params);
    let volume = model.forward_graph(&mut g, request, noise, Mode::Infer, fault)?;
    Ok(SolidTexture {
        volume,
        request: *request,
    })
}

/// Timing of one tile.
#[derive(Debug, Clone, Copy)]
pub struct TileTiming {
    pub offset: [usize; 3],
    pub size: [usize; 3],
    pub seconds: f64,
}

/// Generates `request` block by block on `workers` threads and assembles
/// the result. Output is identical to [`generate_region`].
pub fn generate_tiled(
    model: &GeneratorModel,
    request: &RegionRequest,
    seed: u64,
    block: [usize; 3],
    workers: usize,
) -> Result<SolidTexture> {
    Ok(generate_tiled_timed(model, request, seed, block, workers, None)?.0)
}

pub fn generate_tiled_timed(
    model: &GeneratorModel,
    request: &RegionRequest,
    seed: u64,
    block: [usize; 3],
    workers: usize,
    fault: Option<ShiftFault>,
) -> Result<(SolidTexture, Vec<TileTiming>)> {
    let blocks = request.blocks(block)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid("generate_tiled", e.to_string()))?;
    let tiles: Vec<Result<(Tensor4, TileTiming)>> = pool.install(|| {
        blocks
            .par_iter()
            .map(|(offset, sub)| {
                let t0 = std::time::Instant::now();
                let tex = generate_region_with_fault(model, sub, seed, fault)?;
                let timing = TileTiming {
                    offset: *offset,
                    size: sub.size,
                    seconds: t0.elapsed().as_secs_f64(),
                };
                Ok((tex.volume, timing))
            })
            .collect()
    });
    let mut volume = Tensor4::zeros(3, request.size);
    let mut timings = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let (t, timing) = tile?;
        volume.paste(&t, timing.offset)?;
        timings.push(timing);
    }
    Ok((
        SolidTexture {
            volume,
            request: *request,
        },
        timings,
    ))
}
