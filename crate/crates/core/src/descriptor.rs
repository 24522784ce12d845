//! Truncated VGG-19 descriptor, Gram statistics and the slice-based loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::container::{self, Container, WEIGHTS_MAGIC};
use crate::error::{Axis, Error, Result};
use crate::image::Orientation;
use crate::tensor::{self, gram_matrix, GradTape, ParamTensor, Tensor4, Var, Weight};

/// Per-channel means subtracted after scaling to `[0, 255]`, in RGB order.
pub const VGG_MEANS: [f32; 3] = [123.68, 116.779, 103.939];

/// Names of the tap activations contributing to the loss.
pub const TAPS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

/// `(name, in_channels, out_channels, pool_after)` for each evaluated layer.
const LAYERS: [(&str, usize, usize, bool); 13] = [
    ("conv1_1", 3, 64, false),
    ("conv1_2", 64, 64, true),
    ("conv2_1", 64, 128, false),
    ("conv2_2", 128, 128, true),
    ("conv3_1", 128, 256, false),
    ("conv3_2", 256, 256, false),
    ("conv3_3", 256, 256, false),
    ("conv3_4", 256, 256, true),
    ("conv4_1", 256, 512, false),
    ("conv4_2", 512, 512, false),
    ("conv4_3", 512, 512, false),
    ("conv4_4", 512, 512, true),
    ("conv5_1", 512, 512, false),
];

/// Smallest image side that leaves every tap non-empty.
pub const MIN_SIDE: usize = 16;

fn is_tap(layer: &str) -> bool {
    matches!(layer, "conv1_1" | "conv2_1" | "conv3_1" | "conv4_1" | "conv5_1")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    Synthetic { seed: u64 },
    File(std::path::PathBuf),
}

struct Layer {
    name: &'static str,
    weight: ParamTensor,
    bias: ParamTensor,
    pool_after: bool,
}

/// Fixed-weight feature extractor up to `relu5_1`.
pub struct DescriptorNet {
    layers: Vec<Layer>,
    checksum: String,
    source: WeightSource,
}

impl std::fmt::Debug for DescriptorNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DescriptorNet")
            .field("source", &self.source)
            .field("checksum", &self.checksum)
            .finish()
    }
}

/// Expected `(name, shape)` of every tensor in a descriptor weight file.
/// Kernels are `[out, in, 3, 3]` with input channels in RGB order.
pub fn weight_manifest() -> Vec<(String, Vec<usize>)> {
    LAYERS
        .iter()
        .flat_map(|&(name, cin, cout, _)| {
            [
                (format!("{name}.weight"), vec![cout, cin, 3, 3]),
                (format!("{name}.bias"), vec![cout]),
            ]
        })
        .collect()
}

fn checksum_of(layers: &[Layer]) -> String {
    let mut h = Sha256::new();
    for l in layers {
        for t in [&l.weight, &l.bias] {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

impl DescriptorNet {
    /// Deterministic random weights with He-uniform kernels and zero biases.
    /// Stands in for pretrained weights in tests and offline runs.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Layer> = LAYERS
            .iter()
            .map(|&(name, cin, cout, pool_after)| {
                let bound = (6.0 / (cin * 9) as f32).sqrt();
                let data = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    name,
                    weight: ParamTensor::new(vec![cout, cin, 3, 3], data),
                    bias: ParamTensor::filled(vec![cout], 0.0),
                    pool_after,
                }
            })
            .collect();
        Self {
            checksum: checksum_of(&layers),
            layers,
            source: WeightSource::Synthetic { seed },
        }
    }

    /// Reads an `STXW` file and validates it against [`weight_manifest`].
    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read_file(path, WEIGHTS_MAGIC)?;
        let mut net = Self::from_container(c).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                msg,
            },
            other => other,
        })?;
        net.source = WeightSource::File(path.to_path_buf());
        Ok(net)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let manifest = weight_manifest();
        for (name, _) in &c.tensors {
            if !manifest.iter().any(|(n, _)| n == name) {
                return Err(Error::format(format!("unexpected tensor {name}")));
            }
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<ParamTensor> {
            let i = c
                .tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
            let (_, t) = c.tensors.swap_remove(i);
            if t.shape != shape {
                return Err(Error::format(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t)
        };
        let mut layers = Vec::with_capacity(LAYERS.len());
        for &(name, cin, cout, pool_after) in &LAYERS {
            let weight = take(&format!("{name}.weight"), &[cout, cin, 3, 3])?;
            let bias = take(&format!("{name}.bias"), &[cout])?;
            layers.push(Layer {
                name,
                weight,
                bias,
                pool_after,
            });
        }
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
        Ok(Self {
            checksum: checksum_of(&layers),
            layers,
            source: WeightSource::Synthetic { seed: 0 },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, &ParamTensor)> = self
            .layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.name), &l.weight), (format!("{}.bias", l.name), &l.bias)])
            .collect();
        let refs: Vec<(&str, &ParamTensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let meta = json!({"network": "vgg19", "channel_order": "RGB", "means": VGG_MEANS, "scale": 255.0});
        container::write_file(path, WEIGHTS_MAGIC, &meta, &refs)
    }

    /// SHA-256 over all weights in manifest order, little-endian f32.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    /// Tap activations `relu1_1 .. relu5_1` of a `[0, 1]` RGB image.
    pub fn features(&self, image: &Tensor4) -> Result<Vec<Tensor4>> {
        check_image(image)?;
        let mut x = preprocess(image)?;
        let mut taps = Vec::with_capacity(TAPS.len());
        for l in &self.layers {
            x = tensor::leaky_relu(&tensor::conv2d_same(&x, &l.weight, &l.bias)?, 0.0);
            if is_tap(l.name) {
                taps.push(x.clone());
            }
            if l.name == "conv5_1" {
                break;
            }
            if l.pool_after {
                x = tensor::avgpool2(&x)?;
            }
        }
        Ok(taps)
    }

    /// Same as [`features`](Self::features) but recorded on `tape`.
    pub fn features_on<'a>(&'a self, tape: &mut GradTape<'a>, image: Var) -> Result<Vec<Var>> {
        check_image(tape.value(image))?;
        let shift = VGG_MEANS.map(|m| -m);
        let mut x = tape.channel_affine(image, 255.0, &shift)?;
        let mut taps = Vec::with_capacity(TAPS.len());
        for l in &self.layers {
            let y = tape.conv2d_same(x, Weight::Fixed(&l.weight), Weight::Fixed(&l.bias))?;
            x = tape.relu(y);
            if is_tap(l.name) {
                taps.push(x);
            }
            if l.name == "conv5_1" {
                break;
            }
            if l.pool_after {
                x = tape.avgpool2(x)?;
            }
        }
        Ok(taps)
    }

    pub fn grams(&self, image: &Tensor4) -> Result<Vec<Tensor4>> {
        Ok(self.features(image)?.iter().map(gram).collect())
    }
}

fn check_image(image: &Tensor4) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape {
            op: "descriptor",
            axis: Axis::Channels,
            expected: 3,
            actual: image.channels(),
        });
    }
    let [h, w, d] = image.dims();
    if d != 1 {
        return Err(Error::invalid("descriptor", format!("expected a 2D image, got dims {:?}", image.dims())));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(
            "descriptor",
            format!("image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}; the deepest tap would be empty"),
        ));
    }
    Ok(())
}

/// Scales to `[0, 255]` and subtracts [`VGG_MEANS`].
pub fn preprocess(image: &Tensor4) -> Result<Tensor4> {
    if image.channels() != 3 {
        return Err(Error::Shape {
            op: "preprocess",
            axis: Axis::Channels,
            expected: 3,
            actual: image.channels(),
        });
    }
    let mut out = image.clone();
    for (c, m) in VGG_MEANS.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v = *v * 255.0 - m;
        }
    }
    Ok(out)
}

/// `(1/N) F^T F` with f64 accumulation, as an `M x M` matrix stored in a
/// `1 x [M, M, 1]` tensor.
pub fn gram(features: &Tensor4) -> Tensor4 {
    gram_matrix(features)
}

/// `(1/M^2) ||G - T||_F^2` for one tap.
pub fn gram_term(g: &Tensor4, target: &Tensor4) -> f64 {
    let m = g.dims()[0] as f64;
    let d: f64 = g
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    d / (m * m)
}

fn check_targets(targets: &[Tensor4]) -> Result<()> {
    if targets.len() != TAPS.len() {
        return Err(Error::invalid("loss2d", format!("expected {} target Grams, got {}", TAPS.len(), targets.len())));
    }
    Ok(())
}

/// Per-tap terms of the 2D loss.
pub fn loss2d_terms(net: &DescriptorNet, image: &Tensor4, targets: &[Tensor4]) -> Result<Vec<f64>> {
    check_targets(targets)?;
    let grams = net.grams(image)?;
    Ok(grams.iter().zip(targets).map(|(g, t)| gram_term(g, t)).collect())
}

/// `sum_l (1/M_l^2) ||G_l(image) - T_l||_F^2`.
pub fn loss2d(net: &DescriptorNet, image: &Tensor4, targets: &[Tensor4]) -> Result<f64> {
    Ok(loss2d_terms(net, image, targets)?.iter().sum())
}

/// The 2D loss recorded on `tape`, differentiable back to `image`.
pub fn loss2d_on<'a>(net: &'a DescriptorNet, tape: &mut GradTape<'a>, image: Var, targets: &'a [Tensor4]) -> Result<Var> {
    check_targets(targets)?;
    let taps = net.features_on(tape, image)?;
    let mut total: Option<Var> = None;
    for (f, t) in taps.into_iter().zip(targets) {
        let g = tape.gram(f);
        let m = t.dims()[0] as f64;
        let term = tape.gram_distance(g, t, 1.0 / (m * m))?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Spatial axes of a volume that a slice orthogonal to `axis` keeps, as
/// (image rows, image columns).
pub fn slice_plane(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// One constrained direction: the exemplar seen on slices orthogonal to
/// `axis`, after its orientation transform.
#[derive(Debug, Clone)]
pub struct DirectionTarget {
    pub axis: usize,
    pub orientation: Orientation,
    pub image: Tensor4,
    pub grams: Vec<Tensor4>,
}

#[derive(Debug, Clone)]
pub struct ExemplarSet {
    pub directions: Vec<DirectionTarget>,
}

impl ExemplarSet {
    /// `entries` holds `(axis, image, orientation)` per direction; images are
    /// raw (unoriented) `[0, 1]` RGB.
    pub fn new(net: &DescriptorNet, entries: Vec<(usize, Tensor4, Orientation)>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 3 {
            return Err(Error::invalid("ExemplarSet", format!("need 1 to 3 directions, got {}", entries.len())));
        }
        let mut directions: Vec<DirectionTarget> = Vec::with_capacity(entries.len());
        for (axis, raw, orientation) in entries {
            if axis > 2 {
                return Err(Error::invalid("ExemplarSet", format!("axis {axis} out of range")));
            }
            if directions.iter().any(|d| d.axis == axis) {
                return Err(Error::invalid("ExemplarSet", format!("axis {axis} constrained twice")));
            }
            let image = orientation.apply(&raw);
            let grams = net.grams(&image)?;
            directions.push(DirectionTarget {
                axis,
                orientation,
                image,
                grams,
            });
        }
        Ok(Self { directions })
    }

    /// Same exemplar along all three axes.
    pub fn isotropic(net: &DescriptorNet, image: Tensor4) -> Result<Self> {
        Self::new(net, (0..3).map(|a| (a, image.clone(), Orientation::default())).collect())
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Per-direction, per-tap decomposition of the 3D loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DirectionLoss {
    pub axis: usize,
    /// Mean over slices of each tap term.
    pub per_tap: Vec<f64>,
    pub total: f64,
}

pub fn loss3d_report(net: &DescriptorNet, volume: &Tensor4, exemplars: &ExemplarSet) -> Result<Vec<DirectionLoss>> {
    let mut out = Vec::with_capacity(exemplars.len());
    for dir in &exemplars.directions {
        let n = volume.dims()[dir.axis];
        let (r, c) = slice_plane(dir.axis);
        let (h, w) = (volume.dims()[r], volume.dims()[c]);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(
                "loss3d",
                format!("slices orthogonal to axis {} are {h}x{w}, below {MIN_SIDE}x{MIN_SIDE}", dir.axis),
            ));
        }
        let mut per_tap = vec![0f64; TAPS.len()];
        for i in 0..n {
            let slice = tensor::slice_axis(volume, dir.axis, i)?;
            for (acc, t) in per_tap.iter_mut().zip(loss2d_terms(net, &slice, &dir.grams)?) {
                *acc += t;
            }
        }
        per_tap.iter_mut().for_each(|v| *v /= n as f64);
        out.push(DirectionLoss {
            axis: dir.axis,
            total: per_tap.iter().sum(),
            per_tap,
        });
    }
    Ok(out)
}

/// `sum_d (1/N_d) sum_n loss2d(v_{d,n}, u_d)`.
pub fn loss3d(net: &DescriptorNet, volume: &Tensor4, exemplars: &ExemplarSet) -> Result<f64> {
    Ok(loss3d_report(net, volume, exemplars)?.iter().map(|d| d.total).sum())
}
