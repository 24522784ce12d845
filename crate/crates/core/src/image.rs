//! PNG ingestion and export, orientation transforms and histogram matching.
//!
//! Images are `3 x [H, W, 1]` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{ColorType, DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::tensor::Tensor4;

/// Rotation (clockwise, in degrees) followed by an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Orientation {
    pub rotation: u16,
    pub flip: bool,
}

impl Orientation {
    pub fn new(rotation: u16, flip: bool) -> Result<Self> {
        if !matches!(rotation, 0 | 90 | 180 | 270) {
            return Err(Error::invalid("orientation", format!("rotation {rotation} not in {{0, 90, 180, 270}}")));
        }
        Ok(Self { rotation, flip })
    }

    /// A 90 degree turn sends pixel `(i, j)` of an `H x W` image to `(j, H - 1 - i)`.
    pub fn apply(&self, image: &Tensor4) -> Tensor4 {
        let mut out = image.clone();
        for _ in 0..self.rotation / 90 {
            out = rotate90(&out);
        }
        if self.flip {
            let [h, w, _] = out.dims();
            out = Tensor4::from_fn(out.channels(), [h, w, 1], |c, [i, j, _]| out.get(c, [i, w - 1 - j, 0]));
        }
        out
    }
}

fn rotate90(image: &Tensor4) -> Tensor4 {
    let [h, w, _] = image.dims();
    Tensor4::from_fn(image.channels(), [w, h, 1], |c, [r, s, _]| image.get(c, [h - 1 - s, r, 0]))
}

/// Reads an 8-bit PNG. Grayscale is expanded to three equal channels and
/// alpha is dropped; 16-bit and float images are rejected.
pub fn load_png(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::Format {
                path: Some(path.to_path_buf()),
                msg: format!("unsupported pixel format {other:?}; expected 8-bit gray or RGB"),
            })
        }
    }
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn ingest_image(path: &Path, orientation: Orientation) -> Result<Tensor4> {
    Ok(orientation.apply(&load_png(path)?))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor4 {
    let (w, h) = img.dimensions();
    Tensor4::from_fn(3, [h as usize, w as usize, 1], |c, [i, j, _]| {
        img.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
    })
}

/// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(image: &Tensor4) -> Result<RgbImage> {
    if image.channels() != 3 {
        return Err(Error::Shape {
            op: "to_rgb8",
            axis: Axis::Channels,
            expected: 3,
            actual: image.channels(),
        });
    }
    let [h, w, d] = image.dims();
    if d != 1 {
        return Err(Error::invalid("to_rgb8", format!("expected a 2D image, got dims {:?}", image.dims())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = [y as usize, x as usize, 0];
        image::Rgb([0, 1, 2].map(|c| quantize(image.get(c, at))))
    }))
}

pub fn save_png(image: &Tensor4, path: &Path) -> Result<()> {
    DynamicImage::ImageRgb8(to_rgb8(image)?).save(path)?;
    Ok(())
}

/// Per-channel quantile mapping of `source` onto the value distribution of
/// `reference`. Pixels are ranked by value with ties kept in pixel order; the
/// pixel of rank `r` takes the reference value of rank `floor(r * M / N)`.
pub fn histogram_match(source: &Tensor4, reference: &Tensor4) -> Result<Tensor4> {
    for t in [source, reference] {
        if t.channels() != 3 {
            return Err(Error::Shape {
                op: "histogram_match",
                axis: Axis::Channels,
                expected: 3,
                actual: t.channels(),
            });
        }
    }
    let mut out = source.clone();
    let n = source.spatial_len();
    let m = reference.spatial_len();
    for c in 0..3 {
        let src = source.channel(c);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| src[a].total_cmp(&src[b]));
        let mut refv = reference.channel(c).to_vec();
        refv.sort_by(f32::total_cmp);
        let dst = out.channel_mut(c);
        for (rank, &idx) in order.iter().enumerate() {
            dst[idx] = refv[rank * m / n];
        }
    }
    Ok(out)
}
