//! Volume export: raw little-endian f32 or a stack of PNG slices, each with
//! a `key=value` sidecar recording how to regenerate the region.
//!
//! Axis 0 of a volume is x, axis 1 is y, axis 2 is z. Raw payloads are
//! channel-last with x varying fastest: `((z * ny + y) * nx + x) * 3 + c`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Axis, Error, Result};
use crate::image::save_png;
use crate::tensor::Tensor4;

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Raw,
    PngStack,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "png-stack" => Ok(Self::PngStack),
            other => Err(Error::invalid("format", format!("unknown export format {other:?}; use raw or png-stack"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::PngStack => "png-stack",
        }
    }
}

/// Everything needed to regenerate an exported region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub format: ExportFormat,
    pub dims: [usize; 3],
    pub origin: [i64; 3],
    pub seed: u64,
    pub model_checksum: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Sidecar {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version={SIDECAR_VERSION}");
        let _ = writeln!(s, "format={}", self.format.name());
        let _ = writeln!(s, "dims={}", join(&self.dims));
        let _ = writeln!(s, "channels=3");
        match self.format {
            ExportFormat::Raw => {
                let _ = writeln!(s, "dtype=f32le");
                let _ = writeln!(s, "layout=channel-last,x-fastest");
            }
            ExportFormat::PngStack => {
                let _ = writeln!(s, "dtype=u8");
                let _ = writeln!(s, "layout=one-png-per-z,rows-y,cols-x");
            }
        }
        let _ = writeln!(s, "origin={}", join(&self.origin));
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "model_checksum={}", self.model_checksum);
        s
    }

    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            path: path.map(Path::to_path_buf),
            msg: format!("line {line}: {msg}"),
        };
        let mut fields = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(n + 1, format!("expected key=value, got {line:?}")))?;
            fields.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
        }
        let get = |k: &str| {
            fields.get(k).ok_or_else(|| Error::Format {
                path: path.map(Path::to_path_buf),
                msg: format!("missing key {k}"),
            })
        };
        fn triple<T: std::str::FromStr>(s: &str) -> Option<[T; 3]> {
            let v: Vec<T> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
            v.try_into().ok()
        }
        let (l, v) = get("version")?;
        if v.parse::<u32>().ok() != Some(SIDECAR_VERSION) {
            return Err(err(*l, format!("unsupported version {v}")));
        }
        let (l, v) = get("format")?;
        let format = ExportFormat::parse(v).map_err(|e| err(*l, e.to_string()))?;
        let (l, v) = get("dims")?;
        let dims: [usize; 3] = triple(v).filter(|d: &[usize; 3]| d.iter().all(|&n| n > 0)).ok_or_else(|| err(*l, format!("bad dims {v}")))?;
        let (l, v) = get("origin")?;
        let origin = triple(v).ok_or_else(|| err(*l, format!("bad origin {v}")))?;
        let (l, v) = get("seed")?;
        let seed = v.parse().map_err(|_| err(*l, format!("bad seed {v}")))?;
        let (_, model_checksum) = get("model_checksum")?;
        Ok(Self {
            format,
            dims,
            origin,
            seed,
            model_checksum: model_checksum.clone(),
        })
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn check_volume(volume: &Tensor4, sidecar: &Sidecar) -> Result<()> {
    if volume.channels() != 3 {
        return Err(Error::Shape {
            op: "export",
            axis: Axis::Channels,
            expected: 3,
            actual: volume.channels(),
        });
    }
    if volume.dims() != sidecar.dims {
        return Err(Error::invalid("export", format!("sidecar dims {:?} != volume dims {:?}", sidecar.dims, volume.dims())));
    }
    Ok(())
}

pub fn raw_bytes(volume: &Tensor4) -> Vec<u8> {
    let [nx, ny, nz] = volume.dims();
    let mut out = Vec::with_capacity(volume.len() * 4);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                for c in 0..3 {
                    out.extend_from_slice(&volume.get(c, [x, y, z]).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn volume_from_raw(bytes: &[u8], dims: [usize; 3]) -> Result<Tensor4> {
    let [nx, ny, _] = dims;
    let n = 3 * dims.iter().product::<usize>();
    if bytes.len() != n * 4 {
        return Err(Error::format(format!("raw payload has {} bytes, expected {}", bytes.len(), n * 4)));
    }
    let at = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    Ok(Tensor4::from_fn(3, dims, |c, [x, y, z]| at(((z * ny + y) * nx + x) * 3 + c)))
}

/// Writes `out` and `out.txt`. Values are written unclamped.
pub fn write_raw(volume: &Tensor4, out: &Path, sidecar: &Sidecar) -> Result<()> {
    check_volume(volume, sidecar)?;
    fs::write(out, raw_bytes(volume))?;
    fs::write(sidecar_path(out), sidecar.to_text())?;
    Ok(())
}

/// Reads a raw export and its sidecar.
pub fn read_raw(path: &Path) -> Result<(Tensor4, Sidecar)> {
    let side = sidecar_path(path);
    let sidecar = Sidecar::parse(&fs::read_to_string(&side)?, Some(&side))?;
    if sidecar.format != ExportFormat::Raw {
        return Err(Error::Format {
            path: Some(side),
            msg: "sidecar does not describe a raw export".into(),
        });
    }
    let bytes = fs::read(path)?;
    let volume = volume_from_raw(&bytes, sidecar.dims).map_err(|e| Error::Format {
        path: Some(path.to_path_buf()),
        msg: e.to_string(),
    })?;
    Ok((volume, sidecar))
}

/// Writes one PNG per z plane into directory `out` as `slice_00000.png`...,
/// plus `out/volume.txt`. Rows are y, columns are x; values are clamped to
/// `[0, 1]` and rounded to 8 bits.
pub fn write_png_stack(volume: &Tensor4, out: &Path, sidecar: &Sidecar) -> Result<Vec<PathBuf>> {
    check_volume(volume, sidecar)?;
    fs::create_dir_all(out)?;
    let [nx, ny, nz] = volume.dims();
    let mut files = Vec::with_capacity(nz);
    for z in 0..nz {
        let plane = Tensor4::from_fn(3, [ny, nx, 1], |c, [y, x, _]| volume.get(c, [x, y, z]));
        let p = out.join(format!("slice_{z:05}.png"));
        save_png(&plane, &p)?;
        files.push(p);
    }
    fs::write(out.join("volume.txt"), sidecar.to_text())?;
    Ok(files)
}
