//! Training configuration files (TOML, schema version 1).

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use solidtex::image::Orientation;
use solidtex::trainer::{AdamParams, Seeds, TrainingConfig};
use solidtex::GeneratorConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// A config problem with the line it was found on.
#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.path.display(), l, self.msg),
            None => write!(f, "{}: {}", self.path.display(), self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: Spanned<u32>,
    output: Spanned<PathBuf>,
    log: Option<PathBuf>,
    weights: Option<Spanned<String>>,
    #[serde(default)]
    histogram_match: bool,
    #[serde(default)]
    generator: RawGenerator,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    seeds: RawSeeds,
    #[serde(default)]
    exemplar: Vec<Spanned<RawExemplar>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    scales: Option<Spanned<usize>>,
    noise_channels: Option<Spanned<usize>>,
    block_channels: Option<Spanned<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    iterations: Option<Spanned<usize>>,
    learning_rate: Option<Spanned<f32>>,
    batch_size: Option<Spanned<usize>>,
    slice_size: Option<Spanned<usize>>,
    beta1: Option<f32>,
    beta2: Option<f32>,
    epsilon: Option<f32>,
    #[serde(default)]
    normalize_gradients: bool,
    #[serde(default)]
    checkpoint_every: usize,
    checkpoint: Option<PathBuf>,
    workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeeds {
    init: Option<u64>,
    noise: Option<u64>,
    offsets: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExemplar {
    path: Spanned<PathBuf>,
    axes: Spanned<Vec<String>>,
    rotation: Option<Spanned<u16>>,
    #[serde(default)]
    flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSpec {
    pub path: PathBuf,
    pub axes: Vec<usize>,
    pub orientation: Orientation,
}

/// A validated training configuration with paths resolved against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub output: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub weights: Option<String>,
    pub histogram_match: bool,
    pub generator: GeneratorConfig,
    pub training: TrainingConfig,
    /// Explicit `slice_size`; otherwise the smallest exemplar side is used.
    pub slice_size: Option<usize>,
    pub exemplars: Vec<ExemplarSpec>,
}

pub fn parse_axis(s: &str) -> Option<usize> {
    match s {
        "x" | "0" => Some(0),
        "y" | "1" => Some(1),
        "z" | "2" => Some(2),
        _ => None,
    }
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl TrainSpec {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |span: Option<Range<usize>>, msg: String| ConfigError {
            path: path.to_path_buf(),
            line: span.map(|s| line_of(text, s)),
            msg,
        };
        let raw: RawConfig = toml::from_str(text).map_err(|e| err(e.span(), e.message().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        if *raw.version.get_ref() != SCHEMA_VERSION {
            return Err(err(Some(raw.version.span()), format!("unsupported config version {}, expected {SCHEMA_VERSION}", raw.version.get_ref())));
        }

        let mut generator = GeneratorConfig::default();
        for (field, slot) in [
            (&raw.generator.scales, &mut generator.scales),
            (&raw.generator.noise_channels, &mut generator.noise_channels),
            (&raw.generator.block_channels, &mut generator.block_channels),
        ] {
            if let Some(v) = field {
                if *v.get_ref() == 0 {
                    return Err(err(Some(v.span()), "must be >= 1".into()));
                }
                *slot = *v.get_ref();
            }
        }

        if raw.exemplar.is_empty() {
            return Err(err(None, "at least one [[exemplar]] is required".into()));
        }
        let mut exemplars = Vec::new();
        let mut seen = [false; 3];
        for ex in &raw.exemplar {
            let e = ex.get_ref();
            let p = resolve(e.path.get_ref());
            if !p.is_file() {
                return Err(err(Some(e.path.span()), format!("exemplar {} does not exist", p.display())));
            }
            let rotation = e.rotation.as_ref().map_or(0, |r| *r.get_ref());
            let orientation = Orientation::new(rotation, e.flip).map_err(|_| {
                err(e.rotation.as_ref().map(|r| r.span()), format!("rotation {rotation} not in {{0, 90, 180, 270}}"))
            })?;
            if e.axes.get_ref().is_empty() {
                return Err(err(Some(e.axes.span()), "axes must name at least one of x, y, z".into()));
            }
            let mut axes = Vec::new();
            for a in e.axes.get_ref() {
                let axis = parse_axis(a).ok_or_else(|| err(Some(e.axes.span()), format!("unknown axis {a:?}; use x, y or z")))?;
                if seen[axis] {
                    return Err(err(Some(e.axes.span()), format!("axis {a} is constrained twice")));
                }
                seen[axis] = true;
                axes.push(axis);
            }
            exemplars.push(ExemplarSpec {
                path: p,
                axes,
                orientation,
            });
        }
        if raw.histogram_match && exemplars.len() < 2 {
            return Err(err(None, "histogram_match needs at least two exemplars".into()));
        }

        let t = &raw.training;
        let mut training = TrainingConfig::for_exemplar_size(0);
        let positive = |v: &Option<Spanned<usize>>, slot: &mut usize| -> Result<(), ConfigError> {
            if let Some(v) = v {
                if *v.get_ref() == 0 {
                    return Err(err(Some(v.span()), "must be >= 1".into()));
                }
                *slot = *v.get_ref();
            }
            Ok(())
        };
        positive(&t.iterations, &mut training.iterations)?;
        positive(&t.batch_size, &mut training.batch_size)?;
        if let Some(lr) = &t.learning_rate {
            if !(lr.get_ref().is_finite() && *lr.get_ref() >= 0.0) {
                return Err(err(Some(lr.span()), "learning_rate must be finite and >= 0".into()));
            }
            training.learning_rate = *lr.get_ref();
        }
        let slice_size = match &t.slice_size {
            Some(s) if *s.get_ref() < solidtex::descriptor::MIN_SIDE => {
                return Err(err(Some(s.span()), format!("slice_size must be >= {}", solidtex::descriptor::MIN_SIDE)))
            }
            s => s.as_ref().map(|s| *s.get_ref()),
        };
        let d = AdamParams::default();
        training.adam = AdamParams {
            beta1: t.beta1.unwrap_or(d.beta1),
            beta2: t.beta2.unwrap_or(d.beta2),
            eps: t.epsilon.unwrap_or(d.eps),
        };
        let s = Seeds::default();
        training.seeds = Seeds {
            init: raw.seeds.init.unwrap_or(s.init),
            noise: raw.seeds.noise.unwrap_or(s.noise),
            offsets: raw.seeds.offsets.unwrap_or(s.offsets),
        };
        training.normalize_gradients = t.normalize_gradients;
        training.checkpoint_every = t.checkpoint_every;
        training.workers = t.workers.unwrap_or(1);

        let output = resolve(raw.output.get_ref());
        let with_ext = |ext: &str| {
            let mut s = output.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Ok(Self {
            log: raw.log.as_deref().map(resolve).unwrap_or_else(|| with_ext(".log.csv")),
            checkpoint: t.checkpoint.as_deref().map(resolve).unwrap_or_else(|| with_ext(".ckpt")),
            output,
            weights: raw.weights.map(|w| w.into_inner()),
            histogram_match: raw.histogram_match,
            generator,
            training,
            slice_size,
            exemplars,
        })
    }
}
