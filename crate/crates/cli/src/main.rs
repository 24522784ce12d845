mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use solidtex::descriptor::{DescriptorNet, ExemplarSet};
use solidtex::diagnostics::{correspondence_map, evaluate_volume, inspect, DEFAULT_PATCH};
use solidtex::export::{read_raw, sidecar_path, write_png_stack, write_raw, ExportFormat, Sidecar};
use solidtex::generator::{generate_region, generate_tiled_timed, ShiftFault};
use solidtex::image::{histogram_match, ingest_image, load_png};
use solidtex::trainer::{Trainer, LOG_HEADER};
use solidtex::{build, GeneratorConfig, GeneratorModel, RegionRequest, Tensor4};

use config::{ConfigError, TrainSpec};

/// Environment variable naming the default descriptor weight file.
const WEIGHTS_ENV: &str = "SOLIDTEX_VGG";

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Published GPU timing for a 32^3 block, shown for context only.
const REFERENCE_MS_32: f64 = 12.0;

#[derive(Parser)]
#[command(name = "solidtex", version, about = "On-demand solid texture synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from a TOML config.
    Train {
        config: PathBuf,
        /// Descriptor weights: a .stxw file or `synthetic:SEED`. Defaults to
        /// the config's `weights`, then $SOLIDTEX_VGG.
        #[arg(long)]
        weights: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Synthesize a region and export it.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = triple::<i64>, allow_hyphen_values = true, default_value = "0,0,0")]
        origin: [i64; 3],
        #[arg(long, value_parser = triple::<usize>)]
        size: [usize; 3],
        /// Cubic tile side; 0 generates the region in one pass.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "raw", value_parser = ["raw", "png-stack"])]
        format: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compare one-pass generation with block-wise assembly.
    VerifyTiling {
        /// Model file; a freshly initialized default model if omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[arg(long, value_parser = triple::<i64>, allow_hyphen_values = true, default_value = "0,0,0")]
        origin: [i64; 3],
        #[arg(long, value_parser = triple::<usize>, default_value = "64,64,64")]
        size: [usize; 3],
        #[arg(long, default_value_t = 32)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f32,
        /// Debug: flip one shift (`SCALE,DIM`) in the block-wise pass. Some
        /// flips are absorbed by the center crop and change nothing.
        #[arg(long, value_parser = pair)]
        debug_shift_fault: Option<[usize; 2]>,
    },
    /// Time generation of cubic blocks.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        block: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Margins, noise footprint, parameter count and channel schedule.
    Info {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-direction loss of a generated or exported volume.
    Eval {
        /// Training config naming the exemplars and directions.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// A raw export to evaluate instead of generating.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_parser = triple::<i64>, allow_hyphen_values = true, default_value = "0,0,0")]
        origin: [i64; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        weights: Option<String>,
    },
    /// Nearest-patch correspondence map between two images.
    Corrmap {
        /// First image (PNG).
        a: Option<PathBuf>,
        /// Second image; the first one again if omitted.
        b: Option<PathBuf>,
        /// Compare two slices generated by this model with different seeds.
        #[arg(long, conflicts_with_all = ["a", "b"])]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_parser = pair, default_value = "1,2")]
        seeds: [usize; 2],
        #[arg(long, default_value_t = DEFAULT_PATCH)]
        patch: usize,
        /// Write the map as PNG (matched row in red, column in green).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic descriptor weight file.
    MakeWeights {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad component {p:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn pair(s: &str) -> Result<[usize; 2], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad component {p:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected two comma-separated values, got {s:?}"))
}

/// Errors the user fixes by editing arguments or config.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<UsageError>().is_some() {
                return ExitCode::from(EXIT_CONFIG);
            }
            match e.downcast_ref::<solidtex::Error>() {
                Some(solidtex::Error::NonFinite { .. }) => ExitCode::from(EXIT_NUMERIC),
                Some(solidtex::Error::Invalid { .. }) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            weights,
            resume,
            workers,
        } => cmd_train(&config, weights, resume.as_deref(), workers),
        Command::Generate {
            model,
            origin,
            size,
            block,
            seed,
            out,
            format,
            workers,
        } => cmd_generate(&model, origin, size, block, seed, &out, &format, workers),
        Command::VerifyTiling {
            model,
            init_seed,
            origin,
            size,
            block,
            seed,
            workers,
            tolerance,
            debug_shift_fault,
        } => {
            let model = load_or_fresh(model.as_deref(), init_seed)?;
            let fault = debug_shift_fault.map(|[scale, dim]| ShiftFault { scale, dim });
            cmd_verify_tiling(&model, origin, size, block, seed, workers, tolerance, fault)
        }
        Command::Bench { model, block, repeats } => {
            let model = load_or_fresh(model.as_deref(), 1)?;
            cmd_bench(&model, &block, repeats)
        }
        Command::Info { model } => {
            let model = load_or_fresh(model.as_deref(), 1)?;
            println!("{}", inspect(&model));
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            model,
            volume,
            size,
            origin,
            seed,
            weights,
        } => cmd_eval(&config, model.as_deref(), volume.as_deref(), size, origin, seed, weights),
        Command::Corrmap {
            a,
            b,
            model,
            size,
            seeds,
            patch,
            out,
        } => cmd_corrmap(a, b, model.as_deref(), size, seeds, patch, out.as_deref()),
        Command::MakeWeights { seed, out } => {
            let net = DescriptorNet::synthetic(seed);
            net.save(&out)?;
            println!("wrote {} (sha256 {})", out.display(), net.checksum());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_or_fresh(path: Option<&Path>, init_seed: u64) -> anyhow::Result<GeneratorModel> {
    Ok(match path {
        Some(p) => GeneratorModel::load(p)?,
        None => build(GeneratorConfig::default(), init_seed)?,
    })
}

/// Flag, then config, then environment.
fn resolve_weights(flag: Option<String>, config: Option<&str>, base: &Path) -> anyhow::Result<DescriptorNet> {
    let (spec, from_config) = match (flag, config) {
        (Some(f), _) => (f, false),
        (None, Some(c)) => (c.to_string(), true),
        (None, None) => match std::env::var(WEIGHTS_ENV) {
            Ok(v) if !v.is_empty() => (v, false),
            _ => {
                return Err(usage(format!(
                    "no descriptor weights: pass --weights, set `weights` in the config or set ${WEIGHTS_ENV} \
                     (use `synthetic:SEED` for randomly initialized weights)"
                )))
            }
        },
    };
    if let Some(seed) = spec.strip_prefix("synthetic:") {
        let seed = seed.parse().map_err(|_| usage(format!("bad synthetic weight seed {seed:?}")))?;
        return Ok(DescriptorNet::synthetic(seed));
    }
    let p = PathBuf::from(&spec);
    let p = if from_config && p.is_relative() { base.join(p) } else { p };
    DescriptorNet::load(&p).with_context(|| format!("loading descriptor weights {}", p.display()))
}

fn load_exemplars(spec: &TrainSpec, net: &DescriptorNet) -> anyhow::Result<(ExemplarSet, usize)> {
    let mut images = Vec::new();
    for e in &spec.exemplars {
        images.push(load_png(&e.path)?);
    }
    if spec.histogram_match {
        let reference = images[0].clone();
        for img in images.iter_mut().skip(1) {
            *img = histogram_match(img, &reference)?;
        }
    }
    let mut entries = Vec::new();
    let mut side = usize::MAX;
    for (e, img) in spec.exemplars.iter().zip(images) {
        let [h, w, _] = img.dims();
        side = side.min(h).min(w);
        for &axis in &e.axes {
            entries.push((axis, img.clone(), e.orientation));
        }
    }
    Ok((ExemplarSet::new(net, entries)?, side))
}

fn cmd_train(config: &Path, weights: Option<String>, resume: Option<&Path>, workers: Option<usize>) -> anyhow::Result<ExitCode> {
    let spec = TrainSpec::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let net = resolve_weights(weights, spec.weights.as_deref(), base)?;
    let (exemplars, side) = load_exemplars(&spec, &net)?;
    let mut tc = spec.training.clone();
    tc.slice_size = spec.slice_size.unwrap_or(side);
    if let Some(w) = workers {
        tc.workers = w;
    }
    info!(
        "training {} directions, slices {}x{}, {} iterations, descriptor {}",
        exemplars.len(),
        tc.slice_size,
        tc.slice_size,
        tc.iterations,
        &net.checksum()[..12]
    );
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, &net, &exemplars, tc.clone())?,
        None => Trainer::new(build(spec.generator, tc.seeds.init)?, &net, &exemplars, tc.clone())?,
    };
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    for row in trainer.log() {
        log.push_str(&row.csv());
        log.push('\n');
    }
    let result = trainer.run(|t, row| {
        log.push_str(&row.csv());
        log.push('\n');
        if row.iteration % 10 == 0 || row.iteration == 1 {
            info!("iteration {} loss {:.6e} ({:.1}s)", row.iteration, row.loss, row.seconds);
        }
        if t.checkpoint_due() {
            t.save_checkpoint(&spec.checkpoint)?;
            std::fs::write(&spec.log, &log)?;
        }
        Ok(())
    });
    std::fs::write(&spec.log, &log).with_context(|| format!("writing {}", spec.log.display()))?;
    if let Err(e) = result {
        if let solidtex::Error::NonFinite { sample, origin, .. } = &e {
            let dump = spec.output.with_extension("nonfinite.raw");
            let side = Sidecar {
                format: ExportFormat::Raw,
                dims: sample.dims(),
                origin: *origin,
                seed: tc.seeds.noise,
                model_checksum: trainer.model().checksum()?,
            };
            write_raw(sample, &dump, &side)?;
            eprintln!("offending sample written to {}", dump.display());
        }
        return Err(e.into());
    }
    let (model, _) = trainer.finish();
    model.save(&spec.output)?;
    println!("wrote {} and {}", spec.output.display(), spec.log.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    model_path: &Path,
    origin: [i64; 3],
    size: [usize; 3],
    block: usize,
    seed: u64,
    out: &Path,
    format: &str,
    workers: usize,
) -> anyhow::Result<ExitCode> {
    let format = ExportFormat::parse(format)?;
    let model = GeneratorModel::load(model_path)?;
    let request = RegionRequest::new(origin, size).map_err(|e| usage(e.to_string()))?;
    let texture = if block == 0 {
        generate_region(&model, &request, seed)?
    } else {
        generate_tiled_timed(&model, &request, seed, [block; 3], workers, None)?.0
    };
    let sidecar = Sidecar {
        format,
        dims: size,
        origin,
        seed,
        model_checksum: model.checksum()?,
    };
    match format {
        ExportFormat::Raw => {
            write_raw(&texture.volume, out, &sidecar).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} and {}", out.display(), sidecar_path(out).display());
        }
        ExportFormat::PngStack => {
            let files = write_png_stack(&texture.volume, out, &sidecar).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} slices to {}", files.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify_tiling(
    model: &GeneratorModel,
    origin: [i64; 3],
    size: [usize; 3],
    block: usize,
    seed: u64,
    workers: usize,
    tolerance: f32,
    fault: Option<ShiftFault>,
) -> anyhow::Result<ExitCode> {
    if block == 0 {
        return Err(usage("--block must be >= 1"));
    }
    let request = RegionRequest::new(origin, size).map_err(|e| usage(e.to_string()))?;
    let t0 = Instant::now();
    let mono = generate_region(model, &request, seed)?;
    let mono_s = t0.elapsed().as_secs_f64();
    println!("one pass {:?}: {:.3}s", size, mono_s);
    let (tiled, timings) = match generate_tiled_timed(model, &request, seed, [block; 3], workers, fault) {
        Ok(r) => r,
        Err(e) if fault.is_some() => {
            println!("FAIL: block-wise pass aborted under the injected fault: {e}");
            return Ok(ExitCode::from(EXIT_NUMERIC));
        }
        Err(e) => return Err(e.into()),
    };
    for t in &timings {
        println!("block at {:?} size {:?}: {:.3} ms", t.offset, t.size, t.seconds * 1e3);
    }
    let total: f64 = timings.iter().map(|t| t.seconds).sum();
    println!("{} blocks, {:.3}s summed", timings.len(), total);
    let diff = mono.volume.max_abs_diff(&tiled.volume);
    if diff <= tolerance {
        println!("PASS: max abs difference {diff:.3e} <= {tolerance:.1e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: max abs difference {diff:.3e} > {tolerance:.1e}");
        Ok(ExitCode::from(EXIT_NUMERIC))
    }
}

fn machine_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}, {threads} threads, {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

fn cmd_bench(model: &GeneratorModel, blocks: &[usize], repeats: usize) -> anyhow::Result<ExitCode> {
    if repeats == 0 || blocks.iter().any(|&b| b == 0) {
        return Err(usage("--repeats and every --block must be >= 1"));
    }
    println!("machine: {}", machine_description());
    println!("{:>6} {:>11} {:>11} {:>11} {:>11} {:>14}", "block", "median ms", "min ms", "max ms", "stddev ms", "voxels/s");
    for &b in blocks {
        let request = RegionRequest::new([0; 3], [b; 3])?;
        generate_region(model, &request, 0)?;
        let mut times: Vec<f64> = (0..repeats)
            .map(|r| {
                let t0 = Instant::now();
                generate_region(model, &request, r as u64)?;
                Ok(t0.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<solidtex::Result<_>>()?;
        times.sort_by(f64::total_cmp);
        let median = if repeats % 2 == 1 {
            times[repeats / 2]
        } else {
            0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
        };
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
        let rate = (b * b * b) as f64 / (median / 1e3);
        println!("{:>6} {:>11.2} {:>11.2} {:>11.2} {:>11.2} {:>14.0}", format!("{b}^3"), median, times[0], times[repeats - 1], sd, rate);
    }
    println!("reference: {REFERENCE_MS_32} ms per 32^3 block on a GPU (published figure, not reproduced here)");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    config: &Path,
    model: Option<&Path>,
    volume: Option<&Path>,
    size: usize,
    origin: [i64; 3],
    seed: u64,
    weights: Option<String>,
) -> anyhow::Result<ExitCode> {
    let spec = TrainSpec::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let net = resolve_weights(weights, spec.weights.as_deref(), base)?;
    let (exemplars, _) = load_exemplars(&spec, &net)?;
    let vol: Tensor4 = match (model, volume) {
        (_, Some(v)) => read_raw(v)?.0,
        (Some(m), None) => {
            let model = GeneratorModel::load(m)?;
            generate_region(&model, &RegionRequest::new(origin, [size; 3]).map_err(|e| usage(e.to_string()))?, seed)?.volume
        }
        (None, None) => bail!(usage("pass --model or --volume")),
    };
    println!("{}", evaluate_volume(&net, &vol, &exemplars)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_corrmap(
    a: Option<PathBuf>,
    b: Option<PathBuf>,
    model: Option<&Path>,
    size: usize,
    seeds: [usize; 2],
    patch: usize,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let (ia, ib) = match (model, a) {
        (Some(m), _) => {
            let model = GeneratorModel::load(m)?;
            let request = RegionRequest::new([0; 3], [size, size, 1]).map_err(|e| usage(e.to_string()))?;
            let gen = |s: usize| generate_region(&model, &request, s as u64).map(|t| t.volume);
            (gen(seeds[0])?, gen(seeds[1])?)
        }
        (None, Some(a)) => {
            let ia = ingest_image(&a, Default::default())?;
            let ib = match b {
                Some(b) => load_png(&b)?,
                None => ia.clone(),
            };
            (ia, ib)
        }
        (None, None) => return Err(usage("pass an image path or --model")),
    };
    let map = correspondence_map(&ia, &ib, patch).map_err(|e| anyhow!(UsageError(e.to_string())))?;
    println!("patch {patch}, {}x{} positions", map.dims[0], map.dims[1]);
    println!("identity: {}", map.is_identity());
    println!("longest run of equal displacements: {}", map.longest_run());
    if let Some(o) = out {
        map.save_png(o)?;
        println!("wrote {}", o.display());
    }
    Ok(ExitCode::SUCCESS)
}
