//! Single-slice training: random slice offsets and noise origins,
//! per-sample gradients, Adam.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{self, MODEL_MAGIC};
use crate::descriptor::{loss2d_on, DescriptorNet, DirectionTarget, ExemplarSet};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, RegionRequest, SolidTexture};
use crate::noise;
use crate::tensor::{Eager, GradTape, Mode, ParamTensor, RecordedStats, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    /// Global seed of the noise field sampled during training.
    pub noise: u64,
    /// Seed of the per-iteration draws of directions, offsets and origins.
    pub offsets: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            noise: 2,
            offsets: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub learning_rate: f32,
    /// Samples per direction per iteration.
    pub batch_size: usize,
    /// In-plane side of the generated slices.
    pub slice_size: usize,
    pub adam: AdamParams,
    pub seeds: Seeds,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Divide the averaged gradient by its global L2 norm before Adam.
    pub normalize_gradients: bool,
    /// Threads for per-sample passes. Results do not depend on it.
    pub workers: usize,
}

impl TrainingConfig {
    /// Defaults with slices as large as the exemplar.
    pub fn for_exemplar_size(slice_size: usize) -> Self {
        Self {
            iterations: 3000,
            learning_rate: 0.1,
            batch_size: 10,
            slice_size,
            adam: AdamParams::default(),
            seeds: Seeds::default(),
            checkpoint_every: 0,
            normalize_gradients: false,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("TrainingConfig", msg));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.slice_size < crate::descriptor::MIN_SIDE {
            return bad("slice_size is below the descriptor minimum (16)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        Ok(())
    }
}

/// Adam moments for every parameter, zero for non-trainable ones.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &GeneratorModel) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of the trainable entries of `model`.
    pub fn update(&mut self, model: &mut GeneratorModel, grads: &[Vec<f32>], lr: f32, p: AdamParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        for (i, entry) in model.params_mut().entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in entry.tensor.data.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g;
                v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + p.eps);
            }
        }
    }
}

/// One draw of the doubly stochastic scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub axis: usize,
    /// `Q_d`, uniform over `0 .. 2^K`.
    pub offset: u32,
    /// Finest-scale origin of the one-voxel-thick request.
    pub origin: [i64; 3],
    pub request: RegionRequest,
}

/// Range of the random block index and in-plane origins. Keeps all scale
/// coordinates far from overflow.
const ORIGIN_SPAN: i64 = 1 << 24;

/// Draws `Q_d` and a random origin whose coordinate along `axis` is
/// `2^K * p + Q_d`, so the shift schedule of offset `Q_d` is exercised.
pub fn draw_sample(rng: &mut impl Rng, k: usize, axis: usize, slice_size: usize) -> TrainingSample {
    let period = 1i64 << k;
    let offset = rng.gen_range(0..period) as u32;
    let mut origin = [0i64; 3];
    let mut size = [slice_size; 3];
    for d in 0..3 {
        if d == axis {
            origin[d] = period * rng.gen_range(-ORIGIN_SPAN..ORIGIN_SPAN) + offset as i64;
            size[d] = 1;
        } else {
            origin[d] = rng.gen_range(-ORIGIN_SPAN..ORIGIN_SPAN);
        }
    }
    TrainingSample {
        axis,
        offset,
        origin,
        request: RegionRequest { origin, size },
    }
}

/// Draws a sample and generates its slice in train mode.
pub fn sample_training_slice(
    model: &GeneratorModel,
    config: &TrainingConfig,
    axis: usize,
    rng: &mut impl Rng,
) -> Result<(TrainingSample, SolidTexture)> {
    let s = draw_sample(rng, model.config().scales, axis, config.slice_size);
    let noise = sample_noise_all(model, &s.request, config.seeds.noise);
    let mut g = Eager::new(model.params());
    let volume = model.forward_graph(&mut g, &s.request, noise, Mode::Train, None)?;
    Ok((s, SolidTexture { volume, request: s.request }))
}

fn sample_noise_all(model: &GeneratorModel, request: &RegionRequest, seed: u64) -> Vec<Tensor4> {
    let spec = model.noise_spec(request, seed);
    (0..spec.windows.len()).map(|k| noise::sample_noise(&spec, k)).collect()
}

/// Loss, parameter gradients and batch-norm statistics of one sample.
pub struct SampleGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
    pub stats: Vec<RecordedStats>,
}

/// Batch means plus the statistics of every sample, in draw order.
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
    pub stats: Vec<Vec<RecordedStats>>,
}

pub fn sample_gradient(
    model: &GeneratorModel,
    net: &DescriptorNet,
    target: &DirectionTarget,
    sample: &TrainingSample,
    noise_seed: u64,
    iteration: usize,
) -> Result<SampleGradient> {
    let noise = sample_noise_all(model, &sample.request, noise_seed);
    let mut tape = GradTape::new(model.params());
    let vol = model.forward_graph(&mut tape, &sample.request, noise, Mode::Train, None)?;
    let stats = tape.take_bn_stats();
    let image = tape.slice_axis(vol, sample.axis, 0)?;
    let loss = loss2d_on(net, &mut tape, image, &target.grams)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            direction: sample.axis,
            offset: sample.offset as i64,
            origin: sample.origin,
            sample: Box::new(tape.value(vol).clone()),
        });
    }
    let grads = tape.backward(loss)?.into_params();
    Ok(SampleGradient { loss: value, grads, stats })
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub seconds: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.3}", self.iteration, self.loss, self.seconds)
    }
}

pub const LOG_HEADER: &str = "iteration,loss,seconds";

pub struct Trainer<'a> {
    model: GeneratorModel,
    net: &'a DescriptorNet,
    exemplars: &'a ExemplarSet,
    config: TrainingConfig,
    adam: AdamState,
    iteration: usize,
    log: Vec<LogRow>,
    elapsed_before: f64,
    pool: rayon::ThreadPool,
}

impl<'a> Trainer<'a> {
    pub fn new(model: GeneratorModel, net: &'a DescriptorNet, exemplars: &'a ExemplarSet, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model);
        Self::assemble(model, net, exemplars, config, adam, 0, Vec::new())
    }

    fn assemble(
        model: GeneratorModel,
        net: &'a DescriptorNet,
        exemplars: &'a ExemplarSet,
        config: TrainingConfig,
        adam: AdamState,
        iteration: usize,
        log: Vec<LogRow>,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| Error::invalid("trainer", e.to_string()))?;
        let elapsed_before = log.last().map_or(0.0, |r| r.seconds);
        Ok(Self {
            model,
            net,
            exemplars,
            config,
            adam,
            iteration,
            log,
            elapsed_before,
            pool,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    /// `config` may extend `iterations`; seeds should match the original run.
    pub fn resume(path: &Path, net: &'a DescriptorNet, exemplars: &'a ExemplarSet, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let c = container::read_file(path, MODEL_MAGIC)?;
        let ck = c
            .metadata
            .get("metadata")
            .and_then(|m| m.get("checkpoint"))
            .cloned()
            .ok_or_else(|| Error::Format {
                path: Some(path.to_path_buf()),
                msg: "not a training checkpoint".into(),
            })?;
        let model = GeneratorModel::load(path)?;
        let mut adam = AdamState::new(&model);
        for (name, t) in &c.tensors {
            let (slot, rest) = if let Some(rest) = name.strip_prefix("adam.m.") {
                (&mut adam.m, rest)
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                (&mut adam.v, rest)
            } else {
                continue;
            };
            let id = model.params().find(rest).ok_or_else(|| Error::format(format!("adam state for unknown {rest}")))?;
            if slot[id.0].len() != t.data.len() {
                return Err(Error::format(format!("adam state for {rest} has wrong length")));
            }
            slot[id.0].clone_from(&t.data);
        }
        let get = |k: &str| ck.get(k).and_then(Value::as_u64).ok_or_else(|| Error::format(format!("checkpoint lacks {k}")));
        adam.step = get("adam_step")?;
        let iteration = get("iteration")? as usize;
        let log: Vec<LogRow> = serde_json::from_value(ck.get("log").cloned().unwrap_or(Value::Array(vec![])))
            .map_err(|e| Error::format(format!("checkpoint log: {e}")))?;
        Self::assemble(model, net, exemplars, config, adam, iteration, log)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn model(&self) -> &GeneratorModel {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    fn iteration_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.offsets);
        rng.set_stream(iteration as u64);
        rng
    }

    /// The samples drawn for `iteration` (1-based), direction-major.
    pub fn draws(&self, iteration: usize) -> Vec<(usize, TrainingSample)> {
        let mut rng = self.iteration_rng(iteration);
        let k = self.model.config().scales;
        let mut jobs = Vec::with_capacity(self.exemplars.len() * self.config.batch_size);
        for (d, dir) in self.exemplars.directions.iter().enumerate() {
            for _ in 0..self.config.batch_size {
                jobs.push((d, draw_sample(&mut rng, k, dir.axis, self.config.slice_size)));
            }
        }
        jobs
    }

    /// Mean loss and mean gradient over the `D * B` samples of `iteration`,
    /// before normalization. Per-sample passes run on the worker pool and
    /// are summed in draw order.
    pub fn batch_gradient(&self, iteration: usize) -> Result<BatchGradient> {
        let jobs = self.draws(iteration);
        let (model, net, ex, seed) = (&self.model, self.net, self.exemplars, self.config.seeds.noise);
        let results: Vec<Result<SampleGradient>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|(d, s)| sample_gradient(model, net, &ex.directions[*d], s, seed, iteration))
                .collect()
        });
        let n = jobs.len();
        let mut grads: Vec<Vec<f32>> = self.model.params().entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        let mut loss = 0.0;
        let mut stats = Vec::with_capacity(n);
        for r in results {
            let r = r?;
            loss += r.loss;
            for (a, g) in grads.iter_mut().zip(&r.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            stats.push(r.stats);
        }
        let inv = 1.0 / n as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok(BatchGradient {
            loss: loss / n as f64,
            grads,
            stats,
        })
    }

    /// Runs one iteration: `B` samples per direction, gradients averaged over
    /// all `D * B` samples, one Adam update. Returns the batch-mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let started = Instant::now();
        let it = self.iteration + 1;
        let BatchGradient {
            loss: mean,
            grads: mut acc,
            stats,
        } = self.batch_gradient(it)?;
        if self.config.normalize_gradients {
            let norm = acc.iter().flatten().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                let s = (1.0 / norm) as f32;
                acc.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.adam.update(&mut self.model, &acc, self.config.learning_rate, self.config.adam);
        self.model.update_running_stats(&stats);

        self.iteration = it;
        let seconds = self.elapsed_before + started.elapsed().as_secs_f64();
        self.elapsed_before = seconds;
        self.log.push(LogRow {
            iteration: it,
            loss: mean,
            seconds,
        });
        Ok(mean)
    }

    /// Steps until `config.iterations`, calling `after` after each step.
    pub fn run(&mut self, mut after: impl FnMut(&Trainer<'a>, &LogRow) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            let row = *self.log.last().unwrap();
            after(self, &row)?;
        }
        Ok(())
    }

    pub fn checkpoint_due(&self) -> bool {
        self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0
    }

    /// Model file with Adam moments as `adam.m.*` / `adam.v.*` tensors and
    /// the iteration, Adam step and loss log in the metadata.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut model = self.model.clone();
        model.metadata = json!({
            "training": self.metadata(),
            "checkpoint": {
                "iteration": self.iteration,
                "adam_step": self.adam.step,
                "log": self.log,
            },
        });
        let bytes = model.to_bytes()?;
        let c = container::decode(&bytes, MODEL_MAGIC)?;
        let names: Vec<(String, ParamTensor)> = c
            .tensors
            .into_iter()
            .chain(self.model.params().entries().iter().enumerate().flat_map(|(i, e)| {
                [
                    (format!("adam.m.{}", e.name), ParamTensor::new(e.tensor.shape.clone(), self.adam.m[i].clone())),
                    (format!("adam.v.{}", e.name), ParamTensor::new(e.tensor.shape.clone(), self.adam.v[i].clone())),
                ]
            }))
            .collect();
        let refs: Vec<(&str, &ParamTensor)> = names.iter().map(|(n, t)| (n.as_str(), t)).collect();
        container::write_file(path, MODEL_MAGIC, &c.metadata, &refs)
    }

    fn metadata(&self) -> Value {
        json!({
            "config": self.config,
            "descriptor_checksum": self.net.checksum(),
            "directions": self.exemplars.directions.iter().map(|d| json!({
                "axis": d.axis,
                "rotation": d.orientation.rotation,
                "flip": d.orientation.flip,
            })).collect::<Vec<_>>(),
            "iterations_done": self.iteration,
        })
    }

    /// The trained model (running statistics frozen) and the loss log.
    pub fn finish(self) -> (GeneratorModel, Vec<LogRow>) {
        let meta = self.metadata();
        let mut model = self.model;
        model.metadata = json!({ "training": meta });
        (model, self.log)
    }
}

/// Runs `config.iterations` steps from a fresh state.
pub fn train(
    model: GeneratorModel,
    net: &DescriptorNet,
    exemplars: &ExemplarSet,
    config: TrainingConfig,
) -> Result<(GeneratorModel, Vec<LogRow>)> {
    let mut t = Trainer::new(model, net, exemplars, config)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.finish())
}
