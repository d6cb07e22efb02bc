//! Alternating optimisation: one discriminator update on a real batch and a
//! generated batch, then one generator update against the fixed
//! discriminator, then the equilibrium controller update.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::data::{self, Batch, BatchSchedule, Crop, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, EquilibriumState, LossParts, LossReport, LossWeights};
use crate::networks::{ArchConfig, Discriminator, Generator, Mode, PoseHead};
use crate::numerics::{AdamConfig, AdamState, Graph, RngStream, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    /// Range of sampled pose codes; `None` uses the training split's range.
    pub pose_range: Option<[f64; 2]>,
    /// Bin pose codes into this many classes and train `D^c` as a classifier.
    pub pose_classes: Option<usize>,
    pub weights: LossWeights,
    pub equilibrium: EquilibriumState,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            seed: 7,
            checkpoint_interval: 0,
            pose_range: None,
            pose_classes: None,
            weights: LossWeights::default(),
            equilibrium: EquilibriumState::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if let Some([lo, hi]) = self.pose_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("pose range [{lo}, {hi}] is empty or not finite")));
            }
        }
        if self.pose_classes == Some(0) {
            return Err(Error::Config("pose_classes must be positive".into()));
        }
        self.weights.validate()?;
        self.equilibrium.validate()?;
        self.adam.validate()
    }

    pub fn pose_head(&self) -> PoseHead {
        match self.pose_classes {
            Some(k) => PoseHead::Classification(k),
            None => PoseHead::Regression,
        }
    }
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_adam: AdamState<f32>,
    pub d_adam: AdamState<f32>,
    pub equilibrium: EquilibriumState,
    /// Completed iterations.
    pub step: u64,
    /// Source of `z` and `c` samples.
    pub rng: RngStream,
    pub pose_range: (f64, f64),
}

const LABEL_INIT: u64 = 1;
const LABEL_SAMPLING: u64 = 2;
const LABEL_BATCHES: u64 = 3;
const LABEL_CROPS: u64 = 4;

impl TrainingState {
    pub fn new(arch: &ArchConfig, config: &TrainConfig, num_identities: usize, pose_range: (f64, f64)) -> Result<Self> {
        config.validate()?;
        if !(pose_range.0 < pose_range.1) {
            return Err(Error::Config(format!("pose range {pose_range:?} is empty")));
        }
        let root = RngStream::new(config.seed);
        let mut init = root.derive(LABEL_INIT);
        let generator = Generator::init(arch, &mut init)?;
        let discriminator = Discriminator::init(arch, num_identities, config.pose_head(), &mut init)?;
        let g_adam = AdamState::new(config.adam, &generator.params.tensors.iter().collect::<Vec<_>>());
        let d_adam = AdamState::new(config.adam, &discriminator.params.tensors.iter().collect::<Vec<_>>());
        Ok(TrainingState {
            config: config.clone(),
            generator,
            discriminator,
            g_adam,
            d_adam,
            equilibrium: config.equilibrium,
            step: 0,
            rng: root.derive(LABEL_SAMPLING),
            pose_range,
        })
    }

    /// Largest `|code|` of the sampling range; pose classes span `[-extent, extent]`.
    pub fn pose_extent(&self) -> f64 {
        self.pose_range.0.abs().max(self.pose_range.1.abs())
    }

    fn sample_zc(&mut self, n: usize) -> (Tensor<f32>, Vec<f64>) {
        let z = Tensor::randn(&[n, self.generator.arch.noise_dim], 1.0, &mut self.rng);
        let (lo, hi) = self.pose_range;
        let c = (0..n).map(|_| self.rng.uniform(lo, hi)).collect();
        (z, c)
    }

    fn pose_target(&self, g: &mut Graph<f32>, pose: Var, codes: &[f64]) -> Result<Var> {
        match self.discriminator.pose_head {
            PoseHead::Regression => {
                let t = g.constant(Tensor::from_f64(&[codes.len()], codes)?);
                losses::pose_regression_loss(g, pose, t)
            }
            PoseHead::Classification(k) => {
                let ext = self.pose_extent();
                let labels: Vec<usize> = codes.iter().map(|&c| losses::pose_class(c, ext, k)).collect();
                losses::classification_loss(g, pose, &labels)
            }
        }
    }

    /// Generated images `G(x, c, z)` with the generator held fixed.
    fn generate_fixed(&self, images: &Tensor<f32>, c: &[f64], z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.generator.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let cv = g.constant(Tensor::from_f64(&[c.len(), 1], c)?);
        let zv = g.constant(z.clone());
        let out = self.generator.forward(&mut g, &vars, x, cv, zv, Mode::Train)?;
        Ok(g.value(out.images).clone())
    }
}

/// Values produced by the discriminator half of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub parts: LossParts<f64>,
    pub total: f64,
    pub l_real: f64,
    pub l_fake: f64,
}

/// Values produced by the generator half of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub parts: LossParts<f64>,
    pub total: f64,
}

fn named(step: u64, term: &str, r: Result<Var>) -> Result<Var> {
    r.map_err(|e| match e {
        Error::Numeric(_) => Error::NonFiniteLoss { step, term: term.to_string() },
        other => other,
    })
}

fn parts_value(g: &Graph<f32>, p: &LossParts<Var>) -> LossParts<f64> {
    let v = |x: Var| g.value(x).item() as f64;
    LossParts { adversarial: v(p.adversarial), identity: v(p.identity), pose: v(p.pose), pixel: v(p.pixel) }
}

fn check_batch(state: &TrainingState, batch: &Batch) -> Result<usize> {
    let n = batch.identities.len();
    if n < 2 || batch.pose_codes.len() != n || batch.images.shape().first() != Some(&n) {
        return Err(Error::Config(format!("inconsistent batch of {n} samples (need at least 2)")));
    }
    if let Some(&bad) = batch.identities.iter().find(|&&i| i >= state.discriminator.num_identities) {
        return Err(Error::Range(format!(
            "identity label {bad} but the identity head has {} classes",
            state.discriminator.num_identities
        )));
    }
    Ok(n)
}

/// Updates the discriminator only; the generator is a constant.
pub fn discriminator_update(state: &mut TrainingState, batch: &Batch) -> Result<DiscriminatorStep> {
    let n = check_batch(state, batch)?;
    let step = state.step;
    let (z, c) = state.sample_zc(n);
    let fake = state.generate_fixed(&batch.images, &c, &z)?;

    let mut g = Graph::new();
    let vars = state.discriminator.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let xf = g.constant(fake);
    let real = state.discriminator.forward(&mut g, &vars, x, Mode::Train)?;
    let gen = state.discriminator.forward(&mut g, &vars, xf, Mode::Train)?;
    let eta = state.equilibrium.eta;
    let adversarial = named(step, "d_adv", losses::d_adv_loss(&mut g, real.adversarial, gen.adversarial))?;
    let identity = named(step, "d_id", losses::d_id_loss(&mut g, real.identity, &batch.identities))?;
    let pose = named(step, "d_pose", state.pose_target(&mut g, real.pose, &batch.pose_codes))?;
    let l_real = named(step, "l_real", losses::autoencoder_loss(&mut g, x, real.reconstruction, eta))?;
    let l_fake = named(step, "l_fake", losses::autoencoder_loss(&mut g, xf, gen.reconstruction, eta))?;
    let pixel = named(step, "d_pixel", losses::d_pixel_loss(&mut g, l_real, l_fake, state.equilibrium.k))?;
    let parts = LossParts { adversarial, identity, pose, pixel };
    let total = named(step, "d_total", losses::weighted_total(&mut g, &parts, &state.config.weights.discriminator))?;

    let grads = g.backward(total).map_err(|_| Error::NonFiniteLoss { step, term: "d_total gradient".into() })?;
    let gr: Vec<Tensor<f32>> = vars
        .iter()
        .zip(&state.discriminator.params.tensors)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let out = DiscriminatorStep {
        parts: parts_value(&g, &parts),
        total: g.value(total).item() as f64,
        l_real: g.value(l_real).item() as f64,
        l_fake: g.value(l_fake).item() as f64,
    };
    let mut params: Vec<&mut Tensor<f32>> = state.discriminator.params.tensors.iter_mut().collect();
    state.d_adam.step(&mut params, &gr.iter().collect::<Vec<_>>())?;
    let momentum = state.discriminator.arch.bn_momentum;
    state.discriminator.bn.update(&real.stats, momentum)?;
    Ok(out)
}

/// Updates the generator only; the discriminator is a constant.
pub fn generator_update(state: &mut TrainingState, batch: &Batch) -> Result<GeneratorStep> {
    let n = check_batch(state, batch)?;
    let step = state.step;
    let (z, c) = state.sample_zc(n);

    let mut g = Graph::new();
    let gvars = state.generator.params.bind(&mut g, true);
    let dvars = state.discriminator.params.bind(&mut g, false);
    let x = g.constant(batch.images.clone());
    let cv = g.constant(Tensor::from_f64(&[n, 1], &c)?);
    let zv = g.constant(z);
    let out = state.generator.forward(&mut g, &gvars, x, cv, zv, Mode::Train)?;
    let d = state.discriminator.forward(&mut g, &dvars, out.images, Mode::Train)?;
    let adversarial = named(step, "g_adv", losses::g_adv_loss(&mut g, d.adversarial))?;
    let identity = named(step, "g_id", losses::d_id_loss(&mut g, d.identity, &batch.identities))?;
    let pose = named(step, "g_pose", state.pose_target(&mut g, d.pose, &c))?;
    let l_fake = named(
        step,
        "g_pixel",
        losses::autoencoder_loss(&mut g, out.images, d.reconstruction, state.equilibrium.eta),
    )?;
    let pixel = losses::g_pixel_loss(l_fake);
    let parts = LossParts { adversarial, identity, pose, pixel };
    let total = named(step, "g_total", losses::weighted_total(&mut g, &parts, &state.config.weights.generator))?;

    let grads = g.backward(total).map_err(|_| Error::NonFiniteLoss { step, term: "g_total gradient".into() })?;
    let gr: Vec<Tensor<f32>> = gvars
        .iter()
        .zip(&state.generator.params.tensors)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let result = GeneratorStep { parts: parts_value(&g, &parts), total: g.value(total).item() as f64 };
    let mut params: Vec<&mut Tensor<f32>> = state.generator.params.tensors.iter_mut().collect();
    state.g_adam.step(&mut params, &gr.iter().collect::<Vec<_>>())?;
    let momentum = state.generator.arch.bn_momentum;
    state.generator.bn.update(&out.stats, momentum)?;
    Ok(result)
}

/// One full iteration: discriminator update, generator update, `k` update.
pub fn train_step(state: &mut TrainingState, batch: &Batch) -> Result<LossReport> {
    let d = discriminator_update(state, batch)?;
    let gs = generator_update(state, batch)?;
    state.equilibrium = state.equilibrium.update(d.l_real, d.l_fake);
    let report = LossReport {
        step: state.step,
        d_adv: d.parts.adversarial,
        d_id: d.parts.identity,
        d_pose: d.parts.pose,
        d_pixel: d.parts.pixel,
        g_adv: gs.parts.adversarial,
        g_id: gs.parts.identity,
        g_pose: gs.parts.pose,
        g_pixel: gs.parts.pixel,
        d_total: d.total,
        g_total: gs.total,
        l_real: d.l_real,
        l_fake: d.l_fake,
        k: state.equilibrium.k,
    };
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFiniteLoss { step: state.step, term: term.into() });
    }
    state.step += 1;
    Ok(report)
}

/// One JSON-lines log record: the loss report plus elapsed wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(flatten)]
    pub report: LossReport,
    pub elapsed_ms: u64,
}

/// Where [`train`] writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    /// Checkpoints go to `<dir>/step_<t>.ckpt` at the configured interval.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Resolves the sampling range from the config or the training split.
pub fn resolve_pose_range(config: &TrainConfig, dataset: &Dataset) -> Result<(f64, f64)> {
    match config.pose_range {
        Some([lo, hi]) => Ok((lo, hi)),
        None => dataset.pose_range(data::TRAIN),
    }
}

/// Fresh state for `dataset`.
pub fn init_state(arch: &ArchConfig, config: &TrainConfig, dataset: &Dataset) -> Result<TrainingState> {
    if arch.image_size != dataset.image_size {
        return Err(Error::Config(format!(
            "architecture expects {0}x{0} images, dataset provides {1}x{1}",
            arch.image_size, dataset.image_size
        )));
    }
    TrainingState::new(arch, config, dataset.num_identities(), resolve_pose_range(config, dataset)?)
}

/// Batch order and crop offsets depend only on the seed and step index.
pub fn training_batch(state: &TrainingState, schedule: &BatchSchedule, dataset: &Dataset) -> Result<Batch> {
    let idx = schedule.batch(state.step);
    let mut crop_rng = RngStream::new(state.config.seed).derive(LABEL_CROPS).derive(state.step);
    dataset.batch(&idx, Crop::Random(&mut crop_rng))
}

pub fn batch_schedule(config: &TrainConfig, dataset: &Dataset) -> Result<BatchSchedule> {
    let seed = RngStream::new(config.seed).derive(LABEL_BATCHES).next_u64();
    data::batch_iter(dataset, data::TRAIN, config.batch_size, seed)
}

/// Continues `state` until `config.steps` iterations have completed,
/// returning the reports of the steps run here.
pub fn train_from(state: &mut TrainingState, dataset: &Dataset, outputs: &TrainOutputs) -> Result<Vec<LossReport>> {
    let schedule = batch_schedule(&state.config, dataset)?;
    let mut log = match &outputs.log {
        Some(p) => {
            let f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut reports = Vec::new();
    while state.step < state.config.steps {
        let batch = training_batch(state, &schedule, dataset)?;
        let report = train_step(state, &batch)?;
        if let Some(w) = log.as_mut() {
            let rec = LogRecord { report, elapsed_ms: start.elapsed().as_millis() as u64 };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        reports.push(report);
        let every = state.config.checkpoint_interval;
        if let (Some(dir), true) = (&outputs.checkpoint_dir, every > 0 && state.step % every == 0) {
            save_checkpoint(state, &checkpoint_path(dir, state.step))?;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(reports)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Initialises and runs `config.steps` iterations.
pub fn train(
    arch: &ArchConfig,
    config: &TrainConfig,
    dataset: &Dataset,
    outputs: &TrainOutputs,
) -> Result<(TrainingState, Vec<LossReport>)> {
    let mut state = init_state(arch, config, dataset)?;
    let reports = train_from(&mut state, dataset, outputs)?;
    Ok((state, reports))
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
