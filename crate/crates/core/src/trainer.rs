//! Unpaired adversarial training, checkpointing and batch translation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::dataio::{self, DatasetSpec, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::losses::{discriminator_objective, objective_from_output, total_loss, BoundParams, GeneratorBatch, LossBreakdown, LossConfig};
use crate::netcore::{
    images_to_class_ids, images_to_tensor, read_checkpoint, sample_locations, write_checkpoint, Checkpoint, Discriminator, DiscriminatorSpec, Generator,
    GeneratorSpec, HeadSpec, ParamStore, ProjectionHeads, RaydropMode,
};
use crate::rangeview::{self, AngleSource, ChannelRole, NormMode, PointCloud, RangeImage, SensorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Random azimuth crop width during training; `None` trains on full scans.
    pub crop_width: Option<usize>,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            decay_factor: 0.5,
            decay_every: 10,
            batch_size: 4,
            epochs: 80,
            seed: 0,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            crop_width: Some(256),
            checkpoint_every: 10,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_every and decay_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam coefficients out of range".into()));
        }
        if self.crop_width == Some(0) {
            return Err(Error::Config("crop_width must be positive".into()));
        }
        Ok(())
    }

    /// Step schedule: `learning_rate * decay_factor^(epoch / decay_every)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Everything needed to rebuild an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sensor: SensorConfig,
    pub norm: NormMode,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub heads: HeadSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let w = self.train.crop_width.unwrap_or(self.sensor.width);
        let s = self.generator.stride();
        if !self.sensor.height.is_multiple_of(s) || !w.is_multiple_of(s) || !self.sensor.width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "sensor {}x{} and crop width {w} must be multiples of the generator stride {s}",
                self.sensor.height, self.sensor.width
            )));
        }
        if w > self.sensor.width {
            return Err(Error::Config(format!("crop width {w} exceeds sensor width {}", self.sensor.width)));
        }
        if self.discriminator.output_shape(self.sensor.height, w).is_none() {
            return Err(Error::Config("training images are smaller than the discriminator's receptive field".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn num_classes(&self) -> usize {
        self.generator.aux.as_ref().map_or(0, |a| a.num_classes)
    }
}

/// One domain, projected and normalized.
#[derive(Clone, Debug)]
pub struct DomainData {
    /// Normalized images; labeled domains keep a semantic channel.
    pub images: Vec<RangeImage>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Projects and normalizes clouds (labels, if any, in the single aux channel).
pub fn prepare_domain(clouds: &[PointCloud], sensor: &SensorConfig, norm: NormMode) -> Result<DomainData> {
    let mut images = Vec::with_capacity(clouds.len());
    for c in clouds {
        images.push(prepare_image(c, sensor, norm)?);
    }
    Ok(DomainData { images })
}

pub fn prepare_image(cloud: &PointCloud, sensor: &SensorConfig, norm: NormMode) -> Result<RangeImage> {
    let (img, _) = rangeview::project(cloud, sensor)?;
    let mut roles = vec![ChannelRole::Depth, ChannelRole::Reflectance];
    if img.has(ChannelRole::Semantic) {
        roles.push(ChannelRole::Semantic);
    }
    let (n, _) = rangeview::normalize(&img.select(&roles)?, sensor, norm)?;
    Ok(n)
}

/// Loads a split of a dataset and prepares it.
pub fn load_domain(spec: &DatasetSpec, split: Split, sensor: &SensorConfig, norm: NormMode) -> Result<DomainData> {
    if spec.sensor != *sensor {
        return Err(Error::Incompatible(format!("dataset {} uses a different sensor configuration", spec.root.display())));
    }
    let mut clouds = Vec::new();
    for s in dataio::iterate::<ChaCha8Rng>(spec, split, None)? {
        clouds.push(s?.labeled_cloud()?);
    }
    prepare_domain(&clouds, sensor, norm)
}

#[derive(Clone)]
pub struct Models<T> {
    pub gen: Generator<T>,
    pub heads: ProjectionHeads<T>,
    pub disc: Discriminator<T>,
}

impl<T: Scalar> Models<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let seed = config.train.seed;
        let gen = Generator::new(&config.generator, derive_seed(seed, 1))?;
        let dims: Vec<usize> = config.generator.taps().iter().map(|&l| config.generator.layer_channels(l)).collect();
        let heads = ProjectionHeads::new(&config.heads, &dims, derive_seed(seed, 2))?;
        let disc = Discriminator::new(&config.discriminator, derive_seed(seed, 3))?;
        Ok(Self { gen, heads, disc })
    }
}

fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1000 + k);
    r.random()
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros() }
    }

    /// One bias-corrected update at step `t` (1-based). Missing gradients count as zero.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let tf = |v: f64| T::from_f64_lossy(v);
        let (b1t, b2t, ob1, ob2) = (tf(b1), tf(b2), tf(1.0 - b1), tf(1.0 - b2));
        let (lrt, c1t, c2t, eps) = (tf(lr), tf(c1), tf(c2), tf(cfg.adam_eps));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1t * m[j] + ob1 * gj;
                v[j] = b2t * v[j] + ob2 * gj * gj;
                let mh = m[j] / c1t;
                let vh = v[j] / c2t;
                *w = *w - lrt * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn export(&self, prefix: &str, names: &[String]) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for (which, ts) in [("m", &self.m), ("v", &self.v)] {
            for (n, t) in names.iter().zip(ts) {
                out.push((format!("{prefix}.{which}.{n}"), t.cast()));
            }
        }
        out
    }

    fn import(&mut self, prefix: &str, names: &[String], ck: &Checkpoint) -> Result<()> {
        for (which, ts) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (n, t) in names.iter().zip(ts.iter_mut()) {
                let key = format!("{prefix}.{which}.{n}");
                let src = ck.tensor(&key).ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Incompatible(format!("{key}: shape {:?} vs {:?}", src.shape(), t.shape())));
                }
                *t = src.cast();
            }
        }
        Ok(())
    }
}

/// One optimizer step as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub disc: f64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut t = vec![("disc", self.disc)];
        t.extend(self.losses.terms());
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

fn save_rng(r: &ChaCha8Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos().to_string(),
    }
}

fn load_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| Error::Malformed {
            what: "checkpoint",
            detail: format!("rng word position {:?}", s.word_pos),
        })?;
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(pos);
    Ok(r)
}

/// Complete mutable training state.
pub struct TrainState<T> {
    pub config: RunConfig,
    pub step: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub models: Models<T>,
    pub opt_gen: AdamState<T>,
    pub opt_heads: AdamState<T>,
    pub opt_disc: AdamState<T>,
    rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

const CHECKPOINT_KIND: &str = "train-state";

fn precision_name<T>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::new(&config)?;
        Ok(Self {
            opt_gen: AdamState::new(&models.gen.params),
            opt_heads: AdamState::new(&models.heads.params),
            opt_disc: AdamState::new(&models.disc.params),
            models,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
            history: Vec::new(),
            config,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.train.learning_rate_at(self.epoch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "kind": CHECKPOINT_KIND,
            "precision": precision_name::<T>(),
            "config": self.config,
            "step": self.step,
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "rng": save_rng(&self.rng),
            "history": self.history,
        });
        let m = &self.models;
        let mut tensors = m.gen.params.export("gen");
        tensors.extend(m.heads.params.export("heads"));
        tensors.extend(m.disc.params.export("disc"));
        tensors.extend(self.opt_gen.export("adam.gen", m.gen.params.names()));
        tensors.extend(self.opt_heads.export("adam.heads", m.heads.params.names()));
        tensors.extend(self.opt_disc.export("adam.disc", m.disc.params.names()));
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Incompatible(format!("checkpoint meta lacks {k:?}")));
        if meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Incompatible("checkpoint does not hold a training state".into()));
        }
        if meta.get("precision").and_then(|v| v.as_str()) != Some(precision_name::<T>()) {
            return Err(Error::Incompatible(format!("checkpoint precision differs from {}", precision_name::<T>())));
        }
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let bad = |k: &str, e: serde_json::Error| Error::Malformed {
            what: "checkpoint",
            detail: format!("{k}: {e}"),
        };
        let config: RunConfig = serde_json::from_value(parse("config")?).map_err(|e| bad("config", e))?;
        let mut st = Self::new(config)?;
        st.step = serde_json::from_value(parse("step")?).map_err(|e| bad("step", e))?;
        st.epoch = serde_json::from_value(parse("epoch")?).map_err(|e| bad("epoch", e))?;
        st.step_in_epoch = serde_json::from_value(parse("step_in_epoch")?).map_err(|e| bad("step_in_epoch", e))?;
        let rng: RngState = serde_json::from_value(parse("rng")?).map_err(|e| bad("rng", e))?;
        st.rng = load_rng(&rng)?;
        st.history = serde_json::from_value(parse("history")?).map_err(|e| bad("history", e))?;
        let m = &mut st.models;
        m.gen.params.import("gen", &ck.tensors)?;
        m.heads.params.import("heads", &ck.tensors)?;
        m.disc.params.import("disc", &ck.tensors)?;
        st.opt_gen.import("adam.gen", m.gen.params.names(), ck)?;
        st.opt_heads.import("adam.heads", m.heads.params.names(), ck)?;
        st.opt_disc.import("adam.disc", m.disc.params.names(), ck)?;
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }

    fn crop<R: Rng + ?Sized>(&self, img: &RangeImage, rng: &mut R) -> RangeImage {
        match self.config.train.crop_width {
            Some(w) if w < img.width() => img.crop_columns(rng.random_range(0..img.width()), w),
            _ => img.clone(),
        }
    }

    /// One discriminator update followed by one generator/aux/heads update.
    pub fn train_step(&mut self, batch_x: &[RangeImage], batch_y: &[RangeImage]) -> Result<StepRecord> {
        if batch_x.is_empty() || batch_y.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut rng = self.rng.clone();
        let xs: Vec<RangeImage> = batch_x.iter().map(|i| self.crop(i, &mut rng)).collect();
        let ys: Vec<RangeImage> = batch_y.iter().map(|i| self.crop(i, &mut rng)).collect();
        let x = images_to_tensor::<T>(&xs)?;
        let y = images_to_tensor::<T>(&ys)?;
        if x.shape()[2..] != y.shape()[2..] {
            return Err(Error::Incompatible(format!("domain batches differ in size: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let (n, _, h, w) = x.dims4();
        let ny = y.dims4().0;
        let num_classes = self.config.num_classes();
        let x_ids = if num_classes > 0 {
            images_to_class_ids(&xs, num_classes)?
        } else {
            Vec::new()
        };
        let raydrop_x = RaydropMode::draw_train(n, h, w, &mut rng);
        let raydrop_y = RaydropMode::draw_train(ny, h, w, &mut rng);
        let spec = self.models.gen.spec();
        let sizes: Vec<usize> = spec
            .taps()
            .iter()
            .map(|&l| {
                let s = spec.layer_scale(l);
                (h / s) * (w / s)
            })
            .collect();
        let patches = self.config.loss.patches_per_layer;
        let locations_x = sample_locations(&sizes, patches, &mut rng);
        let locations_y = sample_locations(&sizes, patches, &mut rng);
        self.rng = rng;

        let lr = self.learning_rate();
        let t = self.step + 1;
        let tc = self.config.train.clone();
        let step = self.step;
        let finite = |term: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteLoss { term: term.to_string(), step })
            }
        };

        let m = &mut self.models;
        let mut g = Graph::<T>::new();
        let gp = m.gen.params.bind(&mut g, true);
        let hp = m.heads.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let ids = (num_classes > 0).then_some(x_ids.as_slice());
        let out = m.gen.generate(&mut g, &gp, xv, ids, &raydrop_x)?;
        let fake = g.value(out.output).clone();

        // discriminator on real y and the detached translation
        let d_loss = {
            let mut gd = Graph::<T>::new();
            let dp = m.disc.params.bind(&mut gd, true);
            let loss = discriminator_objective(&mut gd, &m.disc, &dp, &y, &fake, self.config.loss.gan_mode)?;
            let value = finite("disc", gd.value(loss).item().to_f64_lossy())?;
            let mut grads = gd.backward(loss);
            let gs: Vec<_> = dp.iter().map(|&v| grads.take(v)).collect();
            self.opt_disc.update(&mut m.disc.params, &gs, lr, t, &tc);
            value
        };

        let dp = m.disc.params.bind(&mut g, false);
        let bound = BoundParams { gen: gp, heads: hp, disc: dp };
        let batch = GeneratorBatch {
            x: &x,
            x_ids: &x_ids,
            y: &y,
            raydrop_x: &raydrop_x,
            raydrop_y: &raydrop_y,
            locations_x: &locations_x,
            locations_y: &locations_y,
        };
        let obj = objective_from_output(&mut g, &m.gen, &m.heads, &m.disc, &bound, &out, &batch, &self.config.loss)?;
        let val = |v| g.value(v).item().to_f64_lossy();
        let gan = finite("gan", val(obj.gan))?;
        let nce_x = finite("nce_x", val(obj.nce_x))?;
        let nce_y = finite("nce_y", val(obj.nce_y))?;
        let losses = total_loss(gan, nce_x, nce_y, &self.config.loss);
        finite("total", losses.total)?;
        let mut grads = g.backward(obj.total);
        let gg: Vec<_> = bound.gen.iter().map(|&v| grads.take(v)).collect();
        let hg: Vec<_> = bound.heads.iter().map(|&v| grads.take(v)).collect();
        self.opt_gen.update(&mut m.gen.params, &gg, lr, t, &tc);
        self.opt_heads.update(&mut m.heads.params, &hg, lr, t, &tc);

        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            learning_rate: lr,
            disc: d_loss,
            losses,
        };
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }
}

/// Visiting order of one epoch; independent of the training RNG so a
/// resumed run sees the same batches.
pub fn epoch_order(seed: u64, epoch: usize, len: usize, domain: u64) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 + domain);
    r.set_word_pos((epoch as u128) << 32);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut r);
    order
}

pub fn steps_per_epoch(items: usize, batch: usize) -> usize {
    items.div_ceil(batch)
}

/// Where and how `fit` reports progress.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Checkpoints go to `<dir>/epoch_NNNN.ckpt` and `<dir>/last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited loss records.
    pub log: Option<&'a mut dyn Write>,
}

fn checkpoint_to(state_ck: impl Fn() -> Checkpoint, dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_checkpoint(&state_ck(), &path)?;
    written.push(path);
    Ok(())
}

/// Runs epochs until `config.train.epochs` (or `max_steps`), continuing from
/// wherever `state` stands. Returns the checkpoints written.
pub fn fit<T: Scalar>(state: &mut TrainState<T>, x: &DomainData, y: &DomainData, mut opts: FitOptions<'_>) -> Result<Vec<PathBuf>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("training domain".into()));
    }
    let shape = |d: &DomainData| (d.images[0].height(), d.images[0].width());
    let expect = (state.config.sensor.height, state.config.sensor.width);
    if shape(x) != expect || shape(y) != expect {
        return Err(Error::Incompatible(format!(
            "domain images {:?} / {:?} do not match the sensor grid {expect:?}",
            shape(x),
            shape(y)
        )));
    }
    let tc = state.config.train.clone();
    let b = tc.batch_size;
    let per_epoch = steps_per_epoch(x.len(), b);
    let mut written = Vec::new();
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let done = |s: &TrainState<T>| tc.max_steps.is_some_and(|m| s.step >= m);
    while state.epoch < tc.epochs && !done(state) {
        let ox = epoch_order(tc.seed, state.epoch, x.len(), 0);
        let oy = epoch_order(tc.seed, state.epoch, y.len(), 1);
        while state.step_in_epoch < per_epoch && !done(state) {
            let s = state.step_in_epoch;
            let bx: Vec<RangeImage> = ox[s * b..((s + 1) * b).min(x.len())].iter().map(|&i| x.images[i].clone()).collect();
            let by: Vec<RangeImage> = (0..bx.len()).map(|j| y.images[oy[(s * b + j) % y.len()]].clone()).collect();
            let rec = state.train_step(&bx, &by)?;
            state.step_in_epoch += 1;
            if let Some(log) = opts.log.as_deref_mut() {
                crate::losses::write_records(log, rec.step, &rec.terms()).map_err(|e| Error::io(Path::new("<training log>"), e))?;
            }
        }
        if state.step_in_epoch == per_epoch {
            state.epoch += 1;
            state.step_in_epoch = 0;
            if let Some(dir) = &opts.checkpoint_dir {
                if tc.checkpoint_every > 0 && state.epoch.is_multiple_of(tc.checkpoint_every) {
                    checkpoint_to(|| state.to_checkpoint(), dir, &format!("epoch_{:04}.ckpt", state.epoch), &mut written)?;
                }
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint_to(|| state.to_checkpoint(), dir, "last.ckpt", &mut written)?;
    }
    Ok(written)
}

/// Maps a normalized input image to a normalized output image whose valid
/// cells are the returns that survive translation.
pub trait Translator {
    fn sensor(&self) -> &SensorConfig;
    fn norm(&self) -> NormMode;
    fn translate(&self, input: &RangeImage, index: usize) -> Result<RangeImage>;
}

/// Returns its input unchanged.
pub struct IdentityTranslator {
    pub sensor: SensorConfig,
    pub norm: NormMode,
}

impl Translator for IdentityTranslator {
    fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    fn norm(&self) -> NormMode {
        self.norm
    }

    fn translate(&self, input: &RangeImage, _index: usize) -> Result<RangeImage> {
        input.select(&[ChannelRole::Depth, ChannelRole::Reflectance])
    }
}

/// Trained generator with inference-time raydrop sampling seeded per scan.
pub struct GeneratorTranslator<T> {
    pub gen: Generator<T>,
    pub sensor: SensorConfig,
    pub norm: NormMode,
    pub seed: u64,
}

impl<T: Scalar> GeneratorTranslator<T> {
    pub fn from_state(state: &TrainState<T>) -> Self {
        Self {
            gen: state.models.gen.clone(),
            sensor: state.config.sensor,
            norm: state.config.norm,
            seed: state.config.train.seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_state(&TrainState::<T>::load(path)?))
    }
}

impl<T: Scalar> Translator for GeneratorTranslator<T> {
    fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    fn norm(&self) -> NormMode {
        self.norm
    }

    fn translate(&self, input: &RangeImage, index: usize) -> Result<RangeImage> {
        let (h, w) = (input.height(), input.width());
        let x = images_to_tensor::<T>(std::slice::from_ref(input))?;
        let aux = self.gen.spec().aux.clone();
        let ids = match &aux {
            Some(a) if input.has(ChannelRole::Semantic) => Some(images_to_class_ids(std::slice::from_ref(input), a.num_classes)?),
            Some(_) => Some(vec![0; h * w]),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(7);
        rng.set_word_pos((index as u128) << 40);
        let rs = RaydropMode::draw_eval(1, h, w, &mut rng);
        let mut g = Graph::<T>::new();
        let p = self.gen.params.bind(&mut g, false);
        let xv = g.constant(x);
        let out = self.gen.generate(&mut g, &p, xv, ids.as_deref(), &rs)?;
        let mask = out.mask.map(|m| g.value(m).to_f64_vec()).unwrap_or_else(|| vec![1.0; h * w]);
        let valid: Vec<bool> = mask.iter().map(|&m| m > 0.5).collect();
        let imgs = crate::netcore::tensor_to_images(g.value(out.output), &[ChannelRole::Depth, ChannelRole::Reflectance], Some(&valid))?;
        Ok(imgs.into_iter().next().expect("one image"))
    }
}

/// Translates one cloud; returns the output cloud and its metric-unit image.
/// Returns closer than `d_min` are dropped.
pub fn translate_image<Tr: Translator + ?Sized>(translator: &Tr, cloud: &PointCloud, index: usize) -> Result<(PointCloud, RangeImage)> {
    let sensor = *translator.sensor();
    let norm = translator.norm();
    let input = prepare_image(cloud, &sensor, norm)?;
    let out = translator.translate(&input, index)?;
    let mut dn = rangeview::denormalize(&out, &sensor, norm)?;
    let depth = dn.plane(ChannelRole::Depth)?;
    for (cell, d) in depth.iter().enumerate() {
        if dn.valid()[cell] && *d < sensor.d_min {
            dn.set_valid(cell, false);
        }
    }
    let out_cloud = rangeview::reconstruct(&dn, &sensor, AngleSource::PixelCenter)?;
    Ok((out_cloud, dn))
}

/// [`translate_image`] for a cloud, keeping only the output cloud.
pub fn translate_cloud<Tr: Translator + ?Sized>(translator: &Tr, cloud: &PointCloud, index: usize) -> Result<PointCloud> {
    Ok(translate_image(translator, cloud, index)?.0)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslateSummary {
    pub scans: usize,
    pub input_points: usize,
    pub output_points: usize,
}

/// Translates every scan of `split` into `out_dir`, writing KITTI-layout
/// `.bin` files, `.rimg` range images and `manifest.jsonl`.
pub fn translate<Tr: Translator + ?Sized>(spec: &DatasetSpec, split: Split, translator: &Tr, out_dir: &Path) -> Result<TranslateSummary> {
    let sensor = *translator.sensor();
    if spec.sensor != sensor {
        return Err(Error::Incompatible(format!("dataset {} and checkpoint use different sensor configurations", spec.root.display())));
    }
    let mut manifest = Vec::new();
    let mut summary = TranslateSummary::default();
    let entries = dataio::list_scans::<ChaCha8Rng>(spec, split, None)?;
    for (index, entry) in entries.iter().enumerate() {
        let sample = dataio::load_sample(entry, &spec.classes)?;
        let (cloud, dn) = translate_image(translator, &sample.labeled_cloud()?, index)?;
        let rel_bin = format!("sequences/{}/velodyne/{}.bin", entry.sequence, entry.frame);
        let rel_rimg = format!("rimg/{}/{}.rimg", entry.sequence, entry.frame);
        dataio::write_scan(&out_dir.join(&rel_bin), &cloud)?;
        rangeview::write_rimg(&dn, &out_dir.join(&rel_rimg))?;
        // relative fields resolve against the manifest directory, so the input must be absolute
        let input_str = std::path::absolute(&entry.scan).map_err(|e| Error::io(&entry.scan, e))?.to_string_lossy().into_owned();
        manifest.push(ManifestEntry::new(out_dir, &input_str, &rel_bin)?);
        summary.scans += 1;
        summary.input_points += sample.cloud.len();
        summary.output_points += cloud.len();
    }
    dataio::write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(summary)
}
