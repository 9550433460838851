//! Three-stage training: blur GAN on unpaired data, deblur GAN on pairs, and
//! deblur GAN fine-tuned with blur-GAN output mixed into its batches.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur_synth::{make_noise_map, BlurManifest, NoiseMap};
use crate::error::{Error, Result};
use crate::image_io;
use crate::losses::{
    adversarial_loss, combined_bgan_loss, combined_dbgan_loss, content_loss, perceptual_loss,
    relativistic_loss, AdversarialKind, ContentMode, FeatureExtractor, LossReport, LossWeights,
    Role,
};
use crate::models::{
    bgan_generator_forward, dbgan_generator_forward, discriminator_forward, init_params,
    load_checkpoint, run_bgan, save_checkpoint, stack_noise, Checkpoint, NetworkKind, NetworkSpec,
    ParamStore, ScalePreset,
};
use crate::numerics::{optimizer_step, Method, OptimizerState, Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bgan,
    Dbgan,
    DbganPlus,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Bgan => "bgan",
            Stage::Dbgan => "dbgan",
            Stage::DbganPlus => "dbgan_plus",
        }
    }

    fn store_prefix(&self) -> &'static str {
        match self {
            Stage::Bgan => "bgan",
            Stage::Dbgan | Stage::DbganPlus => "dbgan",
        }
    }
}

/// Deblur-GAN variants: traditional adversarial loss, relativistic loss, and
/// relativistic loss with generated pairs mixed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DbganMinus,
    Dbgan,
    DbganPlus,
}

impl Ablation {
    pub fn adversarial_kind(&self) -> AdversarialKind {
        match self {
            Ablation::DbganMinus => AdversarialKind::Standard,
            Ablation::Dbgan | Ablation::DbganPlus => AdversarialKind::Relativistic,
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            Ablation::DbganMinus | Ablation::Dbgan => Stage::Dbgan,
            Ablation::DbganPlus => Stage::DbganPlus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub crop: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    /// Steps per loss-averaging window.
    pub anneal_window: usize,
    /// Non-improving windows tolerated before the learning rate drops.
    pub anneal_patience: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub content_mode: ContentMode,
    pub mix_ratio: f32,
    pub optimizer: Method,
    pub perceptual_seed: u64,
    pub desk_scale: bool,
    pub sharp_dir: Option<PathBuf>,
    pub blurry_dir: Option<PathBuf>,
    pub paired_manifest: Option<PathBuf>,
    pub bgan_checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
}

/// Fields that steer a run without changing what is being trained; they are
/// left out of the config hash so a run can be resumed with a new step budget.
const RUN_CONTROL_FIELDS: [&str; 4] = ["max_steps", "out_dir", "checkpoint_every", "resume"];

impl Default for TrainConfig {
    /// Desk scale: 32×32 crops and reduced networks.
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Dbgan,
            ablation: Ablation::Dbgan,
            batch_size: 4,
            crop: 32,
            lr_start: 1e-4,
            lr_end: 1e-6,
            anneal_window: 50,
            anneal_patience: 4,
            max_steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            content_mode: ContentMode::Mse,
            mix_ratio: 0.5,
            optimizer: Method::Adam,
            perceptual_seed: 0x5eed,
            desk_scale: true,
            sharp_dir: None,
            blurry_dir: None,
            paired_manifest: None,
            bgan_checkpoint: None,
            init_checkpoint: None,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 500,
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: 128×128 crops and full-size networks.
    pub fn paper() -> Self {
        TrainConfig {
            crop: 128,
            desk_scale: false,
            max_steps: 300_000,
            ..Default::default()
        }
    }

    /// `base` with stage and adversarial variant set for one deblur ablation.
    pub fn for_ablation(base: &TrainConfig, ablation: Ablation) -> Self {
        TrainConfig {
            stage: ablation.stage(),
            ablation,
            ..base.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got {} / {}",
                self.lr_end, self.lr_start
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.crop < 32 {
            return bad(format!("crop {} < 32", self.crop));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio {} outside [0, 1]", self.mix_ratio));
        }
        if self.anneal_window == 0 || self.anneal_patience == 0 {
            return bad("anneal_window and anneal_patience must be >= 1".into());
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        if self.stage != Stage::Bgan && self.ablation.stage() != self.stage {
            return bad(format!(
                "stage {:?} is inconsistent with ablation {:?}",
                self.stage, self.ablation
            ));
        }
        Ok(())
    }

    pub fn preset(&self) -> ScalePreset {
        if self.desk_scale {
            ScalePreset::Desk
        } else {
            ScalePreset::Paper
        }
    }

    pub fn network_spec(&self, kind: NetworkKind) -> NetworkSpec {
        NetworkSpec::preset(kind, self.preset())
    }

    pub fn generator_kind(&self) -> NetworkKind {
        match self.stage {
            Stage::Bgan => NetworkKind::BganGenerator,
            _ => NetworkKind::DbganGenerator,
        }
    }

    pub fn adversarial_kind(&self) -> AdversarialKind {
        match self.stage {
            Stage::Bgan => AdversarialKind::Relativistic,
            _ => self.ablation.adversarial_kind(),
        }
    }

    /// Canonical JSON of every field that defines the training recipe.
    pub fn recipe(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for k in RUN_CONTROL_FIELDS {
                map.remove(k);
            }
        }
        v
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.recipe()).expect("recipe serializes");
        Sha256::digest(&bytes)[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Clone, Debug)]
pub enum Dataset {
    /// Disjoint sharp and real-blurry pools.
    Unpaired {
        sharp: Vec<Tensor>,
        blurry: Vec<Tensor>,
    },
    /// `(blurry, sharp)` pairs.
    Paired { pairs: Vec<(Tensor, Tensor)> },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Unpaired { sharp, .. } => sharp.len(),
            Dataset::Paired { pairs } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads the pools the configured stage needs and nothing else.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone().ok_or_else(|| {
                Error::Data(format!("{} stage needs `{what}`", config.stage.as_str()))
            })
        };
        let load_dir = |dir: &Path| -> Result<Vec<Tensor>> {
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "data path {} is missing",
                    dir.display()
                )));
            }
            image_io::list_pngs(dir)?
                .iter()
                .map(|p| image_io::load_png(p))
                .collect()
        };
        match config.stage {
            Stage::Bgan => {
                let sharp = load_dir(&need(&config.sharp_dir, "sharp_dir")?)?;
                let blurry = load_dir(&need(&config.blurry_dir, "blurry_dir")?)?;
                Ok(Dataset::Unpaired { sharp, blurry })
            }
            Stage::Dbgan | Stage::DbganPlus => {
                let manifest = need(&config.paired_manifest, "paired_manifest")?;
                if !manifest.is_file() {
                    return Err(Error::Data(format!(
                        "data path {} is missing",
                        manifest.display()
                    )));
                }
                let root = manifest.parent().unwrap_or(Path::new("."));
                let pairs = BlurManifest::load(&manifest)?.load_pairs(root)?;
                Ok(Dataset::Paired { pairs })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealPair,
    BganGenerated,
    Unpaired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub index: usize,
    pub y: usize,
    pub x: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Sharp crops (blur stage) or blurry crops (deblur stages).
    pub inputs: Tensor,
    /// Sharp targets for paired stages.
    pub targets: Option<Tensor>,
    /// Independently drawn real-blurry crops (blur stage).
    pub real_blurry: Option<Tensor>,
    pub noise: Option<Vec<NoiseMap>>,
    pub provenance: Vec<Provenance>,
    pub augment: Vec<Augment>,
}

const PURPOSE_BATCH: u64 = 1;
const PURPOSE_REAL_BLURRY: u64 = 2;
const PURPOSE_MIX: u64 = 3;

/// Generator for one (seed, step, purpose) triple.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

fn draw_augment<R: Rng>(rng: &mut R, pool: &[Tensor], crop: usize) -> Result<Augment> {
    let index = rng.gen_range(0..pool.len());
    let s = pool[index].shape();
    if s.h < crop || s.w < crop {
        return Err(Error::Data(format!(
            "image {index} is {}x{}, smaller than crop {crop}",
            s.h, s.w
        )));
    }
    Ok(Augment {
        index,
        y: rng.gen_range(0..=s.h - crop),
        x: rng.gen_range(0..=s.w - crop),
        flip_h: rng.gen_bool(0.5),
        flip_v: rng.gen_bool(0.5),
    })
}

/// Crop then flip one 1×C×H×W image.
pub fn apply_augment(img: &Tensor, a: &Augment, crop: usize) -> Tensor {
    let s = img.shape();
    let mut data = Vec::with_capacity(s.c * crop * crop);
    for c in 0..s.c {
        for yy in 0..crop {
            let sy = if a.flip_v { crop - 1 - yy } else { yy } + a.y;
            for xx in 0..crop {
                let sx = if a.flip_h { crop - 1 - xx } else { xx } + a.x;
                data.push(img.at(0, c, sy, sx));
            }
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, crop, crop), data).expect("crop sized")
}

fn crops(pool: &[Tensor], augs: &[Augment], crop: usize) -> Result<Tensor> {
    let items: Vec<Tensor> = augs
        .iter()
        .map(|a| apply_augment(&pool[a.index], a, crop))
        .collect();
    Tensor::stack(&items)
}

/// Random crops with independent horizontal/vertical flips, fully determined
/// by `(config.seed, step)`. The blur stage also draws one noise map per item
/// and an unrelated real-blurry batch.
pub fn make_batch(dataset: &Dataset, config: &TrainConfig, step: u64) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut rng = step_rng(config.seed, step, PURPOSE_BATCH);
    let n = config.batch_size;
    match dataset {
        Dataset::Unpaired { sharp, blurry } => {
            if blurry.is_empty() {
                return Err(Error::Data("blur stage needs a real-blurry pool".into()));
            }
            let augment = (0..n)
                .map(|_| draw_augment(&mut rng, sharp, config.crop))
                .collect::<Result<Vec<_>>>()?;
            let noise_channels = config
                .network_spec(NetworkKind::BganGenerator)
                .noise_channels;
            let noise = (0..n)
                .map(|_| make_noise_map(rng.next_u64(), noise_channels, config.crop, config.crop))
                .collect::<Result<Vec<_>>>()?;
            let mut rb_rng = step_rng(config.seed, step, PURPOSE_REAL_BLURRY);
            let rb_aug = (0..n)
                .map(|_| draw_augment(&mut rb_rng, blurry, config.crop))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                inputs: crops(sharp, &augment, config.crop)?,
                targets: None,
                real_blurry: Some(crops(blurry, &rb_aug, config.crop)?),
                noise: Some(noise),
                provenance: vec![Provenance::Unpaired; n],
                augment,
            })
        }
        Dataset::Paired { pairs } => {
            let sharp: Vec<Tensor> = pairs.iter().map(|(_, s)| s.clone()).collect();
            let augment = (0..n)
                .map(|_| draw_augment(&mut rng, &sharp, config.crop))
                .collect::<Result<Vec<_>>>()?;
            let blurry: Vec<Tensor> = augment
                .iter()
                .map(|a| apply_augment(&pairs[a.index].0, a, config.crop))
                .collect();
            Ok(Batch {
                inputs: Tensor::stack(&blurry)?,
                targets: Some(crops(&sharp, &augment, config.crop)?),
                real_blurry: None,
                noise: None,
                provenance: vec![Provenance::RealPair; n],
                augment,
            })
        }
    }
}

/// A paired batch where each item is, with probability `mix_ratio`, replaced
/// by `(BGAN(sharp, noise), sharp)` generated on the fly.
pub fn mix_synthetic_batch(
    pairs: &Dataset,
    bgan: Option<&ParamStore>,
    config: &TrainConfig,
    step: u64,
) -> Result<Batch> {
    let bgan =
        bgan.ok_or_else(|| Error::Data("dbgan_plus stage needs a trained BGAN checkpoint".into()))?;
    let mut batch = make_batch(pairs, config, step)?;
    let targets = batch
        .targets
        .clone()
        .ok_or_else(|| Error::Data("synthetic mixing needs a paired dataset".into()))?;
    let mut rng = step_rng(config.seed, step, PURPOSE_MIX);
    let mut items = Vec::with_capacity(config.batch_size);
    for i in 0..config.batch_size {
        let generated = rng.gen::<f32>() < config.mix_ratio;
        let noise_seed = rng.next_u64();
        if generated {
            let sharp = targets.item_tensor(i);
            let noise = make_noise_map(
                noise_seed,
                bgan.spec.noise_channels,
                config.crop,
                config.crop,
            )?;
            items.push(run_bgan(bgan, &sharp, &noise.values)?);
            batch.provenance[i] = Provenance::BganGenerated;
        } else {
            items.push(batch.inputs.item_tensor(i));
        }
    }
    batch.inputs = Tensor::stack(&items)?;
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Steps

/// Generator/discriminator weights with their optimizer memories.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub g: ParamStore,
    pub d: ParamStore,
    pub g_opt: OptimizerState,
    pub d_opt: OptimizerState,
}

impl GanState {
    pub fn init(config: &TrainConfig) -> Self {
        let g_spec = config.network_spec(config.generator_kind());
        let d_spec = config.network_spec(NetworkKind::Discriminator);
        GanState {
            g: init_params(&g_spec, config.seed),
            d: init_params(&d_spec, config.seed.wrapping_add(1)),
            g_opt: OptimizerState::new(config.optimizer),
            d_opt: OptimizerState::new(config.optimizer),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReports {
    pub d: LossReport,
    pub g: LossReport,
}

/// One discriminator update on (real, fake) images.
fn update_discriminator(
    state: &mut GanState,
    real: &Tensor,
    fake: &Tensor,
    kind: AdversarialKind,
    lr: f32,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let d = state.d.bind(&mut tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let cr = discriminator_forward(&mut tape, r, &d, &state.d.spec)?;
    let cf = discriminator_forward(&mut tape, f, &d, &state.d.spec)?;
    let loss = adversarial_loss(&mut tape, kind, Role::Discriminator, cr, cf)?;
    tape.backward(loss)?;
    let grads = d.grads(&tape)?;
    optimizer_step(state.d.params_mut(), &grads, lr, &mut state.d_opt)?;
    Ok(LossReport::discriminator(tape.item(loss)?, kind))
}

/// Blur-GAN step: discriminator update on (real blurry, G(sharp, noise)), then
/// a generator update on `perceptual(G(sharp, noise), sharp) + β·RBL`.
pub fn train_bgan_step(
    state: &mut GanState,
    batch: &Batch,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    lr: f32,
) -> Result<StepReports> {
    let real_blurry = batch
        .real_blurry
        .as_ref()
        .ok_or_else(|| Error::Data("blur step needs a real-blurry batch".into()))?;
    let noise = stack_noise(
        batch
            .noise
            .as_deref()
            .ok_or_else(|| Error::Data("blur step needs noise maps".into()))?,
    )?;

    let mut tape = Tape::new();
    let g = state.g.bind(&mut tape, true);
    let sharp = tape.constant(batch.inputs.clone());
    let nv = tape.constant(noise);
    let fake = bgan_generator_forward(&mut tape, sharp, nv, &g, &state.g.spec)?;
    let fake_value = tape.value(fake).clone();

    let d_report = update_discriminator(
        state,
        real_blurry,
        &fake_value,
        AdversarialKind::Relativistic,
        lr,
    )?;

    let d = state.d.bind(&mut tape, false);
    let rb = tape.constant(real_blurry.clone());
    let cr = discriminator_forward(&mut tape, rb, &d, &state.d.spec)?;
    let cf = discriminator_forward(&mut tape, fake, &d, &state.d.spec)?;
    let rbl = relativistic_loss(&mut tape, cr, cf, Role::Generator)?;
    let perc = perceptual_loss(&mut tape, fake, sharp, extractor)?;
    let weighted = tape.scale(rbl, config.weights.beta);
    let total = tape.add(perc, weighted)?;
    tape.backward(total)?;
    let grads = g.grads(&tape)?;
    optimizer_step(state.g.params_mut(), &grads, lr, &mut state.g_opt)?;

    let g_report = combined_bgan_loss(tape.item(perc)?, tape.item(rbl)?, config.weights)?;
    Ok(StepReports {
        d: d_report,
        g: g_report,
    })
}

/// Deblur-GAN step: discriminator update on (sharp, G(blurry)), then a
/// generator update on `perceptual + α·content + β·adversarial`, where the
/// adversarial term is relativistic or traditional per the ablation.
pub fn train_dbgan_step(
    state: &mut GanState,
    batch: &Batch,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    lr: f32,
) -> Result<StepReports> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Data("deblur step needs a paired batch".into()))?;
    let kind = config.adversarial_kind();

    let mut tape = Tape::new();
    let g = state.g.bind(&mut tape, true);
    let blurry = tape.constant(batch.inputs.clone());
    let fake = dbgan_generator_forward(&mut tape, blurry, &g, &state.g.spec)?;
    let fake_value = tape.value(fake).clone();

    let d_report = update_discriminator(state, targets, &fake_value, kind, lr)?;

    let d = state.d.bind(&mut tape, false);
    let sharp = tape.constant(targets.clone());
    let cr = discriminator_forward(&mut tape, sharp, &d, &state.d.spec)?;
    let cf = discriminator_forward(&mut tape, fake, &d, &state.d.spec)?;
    let adv = adversarial_loss(&mut tape, kind, Role::Generator, cr, cf)?;
    let perc = perceptual_loss(&mut tape, fake, sharp, extractor)?;
    let content = content_loss(&mut tape, fake, sharp, config.content_mode)?;
    let wc = tape.scale(content, config.weights.alpha);
    let wa = tape.scale(adv, config.weights.beta);
    let sum = tape.add(perc, wc)?;
    let total = tape.add(sum, wa)?;
    tape.backward(total)?;
    let grads = g.grads(&tape)?;
    optimizer_step(state.g.params_mut(), &grads, lr, &mut state.g_opt)?;

    let g_report = combined_dbgan_loss(
        tape.item(perc)?,
        tape.item(content)?,
        tape.item(adv)?,
        config.weights,
    )?
    .with_kind(kind);
    Ok(StepReports {
        d: d_report,
        g: g_report,
    })
}

/// Supervised deblur-generator update on the content loss alone.
pub fn train_content_step(
    g: &mut ParamStore,
    opt: &mut OptimizerState,
    blurry: &Tensor,
    sharp: &Tensor,
    mode: ContentMode,
    lr: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, true);
    let x = tape.constant(blurry.clone());
    let y = tape.constant(sharp.clone());
    let out = dbgan_generator_forward(&mut tape, x, &bound, &g.spec)?;
    let loss = content_loss(&mut tape, out, y, mode)?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape)?;
    optimizer_step(g.params_mut(), &grads, lr, opt)?;
    tape.item(loss)
}

// ---------------------------------------------------------------------------
// Learning-rate annealing

/// Windowed-mean plateau detector driving ×0.1 learning-rate drops.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annealer {
    pub window_sum: f64,
    pub window_count: usize,
    pub best: Option<f64>,
    pub bad_windows: usize,
    pub stopped: bool,
}

impl Annealer {
    /// Feeds one step's loss; returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f32, lr: f32, config: &TrainConfig) -> f32 {
        self.window_sum += loss as f64;
        self.window_count += 1;
        if self.window_count < config.anneal_window {
            return lr;
        }
        let mean = self.window_sum / self.window_count as f64;
        self.window_sum = 0.0;
        self.window_count = 0;
        if self.best.map_or(true, |b| mean < b) {
            self.best = Some(mean);
            self.bad_windows = 0;
            return lr;
        }
        self.bad_windows += 1;
        if self.bad_windows < config.anneal_patience {
            return lr;
        }
        self.bad_windows = 0;
        if lr <= config.lr_end {
            self.stopped = true;
            return config.lr_end;
        }
        (lr * 0.1).max(config.lr_end)
    }
}

// ---------------------------------------------------------------------------
// Driver

/// A training run held in memory; [`run_training`] adds files around it.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub state: GanState,
    pub bgan: Option<ParamStore>,
    pub extractor: FeatureExtractor,
    pub step: u64,
    pub lr: f32,
    pub annealer: Annealer,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Dataset, bgan: Option<ParamStore>) -> Result<Self> {
        config.validate()?;
        if config.stage == Stage::DbganPlus && bgan.is_none() {
            return Err(Error::Data(
                "dbgan_plus stage needs a trained BGAN checkpoint".into(),
            ));
        }
        if let Some(b) = &bgan {
            let expected = config.network_spec(NetworkKind::BganGenerator);
            if b.spec_hash() != expected.hash() {
                return Err(Error::SpecHashMismatch {
                    store: "bgan_g".into(),
                    expected: expected.hash(),
                    found: b.spec_hash(),
                });
            }
        }
        Ok(Trainer {
            state: GanState::init(&config),
            extractor: FeatureExtractor::new(config.perceptual_seed),
            lr: config.lr_start,
            step: 0,
            annealer: Annealer::default(),
            config,
            dataset,
            bgan,
        })
    }

    fn store_names(&self) -> (String, String) {
        let p = self.config.stage.store_prefix();
        (format!("{p}_g"), format!("{p}_d"))
    }

    /// Replaces the networks with those from a deblur checkpoint (fine-tuning).
    pub fn init_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let (gn, dn) = self.store_names();
        self.state.g = ckpt.store(&gn, &self.state.g.spec)?.clone();
        self.state.d = ckpt.store(&dn, &self.state.d.spec)?.clone();
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.max_steps || self.annealer.stopped
    }

    pub fn next_batch(&self) -> Result<Batch> {
        match self.config.stage {
            Stage::DbganPlus => {
                mix_synthetic_batch(&self.dataset, self.bgan.as_ref(), &self.config, self.step)
            }
            _ => make_batch(&self.dataset, &self.config, self.step),
        }
    }

    /// One batch, one discriminator update, one generator update.
    pub fn step(&mut self) -> Result<StepReports> {
        let batch = self.next_batch()?;
        let lr = self.lr;
        let reports = match self.config.stage {
            Stage::Bgan => {
                train_bgan_step(&mut self.state, &batch, &self.config, &self.extractor, lr)?
            }
            Stage::Dbgan | Stage::DbganPlus => {
                train_dbgan_step(&mut self.state, &batch, &self.config, &self.extractor, lr)?
            }
        };
        self.step += 1;
        self.lr = self
            .annealer
            .observe(reports.g.total, self.lr, &self.config);
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (gn, dn) = self.store_names();
        let metadata = serde_json::json!({
            "stage": self.config.stage,
            "step": self.step,
            "lr": self.lr,
            "config_hash": self.config.config_hash(),
            "recipe": self.config.recipe(),
            "annealer": self.annealer,
        });
        Checkpoint {
            stores: [
                (gn.clone(), self.state.g.clone()),
                (dn.clone(), self.state.d.clone()),
            ]
            .into(),
            optimizers: [
                (gn, self.state.g_opt.clone()),
                (dn, self.state.d_opt.clone()),
            ]
            .into(),
            metadata,
        }
    }

    /// Restores weights, optimizer memory, step, learning rate and annealer.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let found = ckpt
            .metadata
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let expected = self.config.config_hash();
        if found != expected {
            return Err(Error::ConfigHashMismatch { expected, found });
        }
        let (gn, dn) = self.store_names();
        self.state.g = ckpt.store(&gn, &self.state.g.spec)?.clone();
        self.state.d = ckpt.store(&dn, &self.state.d.spec)?.clone();
        let opt = |name: &str| {
            ckpt.optimizers
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint has no optimizer `{name}`")))
        };
        self.state.g_opt = opt(&gn)?;
        self.state.d_opt = opt(&dn)?;
        let meta = &ckpt.metadata;
        self.step = meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("checkpoint metadata lacks `step`".into()))?;
        self.lr = meta
            .get("lr")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Data("checkpoint metadata lacks `lr`".into()))?
            as f32;
        self.annealer = serde_json::from_value(meta.get("annealer").cloned().unwrap_or_default())?;
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    step: u64,
    stage: &'a str,
    lr: f32,
    perceptual: f32,
    content: f32,
    adversarial: f32,
    total: f32,
}

pub fn checkpoint_name(stage: Stage, step: u64) -> String {
    format!("ckpt_{}_{}.rblb", stage.as_str(), step)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_step: u64,
    pub final_lr: f32,
}

/// Runs the configured stage to completion, writing checkpoints and
/// `metrics.csv` (one `d_update` row and one generator row per step) into
/// `config.out_dir`.
pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::load(config)?;
    let bgan = match (config.stage, &config.bgan_checkpoint) {
        (Stage::DbganPlus, Some(p)) => {
            let spec = config.network_spec(NetworkKind::BganGenerator);
            Some(load_checkpoint(p)?.store("bgan_g", &spec)?.clone())
        }
        (Stage::DbganPlus, None) => {
            return Err(Error::Data(
                "dbgan_plus stage needs `bgan_checkpoint`".into(),
            ))
        }
        _ => None,
    };
    let mut trainer = Trainer::new(config.clone(), dataset, bgan)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let metrics_path = config.out_dir.join(METRICS_FILE);

    let resumed = match &config.resume {
        Some(p) => {
            trainer.restore(&load_checkpoint(p)?)?;
            true
        }
        None => {
            if let Some(p) = &config.init_checkpoint {
                trainer.init_from(&load_checkpoint(p)?)?;
            }
            false
        }
    };

    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let write_header = !resumed || file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if write_header {
        csv.write_record([
            "step",
            "stage",
            "lr",
            "perceptual",
            "content",
            "adversarial",
            "total",
        ])?;
    }

    let save = |t: &Trainer| -> Result<PathBuf> {
        let path = config.out_dir.join(checkpoint_name(config.stage, t.step));
        save_checkpoint(&path, &t.checkpoint())?;
        Ok(path)
    };

    let mut last = if resumed { None } else { Some(save(&trainer)?) };
    while !trainer.is_finished() {
        let lr = trainer.lr;
        let r = trainer.step()?;
        for rep in [r.d, r.g] {
            csv.serialize(MetricsRow {
                step: trainer.step,
                stage: rep.stage.as_str(),
                lr,
                perceptual: rep.perceptual,
                content: rep.content,
                adversarial: rep.adversarial,
                total: rep.total,
            })?;
        }
        last = None;
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
            last = Some(save(&trainer)?);
        }
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint = match last {
        Some(p) => p,
        None => save(&trainer)?,
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics: metrics_path,
        final_step: trainer.step,
        final_lr: trainer.lr,
    })
}
