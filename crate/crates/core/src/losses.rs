//! Training objectives.
//!
//! Every loss is recorded on a [`Tape`] so it can be differentiated; the
//! `combined_*` functions fold scalar term values into a [`LossReport`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Padding, Shape, Tape, Tensor, Var};

/// Lower bound applied inside every `log`.
pub const LOG_FLOOR: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Content-loss weight.
    pub alpha: f32,
    /// Adversarial-loss weight.
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.005,
            beta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f32, beta: f32) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::invalid(
                "loss weights",
                format!("alpha={alpha}, beta={beta} must be >= 0"),
            ));
        }
        Ok(LossWeights { alpha, beta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Bgan,
    DbganG,
    DUpdate,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Bgan => "bgan",
            StageTag::DbganG => "dbgan_g",
            StageTag::DUpdate => "d_update",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    #[default]
    Relativistic,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: StageTag,
    pub adversarial_kind: AdversarialKind,
    pub perceptual: f32,
    pub content: f32,
    pub adversarial: f32,
    pub total: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentMode {
    #[default]
    Mse,
    L1,
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

fn non_empty(tape: &Tape, op: &'static str, v: Var) -> Result<()> {
    if tape.shape(v).numel() == 0 {
        return Err(Error::invalid(op, "empty logits"));
    }
    Ok(())
}

/// Mean squared (or absolute) difference over all elements.
pub fn content_loss(
    tape: &mut Tape,
    generated: Var,
    target: Var,
    mode: ContentMode,
) -> Result<Var> {
    same_shape(tape, "content_loss", generated, target)?;
    let d = tape.sub(generated, target)?;
    let e = match mode {
        ContentMode::Mse => tape.square(d),
        ContentMode::L1 => tape.abs(d),
    };
    tape.mean_all(e)
}

/// Fixed random conv stack whose pre-activation maps define the perceptual distance.
///
/// Four 3×3 stages (3→8, 8→16 stride 2, 16→16, 16→32 stride 2) with ReLU
/// between them. Weights are He-normal from a seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    stages: Vec<(Tensor, Tensor, usize)>,
}

const EXTRACTOR_STAGES: [(usize, usize, usize); 4] =
    [(3, 8, 1), (8, 16, 2), (16, 16, 1), (16, 32, 2)];

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = EXTRACTOR_STAGES
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (cin * 9) as f32).sqrt();
                let w = Tensor::randn(Shape::new(cout, cin, 3, 3), std, &mut rng);
                let b = Tensor::zeros(Shape::new(1, cout, 1, 1));
                (w, b, stride)
            })
            .collect();
        FeatureExtractor { seed, stages }
    }

    /// Pre-activation output of the last stage.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.stages.len() - 1;
        for (i, (w, b, stride)) in self.stages.iter().enumerate() {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            h = tape.conv2d(h, wv, Some(bv), *stride, Padding::ReflectSame)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Mean squared distance between extractor features of the two images.
pub fn perceptual_loss(
    tape: &mut Tape,
    generated: Var,
    reference: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    same_shape(tape, "perceptual_loss", generated, reference)?;
    let fg = extractor.features(tape, generated)?;
    let fr = extractor.features(tape, reference)?;
    content_loss(tape, fg, fr, ContentMode::Mse)
}

/// `mean log(max(σ(x), floor))`, or of `1 − σ(x)` when `complement` is set.
fn mean_log_sigmoid(tape: &mut Tape, x: Var, complement: bool) -> Result<Var> {
    let s = tape.sigmoid(x);
    let s = if complement {
        tape.affine(s, -1.0, 1.0)
    } else {
        s
    };
    let l = tape.log_clamped(s, LOG_FLOOR);
    tape.mean_all(l)
}

/// Non-saturating binary cross-entropy GAN loss on logits.
///
/// Discriminator: `−[mean log σ(real) + mean log(1 − σ(fake))]`.
/// Generator: `−mean log σ(fake)`; `real` is ignored.
pub fn standard_adv_loss(tape: &mut Tape, role: Role, real: Option<Var>, fake: Var) -> Result<Var> {
    non_empty(tape, "standard_adv_loss", fake)?;
    match role {
        Role::Generator => {
            let t = mean_log_sigmoid(tape, fake, false)?;
            Ok(tape.scale(t, -1.0))
        }
        Role::Discriminator => {
            let real = real.ok_or_else(|| {
                Error::invalid("standard_adv_loss", "discriminator needs real logits")
            })?;
            non_empty(tape, "standard_adv_loss", real)?;
            let a = mean_log_sigmoid(tape, real, false)?;
            let b = mean_log_sigmoid(tape, fake, true)?;
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, -1.0))
        }
    }
}

/// Relativistic loss on batch logits:
/// `−[mean log σ(real − E[fake]) + mean log(1 − σ(fake − E[real]))]`,
/// where `E` is the batch mean.
///
/// The generator role evaluates this as written. The discriminator role
/// evaluates it with `real` and `fake` exchanged, so the critic is trained to
/// rank generated images above real ones and the generator to reverse that
/// ranking.
pub fn relativistic_loss(tape: &mut Tape, real: Var, fake: Var, role: Role) -> Result<Var> {
    non_empty(tape, "relativistic_loss", real)?;
    non_empty(tape, "relativistic_loss", fake)?;
    let (first, second) = match role {
        Role::Generator => (real, fake),
        Role::Discriminator => (fake, real),
    };
    let mean_first = tape.mean_all(first)?;
    let mean_second = tape.mean_all(second)?;
    let first_rel = tape.sub(first, mean_second)?;
    let second_rel = tape.sub(second, mean_first)?;
    let a = mean_log_sigmoid(tape, first_rel, false)?;
    let b = mean_log_sigmoid(tape, second_rel, true)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0))
}

/// Dispatches on the adversarial variant.
pub fn adversarial_loss(
    tape: &mut Tape,
    kind: AdversarialKind,
    role: Role,
    real: Var,
    fake: Var,
) -> Result<Var> {
    match kind {
        AdversarialKind::Relativistic => relativistic_loss(tape, real, fake, role),
        AdversarialKind::Standard => standard_adv_loss(tape, role, Some(real), fake),
    }
}

fn finite(parts: &[f32]) -> Result<()> {
    if parts.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(
            "combined loss",
            format!("non-finite term in {parts:?}"),
        ))
    }
}

/// `perceptual + β·adversarial`.
pub fn combined_bgan_loss(perceptual: f32, rbl: f32, weights: LossWeights) -> Result<LossReport> {
    finite(&[perceptual, rbl])?;
    Ok(LossReport {
        stage: StageTag::Bgan,
        adversarial_kind: AdversarialKind::Relativistic,
        perceptual,
        content: 0.0,
        adversarial: rbl,
        total: perceptual + weights.beta * rbl,
    })
}

/// `perceptual + α·content + β·adversarial`.
pub fn combined_dbgan_loss(
    perceptual: f32,
    content: f32,
    rdbl: f32,
    weights: LossWeights,
) -> Result<LossReport> {
    finite(&[perceptual, content, rdbl])?;
    Ok(LossReport {
        stage: StageTag::DbganG,
        adversarial_kind: AdversarialKind::Relativistic,
        perceptual,
        content,
        adversarial: rdbl,
        total: perceptual + weights.alpha * content + weights.beta * rdbl,
    })
}

impl LossReport {
    pub fn discriminator(value: f32, kind: AdversarialKind) -> Self {
        LossReport {
            stage: StageTag::DUpdate,
            adversarial_kind: kind,
            perceptual: 0.0,
            content: 0.0,
            adversarial: value,
            total: value,
        }
    }

    pub fn with_kind(mut self, kind: AdversarialKind) -> Self {
        self.adversarial_kind = kind;
        self
    }

    /// The weighted sum the report claims to hold.
    pub fn recompute_total(&self, weights: LossWeights) -> f32 {
        match self.stage {
            StageTag::Bgan => self.perceptual + weights.beta * self.adversarial,
            StageTag::DbganG => {
                self.perceptual + weights.alpha * self.content + weights.beta * self.adversarial
            }
            StageTag::DUpdate => self.adversarial,
        }
    }
}
