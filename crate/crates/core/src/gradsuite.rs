//! Finite-difference checks over every differentiable operation and each
//! composite training loss. Shared by the `gradcheck` subcommand and tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    adversarial_loss, content_loss, perceptual_loss, relativistic_loss, standard_adv_loss,
    AdversarialKind, ContentMode, FeatureExtractor, LossWeights, Role,
};
use crate::models::{
    bgan_generator_forward, dbgan_generator_forward, discriminator_forward, init_params_with_std,
    run_bgan, run_dbgan, NetworkKind, NetworkSpec, ParamStore,
};
use crate::numerics::{
    finite_diff_check_with, weighted_sum, KinkPolicy, MeanOver, Padding, Shape, Tape, Tensor, Var,
};

pub const PRIMITIVE_TOL: f64 = 1e-3;
pub const COMPOSITE_TOL: f64 = 1e-2;
pub const DEFAULT_INSTANCES: usize = 20;
/// Wide enough that f32 round-off in the loss value stays small next to the
/// measured difference; coordinates straddling a kink are handled by each
/// case's kink policy.
pub const EPS: f32 = 1e-2;
/// Inputs to kinked functions stay this far from the kink.
const KINK_MARGIN: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Primitive,
    Composite,
}

impl CaseKind {
    pub fn tolerance(&self) -> f64 {
        match self {
            CaseKind::Primitive => PRIMITIVE_TOL,
            CaseKind::Composite => COMPOSITE_TOL,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub tolerance: f64,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Probe = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    kind: CaseKind,
    eps: f32,
    kinks: KinkPolicy,
    /// Builds one random instance: the point to check and the scalar function.
    build: fn(&mut ChaCha8Rng, u64) -> (Tensor, Probe),
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values in `[-1, 1]` pushed at least `KINK_MARGIN` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < KINK_MARGIN {
            *v = if *v < 0.0 { -KINK_MARGIN } else { KINK_MARGIN } * 2.0;
        }
    }
    t
}

fn small() -> Shape {
    Shape::new(2, 2, 3, 3)
}

fn unary(op: fn(&mut Tape, Var) -> Result<Var>, seed: u64) -> Probe {
    Box::new(move |t, x| {
        let y = op(t, x)?;
        weighted_sum(t, y, seed)
    })
}

fn binary_with(c: Tensor, op: fn(&mut Tape, Var, Var) -> Result<Var>, seed: u64) -> Probe {
    Box::new(move |t, x| {
        let cv = t.constant(c.clone());
        let y = op(t, x, cv)?;
        weighted_sum(t, y, seed)
    })
}

fn conv_probe(w: Tensor, b: Tensor, stride: usize, padding: Padding, seed: u64) -> Probe {
    Box::new(move |t, x| {
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let y = t.conv2d(x, wv, Some(bv), stride, padding)?;
        weighted_sum(t, y, seed)
    })
}

/// Desk networks trimmed to one residual block of 4 channels so the
/// per-coordinate probes stay cheap and cross few ReLU kinks.
fn desk(kind: NetworkKind) -> NetworkSpec {
    let mut spec = NetworkSpec::desk(kind);
    if kind != NetworkKind::Discriminator {
        spec.num_resblocks = 1;
        spec.channels = 4;
    }
    spec
}

/// Network weights large enough that activations do not vanish.
fn net(kind: NetworkKind, seed: u64) -> ParamStore {
    init_params_with_std(&desk(kind), seed, 0.15)
}

/// Generator weights whose sigmoid output is mostly unsaturated at the probe
/// point; a saturated output flattens the gradient below f32 round-off.
fn live_generator(
    kind: NetworkKind,
    seed: u64,
    output: impl Fn(&ParamStore) -> Result<Tensor>,
) -> ParamStore {
    let mut g = net(kind, seed);
    for k in 1..=16u64 {
        let Ok(out) = output(&g) else { break };
        let saturated = out
            .data()
            .iter()
            .filter(|&&v| !(0.02..=0.98).contains(&v))
            .count();
        if saturated * 10 <= out.numel() {
            break;
        }
        g = net(kind, seed.wrapping_add(k.wrapping_mul(0x9E37_79B9)));
    }
    g
}

fn logits(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    uniform(rng, Shape::new(n, 1, 1, 1), -2.0, 2.0)
}

fn cases() -> Vec<Case> {
    use CaseKind::*;
    vec![
        Case {
            name: "add",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let c = uniform(r, small(), -1.0, 1.0);
                (
                    uniform(r, small(), -1.0, 1.0),
                    binary_with(c, |t, a, b| t.add(a, b), s),
                )
            },
        },
        Case {
            name: "sub",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let c = uniform(r, small(), -1.0, 1.0);
                (
                    uniform(r, small(), -1.0, 1.0),
                    binary_with(c, |t, a, b| t.sub(b, a), s),
                )
            },
        },
        Case {
            name: "mul",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let c = uniform(r, small(), -1.0, 1.0);
                (
                    uniform(r, small(), -1.0, 1.0),
                    binary_with(c, |t, a, b| t.mul(a, b), s),
                )
            },
        },
        Case {
            name: "mul_scalar_broadcast",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                // The scalar's gradient sums over every element; a signed
                // probe can cancel it down to round-off, so keep it positive.
                let c = uniform(r, small(), 0.5, 1.5);
                let x = uniform(r, Shape::SCALAR, 0.5, 1.5);
                (
                    x,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let cv = t.constant(c.clone());
                        let y = t.mul(cv, x)?;
                        t.mean_all(y)
                    }) as Probe,
                )
            },
        },
        Case {
            name: "square",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), -1.0, 1.0),
                    unary(|t, x| Ok(t.square(x)), s),
                )
            },
        },
        Case {
            name: "affine",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), -1.0, 1.0),
                    unary(|t, x| Ok(t.affine(x, -0.7, 0.3)), s),
                )
            },
        },
        Case {
            name: "pow",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), 0.3, 1.0),
                    unary(|t, x| t.pow_scalar(x, 2.2), s),
                )
            },
        },
        Case {
            name: "pow_inverse",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), 0.3, 1.0),
                    unary(|t, x| t.pow_scalar(x, 1.0 / 2.2), s),
                )
            },
        },
        Case {
            name: "relu",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| (away_from_zero(r, small()), unary(|t, x| Ok(t.relu(x)), s)),
        },
        Case {
            name: "sigmoid",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), -4.0, 4.0),
                    unary(|t, x| Ok(t.sigmoid(x)), s),
                )
            },
        },
        Case {
            name: "abs",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| (away_from_zero(r, small()), unary(|t, x| Ok(t.abs(x)), s)),
        },
        Case {
            name: "log",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), 0.3, 1.0),
                    unary(|t, x| Ok(t.log_clamped(x, 1e-12)), s),
                )
            },
        },
        Case {
            name: "mean_all",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                (
                    uniform(r, small(), -1.0, 1.0),
                    Box::new(|t, x| {
                        let m = t.mean_all(x)?;
                        let sq = t.square(m);
                        t.add(sq, m)
                    }),
                )
            },
        },
        Case {
            name: "mean_batch",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), -1.0, 1.0),
                    unary(|t, x| t.reduce_mean(x, MeanOver::Batch), s),
                )
            },
        },
        Case {
            name: "mean_spatial",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                (
                    uniform(r, small(), -1.0, 1.0),
                    unary(|t, x| t.mean_spatial(x), s),
                )
            },
        },
        Case {
            name: "concat_first",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let c = uniform(r, Shape::new(2, 4, 3, 3), -1.0, 1.0);
                (
                    uniform(r, small(), -1.0, 1.0),
                    binary_with(c, |t, a, b| t.concat_channels(a, b), s),
                )
            },
        },
        Case {
            name: "concat_second",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let c = uniform(r, Shape::new(2, 4, 3, 3), -1.0, 1.0);
                (
                    uniform(r, small(), -1.0, 1.0),
                    binary_with(c, |t, a, b| t.concat_channels(b, a), s),
                )
            },
        },
        Case {
            name: "conv2d_input_reflect",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let w = uniform(r, Shape::new(3, 2, 3, 3), -0.5, 0.5);
                let b = uniform(r, Shape::new(1, 3, 1, 1), -0.5, 0.5);
                (
                    uniform(r, Shape::new(1, 2, 4, 4), -1.0, 1.0),
                    conv_probe(w, b, 1, Padding::ReflectSame, s),
                )
            },
        },
        Case {
            name: "conv2d_input_zero_stride2",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let w = uniform(r, Shape::new(3, 2, 3, 3), -0.5, 0.5);
                let b = uniform(r, Shape::new(1, 3, 1, 1), -0.5, 0.5);
                (
                    uniform(r, Shape::new(2, 2, 5, 5), -1.0, 1.0),
                    conv_probe(w, b, 2, Padding::ZeroSame, s),
                )
            },
        },
        Case {
            name: "conv2d_weight",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let x = uniform(r, Shape::new(2, 2, 4, 4), -1.0, 1.0);
                (
                    uniform(r, Shape::new(3, 2, 3, 3), -0.5, 0.5),
                    Box::new(move |t, w| {
                        let xv = t.constant(x.clone());
                        let y = t.conv2d(xv, w, None, 1, Padding::ReflectSame)?;
                        weighted_sum(t, y, s)
                    }),
                )
            },
        },
        Case {
            name: "conv2d_bias",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let x = uniform(r, Shape::new(2, 2, 4, 4), -1.0, 1.0);
                let w = uniform(r, Shape::new(3, 2, 3, 3), -0.5, 0.5);
                (
                    uniform(r, Shape::new(1, 3, 1, 1), -0.5, 0.5),
                    Box::new(move |t, b| {
                        let xv = t.constant(x.clone());
                        let wv = t.constant(w.clone());
                        let y = t.conv2d(xv, wv, Some(b), 1, Padding::ReflectSame)?;
                        weighted_sum(t, y, s)
                    }),
                )
            },
        },
        Case {
            name: "mean_relu_conv2d",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                // Redraw until no pre-activation sits near the ReLU kink.
                loop {
                    let x = uniform(r, Shape::new(1, 2, 4, 4), -1.0, 1.0);
                    let w = uniform(r, Shape::new(3, 2, 3, 3), -0.5, 0.5);
                    let mut t = Tape::new();
                    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                    let pre = t
                        .conv2d(xv, wv, None, 1, Padding::ReflectSame)
                        .expect("valid conv");
                    if t.value(pre).data().iter().all(|v| v.abs() > KINK_MARGIN) {
                        let probe: Probe = Box::new(move |t, x| {
                            let wv = t.constant(w.clone());
                            let y = t.conv2d(x, wv, None, 1, Padding::ReflectSame)?;
                            let a = t.relu(y);
                            t.mean_all(a)
                        });
                        return (x, probe);
                    }
                }
            },
        },
        Case {
            name: "content_mse",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                let target = uniform(r, small(), 0.0, 1.0);
                (
                    uniform(r, small(), 0.0, 1.0),
                    Box::new(move |t, g| {
                        let tv = t.constant(target.clone());
                        content_loss(t, g, tv, ContentMode::Mse)
                    }),
                )
            },
        },
        Case {
            name: "content_l1",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                let target = uniform(r, small(), 0.0, 1.0);
                let offset = away_from_zero(r, small());
                // |offset| ≥ 2·margin keeps g − target clear of the kink.
                let mut g = target.clone();
                for (v, o) in g.data_mut().iter_mut().zip(offset.data()) {
                    *v += o;
                }
                (
                    g,
                    Box::new(move |t, g| {
                        let tv = t.constant(target.clone());
                        content_loss(t, g, tv, ContentMode::L1)
                    }),
                )
            },
        },
        Case {
            name: "relativistic_generator",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                let real = logits(r, 4);
                (
                    logits(r, 4),
                    Box::new(move |t, f| {
                        let rv = t.constant(real.clone());
                        relativistic_loss(t, rv, f, Role::Generator)
                    }),
                )
            },
        },
        Case {
            name: "relativistic_discriminator",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                let fake = logits(r, 4);
                (
                    logits(r, 4),
                    Box::new(move |t, real| {
                        let fv = t.constant(fake.clone());
                        relativistic_loss(t, real, fv, Role::Discriminator)
                    }),
                )
            },
        },
        Case {
            name: "standard_adversarial_generator",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                (
                    logits(r, 4),
                    Box::new(|t, f| standard_adv_loss(t, Role::Generator, None, f)),
                )
            },
        },
        Case {
            name: "standard_adversarial_discriminator",
            kind: Primitive,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, _| {
                let real = logits(r, 4);
                (
                    logits(r, 4),
                    Box::new(move |t, f| {
                        let rv = t.constant(real.clone());
                        standard_adv_loss(t, Role::Discriminator, Some(rv), f)
                    }),
                )
            },
        },
        Case {
            name: "perceptual",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let fx = FeatureExtractor::new(s);
                let reference = uniform(r, Shape::new(1, 3, 8, 8), 0.0, 1.0);
                (
                    uniform(r, Shape::new(1, 3, 8, 8), 0.0, 1.0),
                    Box::new(move |t, g| {
                        let rv = t.constant(reference.clone());
                        perceptual_loss(t, g, rv, &fx)
                    }),
                )
            },
        },
        Case {
            name: "discriminator_logits",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::Skip,
            build: |r, s| {
                let d = net(NetworkKind::Discriminator, s);
                (
                    uniform(r, Shape::new(2, 3, 8, 8), 0.0, 1.0),
                    Box::new(move |t, x| {
                        let b = d.bind(t, false);
                        let l = discriminator_forward(t, x, &b, &d.spec)?;
                        weighted_sum(t, l, 1)
                    }),
                )
            },
        },
        Case {
            name: "loss_bgan",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::OneSided,
            build: |r, s| {
                let parts = GanParts::new(r, s, 2);
                (
                    parts.generated(r),
                    Box::new(move |t, g| parts.bgan_loss(t, g)),
                )
            },
        },
        Case {
            name: "loss_dbgan",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::OneSided,
            build: |r, s| {
                let parts = GanParts::new(r, s, 2);
                (
                    parts.generated(r),
                    Box::new(move |t, g| parts.dbgan_loss(t, g, AdversarialKind::Relativistic)),
                )
            },
        },
        Case {
            name: "loss_dbgan_minus",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::OneSided,
            build: |r, s| {
                let parts = GanParts::new(r, s, 2);
                (
                    parts.generated(r),
                    Box::new(move |t, g| parts.dbgan_loss(t, g, AdversarialKind::Standard)),
                )
            },
        },
        Case {
            name: "bgan_network_loss",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::OneSided,
            build: |r, s| {
                let parts = GanParts::new(r, s, 1);
                let noise_channels = desk(NetworkKind::BganGenerator).noise_channels;
                let noise = uniform(r, Shape::new(1, noise_channels, 8, 8), -1.0, 1.0);
                let g = live_generator(NetworkKind::BganGenerator, s ^ 0xb, |g| {
                    run_bgan(g, &parts.sharp, &noise)
                });
                (
                    parts.sharp.clone(),
                    Box::new(move |t, sharp| {
                        let b = g.bind(t, false);
                        let n = t.constant(noise.clone());
                        let out = bgan_generator_forward(t, sharp, n, &b, &g.spec)?;
                        parts.bgan_loss(t, out)
                    }),
                )
            },
        },
        Case {
            name: "dbgan_network_loss",
            kind: Composite,
            eps: EPS,
            kinks: KinkPolicy::OneSided,
            build: |r, s| {
                let parts = GanParts::new(r, s, 1);
                let x = uniform(r, Shape::new(1, 3, 8, 8), 0.0, 1.0);
                let g = live_generator(NetworkKind::DbganGenerator, s ^ 0xd, |g| run_dbgan(g, &x));
                (
                    x,
                    Box::new(move |t, blurry| {
                        let b = g.bind(t, false);
                        let out = dbgan_generator_forward(t, blurry, &b, &g.spec)?;
                        parts.dbgan_loss(t, out, AdversarialKind::Relativistic)
                    }),
                )
            },
        },
    ]
}

/// Frozen discriminator, feature extractor and reference images for the
/// full training objectives evaluated as functions of the generator output.
struct GanParts {
    d: ParamStore,
    fx: FeatureExtractor,
    sharp: Tensor,
    real: Tensor,
    weights: LossWeights,
}

impl GanParts {
    fn new(r: &mut ChaCha8Rng, seed: u64, batch: usize) -> Self {
        let shape = Shape::new(batch, 3, 8, 8);
        GanParts {
            d: net(NetworkKind::Discriminator, seed),
            fx: FeatureExtractor::new(seed),
            sharp: uniform(r, shape, 0.0, 1.0),
            real: uniform(r, shape, 0.0, 1.0),
            // Larger than the defaults so the adversarial branch is visible
            // in the checked gradient.
            weights: LossWeights {
                alpha: 0.5,
                beta: 0.5,
            },
        }
    }

    fn generated(&self, r: &mut ChaCha8Rng) -> Tensor {
        uniform(r, self.sharp.shape(), 0.0, 1.0)
    }

    fn logits(&self, t: &mut Tape, fake: Var) -> Result<(Var, Var)> {
        let b = self.d.bind(t, false);
        let rv = t.constant(self.real.clone());
        let cr = discriminator_forward(t, rv, &b, &self.d.spec)?;
        let cf = discriminator_forward(t, fake, &b, &self.d.spec)?;
        Ok((cr, cf))
    }

    fn bgan_loss(&self, t: &mut Tape, fake: Var) -> Result<Var> {
        let (cr, cf) = self.logits(t, fake)?;
        let adv = relativistic_loss(t, cr, cf, Role::Generator)?;
        let sv = t.constant(self.sharp.clone());
        let p = perceptual_loss(t, fake, sv, &self.fx)?;
        let wa = t.scale(adv, self.weights.beta);
        t.add(p, wa)
    }

    fn dbgan_loss(&self, t: &mut Tape, fake: Var, kind: AdversarialKind) -> Result<Var> {
        let (cr, cf) = self.logits(t, fake)?;
        let adv = adversarial_loss(t, kind, Role::Generator, cr, cf)?;
        let sv = t.constant(self.sharp.clone());
        let p = perceptual_loss(t, fake, sv, &self.fx)?;
        let c = content_loss(t, fake, sv, ContentMode::Mse)?;
        let wc = t.scale(c, self.weights.alpha);
        let wa = t.scale(adv, self.weights.beta);
        let s = t.add(p, wc)?;
        t.add(s, wa)
    }
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

pub fn case_names_of(kind: CaseKind) -> Vec<&'static str> {
    cases()
        .iter()
        .filter(|c| c.kind == kind)
        .map(|c| c.name)
        .collect()
}

/// Runs every case (or only the one named `filter`) on `instances`
/// random instances each.
pub fn run_suite(instances: usize, seed: u64, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| f != case.name) {
            continue;
        }
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..instances {
            let inst_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
            let probe_seed = rng.gen();
            let (x, f) = (case.build)(&mut rng, probe_seed);
            let report = finite_diff_check_with(f, &x, case.eps, case.kinks)?;
            worst = worst.max(report.rel_err);
            checked += report.checked;
            skipped += report.skipped;
        }
        let tolerance = case.kind.tolerance();
        out.push(CaseResult {
            name: case.name,
            kind: case.kind,
            tolerance,
            instances,
            worst_rel_err: worst,
            checked,
            skipped,
            // Most coordinates must actually be compared.
            passed: worst <= tolerance && checked >= skipped,
        });
    }
    Ok(out)
}

/// Suite results plus wall-clock seconds.
pub fn run_timed(
    instances: usize,
    seed: u64,
    filter: Option<&str>,
) -> Result<(Vec<CaseResult>, f64)> {
    let start = Instant::now();
    let r = run_suite(instances, seed, filter)?;
    Ok((r, start.elapsed().as_secs_f64()))
}
