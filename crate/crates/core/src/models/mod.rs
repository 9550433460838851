//! Blur generator, deblur generator and discriminator.
//!
//! All three are plain conv stacks built on a [`Tape`]. Generators keep the
//! spatial size (3×3 convs, same padding, no resampling); the discriminator
//! halves it at every stage and reduces to one logit per image.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur_synth::NoiseMap;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Padding, Shape, Tape, Tensor, Var};

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};

/// Weight init std for every trained network.
pub const INIT_STD: f32 = 0.01;
const KERNEL: usize = 3;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    BganGenerator,
    DbganGenerator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub num_resblocks: usize,
    pub channels: usize,
    pub convs_per_resblock: usize,
    /// Noise-map channels concatenated to the input (blur generator only).
    pub noise_channels: usize,
    /// Stride-2 stages (discriminator only).
    pub disc_depth: usize,
    pub scale_preset: ScalePreset,
    #[serde(default)]
    pub padding: Padding,
}

impl NetworkSpec {
    /// Full-size topology: 9 (blur) / 16 (deblur) residual blocks of five
    /// 64-channel convs; 5-stage discriminator.
    pub fn paper(kind: NetworkKind) -> Self {
        let base = NetworkSpec {
            kind,
            num_resblocks: 0,
            channels: 64,
            convs_per_resblock: 5,
            noise_channels: 0,
            disc_depth: 0,
            scale_preset: ScalePreset::Paper,
            padding: Padding::ReflectSame,
        };
        match kind {
            NetworkKind::BganGenerator => NetworkSpec {
                num_resblocks: 9,
                noise_channels: 4,
                ..base
            },
            NetworkKind::DbganGenerator => NetworkSpec {
                num_resblocks: 16,
                ..base
            },
            NetworkKind::Discriminator => NetworkSpec {
                convs_per_resblock: 0,
                disc_depth: 5,
                ..base
            },
        }
    }

    /// Same topology with 4 residual blocks and 16 channels; 3-stage discriminator.
    pub fn desk(kind: NetworkKind) -> Self {
        let paper = Self::paper(kind);
        match kind {
            NetworkKind::Discriminator => NetworkSpec {
                channels: 16,
                disc_depth: 3,
                scale_preset: ScalePreset::Desk,
                ..paper
            },
            _ => NetworkSpec {
                num_resblocks: 4,
                channels: 16,
                scale_preset: ScalePreset::Desk,
                ..paper
            },
        }
    }

    pub fn preset(kind: NetworkKind, preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Paper => Self::paper(kind),
            ScalePreset::Desk => Self::desk(kind),
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn input_channels(&self) -> usize {
        match self.kind {
            NetworkKind::BganGenerator => IMAGE_CHANNELS + self.noise_channels,
            _ => IMAGE_CHANNELS,
        }
    }

    /// Output channels of discriminator stage `i`.
    fn stage_channels(&self, i: usize) -> usize {
        self.channels << i
    }

    /// Every parameter, in the order init draws them.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        let conv = |name: String, cout: usize, cin: usize, k: usize| {
            [
                (format!("{name}.weight"), Shape::new(cout, cin, k, k)),
                (format!("{name}.bias"), Shape::new(1, cout, 1, 1)),
            ]
        };
        let mut out = Vec::new();
        match self.kind {
            NetworkKind::BganGenerator | NetworkKind::DbganGenerator => {
                let c = self.channels;
                out.extend(conv("head".into(), c, self.input_channels(), KERNEL));
                for r in 0..self.num_resblocks {
                    for j in 0..self.convs_per_resblock {
                        out.extend(conv(resblock_conv(r, j), c, c, KERNEL));
                    }
                }
                out.extend(conv("tail0".into(), c, c, KERNEL));
                out.extend(conv("tail1".into(), IMAGE_CHANNELS, c, KERNEL));
            }
            NetworkKind::Discriminator => {
                let mut cin = IMAGE_CHANNELS;
                for i in 0..self.disc_depth {
                    let cout = self.stage_channels(i);
                    out.extend(conv(format!("stage{i}"), cout, cin, KERNEL));
                    cin = cout;
                }
                out.extend(conv("fc".into(), 1, cin, 1));
            }
        }
        out
    }
}

fn resblock_conv(block: usize, conv: usize) -> String {
    format!("res{block:02}.conv{conv}")
}

/// Learnable weights of one network, keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub spec: NetworkSpec,
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn from_params(
        spec: NetworkSpec,
        seed: u64,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(
                "param store",
                format!(
                    "spec expects {} tensors, got {}",
                    layout.len(),
                    params.len()
                ),
            ));
        }
        for (name, shape) in layout {
            match params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "param store",
                        left: shape,
                        right: t.shape(),
                    })
                }
                None => return Err(Error::invalid("param store", format!("missing `{name}`"))),
            }
        }
        Ok(ParamStore { spec, seed, params })
    }

    pub fn spec_hash(&self) -> String {
        self.spec.hash()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Records every parameter as a tape leaf; `trainable` decides whether
    /// gradients are kept for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let t = t.clone();
                let v = if trainable {
                    tape.leaf(t.with_grad())
                } else {
                    tape.constant(t)
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("bound params", format!("no parameter `{name}`")))
    }

    /// Gradients from the last backward pass, keyed like the store.
    pub fn grads(&self, tape: &Tape) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                tape.grad(v)
                    .map(|g| (name.clone(), g.to_vec()))
                    .ok_or_else(|| Error::MissingGradient(name.clone()))
            })
            .collect()
    }

    fn conv(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: &str,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let w = self.var(&format!("{layer}.weight"))?;
        let b = self.var(&format!("{layer}.bias"))?;
        tape.conv2d(x, w, Some(b), stride, padding)
    }
}

/// Weights ~ N(0, 0.01²), biases zero; deterministic per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamStore {
    init_params_with_std(spec, seed, INIT_STD)
}

pub fn init_params_with_std(spec: &NetworkSpec, seed: u64, std: f32) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, std, &mut rng)
            };
            (name, t)
        })
        .collect();
    ParamStore {
        spec: *spec,
        seed,
        params,
    }
}

fn expect_kind(params: &ParamStore, kind: NetworkKind) -> Result<()> {
    if params.spec.kind != kind {
        return Err(Error::invalid(
            "forward",
            format!("expected {kind:?} parameters, got {:?}", params.spec.kind),
        ));
    }
    Ok(())
}

/// `x + F(x)`: `convs_per_resblock` convs with a ReLU between consecutive convs.
pub fn resblock_forward(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    spec: &NetworkSpec,
    block: usize,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.c != spec.channels {
        return Err(Error::invalid(
            "resblock",
            format!(
                "input has {} channels, block expects {}",
                s.c, spec.channels
            ),
        ));
    }
    let mut h = x;
    for j in 0..spec.convs_per_resblock {
        h = bound.conv(tape, h, &resblock_conv(block, j), 1, spec.padding)?;
        if j + 1 < spec.convs_per_resblock {
            h = tape.relu(h);
        }
    }
    tape.add(x, h)
}

/// head → residual chain → tail0 → ReLU → tail1 → sigmoid.
fn generator_body(
    tape: &mut Tape,
    input: Var,
    bound: &Bound,
    spec: &NetworkSpec,
    long_skip: bool,
) -> Result<Var> {
    let head = bound.conv(tape, input, "head", 1, spec.padding)?;
    let mut h = head;
    for r in 0..spec.num_resblocks {
        h = resblock_forward(tape, h, bound, spec, r)?;
    }
    if long_skip {
        h = tape.add(h, head)?;
    }
    let t0 = bound.conv(tape, h, "tail0", 1, spec.padding)?;
    let t0 = tape.relu(t0);
    let t1 = bound.conv(tape, t0, "tail1", 1, spec.padding)?;
    Ok(tape.sigmoid(t1))
}

/// Blurry image of the same size as `sharp`, conditioned on a per-item noise map.
pub fn bgan_generator_forward(
    tape: &mut Tape,
    sharp: Var,
    noise: Var,
    bound: &Bound,
    spec: &NetworkSpec,
) -> Result<Var> {
    let (ss, ns) = (tape.shape(sharp), tape.shape(noise));
    if ss.c != IMAGE_CHANNELS {
        return Err(Error::invalid(
            "bgan generator",
            format!("expected 3-channel input, got {ss}"),
        ));
    }
    if (ns.n, ns.h, ns.w) != (ss.n, ss.h, ss.w) || ns.c != spec.noise_channels {
        return Err(Error::ShapeMismatch {
            op: "bgan generator (noise map)",
            left: ss,
            right: ns,
        });
    }
    let input = tape.concat_channels(sharp, noise)?;
    generator_body(tape, input, bound, spec, false)
}

/// Restored sharp image; residual chain plus a long skip around it.
pub fn dbgan_generator_forward(
    tape: &mut Tape,
    blurry: Var,
    bound: &Bound,
    spec: &NetworkSpec,
) -> Result<Var> {
    let s = tape.shape(blurry);
    if s.c != IMAGE_CHANNELS {
        return Err(Error::invalid(
            "dbgan generator",
            format!("expected 3-channel input, got {s}"),
        ));
    }
    generator_body(tape, blurry, bound, spec, true)
}

/// Per-image logit C(·), shaped N×1×1×1.
pub fn discriminator_forward(
    tape: &mut Tape,
    image: Var,
    bound: &Bound,
    spec: &NetworkSpec,
) -> Result<Var> {
    let s = tape.shape(image);
    if s.c != IMAGE_CHANNELS {
        return Err(Error::invalid(
            "discriminator",
            format!("expected 3-channel input, got {s}"),
        ));
    }
    let min = 1usize << spec.disc_depth;
    if s.h < min || s.w < min {
        return Err(Error::invalid(
            "discriminator",
            format!(
                "{}x{} input too small for {} stride-2 stages",
                s.h, s.w, spec.disc_depth
            ),
        ));
    }
    let mut h = image;
    for i in 0..spec.disc_depth {
        h = bound.conv(tape, h, &format!("stage{i}"), 2, spec.padding)?;
        h = tape.relu(h);
    }
    let pooled = tape.mean_spatial(h)?;
    bound.conv(tape, pooled, "fc", 1, spec.padding)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub logit: Vec<f32>,
    pub probability: Vec<f32>,
}

impl DiscriminatorOutput {
    pub fn from_logits(logit: Vec<f32>) -> Self {
        let probability = logit.iter().map(|&l| sigmoid(l)).collect();
        DiscriminatorOutput { logit, probability }
    }
}

/// Stacks per-item noise maps into N×C×H×W.
pub fn stack_noise(maps: &[NoiseMap]) -> Result<Tensor> {
    let items: Vec<Tensor> = maps.iter().map(|m| m.values.clone()).collect();
    Tensor::stack(&items)
}

// Tape-free conveniences for inference.

pub fn run_bgan(params: &ParamStore, sharp: &Tensor, noise: &Tensor) -> Result<Tensor> {
    expect_kind(params, NetworkKind::BganGenerator)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(sharp.clone());
    let n = tape.constant(noise.clone());
    let y = bgan_generator_forward(&mut tape, x, n, &bound, &params.spec)?;
    Ok(tape.value(y).clone())
}

pub fn run_dbgan(params: &ParamStore, blurry: &Tensor) -> Result<Tensor> {
    expect_kind(params, NetworkKind::DbganGenerator)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(blurry.clone());
    let y = dbgan_generator_forward(&mut tape, x, &bound, &params.spec)?;
    Ok(tape.value(y).clone())
}

pub fn run_discriminator(params: &ParamStore, image: &Tensor) -> Result<DiscriminatorOutput> {
    expect_kind(params, NetworkKind::Discriminator)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let y = discriminator_forward(&mut tape, x, &bound, &params.spec)?;
    Ok(DiscriminatorOutput::from_logits(
        tape.value(y).data().to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let b = NetworkSpec::paper(NetworkKind::BganGenerator);
        assert_eq!(
            (
                b.num_resblocks,
                b.channels,
                b.convs_per_resblock,
                b.noise_channels
            ),
            (9, 64, 5, 4)
        );
        let d = NetworkSpec::paper(NetworkKind::DbganGenerator);
        assert_eq!((d.num_resblocks, d.channels, d.noise_channels), (16, 64, 0));
        let desk = NetworkSpec::desk(NetworkKind::BganGenerator);
        assert_eq!(
            (desk.num_resblocks, desk.channels, desk.convs_per_resblock),
            (4, 16, 5)
        );
        assert_ne!(b.hash(), desk.hash());
        assert_eq!(b.hash().len(), 16);
    }

    #[test]
    fn layout_counts() {
        let spec = NetworkSpec::desk(NetworkKind::DbganGenerator);
        // head + 4·5 block convs + 2 tail convs, weight and bias each
        assert_eq!(spec.layout().len(), 2 * (1 + 20 + 2));
        let p = init_params(&spec, 0);
        assert_eq!(
            p.get("head.weight").unwrap().shape(),
            Shape::new(16, 3, 3, 3)
        );
        let bg = init_params(&NetworkSpec::desk(NetworkKind::BganGenerator), 0);
        assert_eq!(
            bg.get("head.weight").unwrap().shape(),
            Shape::new(16, 7, 3, 3)
        );
    }

    #[test]
    fn init_is_seeded() {
        let spec = NetworkSpec::desk(NetworkKind::Discriminator);
        assert_eq!(init_params(&spec, 3), init_params(&spec, 3));
        assert_ne!(init_params(&spec, 3), init_params(&spec, 4));
        assert!(init_params(&spec, 3)
            .get("fc.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn discriminator_rejects_tiny_inputs() {
        let spec = NetworkSpec::desk(NetworkKind::Discriminator);
        let p = init_params(&spec, 1);
        assert!(run_discriminator(&p, &Tensor::zeros(Shape::new(1, 3, 4, 4))).is_err());
        assert!(run_discriminator(&p, &Tensor::zeros(Shape::new(1, 3, 8, 8))).is_ok());
    }

    #[test]
    fn wrong_kind_or_channels_rejected() {
        let p = init_params(&NetworkSpec::desk(NetworkKind::DbganGenerator), 1);
        assert!(run_dbgan(&p, &Tensor::zeros(Shape::new(1, 4, 16, 16))).is_err());
        assert!(run_discriminator(&p, &Tensor::zeros(Shape::new(1, 3, 16, 16))).is_err());
    }
}
