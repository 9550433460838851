//! Blur synthesis: γ camera response, multi-frame averaging, kernel blur with
//! additive noise, line-segment kernels, and the spatially constant noise map
//! that conditions the blur generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::numerics::{Shape, Tensor};

/// Tolerance for values slightly outside [0, 1].
pub const RANGE_TOL: f32 = 1e-6;
pub const DEFAULT_GAMMA: f32 = 2.2;
pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_NOISE_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    gamma: f32,
}

impl CrfParams {
    pub fn new(gamma: f32) -> Result<Self> {
        if !(1.0..=4.0).contains(&gamma) {
            return Err(Error::OutOfRange {
                op: "crf gamma",
                value: gamma,
                lo: 1.0,
                hi: 4.0,
            });
        }
        Ok(CrfParams { gamma })
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            gamma: DEFAULT_GAMMA,
        }
    }
}

fn check_unit_range(op: &'static str, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        if !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&v) || v.is_nan() {
            return Err(Error::OutOfRange {
                op,
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

fn map_pow(t: &Tensor, exponent: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64).powf(exponent) as f32)
        .collect();
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

/// Linear irradiance → observed intensity: `x^(1/γ)`.
pub fn apply_crf(linear: &Tensor, crf: CrfParams) -> Result<Tensor> {
    check_unit_range("apply_crf", linear)?;
    Ok(map_pow(linear, 1.0 / crf.gamma as f64))
}

/// Observed intensity → linear irradiance: `x^γ`.
pub fn invert_crf(observed: &Tensor, crf: CrfParams) -> Result<Tensor> {
    check_unit_range("invert_crf", observed)?;
    Ok(map_pow(observed, crf.gamma as f64))
}

/// Averages frames in linear space and maps the mean back through the CRF.
///
/// Per pixel, the linearized values are sorted before summation, so the result
/// is bit-identical under any permutation of `frames`.
pub fn average_blur(frames: &[Tensor], crf: CrfParams) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("average_blur", "no frames"))?;
    let shape = first.shape();
    let mut linear = Vec::with_capacity(frames.len());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "average_blur",
                left: shape,
                right: f.shape(),
            });
        }
        linear.push(invert_crf(f, crf)?);
    }
    let m = frames.len() as f64;
    let inv_gamma = 1.0 / crf.gamma as f64;
    let mut scratch = vec![0.0f32; frames.len()];
    let mut out = vec![0.0f32; shape.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        for (s, l) in scratch.iter_mut().zip(&linear) {
            *s = l.data()[i];
        }
        scratch.sort_by(f32::total_cmp);
        let mean = scratch.iter().map(|&v| v as f64).sum::<f64>() / m;
        *o = mean.clamp(0.0, 1.0).powf(inv_gamma) as f32;
    }
    Tensor::from_vec(shape, out)
}

/// Square point-spread function plus additive Gaussian noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernelSpec {
    size: usize,
    weights: Vec<f32>,
    pub noise_std: f32,
}

impl BlurKernelSpec {
    /// Validates non-negativity, odd size, and unit sum (within 1e-6).
    pub fn new(size: usize, weights: Vec<f32>, noise_std: f32) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::invalid(
                "blur kernel",
                format!(
                    "need an odd square kernel, got size {size} with {} weights",
                    weights.len()
                ),
            ));
        }
        if let Some(&w) = weights.iter().find(|&&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("blur kernel", format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().map(|&w| w as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "blur kernel",
                format!("weights sum to {sum}, not 1"),
            ));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::invalid("blur kernel", "noise_std must be >= 0"));
        }
        Ok(BlurKernelSpec {
            size,
            weights,
            noise_std,
        })
    }

    pub fn delta() -> Self {
        BlurKernelSpec {
            size: 1,
            weights: vec![1.0],
            noise_std: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_std: f32) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.size + col]
    }
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// `K ∗ image + N`, per channel with reflect padding, clamped to [0, 1].
///
/// Accumulation runs in f64 with the kernel renormalized to an exact unit sum,
/// so a constant image comes back unchanged when `noise_std == 0`.
pub fn kernel_blur(image: &Tensor, spec: &BlurKernelSpec, rng_seed: u64) -> Result<Tensor> {
    check_unit_range("kernel_blur", image)?;
    let spec = BlurKernelSpec::new(spec.size, spec.weights.clone(), spec.noise_std)?;
    let s = image.shape();
    let k = spec.size;
    let r = (k / 2) as isize;
    let total: f64 = spec.weights.iter().map(|&w| w as f64).sum();
    let weights: Vec<f64> = spec.weights.iter().map(|&w| w as f64 / total).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0f64, spec.noise_std as f64).expect("validated std"));

    let mut out = vec![0.0f32; s.numel()];
    for plane in 0..s.n * s.c {
        let src = &image.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out[plane * s.plane()..(plane + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, s.h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - r, s.w);
                        acc += weights[ky * k + kx] * src[sy * s.w + sx] as f64;
                    }
                }
                if let Some(n) = &noise {
                    acc += n.sample(&mut rng);
                }
                dst[y * s.w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Line-segment PSF of `length` taps at `angle_deg` (counter-clockwise, x right, y up).
///
/// One sample per unit step along the dominant axis, so 0° gives a horizontal
/// row, 90° a vertical column and 45° the anti-diagonal of the grid.
pub fn gen_linear_kernel(length: usize, angle_deg: f32) -> Result<BlurKernelSpec> {
    if length == 0 || length % 2 == 0 {
        return Err(Error::invalid(
            "gen_linear_kernel",
            format!("length must be odd and >= 1, got {length}"),
        ));
    }
    let theta = (angle_deg as f64).to_radians();
    let (dx, dy) = (theta.cos(), -theta.sin());
    let r = (length / 2) as i64;
    let mut acc = vec![0.0f64; length * length];
    for i in -r..=r {
        let (ox, oy) = if dx.abs() >= dy.abs() {
            (i as f64, i as f64 * dy / dx)
        } else {
            (i as f64 * dx / dy, i as f64)
        };
        let col = (ox.round() as i64 + r).clamp(0, 2 * r) as usize;
        let row = (oy.round() as i64 + r).clamp(0, 2 * r) as usize;
        acc[row * length + col] += 1.0;
    }
    let weights = acc.iter().map(|&c| (c / length as f64) as f32).collect();
    BlurKernelSpec::new(length, weights, 0.0)
}

/// A random vector repeated at every pixel, concatenated to the sharp input.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    /// 1×C×H×W.
    pub values: Tensor,
    pub source_vector: Vec<f32>,
    pub seed: u64,
}

impl NoiseMap {
    pub fn channels(&self) -> usize {
        self.source_vector.len()
    }

    pub fn shape(&self) -> Shape {
        self.values.shape()
    }
}

/// Draws `channels` standard-normal values from `seed` and tiles them over H×W.
pub fn make_noise_map(seed: u64, channels: usize, h: usize, w: usize) -> Result<NoiseMap> {
    if channels == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "make_noise_map",
            format!("zero dimension in {channels}x{h}x{w}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_vector: Vec<f32> = (0..channels)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut data = Vec::with_capacity(channels * h * w);
    for &v in &source_vector {
        data.extend(std::iter::repeat(v).take(h * w));
    }
    Ok(NoiseMap {
        values: Tensor::from_vec(Shape::new(1, channels, h, w), data)?,
        source_vector,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Directory pipelines behind `rblb blur`.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sequence: String,
    /// Frames averaged (1 for kernel mode).
    pub window: usize,
    pub gamma: f32,
    pub blurry: PathBuf,
    pub sharp: PathBuf,
}

/// Paired-data manifest; paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlurManifest {
    pub mode: String,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl BlurManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every (blurry, sharp) pair, resolving paths against `root`.
    pub fn load_pairs(&self, root: &Path) -> Result<Vec<(Tensor, Tensor)>> {
        self.pairs
            .iter()
            .map(|e| {
                Ok((
                    image_io::load_png(&root.join(&e.blurry))?,
                    image_io::load_png(&root.join(&e.sharp))?,
                ))
            })
            .collect()
    }
}

/// Sequences under `root`: `root` itself if it holds PNG frames, otherwise each
/// subdirectory that does, in name order.
pub fn find_sequences(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let direct = image_io::list_pngs(root)?;
    if !direct.is_empty() {
        let name = root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("seq")
            .to_string();
        return Ok(vec![(name, direct)]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let frames = image_io::list_pngs(&d)?;
        if !frames.is_empty() {
            let name = d
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("seq")
                .to_string();
            out.push((name, frames));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no PNG sequences under {}",
            root.display()
        )));
    }
    Ok(out)
}

/// Splits each sequence into non-overlapping windows of `window` frames. Each
/// window yields one averaged blurry image paired with its centre frame.
pub fn blur_sequences(
    input: &Path,
    output: &Path,
    window: usize,
    crf: CrfParams,
) -> Result<BlurManifest> {
    if window == 0 {
        return Err(Error::invalid("blur", "window must be >= 1"));
    }
    let mut manifest = BlurManifest {
        mode: "average".into(),
        pairs: Vec::new(),
    };
    for (name, frames) in find_sequences(input)? {
        for (w, chunk) in frames.chunks_exact(window).enumerate() {
            let imgs = chunk
                .iter()
                .map(|p| image_io::load_png(p))
                .collect::<Result<Vec<_>>>()?;
            let blurry = average_blur(&imgs, crf)?;
            let stem = format!("{name}_{w:04}.png");
            let entry = ManifestEntry {
                sequence: name.clone(),
                window,
                gamma: crf.gamma(),
                blurry: Path::new("blurry").join(&stem),
                sharp: Path::new("sharp").join(&stem),
            };
            image_io::save_png(&output.join(&entry.blurry), &blurry)?;
            image_io::save_png(&output.join(&entry.sharp), &imgs[window / 2])?;
            manifest.pairs.push(entry);
        }
    }
    manifest.save(output)?;
    Ok(manifest)
}

/// Blurs every PNG in `input` with `kernel`; noise seeds are `seed + index`.
pub fn blur_images(
    input: &Path,
    output: &Path,
    kernel: &BlurKernelSpec,
    seed: u64,
) -> Result<BlurManifest> {
    let files = image_io::list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNGs in {}", input.display())));
    }
    let mut manifest = BlurManifest {
        mode: "kernel".into(),
        pairs: Vec::new(),
    };
    for (i, p) in files.iter().enumerate() {
        let img = image_io::load_png(p)?;
        let blurry = kernel_blur(&img, kernel, seed.wrapping_add(i as u64))?;
        let stem = p.file_name().expect("listed file").to_owned();
        let entry = ManifestEntry {
            sequence: p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("img")
                .to_string(),
            window: 1,
            gamma: 1.0,
            blurry: Path::new("blurry").join(&stem),
            sharp: Path::new("sharp").join(&stem),
        };
        image_io::save_png(&output.join(&entry.blurry), &blurry)?;
        image_io::save_png(&output.join(&entry.sharp), &img)?;
        manifest.pairs.push(entry);
    }
    manifest.save(output)?;
    Ok(manifest)
}
