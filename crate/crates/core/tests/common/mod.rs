#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rblb::blur_synth::{average_blur, gen_linear_kernel, kernel_blur, CrfParams};
use rblb::image_io::save_png;
use rblb::numerics::{Padding, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth colour scene: a few random plane waves around mid-grey.
pub fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.05..0.2),
            )
        })
        .collect();
    let mut d = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.5;
                for (fx, fy, ph, a) in &waves {
                    v += a * (fx * x as f32 + fy * y as f32 + ph + c as f32 * 0.7).sin();
                }
                d.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), d).unwrap()
}

/// Columns `x0..x0+w` of a 1×3×H×W image.
pub fn crop_cols(t: &Tensor, x0: usize, w: usize) -> Tensor {
    let s = t.shape();
    let mut d = Vec::with_capacity(3 * s.h * w);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..w {
                d.push(t.at(0, c, y, x + x0));
            }
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, s.h, w), d).unwrap()
}

/// `n` sharp 32×32 patches with their 7-frame horizontal-pan average blurs.
pub fn panned_patches(seed: u64, n: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut r = rng(seed);
    let crf = CrfParams::new(2.2).unwrap();
    let (mut sharp, mut blurred) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let wide = scene(&mut r, 32, 40);
        let frames: Vec<Tensor> = (0..7).map(|k| crop_cols(&wide, k, 32)).collect();
        blurred.push(average_blur(&frames, crf).unwrap());
        sharp.push(frames[3].clone());
    }
    (sharp, blurred)
}

/// Writes `n` scenes of `size`×`size` as `img_XX.png`.
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) {
    let mut r = rng(seed);
    for i in 0..n {
        save_png(
            &dir.join(format!("img_{i:02}.png")),
            &scene(&mut r, size, size),
        )
        .unwrap();
    }
}

/// Direct nested-loop convolution in f64 with same padding.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Tensor {
    let (sx, sw) = (x.shape(), w.shape());
    let k = sw.h;
    let pad = (k / 2) as isize;
    let oh = (sx.h - 1) / stride + 1;
    let ow = (sx.w - 1) / stride + 1;
    let fetch = |n: usize, c: usize, y: isize, xx: isize| -> f64 {
        let (h, wd) = (sx.h as isize, sx.w as isize);
        match padding {
            Padding::ZeroSame => {
                if y < 0 || y >= h || xx < 0 || xx >= wd {
                    0.0
                } else {
                    x.at(n, c, y as usize, xx as usize) as f64
                }
            }
            Padding::ReflectSame => {
                let refl = |v: isize, len: isize| {
                    if v < 0 {
                        -v
                    } else if v >= len {
                        2 * (len - 1) - v
                    } else {
                        v
                    }
                };
                x.at(n, c, refl(y, h) as usize, refl(xx, wd) as usize) as f64
            }
        }
    };
    let mut out = Vec::with_capacity(sx.n * sw.n * oh * ow);
    for n in 0..sx.n {
        for co in 0..sw.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                    for ci in 0..sx.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride) as isize + ky as isize - pad;
                                let xx = (ox * stride) as isize + kx as isize - pad;
                                acc += w.at(co, ci, ky, kx) as f64 * fetch(n, ci, y, xx);
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(sx.n, sw.n, oh, ow), out).unwrap()
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.numel() as f64
}

/// Writes a sharp corpus under `dir/sharp`, kernel-blurs it into `dir/paired`
/// and returns the manifest path.
pub fn paired_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> std::path::PathBuf {
    let sharp = dir.join("sharp");
    write_corpus(&sharp, n, size, seed);
    let out = dir.join("paired");
    rblb::blur_synth::blur_images(&sharp, &out, &gen_linear_kernel(5, 30.0).unwrap(), seed)
        .unwrap();
    out.join(rblb::blur_synth::MANIFEST_NAME)
}

/// Sharp and independently generated blurry pools for the blur stage.
pub fn unpaired_corpus(
    dir: &Path,
    n: usize,
    size: usize,
    seed: u64,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let sharp = dir.join("u_sharp");
    let blurry = dir.join("u_blurry");
    write_corpus(&sharp, n, size, seed);
    let tmp = dir.join("u_src");
    write_corpus(&tmp, n, size, seed + 1000);
    let k = gen_linear_kernel(7, 80.0).unwrap();
    let mut r = rng(seed);
    for i in 0..n {
        let s = rblb::image_io::load_png(&tmp.join(format!("img_{i:02}.png"))).unwrap();
        save_png(
            &blurry.join(format!("b_{i:02}.png")),
            &kernel_blur(&s, &k, r.gen()).unwrap(),
        )
        .unwrap();
    }
    (sharp, blurry)
}

pub fn ln_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

/// Scalar relativistic loss in f64, as written for the generator role.
pub fn relativistic_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let mr = real.iter().sum::<f64>() / real.len() as f64;
    let mf = fake.iter().sum::<f64>() / fake.len() as f64;
    let a = real.iter().map(|r| ln_sigmoid(r - mf)).sum::<f64>() / real.len() as f64;
    let b = fake.iter().map(|f| ln_sigmoid(-(f - mr))).sum::<f64>() / fake.len() as f64;
    -(a + b)
}

/// `n` (blurry, sharp) 32×32 pairs of single plane-wave patches, blurred by a
/// 7-pixel linear kernel at 30°.
pub fn wave_pairs(seed: u64, n: usize) -> Vec<(Tensor, Tensor)> {
    let mut r = rng(seed);
    let k = gen_linear_kernel(7, 30.0).unwrap();
    (0..n)
        .map(|i| {
            let (fx, fy, ph): (f32, f32, f32) = (
                r.gen_range(0.1..0.5),
                r.gen_range(0.1..0.5),
                r.gen_range(0.0..6.0),
            );
            let mut d = Vec::with_capacity(3 * 32 * 32);
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        d.push(0.5 + 0.35 * (fx * x as f32 + fy * y as f32 + ph + c as f32).sin());
                    }
                }
            }
            let s = Tensor::from_vec(Shape::new(1, 3, 32, 32), d).unwrap();
            (kernel_blur(&s, &k, i as u64).unwrap(), s)
        })
        .collect()
}
