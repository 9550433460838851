//! Browser bindings for the blur synthesizers and image metrics.
//!
//! Images cross the boundary as RGBA bytes (canvas `ImageData` layout). Alpha
//! is ignored on input and written as 255.

use rblb::blur_synth::{average_blur, gen_linear_kernel, kernel_blur, CrfParams};
use rblb::image_io::to_byte;
use rblb::metrics::{psnr, ssim};
use rblb::numerics::{Shape, Tensor};
use wasm_bindgen::prelude::*;

fn to_tensor(rgba: &[u8], width: usize, height: usize) -> Result<Tensor, String> {
    let plane = width * height;
    if width == 0 || height == 0 || rgba.len() != plane * 4 {
        return Err(format!(
            "expected {width}x{height} RGBA ({} bytes), got {}",
            plane * 4,
            rgba.len()
        ));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, height, width), data).map_err(|e| e.to_string())
}

fn to_rgba(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let plane = s.h * s.w;
    let d = t.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        out.extend([
            to_byte(d[i]),
            to_byte(d[plane + i]),
            to_byte(d[2 * plane + i]),
            255,
        ]);
    }
    out
}

/// Horizontal shift with edge clamping, standing in for one frame of a pan.
fn shifted(t: &Tensor, dx: isize) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    let d = out.data_mut();
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let sx = (x as isize + dx).clamp(0, s.w as isize - 1) as usize;
                d[(c * s.h + y) * s.w + x] = t.at(0, c, y, sx);
            }
        }
    }
    out
}

/// Linear motion blur of `length` pixels at `angle_deg`, plus optional
/// Gaussian noise drawn from `seed`.
pub fn kernel_blur_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    length: usize,
    angle_deg: f32,
    noise_std: f32,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let img = to_tensor(rgba, width, height)?;
    let kernel = gen_linear_kernel(length, angle_deg)
        .map_err(|e| e.to_string())?
        .with_noise(noise_std);
    Ok(to_rgba(
        &kernel_blur(&img, &kernel, seed).map_err(|e| e.to_string())?,
    ))
}

/// Simulates a horizontal pan over `frames` consecutive positions and
/// averages them in linear irradiance under a `gamma` camera response.
pub fn pan_blur_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    frames: usize,
    gamma: f32,
) -> Result<Vec<u8>, String> {
    if frames == 0 {
        return Err("frames must be >= 1".into());
    }
    let img = to_tensor(rgba, width, height)?;
    let half = (frames / 2) as isize;
    let stack: Vec<Tensor> = (0..frames as isize)
        .map(|k| shifted(&img, k - half))
        .collect();
    let crf = CrfParams::new(gamma).map_err(|e| e.to_string())?;
    Ok(to_rgba(
        &average_blur(&stack, crf).map_err(|e| e.to_string())?,
    ))
}

/// `[psnr_db, ssim]` of two same-sized RGBA images on a unit peak.
pub fn compare_rgba(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<Vec<f64>, String> {
    let (x, y) = (to_tensor(a, width, height)?, to_tensor(b, width, height)?);
    let p = psnr(&x, &y, 1.0).map_err(|e| e.to_string())?;
    let s = ssim(&x, &y, 1.0).map_err(|e| e.to_string())?;
    Ok(vec![p, s])
}

/// Kernel weights, row-major, for drawing the blur footprint.
pub fn kernel_weights(length: usize, angle_deg: f32) -> Result<Vec<f32>, String> {
    Ok(gen_linear_kernel(length, angle_deg)
        .map_err(|e| e.to_string())?
        .weights()
        .to_vec())
}

#[wasm_bindgen(js_name = kernelBlur)]
pub fn kernel_blur_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    length: usize,
    angle_deg: f32,
    noise_std: f32,
    seed: u32,
) -> Result<Vec<u8>, JsError> {
    kernel_blur_rgba(
        rgba,
        width,
        height,
        length,
        angle_deg,
        noise_std,
        seed as u64,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = panBlur)]
pub fn pan_blur_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    frames: usize,
    gamma: f32,
) -> Result<Vec<u8>, JsError> {
    pan_blur_rgba(rgba, width, height, frames, gamma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = compare)]
pub fn compare_js(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<Vec<f64>, JsError> {
    compare_rgba(a, b, width, height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = kernelWeights)]
pub fn kernel_weights_js(length: usize, angle_deg: f32) -> Result<Vec<f32>, JsError> {
    kernel_weights(length, angle_deg).map_err(|e| JsError::new(&e))
}
