//! 8-bit RGB PNG ⇄ 1×3×H×W tensors in [0, 1].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{Shape, Tensor};

/// Loads an 8-bit RGB PNG; byte `v` maps to `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = decoder
        .read_info()
        .map_err(|e| unsupported(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(unsupported(format!("color type {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| unsupported(e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        let row = &bytes[y * frame.line_size..y * frame.line_size + 3 * w];
        for x in 0..w {
            for c in 0..3 {
                data[c * plane + y * w + x] = row[3 * x + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Quantizes `v ∈ [0,1]` to a byte, rounding half away from zero.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a 1×3×H×W tensor as an 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(
            "save_png",
            format!("expected 1x3xHxW, got {s}"),
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let plane = s.plane();
    let mut bytes = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            bytes[3 * p + c] = to_byte(image.data()[c * plane + p]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io_err =
        |e: png::EncodingError| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&bytes).map_err(io_err)?;
    writer.finish().map_err(io_err)?;
    Ok(())
}

/// PNG files directly inside `dir`, sorted lexicographically by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
