//! PSNR / SSIM and directory-level evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::numerics::Tensor;

/// Reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(peak² / MSE)`, or [`PSNR_CAP_DB`] when MSE is zero.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean SSIM over non-overlapping 8×8 windows, channels and batch items.
///
/// Uses unweighted window statistics with population (1/n) variances, and
/// `c1 = (0.01·peak)²`, `c2 = (0.03·peak)²`. Trailing rows/columns that do not
/// fill a whole window are ignored.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same("ssim", a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {s} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (wy, wx) = (s.h / SSIM_WINDOW, s.w / SSIM_WINDOW);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for plane_idx in 0..s.n * s.c {
        let off = plane_idx * s.plane();
        let pa = &a.data()[off..off + s.plane()];
        let pb = &b.data()[off..off + s.plane()];
        for by in 0..wy {
            for bx in 0..wx {
                let pixels = || {
                    (0..SSIM_WINDOW).flat_map(move |dy| {
                        (0..SSIM_WINDOW)
                            .map(move |dx| (by * SSIM_WINDOW + dy) * s.w + bx * SSIM_WINDOW + dx)
                    })
                };
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                for i in pixels() {
                    ma += pa[i] as f64;
                    mb += pb[i] as f64;
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for i in pixels() {
                    let da = pa[i] as f64 - ma;
                    let db = pb[i] as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                va /= n;
                vb /= n;
                cov /= n;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricResult {
    /// Sorted by image name.
    pub rows: Vec<ImageMetric>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricResult {
    pub fn from_rows(mut rows: Vec<ImageMetric>) -> Self {
        rows.sort_by(|a, b| a.image.cmp(&b.image));
        let n = rows.len().max(1) as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricResult {
            rows,
            mean_psnr_db,
            mean_ssim,
        }
    }

    /// Per-image rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.serialize(ImageMetric {
            image: "mean".into(),
            psnr_db: self.mean_psnr_db,
            ssim: self.mean_ssim,
        })?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Scores every PNG in `pred_dir` against the same-named PNG in `target_dir`.
///
/// `threads > 1` splits files across scoped workers; rows are sorted before
/// reduction so the aggregate does not depend on the split.
pub fn evaluate_dirs(
    pred_dir: &Path,
    target_dir: &Path,
    peak: f64,
    threads: usize,
) -> Result<MetricResult> {
    let preds = image_io::list_pngs(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Data(format!("no PNGs in {}", pred_dir.display())));
    }
    let score = |p: &std::path::PathBuf| -> Result<ImageMetric> {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let target = target_dir.join(&name);
        let mut a = image_io::load_png(p)?;
        let mut b = image_io::load_png(&target)?;
        if peak != 1.0 {
            let k = peak as f32;
            a.data_mut().iter_mut().for_each(|v| *v *= k);
            b.data_mut().iter_mut().for_each(|v| *v *= k);
        }
        Ok(ImageMetric {
            image: name,
            psnr_db: psnr(&a, &b, peak)?,
            ssim: ssim(&a, &b, peak)?,
        })
    };
    let rows: Vec<ImageMetric> = if threads <= 1 {
        preds.iter().map(score).collect::<Result<_>>()?
    } else {
        let chunk = preds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = preds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(preds.len());
            for h in handles {
                all.extend(h.join().expect("eval worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok(MetricResult::from_rows(rows))
}
