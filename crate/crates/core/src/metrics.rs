//! NMSE, PSNR and SSIM on magnitude images, optionally restricted to a
//! rectangular region of interest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexArray, RealImage};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL_DB: f64 = 300.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Half-open rectangle `[row0, row0 + rows) x [col0, col0 + cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Roi {
    pub fn full(img: &RealImage) -> Self {
        Roi { row0: 0, col0: 0, rows: img.rows, cols: img.cols }
    }

    /// Smallest rectangle holding every pixel above `threshold * max`.
    pub fn bounding_box(img: &RealImage, threshold: f64) -> Result<Self> {
        let peak = img.data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if !(peak > 0.0) {
            return Err(Error::InvalidInput("bounding box of an all-zero image".into()));
        }
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..img.rows {
            for c in 0..img.cols {
                if img.get(r, c).abs() > threshold * peak {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        Ok(Roi { row0: r0, col0: c0, rows: r1 - r0 + 1, cols: c1 - c0 + 1 })
    }

    fn check(&self, img: &RealImage) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.row0 + self.rows > img.rows || self.col0 + self.cols > img.cols {
            return Err(Error::InvalidInput(format!(
                "roi {self:?} does not fit a {}x{} image",
                img.rows, img.cols
            )));
        }
        Ok(())
    }

    /// Row-major copy of the ROI pixels.
    pub fn crop(&self, img: &RealImage) -> Result<RealImage> {
        self.check(img)?;
        Ok(RealImage::from_fn(self.rows, self.cols, |r, c| img.get(self.row0 + r, self.col0 + c)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub roi: Option<Roi>,
}

fn cropped_pair(reference: &RealImage, test: &RealImage, roi: Option<&Roi>) -> Result<(RealImage, RealImage)> {
    if (reference.rows, reference.cols) != (test.rows, test.cols) {
        return Err(Error::shape(&[reference.rows, reference.cols], &[test.rows, test.cols]));
    }
    let roi = roi.copied().unwrap_or_else(|| Roi::full(reference));
    let (a, b) = (roi.crop(reference)?, roi.crop(test)?);
    if a.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite pixel in metric input".into()));
    }
    Ok((a, b))
}

fn sq_err(a: &RealImage, b: &RealImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (y - x) * (y - x)).sum()
}

/// `‖test − ref‖² / ‖ref‖²` over the ROI.
pub fn nmse(reference: &RealImage, test: &RealImage, roi: Option<&Roi>) -> Result<f64> {
    let (a, b) = cropped_pair(reference, test, roi)?;
    let den: f64 = a.data.iter().map(|v| v * v).sum();
    if !(den > 0.0) {
        return Err(Error::InvalidInput("reference has zero energy on the roi".into()));
    }
    Ok(sq_err(&a, &b) / den)
}

/// `10 log10(peak² / MSE)` with `peak = max |ref|` over the ROI.
pub fn psnr(reference: &RealImage, test: &RealImage, roi: Option<&Roi>) -> Result<f64> {
    let (a, b) = cropped_pair(reference, test, roi)?;
    let mse = sq_err(&a, &b) / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    let peak = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) {
        return Err(Error::InvalidInput("reference peak is zero on the roi".into()));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized `SSIM_WINDOW`² Gaussian weights.
fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over every window that fits inside the ROI, with the
/// dynamic range `L` taken from the reference.
pub fn ssim(reference: &RealImage, test: &RealImage, roi: Option<&Roi>) -> Result<f64> {
    let (a, b) = cropped_pair(reference, test, roi)?;
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, roi is {}x{}",
            a.rows, a.cols
        )));
    }
    let lo = a.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::InvalidInput("reference has zero dynamic range on the roi".into()));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let w = gaussian_window();
    let (vr, vc) = (a.rows - SSIM_WINDOW + 1, a.cols - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..vr {
        for c in 0..vc {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = w[i * SSIM_WINDOW + j];
                    let p = a.get(r + i, c + j);
                    let q = b.get(r + i, c + j);
                    mx += wt * p;
                    my += wt * q;
                    xx += wt * p * p;
                    yy += wt * q * q;
                    xy += wt * p * q;
                }
            }
            let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
    }
    Ok(total / (vr * vc) as f64)
}

pub fn evaluate(reference: &RealImage, test: &RealImage, roi: Option<&Roi>) -> Result<EvalReport> {
    Ok(EvalReport {
        nmse: nmse(reference, test, roi)?,
        psnr_db: psnr(reference, test, roi)?,
        ssim: ssim(reference, test, roi)?,
        roi: roi.copied(),
    })
}

/// Evaluates several test images against one reference in parallel.
pub fn evaluate_batch(reference: &RealImage, tests: &[RealImage], roi: Option<&Roi>) -> Result<Vec<EvalReport>> {
    tests.par_iter().map(|t| evaluate(reference, t, roi)).collect()
}

/// Reinterprets a 2D array holding magnitudes as a real image. Arrays with a
/// nonzero imaginary part are rejected.
pub fn real_image(x: &ComplexArray) -> Result<RealImage> {
    if x.rank() != 2 {
        return Err(Error::InvalidInput(format!("metrics expect a 2D image, got shape {:?}", x.shape())));
    }
    if x.data().iter().any(|v| v.im != 0.0) {
        return Err(Error::InvalidInput("metrics take magnitude images; got complex data".into()));
    }
    let (r, c) = x.spatial();
    RealImage::new(r, c, x.data().iter().map(|v| v.re).collect())
}

pub fn to_complex(img: &RealImage) -> ComplexArray {
    ComplexArray::from_real(&[img.rows, img.cols], &img.data).expect("image dims match data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub acceleration: f64,
    pub report: EvalReport,
}

/// Tab-separated table with a header line.
pub fn metrics_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("method\tacceleration\tnmse\tpsnr_db\tssim\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.10e}\t{:.6}\t{:.8}\n",
            r.method, r.acceleration, r.report.nmse, r.report.psnr_db, r.report.ssim
        ));
    }
    out
}

/// Aligned table for terminal output.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>6}  {:>11}  {:>9}  {:>7}\n", "method", "R", "NMSE", "PSNR(dB)", "SSIM");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.2}  {:>11.4e}  {:>9.3}  {:>7.4}\n",
            r.method, r.acceleration, r.report.nmse, r.report.psnr_db, r.report.ssim
        ));
    }
    out
}
