//! 8-bit grayscale PNG exports and simple line plots of trace tables.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Roi;
use crate::tensor::RealImage;

/// Intensity window mapped to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn min_max(img: &RealImage) -> Self {
        let lo = img.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Window { lo, hi }
    }
}

pub fn to_gray(img: &RealImage, w: Window) -> GrayImage {
    let span = w.hi - w.lo;
    GrayImage::from_fn(img.cols as u32, img.rows as u32, |c, r| {
        let v = img.get(r as usize, c as usize);
        let u = if span > 0.0 { ((v - w.lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(u * 255.0).round() as u8])
    })
}

fn image_err(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn save_png(path: &Path, img: &RealImage, w: Window) -> Result<()> {
    to_gray(img, w).save(path).map_err(image_err)
}

/// Nearest-neighbour magnification of a rectangle.
pub fn zoom(img: &RealImage, roi: &Roi, factor: usize) -> Result<RealImage> {
    let crop = roi.crop(img)?;
    Ok(RealImage::from_fn(crop.rows * factor, crop.cols * factor, |r, c| crop.get(r / factor, c / factor)))
}

/// Central half of `roi`, at least one pixel in each direction.
pub fn default_zoom(roi: &Roi) -> Roi {
    let rows = (roi.rows / 2).max(1);
    let cols = (roi.cols / 2).max(1);
    Roi { row0: roi.row0 + (roi.rows - rows) / 2, col0: roi.col0 + (roi.cols - cols) / 2, rows, cols }
}

pub fn error_map(reference: &RealImage, test: &RealImage) -> Result<RealImage> {
    if (reference.rows, reference.cols) != (test.rows, test.cols) {
        return Err(Error::ShapeMismatch {
            expected: vec![reference.rows, reference.cols],
            found: vec![test.rows, test.cols],
        });
    }
    let data = reference.data.iter().zip(&test.data).map(|(a, b)| (b - a).abs()).collect();
    RealImage::new(reference.rows, reference.cols, data)
}

/// Columns of a tab-separated table with a header row.
pub fn parse_table(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format("empty table".into()))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", k + 2, fields.len(), header.len())));
        }
        for (col, f) in cols.iter_mut().zip(fields) {
            let v = f.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: '{f}' is not a number", k + 2)))?;
            col.push(v);
        }
    }
    Ok((header, cols))
}

pub const PLOT_WIDTH: u32 = 640;
pub const PLOT_HEIGHT: u32 = 360;
const MARGIN: u32 = 20;

/// Black polyline of `values` (log10 when `log` is set) on white, inside a
/// framed plotting area. Non-finite and, on log plots, non-positive values
/// are skipped.
pub fn line_plot(values: &[f64], log: bool) -> GrayImage {
    let mut img = GrayImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, Luma([255]));
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, PLOT_WIDTH - MARGIN, PLOT_HEIGHT - MARGIN);
    for x in x0..=x1 {
        img.put_pixel(x, y0, Luma([160]));
        img.put_pixel(x, y1, Luma([160]));
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, Luma([160]));
        img.put_pixel(x1, y, Luma([160]));
    }
    let pts: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| {
            let v = if log { if v > 0.0 { v.log10() } else { f64::NAN } } else { v };
            v.is_finite().then_some((i, v))
        })
        .collect();
    if pts.is_empty() {
        return img;
    }
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let n = values.len().max(2) - 1;
    let to_px = |(i, v): (usize, f64)| -> (i64, i64) {
        let fx = i as f64 / n as f64;
        let fy = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let x = x0 as f64 + fx * (x1 - x0) as f64;
        let y = y1 as f64 - fy * (y1 - y0) as f64;
        (x.round() as i64, y.round() as i64)
    };
    let mut prev = to_px(pts[0]);
    for &p in &pts {
        let cur = to_px(p);
        draw_line(&mut img, prev, cur);
        prev = cur;
    }
    img
}

fn draw_line(img: &mut GrayImage, (ax, ay): (i64, i64), (bx, by): (i64, i64)) {
    let (dx, dy) = ((bx - ax).abs(), -(by - ay).abs());
    let (sx, sy) = (if ax < bx { 1 } else { -1 }, if ay < by { 1 } else { -1 });
    let (mut x, mut y, mut err) = (ax, ay, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Luma([0]));
        }
        if x == bx && y == by {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn save_plot(path: &Path, values: &[f64], log: bool) -> Result<()> {
    line_plot(values, log).save(path).map_err(image_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping_clamps_to_window() {
        let img = RealImage::new(1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let g = to_gray(&img, Window { lo: 0.0, hi: 1.0 });
        assert_eq!(g.as_raw(), &vec![0u8, 128, 255]);
    }

    #[test]
    fn zoom_repeats_pixels() {
        let img = RealImage::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let z = zoom(&img, &Roi { row0: 1, col0: 1, rows: 2, cols: 2 }, 3).unwrap();
        assert_eq!((z.rows, z.cols), (6, 6));
        assert_eq!(z.get(0, 0), 5.0);
        assert_eq!(z.get(5, 5), 10.0);
    }

    #[test]
    fn table_parsing() {
        let (h, cols) = parse_table("iter\tobjective\n0\t2.5\n1\t1e-3\n").unwrap();
        assert_eq!(h, vec!["iter", "objective"]);
        assert_eq!(cols[1], vec![2.5, 1e-3]);
        assert!(parse_table("a\tb\n1\n").is_err());
        assert!(parse_table("a\n1x\n").is_err());
    }

    #[test]
    fn plot_draws_something() {
        let img = line_plot(&[1.0, 0.1, 0.01, 0.0], true);
        assert!(img.as_raw().iter().any(|&p| p == 0));
        let flat = line_plot(&[], false);
        assert!(flat.as_raw().iter().all(|&p| p != 0));
    }
}
