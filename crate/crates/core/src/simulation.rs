//! Synthetic ground truth, coil maps, sampling masks and noisy k-space.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{forward_a, AcsRegion, CoilSensitivities, MeasuredData, SamplingMask};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ComplexArray;

// stream ids keep the generators independent when they share a seed
const STREAM_PHASE: u64 = 1;
const STREAM_BLOBS: u64 = 2;
const STREAM_COILS: u64 = 3;
const STREAM_MASK: u64 = 4;
const STREAM_NOISE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    SmoothBlobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "smooth-blobs" => Ok(PhantomKind::SmoothBlobs),
            other => Err(Error::InvalidInput(format!("unsupported phantom kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: (usize, usize),
    pub kind: PhantomKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPattern {
    UniformCartesian,
    VariableDensityRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub acceleration: f64,
    pub acs: (usize, usize),
    pub seed: u64,
    /// Radial power-law exponent of the variable-density pattern.
    #[serde(default = "default_density_exponent")]
    pub density_exponent: f64,
}

fn default_density_exponent() -> f64 {
    2.0
}

/// Relative tolerance on the realized acceleration of generated masks.
pub const ACCELERATION_TOLERANCE: f64 = 0.10;

// (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Normalized coordinates in [-1, 1): u runs along columns, v along rows (up).
fn coords(r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
    let u = (c as f64 - (cols / 2) as f64) / (cols as f64 / 2.0);
    let v = ((rows / 2) as f64 - r as f64) / (rows as f64 / 2.0);
    (u, v)
}

/// Magnitude in [0, 1] with a smooth low-order polynomial phase.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexArray> {
    let (rows, cols) = spec.size;
    if rows < 16 || cols < 16 {
        return Err(Error::InvalidInput(format!(
            "phantom extents must be >= 16, got {:?}",
            spec.size
        )));
    }
    let mut magnitude = match spec.kind {
        PhantomKind::SheppLogan => shepp_logan(rows, cols),
        PhantomKind::SmoothBlobs => smooth_blobs(rows, cols, spec.seed),
    };
    for m in magnitude.iter_mut() {
        *m = m.max(0.0);
    }
    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::InvalidInput("phantom has no signal".into()));
    }

    let mut prng = rng::stream(spec.seed, STREAM_PHASE);
    let coef: Vec<f64> = (0..5).map(|_| prng.random_range(-0.4..0.4)).collect();
    Ok(ComplexArray::from_fn2(rows, cols, |r, c| {
        let (u, v) = coords(r, c, rows, cols);
        let phase = coef[0] * u + coef[1] * v + coef[2] * u * v + coef[3] * u * u + coef[4] * v * v;
        Complex64::from_polar(magnitude[r * cols + c] / peak, phase)
    }))
}

fn shepp_logan(rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = coords(r, c, rows, cols);
            let mut val = 0.0;
            for &(amp, a, b, x0, y0, deg) in &SHEPP_LOGAN {
                let th = deg.to_radians();
                let (dx, dy) = (u - x0, v - y0);
                let xr = dx * th.cos() + dy * th.sin();
                let yr = -dx * th.sin() + dy * th.cos();
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    val += amp;
                }
            }
            out[r * cols + c] = val;
        }
    }
    out
}

fn smooth_blobs(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut prng = rng::stream(seed, STREAM_BLOBS);
    let n_blobs = prng.random_range(4..=8);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                prng.random_range(-0.6..0.6),
                prng.random_range(-0.6..0.6),
                prng.random_range(0.08..0.3),
                prng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = coords(r, c, rows, cols);
            out[r * cols + c] = blobs
                .iter()
                .map(|&(x0, y0, w, a)| a * (-((u - x0).powi(2) + (v - y0).powi(2)) / (2.0 * w * w)).exp())
                .sum();
        }
    }
    out
}

/// Smooth complex coil profiles: Gaussian magnitude bumps spread around the
/// field of view, each with its own linear phase.
pub fn make_coil_maps(size: (usize, usize), nc: usize, seed: u64) -> Result<CoilSensitivities> {
    let (rows, cols) = size;
    if nc == 0 {
        return Err(Error::InvalidInput("coil count must be >= 1".into()));
    }
    let mut prng = rng::stream(seed, STREAM_COILS);
    let offset = prng.random_range(0.0..2.0 * PI);
    let mut raw = ComplexArray::zeros(&[nc, rows, cols]);
    for k in 0..nc {
        let angle = offset + 2.0 * PI * k as f64 / nc as f64 + prng.random_range(-0.2..0.2);
        let radius = prng.random_range(0.8..1.1);
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        let width = prng.random_range(0.55..0.8);
        let (gx, gy) = (prng.random_range(-0.5..0.5), prng.random_range(-0.5..0.5));
        let phi0 = prng.random_range(-PI..PI);
        let slice = raw.slice_mut(k);
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = coords(r, c, rows, cols);
                let mag = (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * width * width)).exp();
                slice[r * cols + c] = Complex64::from_polar(mag, phi0 + PI * (gx * u + gy * v));
            }
        }
    }
    CoilSensitivities::from_raw(raw)
}

pub fn make_mask(spec: &MaskSpec, size: (usize, usize)) -> Result<SamplingMask> {
    let (rows, cols) = size;
    if !(spec.acceleration >= 1.0) || !spec.acceleration.is_finite() {
        return Err(Error::InvalidInput(format!(
            "acceleration must be >= 1, got {}",
            spec.acceleration
        )));
    }
    let acs = AcsRegion::centered(size, spec.acs)?;
    let total = rows * cols;
    if spec.acceleration == 1.0 {
        return SamplingMask::new(rows, cols, vec![true; total], acs);
    }
    let mut mask = vec![false; total];
    for r in acs.row0..acs.row0 + acs.rows {
        for c in acs.col0..acs.col0 + acs.cols {
            mask[r * cols + c] = true;
        }
    }
    match spec.pattern {
        MaskPattern::UniformCartesian => uniform_lines(&mut mask, rows, cols, spec.acceleration),
        MaskPattern::VariableDensityRandom => variable_density(&mut mask, rows, cols, spec)?,
    }
    let out = SamplingMask::new(rows, cols, mask, acs)?;
    let realized = out.acceleration();
    if (realized / spec.acceleration - 1.0).abs() > ACCELERATION_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "cannot realize acceleration {} with ACS {:?} on {:?} (got {realized:.3})",
            spec.acceleration, spec.acs, size
        )));
    }
    Ok(out)
}

/// Phase-encode lines (rows) spaced by `step`, anchored at the centre row.
/// The spacing is stretched when the ACS block alone pushes the realized
/// acceleration below tolerance.
fn uniform_lines(mask: &mut [bool], rows: usize, cols: usize, acceleration: f64) {
    let acs_only = mask.to_vec();
    let center = (rows / 2) as f64;
    let mut step = acceleration;
    for _ in 0..200 {
        mask.copy_from_slice(&acs_only);
        let kmin = -(center / step).floor() as i64;
        let kmax = ((rows as f64 - 1.0 - center) / step).floor() as i64;
        for k in kmin..=kmax {
            let r = (center + k as f64 * step).round() as usize;
            if r < rows {
                mask[r * cols..(r + 1) * cols].iter_mut().for_each(|m| *m = true);
            }
        }
        let realized = (rows * cols) as f64 / mask.iter().filter(|&&m| m).count() as f64;
        if realized >= acceleration * (1.0 - ACCELERATION_TOLERANCE) {
            return;
        }
        step *= 1.02;
    }
}

fn variable_density(mask: &mut [bool], rows: usize, cols: usize, spec: &MaskSpec) -> Result<()> {
    let total = rows * cols;
    let target = (total as f64 / spec.acceleration).round() as usize;
    let already = mask.iter().filter(|&&m| m).count();
    if already >= target {
        return Ok(());
    }
    let mut prng = rng::stream(spec.seed, STREAM_MASK);
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    // weighted sampling without replacement: keep the largest ln(u)/w keys
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(total - already);
    for r in 0..rows {
        for c in 0..cols {
            let u: f64 = prng.random_range(f64::MIN_POSITIVE..1.0);
            let i = r * cols + c;
            if mask[i] {
                continue;
            }
            let rho = (((r as f64 - cr) / (rows as f64 / 2.0)).powi(2)
                + ((c as f64 - cc) / (cols as f64 / 2.0)).powi(2))
            .sqrt();
            let w = (rho + 0.1).powf(-spec.density_exponent);
            keys.push((u.ln() / w, i));
        }
    }
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in keys.iter().take(target - already) {
        mask[i] = true;
    }
    Ok(())
}

/// `y = M (F S x + n)` with iid complex Gaussian noise of std `noise_std`
/// per real and imaginary component.
pub fn synthesize_measurement(
    x: &ComplexArray,
    s: &CoilSensitivities,
    mask: &SamplingMask,
    noise_std: f64,
    seed: u64,
) -> Result<MeasuredData> {
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidInput("noise_std must be >= 0".into()));
    }
    let full = SamplingMask::full(mask.rows(), mask.cols());
    let mut k = forward_a(x, s, &full)?;
    if noise_std > 0.0 {
        let mut prng = rng::stream(seed, STREAM_NOISE);
        for v in k.data_mut() {
            let re = rng::standard_normal(&mut prng);
            let im = rng::standard_normal(&mut prng);
            *v += Complex64::new(re, im) * noise_std;
        }
    }
    mask.apply_in_place(&mut k);
    MeasuredData::new(k, mask.clone(), noise_std)
}

/// Degrades coil maps with a `box x box` moving average (mean over in-bounds
/// neighbours) followed by renormalization.
pub fn box_smooth_maps(s: &CoilSensitivities, box_size: usize) -> Result<CoilSensitivities> {
    if box_size == 0 || box_size % 2 == 0 {
        return Err(Error::InvalidInput("box size must be odd and positive".into()));
    }
    let (rows, cols) = s.spatial();
    let h = (box_size / 2) as isize;
    let nc = s.n_coils();
    let mut out = ComplexArray::zeros(&[nc, rows, cols]);
    for k in 0..nc {
        let src = s.maps().slice(k);
        let dst = out.slice_mut(k);
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut n = 0usize;
                for dr in -h..=h {
                    for dc in -h..=h {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < rows as isize && cc < cols as isize {
                            acc += src[rr as usize * cols + cc as usize];
                            n += 1;
                        }
                    }
                }
                dst[r as usize * cols + c as usize] = acc / n as f64;
            }
        }
    }
    CoilSensitivities::from_raw(out)
}

/// Sensitivities from low-resolution coil images: the ACS block is
/// zero-filled to the full grid, transformed, and normalized by its
/// root-sum-of-squares.
pub fn lowres_maps(ksp: &ComplexArray, acs: AcsRegion) -> Result<CoilSensitivities> {
    let block = acs.extract(ksp)?;
    let (rows, cols) = ksp.spatial();
    let nc = ksp.n_slices();
    let mut padded = ComplexArray::zeros(&[nc, rows, cols]);
    for k in 0..nc {
        let src = block.slice(k);
        let dst = padded.slice_mut(k);
        for r in 0..acs.rows {
            for c in 0..acs.cols {
                dst[(acs.row0 + r) * cols + acs.col0 + c] = src[r * acs.cols + c];
            }
        }
    }
    CoilSensitivities::from_raw(padded.ifft2c()?)
}
