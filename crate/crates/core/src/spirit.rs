//! SPIRiT kernel calibration, the k-space operator G and the image-domain
//! self-consistency operator Ψ = F⁻¹ (G − I)ᴴ (G − I) F.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::ComplexArray;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

// relative singular-value floor below which the calibration matrix counts as rank deficient
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpiritKernel {
    weights: ComplexArray,
    kernel_size: (usize, usize),
    tikhonov: f64,
    calib_residual: f64,
}

impl SpiritKernel {
    /// Rebuilds a kernel from stored parts, re-checking its invariants.
    pub fn from_parts(weights: ComplexArray, tikhonov: f64, calib_residual: f64) -> Result<Self> {
        let sh = weights.shape().to_vec();
        if sh.len() != 4 || sh[0] != sh[1] || sh[2] % 2 == 0 || sh[3] % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "kernel weights must be (nc, nc, odd, odd), got {sh:?}"
            )));
        }
        if !(tikhonov >= 0.0) || !(calib_residual >= 0.0) || !calib_residual.is_finite() {
            return Err(Error::InvalidInput("kernel header values out of range".into()));
        }
        weights.check_finite("kernel weights")?;
        let kern = SpiritKernel { kernel_size: (sh[2], sh[3]), weights, tikhonov, calib_residual };
        for t in 0..kern.n_coils() {
            if kern.weight(t, t, sh[2] / 2, sh[3] / 2) != ZERO {
                return Err(Error::InvalidInput(format!("centre tap of coil {t} is not zero")));
            }
        }
        Ok(kern)
    }

    pub fn weights(&self) -> &ComplexArray {
        &self.weights
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        self.kernel_size
    }

    /// Regularization weight relative to the calibration Gram trace.
    pub fn tikhonov(&self) -> f64 {
        self.tikhonov
    }

    pub fn calib_residual(&self) -> f64 {
        self.calib_residual
    }

    pub fn n_coils(&self) -> usize {
        self.weights.shape()[0]
    }

    #[inline]
    pub fn weight(&self, target: usize, source: usize, i: usize, j: usize) -> Complex64 {
        let (kr, kc) = self.kernel_size;
        let nc = self.n_coils();
        self.weights.data()[((target * nc + source) * kr + i) * kc + j]
    }

    fn check_coils(&self, x: &ComplexArray) -> Result<()> {
        if x.rank() != 3 || x.shape()[0] != self.n_coils() {
            let sp = if x.rank() >= 2 { x.spatial() } else { (0, 0) };
            return Err(Error::shape(&[self.n_coils(), sp.0, sp.1], x.shape()));
        }
        Ok(())
    }
}

/// Calibration matrix over interior ACS points: one row per point, one column
/// per (source coil, kernel offset).
pub fn calibration_matrix(acs: &ComplexArray, kernel_size: (usize, usize)) -> Result<DMatrix<Complex64>> {
    let (kr, kc) = kernel_size;
    if kr % 2 == 0 || kc % 2 == 0 || kr == 0 || kc == 0 {
        return Err(Error::InvalidInput(format!("kernel size must be odd, got {kernel_size:?}")));
    }
    if acs.rank() != 3 {
        return Err(Error::InvalidInput(format!("ACS must be (nc, rows, cols), got {:?}", acs.shape())));
    }
    let nc = acs.shape()[0];
    let (ar, ac) = acs.spatial();
    if ar < kr + 4 || ac < kc + 4 {
        return Err(Error::InvalidInput(format!(
            "ACS {ar}x{ac} too small for kernel {kr}x{kc} (need kernel + 4)"
        )));
    }
    let (hr, hc) = (kr / 2, kc / 2);
    let (pr, pc) = (ar - 2 * hr, ac - 2 * hc);
    let n = nc * kr * kc;
    Ok(DMatrix::from_fn(pr * pc, n, |row, col| {
        let (r, c) = (row / pc + hr, row % pc + hc);
        let s = col / (kr * kc);
        let (i, j) = ((col / kc) % kr, col % kc);
        acs.slice(s)[(r + i - hr) * ac + (c + j - hc)]
    }))
}

pub fn calibrate(acs: &ComplexArray, kernel_size: (usize, usize), tikhonov: f64) -> Result<SpiritKernel> {
    if !(tikhonov >= 0.0) || !tikhonov.is_finite() {
        return Err(Error::InvalidInput(format!("tikhonov must be finite and >= 0, got {tikhonov}")));
    }
    acs.check_finite("ACS")?;
    let a = calibration_matrix(acs, kernel_size)?;
    let nc = acs.shape()[0];
    let (kr, kc) = kernel_size;
    let taps = kr * kc;
    let centre = (kr / 2) * kc + kc / 2;
    let gram = a.ad_mul(&a);
    let lambda = tikhonov * gram.trace().re;

    let solved: Vec<Result<Vec<Complex64>>> = (0..nc)
        .into_par_iter()
        .map(|t| {
            let ct = t * taps + centre;
            let keep: Vec<usize> = (0..gram.ncols()).filter(|&q| q != ct).collect();
            let mut sub = gram.select_rows(&keep).select_columns(&keep);
            let rhs = gram.column(ct).select_rows(&keep);
            for q in 0..sub.nrows() {
                sub[(q, q)] += lambda;
            }
            let cholesky = if tikhonov > 0.0 { sub.cholesky() } else { None };
            let w = match cholesky {
                Some(ch) => ch.solve(&rhs),
                None => solve_rank_revealing(&a.select_columns(&keep), &a.column(ct).into_owned(), lambda)?,
            };
            let mut full = Vec::with_capacity(gram.ncols());
            full.extend_from_slice(&w.as_slice()[..ct]);
            full.push(ZERO);
            full.extend_from_slice(&w.as_slice()[ct..]);
            Ok(full)
        })
        .collect();

    let mut weights = Vec::with_capacity(nc * nc * taps);
    let mut res = 0.0;
    let mut den = 0.0;
    for (t, w) in solved.into_iter().enumerate() {
        let w = w?;
        let target = a.column(t * taps + centre);
        let fit = &a * DVector::from_column_slice(&w);
        res += (fit - target).norm_squared();
        den += target.norm_squared();
        weights.extend(w);
    }
    let calib_residual = if den > 0.0 { (res / den).sqrt() } else { 0.0 };
    if !calib_residual.is_finite() {
        return Err(Error::Conditioning("calibration residual is not finite".into()));
    }
    SpiritKernel::from_parts(ComplexArray::new(vec![nc, nc, kr, kc], weights)?, tikhonov, calib_residual)
}

/// Least squares on the calibration matrix itself, `[A; √λ I] w ≈ [b; 0]`,
/// avoiding the squared conditioning of the normal equations.
fn solve_rank_revealing(a: &DMatrix<Complex64>, b: &DVector<Complex64>, lambda: f64) -> Result<DVector<Complex64>> {
    let n = a.ncols();
    let (aug, rhs) = if lambda > 0.0 {
        let mut aug = DMatrix::zeros(a.nrows() + n, n);
        aug.rows_mut(0, a.nrows()).copy_from(a);
        for q in 0..n {
            aug[(a.nrows() + q, q)] = Complex64::new(lambda.sqrt(), 0.0);
        }
        let mut rhs = DVector::zeros(a.nrows() + n);
        rhs.rows_mut(0, a.nrows()).copy_from(b);
        (aug, rhs)
    } else {
        (a.clone(), b.clone())
    };
    let svd = aug.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin <= smax * RANK_TOL {
        return Err(Error::Conditioning(format!(
            "calibration system is rank deficient (singular value ratio {:.3e})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    svd.solve(&rhs, 0.0).map_err(|e| Error::Conditioning(e.to_string()))
}

/// `out_t(k) = Σ_s Σ_d w[t,s,d] x_s((k + d) mod N)` with circular boundaries.
pub fn apply_g(ksp: &ComplexArray, kern: &SpiritKernel) -> Result<ComplexArray> {
    kern.check_coils(ksp)?;
    let nc = kern.n_coils();
    let (rows, cols) = ksp.spatial();
    let (kr, kc) = kern.kernel_size();
    let (hr, hc) = ((kr / 2) as isize, (kc / 2) as isize);
    let mut out = ComplexArray::zeros(ksp.shape());
    out.data_mut()
        .par_chunks_mut(rows * cols)
        .enumerate()
        .for_each(|(t, dst)| {
            for s in 0..nc {
                let src = ksp.slice(s);
                for i in 0..kr {
                    let dr = i as isize - hr;
                    for j in 0..kc {
                        let w = kern.weight(t, s, i, j);
                        if w == ZERO {
                            continue;
                        }
                        let dc = j as isize - hc;
                        for r in 0..rows {
                            let rr = (r as isize + dr).rem_euclid(rows as isize) as usize;
                            let srow = &src[rr * cols..(rr + 1) * cols];
                            let drow = &mut dst[r * cols..(r + 1) * cols];
                            for (c, d) in drow.iter_mut().enumerate() {
                                let cc = (c as isize + dc).rem_euclid(cols as isize) as usize;
                                *d += w * srow[cc];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact adjoint of `apply_g − I`.
pub fn adjoint_of_g_minus_i(ksp: &ComplexArray, kern: &SpiritKernel) -> Result<ComplexArray> {
    kern.check_coils(ksp)?;
    let nc = kern.n_coils();
    let (rows, cols) = ksp.spatial();
    let (kr, kc) = kern.kernel_size();
    let (hr, hc) = ((kr / 2) as isize, (kc / 2) as isize);
    let mut out = ComplexArray::zeros(ksp.shape());
    out.data_mut()
        .par_chunks_mut(rows * cols)
        .enumerate()
        .for_each(|(s, dst)| {
            for (d, v) in dst.iter_mut().zip(ksp.slice(s)) {
                *d = -v;
            }
            for t in 0..nc {
                let src = ksp.slice(t);
                for i in 0..kr {
                    let dr = i as isize - hr;
                    for j in 0..kc {
                        let w = kern.weight(t, s, i, j).conj();
                        if w == ZERO {
                            continue;
                        }
                        let dc = j as isize - hc;
                        for r in 0..rows {
                            let rr = (r as isize - dr).rem_euclid(rows as isize) as usize;
                            let srow = &src[rr * cols..(rr + 1) * cols];
                            let drow = &mut dst[r * cols..(r + 1) * cols];
                            for (c, d) in drow.iter_mut().enumerate() {
                                let cc = (c as isize - dc).rem_euclid(cols as isize) as usize;
                                *d += w * srow[cc];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Ψ by its definition: FFT, (G − I), its adjoint, inverse FFT.
pub fn apply_psi(xc: &ComplexArray, kern: &SpiritKernel) -> Result<ComplexArray> {
    kern.check_coils(xc)?;
    let k = xc.fft2c()?;
    let mut r = apply_g(&k, kern)?;
    r -= &k;
    adjoint_of_g_minus_i(&r, kern)?.ifft2c()
}

/// Ψ precomputed as one Hermitian `nc x nc` matrix per pixel.
///
/// Circular k-space correlation is diagonal in the image domain, so
/// `F⁻¹ G F` acts on each pixel's coil vector as a small matrix `W(p)` and
/// `Ψ(p) = (W(p) − I)ᴴ (W(p) − I)`.
#[derive(Clone, Debug)]
pub struct PsiOperator {
    nc: usize,
    rows: usize,
    cols: usize,
    // per pixel, row-major nc x nc
    psi: Vec<Complex64>,
}

impl PsiOperator {
    pub fn new(kern: &SpiritKernel, spatial: (usize, usize)) -> Result<Self> {
        let nc = kern.n_coils();
        let (rows, cols) = spatial;
        let npix = rows * cols;
        // W_ts(p): response of G restricted to source s, read on target t, to a flat image
        let mut w = vec![ZERO; npix * nc * nc];
        for s in 0..nc {
            let mut probe = ComplexArray::zeros(&[nc, rows, cols]);
            probe.slice_mut(s).fill(Complex64::new(1.0, 0.0));
            let resp = apply_g(&probe.fft2c()?, kern)?.ifft2c()?;
            for t in 0..nc {
                for (p, v) in resp.slice(t).iter().enumerate() {
                    w[p * nc * nc + t * nc + s] = *v;
                }
            }
        }
        let mut psi = vec![ZERO; npix * nc * nc];
        psi.par_chunks_mut(nc * nc).enumerate().for_each(|(p, out)| {
            let wp = &w[p * nc * nc..(p + 1) * nc * nc];
            let e = |t: usize, s: usize| wp[t * nc + s] - if t == s { Complex64::new(1.0, 0.0) } else { ZERO };
            for a in 0..nc {
                for b in a..nc {
                    let v: Complex64 = (0..nc).map(|t| e(t, a).conj() * e(t, b)).sum();
                    out[a * nc + b] = v;
                    out[b * nc + a] = v.conj();
                }
                out[a * nc + a].im = 0.0;
            }
        });
        Ok(PsiOperator { nc, rows, cols, psi })
    }

    pub fn n_coils(&self) -> usize {
        self.nc
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn apply(&self, xc: &ComplexArray) -> Result<ComplexArray> {
        let expected = [self.nc, self.rows, self.cols];
        if xc.shape() != expected {
            return Err(Error::shape(&expected, xc.shape()));
        }
        let nc = self.nc;
        let npix = self.rows * self.cols;
        let src = xc.data();
        let mut out = ComplexArray::zeros(xc.shape());
        let dst = out.data_mut();
        let mut v = vec![ZERO; nc];
        for p in 0..npix {
            for (s, vs) in v.iter_mut().enumerate() {
                *vs = src[s * npix + p];
            }
            let m = &self.psi[p * nc * nc..(p + 1) * nc * nc];
            for a in 0..nc {
                let row = &m[a * nc..(a + 1) * nc];
                dst[a * npix + p] = row.iter().zip(&v).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }

    /// `⟨x, Ψx⟩`, real and non-negative up to rounding.
    pub fn quadratic(&self, xc: &ComplexArray) -> Result<f64> {
        Ok(xc.inner(&self.apply(xc)?)?.re)
    }

    /// Largest eigenvalue of Ψ over all pixels (its operator norm).
    pub fn norm_bound(&self) -> f64 {
        let nc = self.nc;
        self.psi
            .chunks(nc * nc)
            .map(|m| {
                // Gershgorin bound is cheap and tight enough for step sizing
                (0..nc).map(|a| m[a * nc..(a + 1) * nc].iter().map(|v| v.norm()).sum::<f64>()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}
