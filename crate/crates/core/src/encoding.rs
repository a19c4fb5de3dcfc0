//! Multi-coil encoding operator `A = M F S`, its adjoint, and coil handling.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{ComplexArray, RealImage};

/// Per-pixel coil weights normalized so that `S^H S = I` on the support.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    maps: ComplexArray,
    support: Vec<bool>,
}

impl CoilSensitivities {
    /// Normalizes raw maps pixelwise. Pixels whose total sensitivity vanishes
    /// get all-zero maps and are excluded from the support.
    pub fn from_raw(raw: ComplexArray) -> Result<Self> {
        if raw.rank() != 3 {
            return Err(Error::InvalidInput(format!(
                "coil maps must be (coil, row, col), got {:?}",
                raw.shape()
            )));
        }
        raw.check_finite("coil maps")?;
        let nc = raw.shape()[0];
        if nc == 0 {
            return Err(Error::InvalidInput("coil count must be >= 1".into()));
        }
        let (rows, cols) = raw.spatial();
        let npix = rows * cols;
        let mut energy = vec![0.0; npix];
        for c in 0..nc {
            for (e, v) in energy.iter_mut().zip(raw.slice(c)) {
                *e += v.norm_sqr();
            }
        }
        let peak = energy.iter().cloned().fold(0.0, f64::max);
        let floor = peak * 1e-24;
        let support: Vec<bool> = energy.iter().map(|&e| e > floor && e > 0.0).collect();
        let mut maps = raw;
        for c in 0..nc {
            let slice = maps.slice_mut(c);
            for p in 0..npix {
                slice[p] = if support[p] {
                    slice[p] / energy[p].sqrt()
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
        }
        Ok(CoilSensitivities { maps, support })
    }

    pub fn maps(&self) -> &ComplexArray {
        &self.maps
    }

    pub fn n_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.maps.spatial()
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn support_count(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    fn check_image(&self, x: &ComplexArray) -> Result<()> {
        let (r, c) = self.spatial();
        if x.shape() != [r, c] {
            return Err(Error::shape(&[r, c], x.shape()));
        }
        Ok(())
    }

    fn check_coils(&self, xc: &ComplexArray) -> Result<()> {
        if xc.shape() != self.maps.shape() {
            return Err(Error::shape(self.maps.shape(), xc.shape()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcsRegion {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl AcsRegion {
    /// Centred block of the given size in a `rows x cols` k-space grid.
    pub fn centered(grid: (usize, usize), size: (usize, usize)) -> Result<Self> {
        if size.0 > grid.0 || size.1 > grid.1 {
            return Err(Error::InvalidInput(format!(
                "ACS {size:?} larger than k-space {grid:?}"
            )));
        }
        Ok(AcsRegion {
            row0: grid.0 / 2 - size.0 / 2,
            col0: grid.1 / 2 - size.1 / 2,
            rows: size.0,
            cols: size.1,
        })
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row0 && r < self.row0 + self.rows && c >= self.col0 && c < self.col0 + self.cols
    }

    /// Copies the ACS block out of (coil, row, col) k-space.
    pub fn extract(&self, ksp: &ComplexArray) -> Result<ComplexArray> {
        let (rows, cols) = ksp.spatial();
        if self.row0 + self.rows > rows || self.col0 + self.cols > cols {
            return Err(Error::InvalidInput("ACS region exceeds k-space".into()));
        }
        let nc = ksp.n_slices();
        let mut out = ComplexArray::zeros(&[nc, self.rows, self.cols]);
        for c in 0..nc {
            let src = ksp.slice(c);
            let dst = out.slice_mut(c);
            for r in 0..self.rows {
                let s = (self.row0 + r) * cols + self.col0;
                dst[r * self.cols..(r + 1) * self.cols].copy_from_slice(&src[s..s + self.cols]);
            }
        }
        Ok(out)
    }
}

/// Dense binary Cartesian sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    acs: AcsRegion,
}

impl SamplingMask {
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>, acs: AcsRegion) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(Error::InvalidInput("mask length does not match extents".into()));
        }
        if acs.row0 + acs.rows > rows || acs.col0 + acs.cols > cols {
            return Err(Error::InvalidInput("ACS region exceeds mask".into()));
        }
        for r in acs.row0..acs.row0 + acs.rows {
            for c in acs.col0..acs.col0 + acs.cols {
                if !mask[r * cols + c] {
                    return Err(Error::InvalidInput(format!(
                        "ACS entry ({r}, {c}) is not sampled"
                    )));
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("mask samples no points".into()));
        }
        Ok(SamplingMask { rows, cols, mask, acs })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        SamplingMask {
            rows,
            cols,
            mask: vec![true; rows * cols],
            acs: AcsRegion { row0: 0, col0: 0, rows, cols },
        }
    }

    /// Reads a mask stored as a complex array (nonzero real part = sampled).
    pub fn from_array(x: &ComplexArray, acs: AcsRegion) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::InvalidInput("mask tensor must be 2D".into()));
        }
        let (r, c) = x.spatial();
        Self::new(r, c, x.data().iter().map(|v| v.re != 0.0).collect(), acs)
    }

    pub fn to_array(&self) -> ComplexArray {
        ComplexArray::from_fn2(self.rows, self.cols, |r, c| {
            Complex64::new(if self.mask[r * self.cols + c] { 1.0 } else { 0.0 }, 0.0)
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn acs(&self) -> AcsRegion {
        self.acs
    }

    pub fn is_sampled(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn acceleration(&self) -> f64 {
        (self.rows * self.cols) as f64 / self.popcount() as f64
    }

    /// Zeroes unsampled locations of every slice in place.
    pub fn apply_in_place(&self, ksp: &mut ComplexArray) {
        debug_assert_eq!(ksp.spatial(), (self.rows, self.cols));
        for s in 0..ksp.n_slices() {
            for (v, &m) in ksp.slice_mut(s).iter_mut().zip(&self.mask) {
                if !m {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    pub fn apply(&self, ksp: &ComplexArray) -> ComplexArray {
        let mut out = ksp.clone();
        self.apply_in_place(&mut out);
        out
    }
}

/// Undersampled multi-coil k-space together with its mask.
#[derive(Clone, Debug)]
pub struct MeasuredData {
    pub y: ComplexArray,
    pub mask: SamplingMask,
    pub noise_std: f64,
}

impl MeasuredData {
    pub fn new(y: ComplexArray, mask: SamplingMask, noise_std: f64) -> Result<Self> {
        if y.rank() != 3 || y.spatial() != (mask.rows(), mask.cols()) {
            return Err(Error::shape(&[0, mask.rows(), mask.cols()], y.shape()));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidInput("noise_std must be >= 0".into()));
        }
        y.check_finite("measured k-space")?;
        for s in 0..y.n_slices() {
            for (v, &m) in y.slice(s).iter().zip(mask.values()) {
                if !m && *v != Complex64::new(0.0, 0.0) {
                    return Err(Error::InvalidInput(
                        "measured k-space is nonzero at an unsampled location".into(),
                    ));
                }
            }
        }
        Ok(MeasuredData { y, mask, noise_std })
    }

    pub fn n_coils(&self) -> usize {
        self.y.shape()[0]
    }
}

/// Coil images `s_c * x`.
pub fn coil_expand(x: &ComplexArray, s: &CoilSensitivities) -> Result<ComplexArray> {
    s.check_image(x)?;
    let nc = s.n_coils();
    let (r, c) = s.spatial();
    let mut out = ComplexArray::zeros(&[nc, r, c]);
    for k in 0..nc {
        let maps = s.maps.slice(k);
        for ((o, m), v) in out.slice_mut(k).iter_mut().zip(maps).zip(x.data()) {
            *o = m * v;
        }
    }
    Ok(out)
}

/// `sum_c conj(s_c) * x_c`.
pub fn coil_combine(xc: &ComplexArray, s: &CoilSensitivities) -> Result<ComplexArray> {
    s.check_coils(xc)?;
    let (r, c) = s.spatial();
    let mut out = ComplexArray::zeros(&[r, c]);
    for k in 0..s.n_coils() {
        let maps = s.maps.slice(k);
        for ((o, m), v) in out.data_mut().iter_mut().zip(maps).zip(xc.slice(k)) {
            *o += m.conj() * v;
        }
    }
    Ok(out)
}

/// Orthogonal projection `S S^H` onto coil-consistent images.
pub fn coil_project(xc: &ComplexArray, s: &CoilSensitivities) -> Result<ComplexArray> {
    coil_expand(&coil_combine(xc, s)?, s)
}

pub fn forward_a(x: &ComplexArray, s: &CoilSensitivities, mask: &SamplingMask) -> Result<ComplexArray> {
    check_mask(s, mask)?;
    let mut k = coil_expand(x, s)?.fft2c()?;
    mask.apply_in_place(&mut k);
    Ok(k)
}

pub fn adjoint_a(y: &ComplexArray, s: &CoilSensitivities, mask: &SamplingMask) -> Result<ComplexArray> {
    check_mask(s, mask)?;
    s.check_coils(y)?;
    coil_combine(&mask.apply(y).ifft2c()?, s)
}

fn check_mask(s: &CoilSensitivities, mask: &SamplingMask) -> Result<()> {
    if s.spatial() != (mask.rows(), mask.cols()) {
        return Err(Error::shape(
            &[s.spatial().0, s.spatial().1],
            &[mask.rows(), mask.cols()],
        ));
    }
    Ok(())
}

/// Root-sum-of-squares coil combination.
pub fn sos_combine(xc: &ComplexArray) -> Result<RealImage> {
    if xc.rank() != 3 {
        return Err(Error::InvalidInput(format!(
            "sos_combine expects (coil, row, col), got {:?}",
            xc.shape()
        )));
    }
    let (r, c) = xc.spatial();
    let mut acc = vec![0.0; r * c];
    for k in 0..xc.n_slices() {
        for (a, v) in acc.iter_mut().zip(xc.slice(k)) {
            *a += v.norm_sqr();
        }
    }
    RealImage::new(r, c, acc.into_iter().map(f64::sqrt).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_maps(nc: usize, n: usize, seed: u64) -> CoilSensitivities {
        CoilSensitivities::from_raw(rng::complex_normal(&mut rng::stream(seed, 0), &[nc, n, n])).unwrap()
    }

    fn rel_adjoint_gap(lhs: Complex64, rhs: Complex64, a: f64, b: f64) -> f64 {
        (lhs - rhs).norm() / (a * b)
    }

    #[test]
    fn normalization_and_support() {
        let mut raw = rng::complex_normal(&mut rng::stream(1, 0), &[3, 4, 4]);
        for k in 0..3 {
            raw.slice_mut(k)[5] = Complex64::new(0.0, 0.0);
        }
        let s = CoilSensitivities::from_raw(raw).unwrap();
        assert!(!s.support()[5]);
        assert_eq!(s.support_count(), 15);
        for p in 0..16 {
            let e: f64 = (0..3).map(|k| s.maps().slice(k)[p].norm_sqr()).sum();
            let want = if p == 5 { 0.0 } else { 1.0 };
            assert!((e - want).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_combine_identities() {
        let s = random_maps(4, 6, 2);
        let x = rng::complex_normal(&mut rng::stream(3, 0), &[6, 6]);
        let back = coil_combine(&coil_expand(&x, &s).unwrap(), &s).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        let zero = coil_expand(&ComplexArray::zeros(&[6, 6]), &s).unwrap();
        assert_eq!(zero.norm(), 0.0);
        let one = CoilSensitivities::from_raw(ComplexArray::from_real(&[1, 6, 6], &[2.0; 36]).unwrap()).unwrap();
        assert!(coil_expand(&x, &one).unwrap().reshape(vec![6, 6]).unwrap().max_abs_diff(&x) < 1e-15);
        assert!(coil_expand(&ComplexArray::zeros(&[5, 6]), &s).is_err());
    }

    #[test]
    fn combine_is_adjoint_of_expand() {
        let s = random_maps(3, 8, 4);
        let mut r = rng::stream(5, 0);
        for _ in 0..20 {
            let x = rng::complex_normal(&mut r, &[8, 8]);
            let yc = rng::complex_normal(&mut r, &[3, 8, 8]);
            let lhs = coil_expand(&x, &s).unwrap().inner(&yc).unwrap();
            let rhs = x.inner(&coil_combine(&yc, &s).unwrap()).unwrap();
            assert!(rel_adjoint_gap(lhs, rhs, x.norm(), yc.norm()) < 1e-12);
        }
    }

    #[test]
    fn projector_properties() {
        let s = random_maps(4, 8, 6);
        let z = rng::complex_normal(&mut rng::stream(7, 0), &[4, 8, 8]);
        let pz = coil_project(&z, &s).unwrap();
        assert!(coil_project(&pz, &s).unwrap().max_abs_diff(&pz) < 1e-12);
        assert!(pz.norm() <= z.norm());
        let w = rng::complex_normal(&mut rng::stream(8, 0), &[4, 8, 8]);
        let a = pz.inner(&w).unwrap();
        let b = z.inner(&coil_project(&w, &s).unwrap()).unwrap();
        assert!((a - b).norm() < 1e-10 * z.norm() * w.norm());
    }

    #[test]
    fn forward_reduces_to_fft_for_trivial_setup() {
        let s = CoilSensitivities::from_raw(ComplexArray::from_real(&[1, 8, 8], &[1.0; 64]).unwrap()).unwrap();
        let x = rng::complex_normal(&mut rng::stream(9, 0), &[8, 8]);
        let k = forward_a(&x, &s, &SamplingMask::full(8, 8)).unwrap();
        let f = x.fft2c().unwrap();
        assert!(k.reshape(vec![8, 8]).unwrap().max_abs_diff(&f) < 1e-14);
    }

    #[test]
    fn forward_adjoint_pair() {
        let s = random_maps(3, 8, 10);
        let mut m = vec![false; 64];
        for (i, v) in m.iter_mut().enumerate() {
            *v = i % 3 == 0;
        }
        for r in 3..5 {
            for c in 3..5 {
                m[r * 8 + c] = true;
            }
        }
        let mask = SamplingMask::new(8, 8, m, AcsRegion { row0: 3, col0: 3, rows: 2, cols: 2 }).unwrap();
        let mut r = rng::stream(11, 0);
        for _ in 0..20 {
            let x = rng::complex_normal(&mut r, &[8, 8]);
            let y = rng::complex_normal(&mut r, &[3, 8, 8]);
            let ax = forward_a(&x, &s, &mask).unwrap();
            for k in 0..3 {
                for (p, v) in ax.slice(k).iter().enumerate() {
                    if !mask.values()[p] {
                        assert_eq!(*v, Complex64::new(0.0, 0.0));
                    }
                }
            }
            let lhs = ax.inner(&y).unwrap();
            let rhs = x.inner(&adjoint_a(&y, &s, &mask).unwrap()).unwrap();
            assert!(rel_adjoint_gap(lhs, rhs, x.norm(), y.norm()) < 1e-12);
        }
    }

    #[test]
    fn sos_examples() {
        let xc = ComplexArray::new(
            vec![2, 1, 1],
            vec![Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)],
        )
        .unwrap();
        assert!((sos_combine(&xc).unwrap().data[0] - 5.0).abs() < 1e-15);
        let z = rng::complex_normal(&mut rng::stream(12, 0), &[3, 4, 4]);
        let mut rotated = z.clone();
        for k in 0..3 {
            let ph = Complex64::from_polar(1.0, 0.7 * k as f64 + 0.1);
            for v in rotated.slice_mut(k) {
                *v *= ph;
            }
        }
        let a = sos_combine(&z).unwrap();
        let b = sos_combine(&rotated).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-14);
        }
        let first = ComplexArray::new(vec![1, 4, 4], z.slice(0).to_vec()).unwrap();
        let single = sos_combine(&first).unwrap();
        for (u, v) in single.data.iter().zip(z.slice(0)) {
            assert!((u - v.norm()).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_validation() {
        let acs = AcsRegion::centered((8, 8), (2, 2)).unwrap();
        assert_eq!((acs.row0, acs.col0), (3, 3));
        assert!(SamplingMask::new(8, 8, vec![false; 64], acs).is_err());
        let full = SamplingMask::full(8, 8);
        assert_eq!(full.acceleration(), 1.0);
        let y = ComplexArray::from_real(&[1, 8, 8], &[1.0; 64]).unwrap();
        let mut m = vec![true; 64];
        m[0] = false;
        let mask = SamplingMask::new(8, 8, m, acs).unwrap();
        assert!(MeasuredData::new(y.clone(), mask.clone(), 0.0).is_err());
        assert!(MeasuredData::new(mask.apply(&y), mask, 0.0).is_ok());
    }
}
