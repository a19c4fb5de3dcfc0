//! Non-diffusion baselines: zero-filled adjoint reconstruction and the
//! penalized SPIRiT problem
//!
//! ```text
//! min_x  ⟨x, Ψx⟩ + λ_dc ‖M F x − y‖²
//! ```
//!
//! over multi-coil images `x`, solved by conjugate gradients or by explicit
//! gradient descent.

use serde::{Deserialize, Serialize};

use crate::encoding::{adjoint_a, CoilSensitivities, MeasuredData, SamplingMask};
use crate::error::{Error, Result};
use crate::rng;
use crate::spirit::PsiOperator;
use crate::tensor::ComplexArray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicConfig {
    pub lambda_dc: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub step_eta: f64,
    pub step_lambda: f64,
}

impl Default for ClassicConfig {
    fn default() -> Self {
        ClassicConfig { lambda_dc: 1.0, max_iters: 200, tol: 1e-6, step_eta: 0.5, step_lambda: 0.5 }
    }
}

impl ClassicConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_dc >= 0.0
            && self.lambda_dc.is_finite()
            && self.max_iters > 0
            && self.tol > 0.0
            && self.tol < 1.0
            && self.step_eta > 0.0
            && self.step_lambda > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid classic config {self:?}")))
        }
    }
}

/// One row of a solver trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    /// Gradient norm relative to the gradient at the starting point.
    pub grad_rel: f64,
}

#[derive(Clone, Debug)]
pub struct ClassicResult {
    pub coils: ComplexArray,
    pub trace: Vec<IterRecord>,
}

pub fn trace_table(trace: &[IterRecord]) -> String {
    let mut out = String::from("iter\tobjective\tgrad_rel\n");
    for r in trace {
        out.push_str(&format!("{}\t{:.12e}\t{:.6e}\n", r.iter, r.objective, r.grad_rel));
    }
    out
}

pub fn zero_filled(y: &MeasuredData, s: &CoilSensitivities) -> Result<ComplexArray> {
    adjoint_a(&y.y, s, &y.mask)
}

/// `F⁻¹ M F x`, the data-consistency normal operator on coil images.
fn masked_normal(x: &ComplexArray, mask: &SamplingMask) -> Result<ComplexArray> {
    let mut k = x.fft2c()?;
    mask.apply_in_place(&mut k);
    k.ifft2c()
}

fn check_inputs(y: &MeasuredData, psi: &PsiOperator) -> Result<()> {
    let (rows, cols) = psi.spatial();
    let expected = [psi.n_coils(), rows, cols];
    if y.y.shape() != expected {
        return Err(Error::shape(&expected, y.y.shape()));
    }
    Ok(())
}

/// `⟨x, Ψx⟩ + λ ‖M F x − y‖²`.
pub fn spirit_objective(x: &ComplexArray, y: &MeasuredData, psi: &PsiOperator, lambda_dc: f64) -> Result<f64> {
    let mut r = x.fft2c()?;
    y.mask.apply_in_place(&mut r);
    r -= &y.y;
    Ok(psi.quadratic(x)? + lambda_dc * r.norm_sqr())
}

/// Conjugate gradients on `(Ψ + λ F⁻¹MF) x = λ F⁻¹ y`, started from the
/// zero-filled coil images.
pub fn cg_spirit(y: &MeasuredData, psi: &PsiOperator, cfg: &ClassicConfig) -> Result<ClassicResult> {
    cfg.validate()?;
    check_inputs(y, psi)?;
    let lambda = cfg.lambda_dc;
    let h = |v: &ComplexArray| -> Result<ComplexArray> {
        let mut out = psi.apply(v)?;
        if lambda > 0.0 {
            out.axpy(lambda, &masked_normal(v, &y.mask)?);
        }
        Ok(out)
    };
    let y_img = y.y.ifft2c()?;
    let b = y_img.scale(lambda);
    let y_energy = y.y.norm_sqr();
    // f(x) = ⟨x,Hx⟩ − 2 Re⟨b,x⟩ + λ‖y‖², valid since y vanishes off the mask
    let objective = |x: &ComplexArray, hx: &ComplexArray| -> Result<f64> {
        Ok(x.inner(hx)?.re - 2.0 * b.inner(x)?.re + lambda * y_energy)
    };

    let mut x = y_img;
    let mut hx = h(&x)?;
    let mut r = &b - &hx;
    let mut p = r.clone();
    let r0 = r.norm();
    let mut rr = r.norm_sqr();
    let mut f = objective(&x, &hx)?;
    let mut trace = vec![IterRecord { iter: 0, objective: f, grad_rel: 1.0 }];
    if r0 == 0.0 {
        return Ok(ClassicResult { coils: x, trace });
    }
    for iter in 1..=cfg.max_iters {
        let hp = h(&p)?;
        let php = p.inner(&hp)?.re;
        if !(php > 0.0) {
            break;
        }
        let alpha = rr / php;
        x.axpy(alpha, &p);
        hx.axpy(alpha, &hp);
        r.axpy(-alpha, &hp);
        let f_new = objective(&x, &hx)?;
        if !f_new.is_finite() || f_new > f + 1e-8 * f.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                module: "cg_spirit",
                step: iter,
                detail: format!("objective rose from {f:.6e} to {f_new:.6e}\n{}", trace_table(&trace)),
            });
        }
        f = f_new;
        let rr_new = r.norm_sqr();
        let rel = rr_new.sqrt() / r0;
        trace.push(IterRecord { iter, objective: f, grad_rel: rel });
        if rel < cfg.tol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        let mut next = r.clone();
        next.axpy(beta, &p);
        p = next;
    }
    Ok(ClassicResult { coils: x, trace })
}

/// Explicit descent iteration `x ← x − η Ψx − μ F⁻¹ M (M F x − y)` started
/// from the zero-filled coil images.
pub fn gd_spirit(y: &MeasuredData, psi: &PsiOperator, cfg: &ClassicConfig) -> Result<ClassicResult> {
    gd_spirit_from(y, psi, cfg, y.y.ifft2c()?)
}

pub fn gd_spirit_from(y: &MeasuredData, psi: &PsiOperator, cfg: &ClassicConfig, x0: ComplexArray) -> Result<ClassicResult> {
    cfg.validate()?;
    check_inputs(y, psi)?;
    x0.check_same_shape(&y.y)?;
    let (eta, mu) = (cfg.step_eta, cfg.step_lambda);
    // objective whose gradient the iteration follows, up to the factor 2η
    let lambda = mu / eta;
    let y_img = y.y.ifft2c()?;
    let grad = |x: &ComplexArray| -> Result<ComplexArray> {
        let mut g = psi.apply(x)?;
        let mut dc = masked_normal(x, &y.mask)?;
        dc -= &y_img;
        g.axpy(lambda, &dc);
        Ok(g)
    };
    let mut x = x0;
    let mut f = spirit_objective(&x, y, psi, lambda)?;
    let mut g = grad(&x)?;
    let g0 = g.norm();
    let mut trace = vec![IterRecord { iter: 0, objective: f, grad_rel: 1.0 }];
    if g0 == 0.0 {
        return Ok(ClassicResult { coils: x, trace });
    }
    for iter in 1..=cfg.max_iters {
        x.axpy(-eta, &g);
        let f_new = spirit_objective(&x, y, psi, lambda)?;
        if !f_new.is_finite() || f_new > f + 1e-8 * f.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                module: "gd_spirit",
                step: iter,
                detail: format!("objective rose from {f:.6e} to {f_new:.6e}; step too large?"),
            });
        }
        f = f_new;
        g = grad(&x)?;
        let rel = g.norm() / g0;
        trace.push(IterRecord { iter, objective: f, grad_rel: rel });
        if rel < cfg.tol {
            break;
        }
    }
    Ok(ClassicResult { coils: x, trace })
}

/// Largest eigenvalue of a Hermitian PSD operator by power iteration.
pub fn power_iteration(
    op: impl Fn(&ComplexArray) -> Result<ComplexArray>,
    shape: &[usize],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let mut v = rng::complex_normal(&mut rng::stream(seed, 0), shape);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let n = v.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / n);
        let w = op(&v)?;
        lambda = v.inner(&w)?.re;
        v = w;
    }
    Ok(lambda)
}

/// Step sizes `(η, μ)` for `gd_spirit` at penalty `lambda_dc`, a fraction
/// `safety` of the stability limit `2 / ‖Ψ + λ F⁻¹MF‖`.
pub fn safe_gd_steps(psi: &PsiOperator, mask: &SamplingMask, lambda_dc: f64, safety: f64) -> Result<(f64, f64)> {
    let (rows, cols) = psi.spatial();
    let l = power_iteration(
        |v| {
            let mut out = psi.apply(v)?;
            out.axpy(lambda_dc, &masked_normal(v, mask)?);
            Ok(out)
        },
        &[psi.n_coils(), rows, cols],
        100,
        0,
    )?;
    // power iteration approaches from below
    let eta = safety * 2.0 / (1.05 * l);
    Ok((eta, eta * lambda_dc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::sos_combine;
    use crate::simulation::*;
    use crate::spirit::calibrate;
    use crate::tensor::RealImage;

    struct Case {
        x: ComplexArray,
        y: MeasuredData,
        s: CoilSensitivities,
        psi: PsiOperator,
    }

    fn case(n: usize, nc: usize, r: f64) -> Case {
        let x = make_phantom(&PhantomSpec { size: (n, n), kind: PhantomKind::SheppLogan, seed: 1 }).unwrap();
        let s = make_coil_maps((n, n), nc, 2).unwrap();
        let mask = make_mask(
            &MaskSpec {
                pattern: MaskPattern::VariableDensityRandom,
                acceleration: r,
                acs: (16, 16),
                seed: 3,
                density_exponent: 2.0,
            },
            (n, n),
        )
        .unwrap();
        let y = synthesize_measurement(&x, &s, &mask, 0.0, 0).unwrap();
        let acs = mask.acs().extract(&y.y).unwrap();
        let kern = calibrate(&acs, (5, 5), 1e-4).unwrap();
        let psi = PsiOperator::new(&kern, (n, n)).unwrap();
        Case { x, y, s, psi }
    }

    fn nmse(a: &RealImage, b: &RealImage) -> f64 {
        let num: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum();
        num / b.data.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn zero_filled_contracts() {
        let c = case(32, 4, 1.0);
        assert!(zero_filled(&c.y, &c.s).unwrap().max_abs_diff(&c.x) < 1e-10);
        let zero = MeasuredData::new(ComplexArray::zeros(c.y.y.shape()), c.y.mask.clone(), 0.0).unwrap();
        assert_eq!(zero_filled(&zero, &c.s).unwrap().norm(), 0.0);
    }

    #[test]
    fn cg_full_sampling_recovers_phantom() {
        let c = case(32, 4, 1.0);
        let cfg = ClassicConfig { lambda_dc: 1e3, ..Default::default() };
        let out = cg_spirit(&c.y, &c.psi, &cfg).unwrap();
        let truth = RealImage::magnitude(&c.x).unwrap();
        assert!(nmse(&sos_combine(&out.coils).unwrap(), &truth) < 1e-6);
    }

    #[test]
    fn cg_beats_zero_filled_and_is_monotone() {
        let c = case(64, 8, 4.0);
        let cfg = ClassicConfig { lambda_dc: 1.0, max_iters: 300, tol: 1e-8, ..Default::default() };
        let out = cg_spirit(&c.y, &c.psi, &cfg).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective * (1.0 + 1e-10) + 1e-14);
        }
        let truth = RealImage::magnitude(&c.x).unwrap();
        let zf = RealImage::magnitude(&zero_filled(&c.y, &c.s).unwrap()).unwrap();
        let e_cg = nmse(&sos_combine(&out.coils).unwrap(), &truth);
        let e_zf = nmse(&zf, &truth);
        assert!(e_cg <= 0.5 * e_zf, "cg {e_cg} zf {e_zf}");
    }

    #[test]
    fn cg_without_data_term_reduces_psi_energy() {
        let c = case(32, 4, 3.0);
        let cfg = ClassicConfig { lambda_dc: 0.0, max_iters: 20, ..Default::default() };
        let start = c.y.y.ifft2c().unwrap();
        let out = cg_spirit(&c.y, &c.psi, &cfg).unwrap();
        assert!(c.psi.quadratic(&out.coils).unwrap() <= c.psi.quadratic(&start).unwrap());
    }

    #[test]
    fn gd_first_step_is_scaled_adjoint() {
        let c = case(32, 4, 3.0);
        let cfg = ClassicConfig { max_iters: 1, step_eta: 0.3, step_lambda: 0.7, ..Default::default() };
        let out = gd_spirit_from(&c.y, &c.psi, &cfg, ComplexArray::zeros(c.y.y.shape())).unwrap();
        let expect = c.y.y.ifft2c().unwrap().scale(0.7);
        assert!(out.coils.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gd_agrees_with_cg() {
        let c = case(64, 8, 4.0);
        let lambda = 1.0;
        let (eta, mu) = safe_gd_steps(&c.psi, &c.y.mask, lambda, 0.95).unwrap();
        let gd = gd_spirit(
            &c.y,
            &c.psi,
            &ClassicConfig { lambda_dc: lambda, max_iters: 2000, tol: 1e-9, step_eta: eta, step_lambda: mu },
        )
        .unwrap();
        let cg = cg_spirit(&c.y, &c.psi, &ClassicConfig { lambda_dc: lambda, max_iters: 500, tol: 1e-10, ..Default::default() })
            .unwrap();
        let f_gd = spirit_objective(&gd.coils, &c.y, &c.psi, lambda).unwrap();
        let f_cg = spirit_objective(&cg.coils, &c.y, &c.psi, lambda).unwrap();
        assert!((f_gd - f_cg).abs() <= 0.01 * f_cg.abs(), "gd {f_gd} cg {f_cg}");
        assert!(f_cg <= f_gd * (1.0 + 1e-9));
    }

    #[test]
    fn oversized_gd_step_diverges() {
        let c = case(32, 4, 3.0);
        let (eta, mu) = safe_gd_steps(&c.psi, &c.y.mask, 1.0, 1.0).unwrap();
        let err = gd_spirit(
            &c.y,
            &c.psi,
            &ClassicConfig { lambda_dc: 1.0, max_iters: 500, tol: 1e-12, step_eta: 3.0 * eta, step_lambda: 3.0 * mu },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { module: "gd_spirit", .. }));
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let c = case(32, 4, 3.0);
        assert!(cg_spirit(&c.y, &c.psi, &ClassicConfig { tol: 2.0, ..Default::default() }).is_err());
        let other = case(32, 2, 3.0);
        assert!(cg_spirit(&other.y, &c.psi, &ClassicConfig::default()).is_err());
    }
}
