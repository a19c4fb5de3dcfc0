//! Predictor-corrector sampling with data-consistency guidance, for the
//! SPIRiT-Diffusion process on coil images and for the VE-SDE baseline on
//! coil-combined images.
//!
//! Both samplers walk the grid `t_i = i / N` from `t_N = 1` to `t_0 = 0`. A
//! predictor step from `t_{i+1}` to `t_i` adds the discrete variance
//! increment `Δσ² = σ²(t_{i+1}) − σ²(t_i)` and is followed by `M` Langevin
//! corrector steps at `t_i`. The final predictor step injects no noise, so
//! the chain ends on a denoised estimate.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::encoding::{adjoint_a, coil_combine, coil_expand, coil_project, forward_a, CoilSensitivities, MeasuredData};
use crate::error::{Error, Result};
use crate::rng;
use crate::score::ScoreFunction;
use crate::spirit::PsiOperator;
use crate::tensor::ComplexArray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r: f64,
    pub n_steps: usize,
    pub m_corrector: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { lambda1: 1.0, lambda2: 1.0, r: 0.16, n_steps: 1000, m_corrector: 1, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.lambda1.is_finite()
            && self.lambda2.is_finite()
            && self.r > 0.0
            && self.r.is_finite()
            && self.n_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid sampler config {self:?}")))
        }
    }
}

/// Scalars of one predictor step and its last corrector step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub i: usize,
    pub g_norm: f64,
    pub m_norm: f64,
    pub eps: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// `‖M F x − y‖ / ‖y‖` at the iterate the guidance was computed on.
    pub residual: f64,
}

pub fn trace_table(trace: &[TraceRow]) -> String {
    let mut out = String::from("i\tg_norm\tm_norm\teps\teps1\teps2\tresidual\n");
    for r in trace {
        out.push_str(&format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
            r.i, r.g_norm, r.m_norm, r.eps, r.eps1, r.eps2, r.residual
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub x: ComplexArray,
    pub trace: Vec<TraceRow>,
}

/// Data-consistency direction on coil images: the coil-wise k-space residual
/// `F⁻¹(M F x − y)` combined with `Sᴴ` and re-expanded with `S`.
pub fn guidance_m(xc: &ComplexArray, y: &MeasuredData, s: &CoilSensitivities) -> Result<ComplexArray> {
    Ok(coil_guidance(xc, y, s)?.0)
}

fn coil_guidance(xc: &ComplexArray, y: &MeasuredData, s: &CoilSensitivities) -> Result<(ComplexArray, f64)> {
    xc.check_same_shape(&y.y)?;
    let mut k = xc.fft2c()?;
    y.mask.apply_in_place(&mut k);
    k -= &y.y;
    let resid = k.norm();
    let m = coil_expand(&coil_combine(&k.ifft2c()?, s)?, s)?;
    Ok((m, resid))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// The pieces that differ between the coil-space and combined-image samplers.
struct Chain<'a> {
    module: &'static str,
    shape: Vec<usize>,
    score: &'a dyn ScoreFunction,
    psi: Option<&'a PsiOperator>,
    project: &'a dyn Fn(&ComplexArray) -> Result<ComplexArray>,
    /// Guidance direction and the unnormalized acquired-sample residual.
    guidance: &'a dyn Fn(&ComplexArray) -> Result<(ComplexArray, f64)>,
    y_norm: f64,
}

impl Chain<'_> {
    fn run(&self, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<SampleResult> {
        cfg.validate()?;
        if sched.eta0() > 0.0 && self.psi.is_none() {
            return Err(Error::InvalidInput("η > 0 requires a self-consistency operator".into()));
        }
        let n = cfg.n_steps;
        let dt = 1.0 / n as f64;
        let sigma_sq: Vec<f64> = (0..=n).map(|i| sched.sigma_sq_at(i as f64 * dt)).collect();
        let mut prng = rng::stream(cfg.seed, 0);
        let mut x = (self.project)(&rng::complex_normal(&mut prng, &self.shape))?.scale(sigma_sq[n].sqrt());
        let mut trace = Vec::with_capacity(n);
        let y_norm = if self.y_norm > 0.0 { self.y_norm } else { 1.0 };

        for i in (0..n).rev() {
            let t_next = (i + 1) as f64 * dt;
            let t = i as f64 * dt;
            let eta = sched.eta(t_next);

            // predictor
            let z = rng::complex_normal(&mut prng, &self.shape);
            let g = self.score.evaluate(&x, t_next)?;
            let (m, resid) = (self.guidance)(&x)?;
            let (g_norm, m_norm) = (g.norm(), m.norm());
            let eps = cfg.lambda1 * ratio(g_norm, m_norm);
            let dvar = (sigma_sq[i + 1] - sigma_sq[i]).max(0.0);
            let mut next = x.clone();
            if let (Some(op), true) = (self.psi, eta > 0.0) {
                next.axpy(-0.5 * eta * dt, &op.apply(&x)?);
            }
            let mut dir = g;
            dir.axpy(-eps, &m);
            next.axpy(dvar, &(self.project)(&dir)?);
            // the last predictor step returns its mean
            if i > 0 {
                next.axpy(dvar.sqrt(), &(self.project)(&z)?);
            }
            x = next;
            let mut row = TraceRow { i, g_norm, m_norm, eps, eps1: 0.0, eps2: 0.0, residual: resid / y_norm };

            // corrector
            for _ in 0..cfg.m_corrector {
                let z = rng::complex_normal(&mut prng, &self.shape);
                let g = self.score.evaluate(&x, t)?;
                let (m, _) = (self.guidance)(&x)?;
                let g_norm = g.norm();
                let eps1 = 2.0 * ratio(cfg.r * z.norm(), g_norm).powi(2);
                let eps2 = cfg.lambda2 * ratio(g_norm, m.norm());
                let mut next = x.clone();
                if let (Some(op), true) = (self.psi, eta > 0.0) {
                    next.axpy(-0.5 * eta * dt, &op.apply(&x)?);
                }
                let mut dir = g;
                dir.axpy(-eps2, &m);
                next.axpy(eps1, &(self.project)(&dir)?);
                next.axpy((2.0 * eps1).sqrt(), &(self.project)(&z)?);
                x = next;
                row.eps1 = eps1;
                row.eps2 = eps2;
            }
            if !x.is_finite() {
                return Err(Error::Divergence {
                    module: self.module,
                    step: n - i,
                    detail: format!("non-finite state at t = {t:.4}"),
                });
            }
            trace.push(row);
        }
        Ok(SampleResult { x, trace })
    }
}

/// SPIRiT-Diffusion predictor-corrector sampling on coil images.
pub fn pc_sample(
    score: &dyn ScoreFunction,
    y: &MeasuredData,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<SampleResult> {
    if y.y.shape()[0] != s.n_coils() || y.y.spatial() != s.spatial() {
        return Err(Error::shape(s.maps().shape(), y.y.shape()));
    }
    if let Some(op) = psi {
        if op.n_coils() != s.n_coils() || op.spatial() != s.spatial() {
            return Err(Error::shape(s.maps().shape(), &[op.n_coils(), op.spatial().0, op.spatial().1]));
        }
    }
    let project = |v: &ComplexArray| coil_project(v, s);
    let guidance = |v: &ComplexArray| coil_guidance(v, y, s);
    Chain {
        module: "pc_sample",
        shape: y.y.shape().to_vec(),
        score,
        psi,
        project: &project,
        guidance: &guidance,
        y_norm: y.y.norm(),
    }
    .run(sched, cfg)
}

/// VE-SDE predictor-corrector sampling on the coil-combined image, with
/// guidance `Aᴴ(A x − y)` through the encoding operator.
pub fn ve_sde_sample(
    score: &dyn ScoreFunction,
    y: &MeasuredData,
    s: &CoilSensitivities,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<SampleResult> {
    if y.y.shape()[0] != s.n_coils() || y.y.spatial() != s.spatial() {
        return Err(Error::shape(s.maps().shape(), y.y.shape()));
    }
    if sched.eta0() != 0.0 {
        return Err(Error::InvalidInput("the VE-SDE baseline has no self-consistency drift; set eta0 = 0".into()));
    }
    let (rows, cols) = s.spatial();
    let project = |v: &ComplexArray| Ok(v.clone());
    let guidance = |v: &ComplexArray| -> Result<(ComplexArray, f64)> {
        let mut k = forward_a(v, s, &y.mask)?;
        k -= &y.y;
        let resid = k.norm();
        Ok((adjoint_a(&k, s, &y.mask)?, resid))
    };
    Chain {
        module: "ve_sde_sample",
        shape: vec![rows, cols],
        score,
        psi: None,
        project: &project,
        guidance: &guidance,
        y_norm: y.y.norm(),
    }
    .run(sched, cfg)
}
