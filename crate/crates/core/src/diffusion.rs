//! Noise schedule, the forward SPIRiT-Diffusion SDE
//!
//! ```text
//! dx = (η/2) Ψ(x) dt + √β SSᴴ dw
//! ```
//!
//! its closed-form perturbation kernel `N(x(0), σ(t)² SSᴴ)`, and
//! Euler–Maruyama integrators in both time directions.
//!
//! Noise is circularly-symmetric complex with `E|z|² = 1`, and `σ(t)²` is the
//! complex variance `E|x(t) − x(0)|²` per unit of `SSᴴ`. In those units an
//! SDE step of length `Δt` injects `√(β Δt / 2) SSᴴ z`, and scores are
//! Wirtinger derivatives (`−(x − μ)/v` for `CN(μ, v)`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{coil_project, CoilSensitivities};
use crate::error::{Error, Result};
use crate::rng;
use crate::spirit::PsiOperator;
use crate::tensor::ComplexArray;

/// Trapezoid intervals used for σ quadrature over [0, 1].
pub const QUAD_NODES: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub eta0: f64,
    pub n_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { beta_min: 0.01, beta_max: 348.0, eta0: 0.0, n_steps: 1000 }
    }
}

/// Linear `β(t)`, constant `η`, and `σ` tabulated on the grid `t_i = i / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // σ² at t_i, i = 0..=N
    sigma_sq_table: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { beta_min, beta_max, eta0, n_steps } = params;
        let finite = beta_min.is_finite() && beta_max.is_finite() && eta0.is_finite();
        if !finite || beta_min < 0.0 || beta_max < 0.0 || eta0 < 0.0 || n_steps == 0 {
            return Err(Error::InvalidInput(format!("invalid noise schedule {params:?}")));
        }
        let mut sched = NoiseSchedule { params, sigma_sq_table: Vec::with_capacity(n_steps + 1) };
        // I(t_{i+1}) = e^{η h} I(t_i) + ∫_{t_i}^{t_{i+1}} β(τ) e^{η(t_{i+1}−τ)} dτ
        let h = 1.0 / n_steps as f64;
        let sub = (QUAD_NODES.div_ceil(n_steps).max(2) + 1) & !1;
        let mut acc = 0.0;
        sched.sigma_sq_table.push(0.0);
        for i in 0..n_steps {
            let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
            acc = acc * (eta0 * h).exp() + sched.simpson(a, b, b, sub);
            sched.sigma_sq_table.push(0.5 * acc);
        }
        Ok(sched)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    pub fn eta0(&self) -> f64 {
        self.params.eta0
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.params.beta_min + t * (self.params.beta_max - self.params.beta_min)
    }

    pub fn eta(&self, _t: f64) -> f64 {
        self.params.eta0
    }

    /// `∫_a^b β(τ) e^{η(t−τ)} dτ` by the trapezoid rule with `n` intervals.
    fn trapezoid(&self, a: f64, b: f64, t: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let f = |tau: f64| self.beta(tau) * (self.params.eta0 * (t - tau)).exp();
        let inner: f64 = (1..n).map(|k| f(a + k as f64 * h)).sum();
        h * (0.5 * f(a) + inner + 0.5 * f(b))
    }

    /// Same integral by composite Simpson with an even `n`.
    fn simpson(&self, a: f64, b: f64, t: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let f = |tau: f64| self.beta(tau) * (self.params.eta0 * (t - tau)).exp();
        let inner: f64 = (1..n).map(|k| if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h)).sum();
        h / 3.0 * (f(a) + inner + f(b))
    }

    /// `σ(t)² = ½ ∫₀ᵗ β(τ) e^{η(t−τ)} dτ` by fresh quadrature.
    pub fn sigma_sq_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t == 0.0 {
            return 0.0;
        }
        if self.params.eta0 == 0.0 {
            // the trapezoid rule is exact for the linear integrand
            let p = &self.params;
            return 0.5 * (p.beta_min * t + (p.beta_max - p.beta_min) * t * t / 2.0);
        }
        0.5 * self.trapezoid(0.0, t, t, QUAD_NODES)
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        self.sigma_sq_at(t).sqrt()
    }

    /// σ at the grid points `t_i = i / N`, `i = 0..=N`.
    pub fn sigma_table(&self) -> Vec<f64> {
        self.sigma_sq_table.iter().map(|v| v.sqrt()).collect()
    }

    pub fn sigma_sq_grid(&self, i: usize) -> f64 {
        self.sigma_sq_table[i]
    }

    /// Table lookup with linear interpolation of σ² between grid points.
    pub fn sigma_sq_interp(&self, t: f64) -> f64 {
        let n = self.params.n_steps;
        let pos = t.clamp(0.0, 1.0) * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let w = pos - i as f64;
        (1.0 - w) * self.sigma_sq_table[i] + w * self.sigma_sq_table[i + 1]
    }

    pub fn sigma_interp(&self, t: f64) -> f64 {
        self.sigma_sq_interp(t).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub t: f64,
    pub xc: ComplexArray,
}

fn check_psi(sched: &NoiseSchedule, psi: Option<&PsiOperator>) -> Result<()> {
    if sched.eta0() > 0.0 && psi.is_none() {
        return Err(Error::InvalidInput("η > 0 requires a self-consistency operator".into()));
    }
    Ok(())
}

/// `x(t) = x0 + σ(t) SSᴴ z`, one draw from the perturbation kernel.
pub fn perturb(
    x0: &ComplexArray,
    sched: &NoiseSchedule,
    t: f64,
    s: &CoilSensitivities,
    z: &ComplexArray,
) -> Result<ComplexArray> {
    x0.check_same_shape(z)?;
    let mut out = x0.clone();
    let sigma = sched.sigma_at(t);
    if sigma > 0.0 {
        out.axpy(sigma, &coil_project(z, s)?);
    }
    Ok(out)
}

fn em_forward_step(
    x: &mut ComplexArray,
    t: f64,
    dt: f64,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    rng: &mut rng::StreamRng,
) -> Result<()> {
    let eta = sched.eta(t);
    let drift = match psi {
        Some(op) if eta > 0.0 => Some(op.apply(x)?),
        _ => None,
    };
    if let Some(d) = drift {
        x.axpy(0.5 * eta * dt, &d);
    }
    let g = (0.5 * sched.beta(t) * dt).sqrt();
    if g > 0.0 {
        let z = rng::complex_normal(rng, x.shape());
        x.axpy(g, &coil_project(&z, s)?);
    }
    Ok(())
}

fn blowup_limit(x0: &ComplexArray, sched: &NoiseSchedule) -> f64 {
    1e6 * (x0.norm() + sched.sigma_sq_grid(sched.n_steps()).sqrt() * (x0.len() as f64).sqrt() + 1.0)
}

/// Euler–Maruyama on `[0, 1]` with `n_steps` steps; returns every state,
/// starting with `x0` at `t = 0`.
pub fn forward_em(
    x0: &ComplexArray,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<DiffusionState>> {
    let mut traj = Vec::with_capacity(n_steps + 1);
    forward_em_visit(x0, sched, psi, s, n_steps, seed, 0, |st| traj.push(st.clone()))?;
    Ok(traj)
}

/// Terminal state of one forward path drawn from RNG stream `path`.
pub fn forward_em_terminal(
    x0: &ComplexArray,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    n_steps: usize,
    seed: u64,
    path: u64,
) -> Result<ComplexArray> {
    let mut last = None;
    forward_em_visit(x0, sched, psi, s, n_steps, seed, path, |st| {
        if st.t >= 1.0 {
            last = Some(st.xc.clone());
        }
    })?;
    Ok(last.unwrap_or_else(|| x0.clone()))
}

/// Terminal states of `n_paths` independent forward paths, in path order.
pub fn forward_em_paths(
    x0: &ComplexArray,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    n_steps: usize,
    seed: u64,
    n_paths: usize,
) -> Result<Vec<ComplexArray>> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| forward_em_terminal(x0, sched, psi, s, n_steps, seed, p))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn forward_em_visit(
    x0: &ComplexArray,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    n_steps: usize,
    seed: u64,
    path: u64,
    mut visit: impl FnMut(&DiffusionState),
) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be >= 1".into()));
    }
    check_psi(sched, psi)?;
    x0.check_finite("x0")?;
    let limit = blowup_limit(x0, sched);
    let mut rng = rng::stream(seed, path);
    let dt = 1.0 / n_steps as f64;
    let mut state = DiffusionState { t: 0.0, xc: x0.clone() };
    visit(&state);
    for i in 0..n_steps {
        em_forward_step(&mut state.xc, i as f64 * dt, dt, sched, psi, s, &mut rng)?;
        state.t = if i + 1 == n_steps { 1.0 } else { (i + 1) as f64 * dt };
        let norm = state.xc.norm();
        if !norm.is_finite() || norm > limit {
            return Err(Error::Divergence {
                module: "forward_em",
                step: i + 1,
                detail: format!("state norm {norm:.3e} exceeds {limit:.3e}"),
            });
        }
        visit(&state);
    }
    Ok(())
}

/// One reverse-time Euler–Maruyama step from `state.t` to `state.t − dt`:
/// `x ← x − (η/2) Ψx dt + (β/2) dt SSᴴ score + √(β dt / 2) SSᴴ z`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    state: &DiffusionState,
    score_value: &ComplexArray,
    sched: &NoiseSchedule,
    psi: Option<&PsiOperator>,
    s: &CoilSensitivities,
    dt: f64,
    z: &ComplexArray,
) -> Result<DiffusionState> {
    check_psi(sched, psi)?;
    state.xc.check_same_shape(score_value)?;
    state.xc.check_same_shape(z)?;
    let t = state.t;
    let beta = sched.beta(t);
    let eta = sched.eta(t);
    let mut x = state.xc.clone();
    if let (Some(op), true) = (psi, eta > 0.0) {
        x.axpy(-0.5 * eta * dt, &op.apply(&state.xc)?);
    }
    if beta > 0.0 {
        x.axpy(0.5 * beta * dt, &coil_project(score_value, s)?);
        x.axpy((0.5 * beta * dt).sqrt(), &coil_project(z, s)?);
    }
    Ok(DiffusionState { t: (t - dt).max(0.0), xc: x })
}
