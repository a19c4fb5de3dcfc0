//! Score functions and the denoising score-matching loss
//!
//! ```text
//! E_t E_z ‖σ Sᴴ s(x(t), t) + Sᴴ z‖²,   x(t) = x0 + σ(t) SSᴴ z
//! ```
//!
//! Scores are closed-form Gaussian models, which keeps the optimal score
//! analytic and the loss machinery exactly checkable.

use rayon::prelude::*;
use rand::Rng;

use crate::diffusion::{perturb, NoiseSchedule};
use crate::encoding::{coil_combine, coil_project, CoilSensitivities};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ComplexArray;

/// Lower bound of the uniform time draw in the loss.
pub const T_MIN: f64 = 1e-3;

pub trait ScoreFunction: Send + Sync {
    /// Estimate of the (Wirtinger) score of `p_t` at `xt`.
    fn evaluate(&self, xt: &ComplexArray, t: f64) -> Result<ComplexArray>;
}

impl<F> ScoreFunction for F
where
    F: Fn(&ComplexArray, f64) -> Result<ComplexArray> + Send + Sync,
{
    fn evaluate(&self, xt: &ComplexArray, t: f64) -> Result<ComplexArray> {
        self(xt, t)
    }
}

/// Isotropic Gaussian prior on the coil-combined image, expressed through
/// its coil-consistent mean.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: ComplexArray,
    v0: f64,
}

impl GaussianPrior {
    pub fn new(mean: ComplexArray, v0: f64, s: &CoilSensitivities) -> Result<Self> {
        if !(v0 > 0.0) || !v0.is_finite() {
            return Err(Error::InvalidInput(format!("prior variance must be > 0, got {v0}")));
        }
        let proj = coil_project(&mean, s)?;
        if proj.max_abs_diff(&mean) > 1e-10 * mean.norm().max(1.0) {
            return Err(Error::InvalidInput("prior mean is not coil-consistent".into()));
        }
        Ok(GaussianPrior { mean, v0 })
    }

    pub fn mean(&self) -> &ComplexArray {
        &self.mean
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// `mean + √v0 · S w` with `w ~ CN(0, I)` on the combined image.
    pub fn sample(&self, s: &CoilSensitivities, seed: u64, stream: u64) -> Result<ComplexArray> {
        let (rows, cols) = s.spatial();
        let w = rng::complex_normal(&mut rng::stream(seed, stream), &[rows, cols]);
        let mut x = crate::encoding::coil_expand(&w, s)?.scale(self.v0.sqrt());
        x += &self.mean;
        Ok(x)
    }
}

/// `s(x, t) = −P (x − mean) / (v0 + σ(t)²)` with `P = SSᴴ`, or the identity
/// when no maps are given (scores on combined images).
#[derive(Clone, Debug)]
pub struct LinearScore {
    pub mean: ComplexArray,
    pub v0: f64,
    pub schedule: NoiseSchedule,
    pub maps: Option<CoilSensitivities>,
}

impl LinearScore {
    pub fn variance(&self, t: f64) -> f64 {
        self.v0 + self.schedule.sigma_sq_at(t)
    }
}

impl ScoreFunction for LinearScore {
    fn evaluate(&self, xt: &ComplexArray, t: f64) -> Result<ComplexArray> {
        xt.check_same_shape(&self.mean)?;
        let mut r = xt - &self.mean;
        if let Some(s) = &self.maps {
            r = coil_project(&r, s)?;
        }
        let v = self.variance(t);
        if !(v > 0.0) {
            return Err(Error::InvalidInput(format!("score variance vanishes at t = {t}")));
        }
        Ok(r.scale(-1.0 / v))
    }
}

/// A score multiplied by a constant.
pub struct ScaledScore<'a> {
    pub inner: &'a dyn ScoreFunction,
    pub factor: f64,
}

impl ScoreFunction for ScaledScore<'_> {
    fn evaluate(&self, xt: &ComplexArray, t: f64) -> Result<ComplexArray> {
        Ok(self.inner.evaluate(xt, t)?.scale(self.factor))
    }
}

pub fn analytic_gaussian_score(prior: &GaussianPrior, sched: &NoiseSchedule, s: &CoilSensitivities) -> LinearScore {
    LinearScore { mean: prior.mean.clone(), v0: prior.v0, schedule: sched.clone(), maps: Some(s.clone()) }
}

/// Which algebraic form of the loss residual to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsmForm {
    /// `σ Sᴴ s + Sᴴ z`
    Direct,
    /// `σ Sᴴ SSᴴ s + Sᴴ z`
    Projected,
}

/// Loss contribution of every time draw, averaged over the batch.
///
/// Draw `k` takes its time and noise from RNG stream `k` and shares them
/// across all samples, so the values do not depend on batch order.
pub fn dsm_loss_terms(
    sf: &dyn ScoreFunction,
    batch: &[ComplexArray],
    sched: &NoiseSchedule,
    s: &CoilSensitivities,
    n_time_draws: usize,
    seed: u64,
    form: DsmForm,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if n_time_draws == 0 {
        return Err(Error::InvalidInput("n_time_draws must be >= 1".into()));
    }
    let shape = batch[0].shape().to_vec();
    for x in batch {
        if x.shape() != shape.as_slice() {
            return Err(Error::shape(&shape, x.shape()));
        }
    }
    (0..n_time_draws as u64)
        .into_par_iter()
        .map(|k| {
            let mut prng = rng::stream(seed, k);
            let t: f64 = prng.random_range(T_MIN..=1.0);
            let z = rng::complex_normal(&mut prng, &shape);
            let sigma = sched.sigma_at(t);
            let shz = coil_combine(&z, s)?;
            let mut terms = Vec::with_capacity(batch.len());
            for x0 in batch {
                let xt = perturb(x0, sched, t, s, &z)?;
                let mut score = sf.evaluate(&xt, t)?;
                if form == DsmForm::Projected {
                    score = coil_project(&score, s)?;
                }
                let mut r = coil_combine(&score, s)?.scale(sigma);
                r += &shz;
                terms.push(r.norm_sqr());
            }
            Ok(order_free_sum(terms) / batch.len() as f64)
        })
        .collect()
}

/// Monte-Carlo estimate of the loss with unit time weighting.
pub fn dsm_loss(
    sf: &dyn ScoreFunction,
    batch: &[ComplexArray],
    sched: &NoiseSchedule,
    s: &CoilSensitivities,
    n_time_draws: usize,
    seed: u64,
) -> Result<f64> {
    let terms = dsm_loss_terms(sf, batch, sched, s, n_time_draws, seed, DsmForm::Direct)?;
    Ok(order_free_sum(terms) / n_time_draws as f64)
}

/// Sum that is independent of input order: sorted, then compensated.
fn order_free_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in v {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Fits `m̂` (dataset mean) and `v̂0` (combined-domain variance plus
/// `ridge`), the DSM-optimal parameters of the linear Gaussian family.
pub fn fit_linear_score(
    dataset: &[ComplexArray],
    sched: &NoiseSchedule,
    s: &CoilSensitivities,
    ridge: f64,
) -> Result<LinearScore> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidInput(format!("ridge must be > 0, got {ridge}")));
    }
    let n = dataset.len() as f64;
    let mut mean = ComplexArray::zeros(dataset[0].shape());
    for x in dataset {
        mean.check_same_shape(x)?;
        mean.axpy(1.0 / n, x);
    }
    let support = s.support_count().max(1) as f64;
    let mut energy = Vec::with_capacity(dataset.len());
    for x in dataset {
        energy.push(coil_combine(&(x - &mean), s)?.norm_sqr());
    }
    let v0 = order_free_sum(energy) / (n * support) + ridge;
    Ok(LinearScore { mean, v0, schedule: sched.clone(), maps: Some(s.clone()) })
}
