//! Diffusion mathematics for a joint state of `N` views: noise schedules, the
//! per-view forward process, the synchronized ancestral (DDPM) and
//! deterministic (DDIM) reverse processes, the training objective, and a
//! closed-form optimal predictor for Gaussian data.
//!
//! Timesteps run `1..=T`; index 0 denotes clean data (`ᾱ_0 = 1`). Joint states
//! are `[N, C, H, W]` tensors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ViewRing;
use crate::tensor::{Real, Rng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid step from t={from} to t={to}")]
    InvalidStep { from: usize, to: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("noise predictor failed: {0}")]
    Predictor(#[source] Box<dyn std::error::Error + Send + Sync>),
}

pub type Result<T, E = SchedulerError> = std::result::Result<T, E>;

/// Linear beta schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::DESK
    }
}

impl ScheduleSpec {
    /// `T = 1000`, β from 1e-4 to 0.02.
    pub const DDPM: Self = Self {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    /// `T = 100` with betas scaled by 10 so that ᾱ_T stays comparable.
    pub const DESK: Self = Self {
        steps: 100,
        beta_start: 1e-3,
        beta_end: 0.2,
    };

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// `beta[t - 1]` for `t in 1..=T`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t in 0..=T`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(SchedulerError::InvalidSchedule(format!(
                "need T ≥ 1 and 0 < beta_start ≤ beta_end < 1, got T={steps}, {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self {
            spec: ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha_bar,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(SchedulerError::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱ_t` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-process standard deviation, with `σ_t² = β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`. Applied to a joint state this noises every
/// view independently.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let a = sched.alpha_bar(t);
    let (s0, s1) = (a.sqrt() as Real, (1.0 - a).sqrt() as Real);
    Ok(x0.zip_map(eps, |x, e| s0 * x + s1 * e)?)
}

/// Reverse-process mean `(x_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let coef = (sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt()) as Real;
    let inv = (1.0 / sched.alpha(t).sqrt()) as Real;
    Ok(x_t.zip_map(eps_hat, |x, e| (x - coef * e) * inv)?)
}

/// What the noise predictor is conditioned on besides the joint state.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    /// Input view `y`, `[C, H, W]`.
    pub input: Option<&'a Tensor>,
    pub ring: Option<&'a ViewRing>,
}

impl<'a> Conditioning<'a> {
    pub fn new(input: &'a Tensor, ring: &'a ViewRing) -> Self {
        Self {
            input: Some(input),
            ring: Some(ring),
        }
    }
}

/// Predicts the noise of every view from the full joint state. One call per
/// reverse step is the synchronization point between views.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Conditioning<'_>) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Conditioning<'_>) -> Result<Tensor> {
        (**self).predict(x_t, t, cond)
    }
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize, _cond: &Conditioning<'_>) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

/// Joint noisy state of all views at a shared timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiviewState {
    pub x: Tensor,
    pub t: usize,
}

fn predict_checked<P: NoisePredictor + ?Sized>(
    predictor: &P,
    state: &MultiviewState,
    cond: &Conditioning<'_>,
) -> Result<Tensor> {
    let eps = predictor.predict(&state.x, state.t, cond)?;
    if eps.shape() != state.x.shape() {
        return Err(SchedulerError::ShapeMismatch {
            expected: state.x.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    Ok(eps)
}

/// Apply one ancestral update given the predicted noise and an optional
/// standard-normal draw `z` (ignored at `t = 1`).
pub fn ddpm_update(x_t: &Tensor, eps_hat: &Tensor, t: usize, z: Option<&Tensor>, sched: &NoiseSchedule) -> Result<Tensor> {
    let mut mean = posterior_mean(x_t, eps_hat, t, sched)?;
    if t > 1 {
        if let Some(z) = z {
            mean.axpy(sched.sigma(t) as Real, z)?;
        }
    }
    Ok(mean)
}

/// One synchronized ancestral step `t → t − 1` for every view at once. The
/// predictor sees the whole joint state; per-view noise is independent.
pub fn ddpm_step<P: NoisePredictor + ?Sized>(
    state: &MultiviewState,
    predictor: &P,
    cond: &Conditioning<'_>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<MultiviewState> {
    sched.check(state.t)?;
    let eps = predict_checked(predictor, state, cond)?;
    let z = (state.t > 1).then(|| Tensor::randn(state.x.shape(), rng));
    Ok(MultiviewState {
        x: ddpm_update(&state.x, &eps, state.t, z.as_ref(), sched)?,
        t: state.t - 1,
    })
}

/// Deterministic update `x_t → x_{t_next}` given ε̂.
pub fn ddim_update(x_t: &Tensor, eps_hat: &Tensor, t: usize, t_next: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if t_next >= t {
        return Err(SchedulerError::InvalidStep { from: t, to: t_next });
    }
    let (a, an) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
    let (sa, s1a) = (a.sqrt() as Real, (1.0 - a).sqrt() as Real);
    let (san, s1an) = (an.sqrt() as Real, (1.0 - an).sqrt() as Real);
    Ok(x_t.zip_map(eps_hat, |x, e| {
        let x0 = (x - s1a * e) / sa;
        san * x0 + s1an * e
    })?)
}

/// One deterministic (η = 0) DDIM step for every view at once.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    state: &MultiviewState,
    predictor: &P,
    cond: &Conditioning<'_>,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<MultiviewState> {
    if t_next >= state.t {
        return Err(SchedulerError::InvalidStep { from: state.t, to: t_next });
    }
    sched.check(state.t)?;
    let eps = predict_checked(predictor, state, cond)?;
    Ok(MultiviewState {
        x: ddim_update(&state.x, &eps, state.t, t_next, sched)?,
        t: t_next,
    })
}

/// Uniform-stride timestep subset `T, T − s, …` of length `steps`, `s = ⌊T / steps⌋`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(SchedulerError::InvalidSchedule(format!("cannot take {steps} DDIM steps out of {total}")));
    }
    let stride = total / steps;
    Ok((0..steps).map(|k| total - k * stride).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    /// Full ancestral chain over all `T` steps.
    Ddpm,
    /// Deterministic chain over a uniform-stride subset.
    Ddim { steps: usize },
}

/// Run the synchronized reverse process from `x_T ~ N(0, I)` down to `t = 0`.
/// `shape` is the joint `[N, C, H, W]` shape.
pub fn sample<P: NoisePredictor + ?Sized>(
    shape: &[usize],
    predictor: &P,
    cond: &Conditioning<'_>,
    sched: &NoiseSchedule,
    sampler: Sampler,
    rng: &mut Rng,
) -> Result<Tensor> {
    let t_max = sched.steps();
    let mut state = MultiviewState {
        x: Tensor::randn(shape, rng),
        t: t_max,
    };
    match sampler {
        Sampler::Ddpm => {
            while state.t > 0 {
                state = ddpm_step(&state, predictor, cond, sched, rng)?;
            }
        }
        Sampler::Ddim { steps } => {
            let ts = ddim_timesteps(t_max, steps)?;
            for (k, &t) in ts.iter().enumerate() {
                debug_assert_eq!(t, state.t);
                let next = ts.get(k + 1).copied().unwrap_or(0);
                state = ddim_step(&state, predictor, cond, next, sched)?;
            }
        }
    }
    Ok(state.x)
}

/// One training draw: a timestep, joint noise, the noised joint state and the
/// view whose noise is regressed.
#[derive(Clone, Debug)]
pub struct TrainingDraw {
    pub t: usize,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub view: usize,
}

/// Sample `t ~ U{1..T}`, `ε ~ N(0, I)` for all views, noise every view, then
/// pick the supervised view uniformly. Draw order is fixed: t, ε, view.
pub fn draw_training_example(x0_all: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<TrainingDraw> {
    let views = x0_all.shape()[0];
    let t = 1 + rng.below(sched.steps());
    let eps = Tensor::randn(x0_all.shape(), rng);
    let x_t = q_sample(x0_all, t, &eps, sched)?;
    let view = rng.below(views);
    Ok(TrainingDraw { t, eps, x_t, view })
}

/// Value of the training objective for one object: mean squared error between
/// the selected view's true noise and its synchronized prediction.
pub fn training_loss<P: NoisePredictor + ?Sized>(
    x0_all: &Tensor,
    predictor: &P,
    cond: &Conditioning<'_>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = draw_training_example(x0_all, sched, rng)?;
    let state = MultiviewState {
        x: draw.x_t.clone(),
        t: draw.t,
    };
    let eps_hat = predict_checked(predictor, &state, cond)?;
    let (e, p) = (draw.eps.index_axis0(draw.view), eps_hat.index_axis0(draw.view));
    let n = e.len() as f64;
    Ok(e.data().iter().zip(p.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n)
}

/// Optimal noise prediction for `x0 ~ N(0, Σ)` over the flattened joint state:
/// `ε* = (x_t − √ᾱ_t · E[x0 | x_t]) / √(1 − ᾱ_t)` with
/// `E[x0 | x_t] = √ᾱ_t · Σ (ᾱ_t Σ + (1 − ᾱ_t) I)⁻¹ x_t`.
pub fn gaussian_oracle(x_t: &Tensor, t: usize, covariance: &DMatrix<f64>, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let m = x_t.len();
    if covariance.nrows() != m || covariance.ncols() != m {
        return Err(SchedulerError::ShapeMismatch {
            expected: vec![m, m],
            got: vec![covariance.nrows(), covariance.ncols()],
        });
    }
    check_spd(covariance)?;
    let a = sched.alpha_bar(t);
    let system = covariance * a + DMatrix::identity(m, m) * (1.0 - a);
    let chol = system.cholesky().ok_or(SchedulerError::NotPositiveDefinite)?;
    let x = DVector::from_iterator(m, x_t.data().iter().map(|&v| v as f64));
    let x0_mean = covariance * chol.solve(&x) * a.sqrt();
    let eps = (x - x0_mean * a.sqrt()) / (1.0 - a).sqrt();
    Ok(Tensor::new(x_t.shape(), eps.iter().map(|&v| v as Real).collect())?)
}

fn check_spd(covariance: &DMatrix<f64>) -> Result<()> {
    let asym = (covariance - covariance.transpose()).abs().max();
    if asym > 1e-12 * covariance.abs().max().max(1.0) || covariance.clone().cholesky().is_none() {
        return Err(SchedulerError::NotPositiveDefinite);
    }
    Ok(())
}

/// [`gaussian_oracle`] with the per-timestep linear map precomputed, usable as
/// a [`NoisePredictor`] over a fixed joint shape.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    maps: Vec<DMatrix<f64>>,
}

impl GaussianOracle {
    pub fn new(covariance: &DMatrix<f64>, sched: &NoiseSchedule) -> Result<Self> {
        check_spd(covariance)?;
        let m = covariance.nrows();
        let eye = DMatrix::<f64>::identity(m, m);
        let maps = (1..=sched.steps())
            .map(|t| {
                let a = sched.alpha_bar(t);
                let system = covariance * a + &eye * (1.0 - a);
                let inv = system.cholesky().ok_or(SchedulerError::NotPositiveDefinite)?.inverse();
                // ε* = (I − ᾱ Σ S⁻¹) x / √(1−ᾱ)
                Ok((&eye - covariance * inv * a) / (1.0 - a).sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }

    /// Oracle that ignores cross-view covariance: each view is denoised as if
    /// it were independent of the others. `covariance` is over the joint
    /// vector of `views` equally sized blocks.
    pub fn independent(covariance: &DMatrix<f64>, views: usize, sched: &NoiseSchedule) -> Result<Self> {
        let m = covariance.nrows();
        let block = m / views;
        let mut diag = DMatrix::zeros(m, m);
        for v in 0..views {
            let r = v * block..(v + 1) * block;
            diag.view_mut((r.start, r.start), (block, block))
                .copy_from(&covariance.view((r.start, r.start), (block, block)));
        }
        Self::new(&diag, sched)
    }
}

impl NoisePredictor for GaussianOracle {
    fn predict(&self, x_t: &Tensor, t: usize, _cond: &Conditioning<'_>) -> Result<Tensor> {
        let map = self.maps.get(t.wrapping_sub(1)).ok_or(SchedulerError::TimestepOutOfRange {
            t,
            max: self.maps.len(),
        })?;
        if map.ncols() != x_t.len() {
            return Err(SchedulerError::ShapeMismatch {
                expected: vec![map.ncols()],
                got: x_t.shape().to_vec(),
            });
        }
        let x: Vec<f64> = x_t.data().iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0; x.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let row = map.row(i);
            *o = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() as Real;
        }
        Ok(Tensor::new(x_t.shape(), out)?)
    }
}

/// Covariance of `views` images of `pixels` values each, unit marginal
/// variance, independent pixels, and correlation `rho` between the same pixel
/// in any two views.
pub fn cross_view_covariance(views: usize, pixels: usize, rho: f64) -> DMatrix<f64> {
    let m = views * pixels;
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else if i % pixels == j % pixels {
            rho
        } else {
            0.0
        }
    })
}

/// Pooled Pearson correlation between the same pixel of views 0 and 1 over a
/// set of joint samples `[N, ...]`.
pub fn cross_view_correlation(samples: &[Tensor]) -> f64 {
    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let (a, b) = (s.index_axis0(0), s.index_axis0(1));
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x as f64, y as f64);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
            n += 1.0;
        }
    }
    let cov = sab / n - (sa / n) * (sb / n);
    let va = saa / n - (sa / n).powi(2);
    let vb = sbb / n - (sb / n).powi(2);
    cov / (va * vb).sqrt()
}
