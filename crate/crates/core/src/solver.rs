//! Noise schedule and the deterministic second-order multistep DPM-Solver++
//! used both to invert clean latents to noise and to sample them back.
//!
//! Time runs over `[0, 1]`, with `t = 0` the data end (`a = 1`, `σ = 0`).
//! The signal level follows the continuous limit of the scaled-linear β
//! schedule of latent diffusion (`β` from 0.00085 to 0.012 over 1000 training
//! steps). The `T + 1` discretization points are spaced quadratically in `t`,
//! which keeps the step into `σ = 0` second-order accurate.
//!
//! Model outputs are noise predictions `ε̂`; the solver works with the data
//! prediction `D = (x − σ ε̂) / a`. A step from `s` to `t` is
//!
//! ```text
//! first order : x_t = a_t D_s + σ_t ε̂_s
//! second order: x_t = (σ_t/σ_s) x_s − a_t (e^{−h} − 1) (D_s + (D_s − D_prev) / 2r)
//! ```
//!
//! with `h = λ_t − λ_s`, `λ = log(a/σ)`, `r = (λ_s − λ_prev)/h`. The second
//! order form is used whenever all three log-SNRs are finite, so the first
//! step (empty history) and any step touching `σ = 0` are first order.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discretization of `[0, 1]` into solver steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: f64,
    pub spacing: Spacing,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000.0,
            spacing: Spacing::Quadratic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    times: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 25;

    pub fn new(steps: usize, params: ScheduleParams) -> Result<Self> {
        if !(params.beta_start > 0.0 && params.beta_end > params.beta_start && params.train_steps > 0.0) {
            return Err(Error::Config(format!("invalid schedule parameters {params:?}")));
        }
        let times = if steps == 0 {
            vec![0.0]
        } else {
            (0..=steps)
                .map(|i| {
                    let u = i as f64 / steps as f64;
                    match params.spacing {
                        Spacing::Uniform => u,
                        Spacing::Quadratic => u * u,
                    }
                })
                .collect()
        };
        Ok(Self { params, times })
    }

    /// Default latent-diffusion style schedule with `steps` solver steps.
    pub fn scaled_linear(steps: usize) -> Self {
        Self::new(steps, ScheduleParams::default()).expect("default parameters are valid")
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Discretization points, ascending from the data end `t = 0` to `t = 1`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `log ā(t)`, the integral of `log(1 − β)` approximated by `−∫β`.
    fn log_alpha_bar(&self, t: f64) -> f64 {
        let p = self.params.beta_start.sqrt();
        let q = self.params.beta_end.sqrt() - p;
        -self.params.train_steps * (p * p * t + p * q * t * t + q * q * t * t * t / 3.0)
    }

    /// Signal coefficient `a(t)`.
    pub fn alpha(&self, t: f64) -> f64 {
        (0.5 * self.log_alpha_bar(t)).exp()
    }

    /// Noise coefficient `σ(t)`.
    pub fn sigma(&self, t: f64) -> f64 {
        (-self.log_alpha_bar(t).exp_m1()).sqrt()
    }

    /// Half log-SNR `λ = log(a/σ)`; `+∞` at `t = 0`.
    pub fn lambda(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        if s == 0.0 {
            f64::INFINITY
        } else {
            (self.alpha(t) / s).ln()
        }
    }

    fn context(&self, index: usize, step: usize, direction: Direction) -> StepContext {
        let t = self.times[index];
        StepContext {
            step,
            total: self.steps(),
            index,
            t,
            alpha: self.alpha(t),
            sigma: self.sigma(t),
            direction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Noise to data.
    Sampling,
    /// Data to noise.
    Inversion,
}

/// Where a model evaluation happens along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    /// Zero-based step number within the trajectory.
    pub step: usize,
    pub total: usize,
    /// Discretization index of the evaluation point (0 is the data end).
    pub index: usize,
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub direction: Direction,
}

impl StepContext {
    /// Timestep counter used for gating: counts down `total−1, …, 0` over a
    /// sampling run.
    pub fn countdown(&self) -> usize {
        self.total.saturating_sub(self.step + 1)
    }
}

/// A noise-prediction model.
pub trait ScoreModel: Sync {
    fn predict(&self, x: &Tensor, at: &StepContext) -> Result<Tensor>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn predict(&self, x: &Tensor, at: &StepContext) -> Result<Tensor> {
        (**self).predict(x, at)
    }
}

/// Closed-form optimal noise predictor for data `x₀ ~ N(0, v·I)`:
/// `ε̂(x, t) = σ x / (a² v + σ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianScoreModel {
    variance: f64,
}

impl GaussianScoreModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("data variance must be positive, got {variance}")));
        }
        Ok(Self { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn predict_at(&self, x: &Tensor, alpha: f64, sigma: f64) -> Tensor {
        let k = sigma / (alpha * alpha * self.variance + sigma * sigma);
        x.scale(k)
    }
}

pub fn gaussian_score_model(data_variance: f64) -> Result<GaussianScoreModel> {
    GaussianScoreModel::new(data_variance)
}

impl ScoreModel for GaussianScoreModel {
    fn predict(&self, x: &Tensor, at: &StepContext) -> Result<Tensor> {
        Ok(self.predict_at(x, at.alpha, at.sigma))
    }
}

/// Solver order of the multistep scheme.
pub const ORDER: usize = 2;

/// Single-owner state of one trajectory.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: Tensor,
    pub step: usize,
    /// Prior data predictions with their log-SNR, newest last.
    history: VecDeque<(f64, Tensor)>,
}

impl SolverState {
    pub fn new(x: Tensor) -> Self {
        Self {
            x,
            step: 0,
            history: VecDeque::with_capacity(ORDER),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Advances from discretization point `from` to `to`.
    pub fn advance<M: ScoreModel + ?Sized>(
        &mut self,
        model: &M,
        schedule: &NoiseSchedule,
        from: usize,
        to: usize,
        direction: Direction,
    ) -> Result<()> {
        let at = schedule.context(from, self.step, direction);
        let eps = model.predict(&self.x, &at)?;
        if eps.shape() != self.x.shape() {
            return Err(Error::Shape(format!(
                "model returned {:?} for input {:?}",
                eps.shape(),
                self.x.shape()
            )));
        }
        let (a_s, s_s) = (at.alpha, at.sigma);
        let t_next = schedule.times[to];
        let (a_t, s_t) = (schedule.alpha(t_next), schedule.sigma(t_next));
        let lam_s = schedule.lambda(at.t);
        let lam_t = schedule.lambda(t_next);

        let data = self.x.lincomb(1.0 / a_s, &eps, -s_s / a_s)?;
        let prev = self.history.back().filter(|(l, _)| l.is_finite());
        let next = match prev {
            Some((lam_p, d_prev)) if lam_s.is_finite() && lam_t.is_finite() => {
                let h = lam_t - lam_s;
                let r = (lam_s - lam_p) / h;
                let coeff = -a_t * (-h).exp_m1();
                // D_s + (D_s − D_prev)/(2r)
                let corrected = data.lincomb(1.0 + 0.5 / r, d_prev, -0.5 / r)?;
                self.x.lincomb(s_t / s_s, &corrected, coeff)?
            }
            _ => data.lincomb(a_t, &eps, s_t)?,
        };
        if !next.all_finite() {
            return Err(Error::SolverDivergence { step: self.step });
        }
        if self.history.len() == ORDER {
            self.history.pop_front();
        }
        self.history.push_back((lam_s, data));
        self.x = next;
        self.step += 1;
        Ok(())
    }
}

fn integrate<M: ScoreModel + ?Sized>(
    x: &Tensor,
    model: &M,
    schedule: &NoiseSchedule,
    path: &[usize],
    direction: Direction,
) -> Result<Tensor> {
    let mut state = SolverState::new(x.clone());
    for pair in path.windows(2) {
        state.advance(model, schedule, pair[0], pair[1], direction)?;
    }
    Ok(state.x)
}

/// Integrates from `t = 1` down to `t = 0`.
pub fn dpm_sample<M: ScoreModel + ?Sized>(z_t: &Tensor, model: &M, schedule: &NoiseSchedule) -> Result<Tensor> {
    let path: Vec<usize> = (0..=schedule.steps()).rev().collect();
    integrate(z_t, model, schedule, &path, Direction::Sampling)
}

/// Integrates from `t = 0` up to `t = 1` over the same discretization.
pub fn dpm_invert<M: ScoreModel + ?Sized>(z0: &Tensor, model: &M, schedule: &NoiseSchedule) -> Result<Tensor> {
    let path: Vec<usize> = (0..=schedule.steps()).collect();
    integrate(z0, model, schedule, &path, Direction::Inversion)
}
