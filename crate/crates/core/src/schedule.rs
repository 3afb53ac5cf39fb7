//! Discrete variance-preserving noise schedules.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Construction parameters of a linear VP schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// Noise level a score model is queried at: training-schedule index plus
/// the cumulative signal coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub timestep: usize,
    pub alpha_bar: f64,
}

/// `{beta_t, alpha_t, alpha_bar_t, sigma_tilde_t}` for `t = 1..=len()`.
///
/// A schedule may be a respaced view of a longer one; [`timestep`](Self::timestep)
/// maps its step index back to the index the score model was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_tilde: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linearly spaced betas on `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(alloc::format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let params = ScheduleParams {
            steps,
            beta_min,
            beta_max,
        };
        Ok(Self::from_betas(params, beta, (1..=steps).collect()))
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_min, p.beta_max)
    }

    fn from_betas(params: ScheduleParams, beta: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                libm::sqrt(beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i]))
            })
            .collect();
        NoiseSchedule {
            params,
            beta,
            alpha,
            alpha_bar,
            sigma_tilde,
            timesteps,
        }
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma_tilde(&self, t: usize) -> f64 {
        self.sigma_tilde[t - 1]
    }

    /// Index into the training schedule for step `t`.
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    /// Score-model query for step `t`.
    pub fn level(&self, t: usize) -> Level {
        Level {
            timestep: self.timestep(t),
            alpha_bar: self.alpha_bar(t),
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(c_x0, c_xt)` of the ancestral posterior mean
    /// `c_xt * x_t + c_x0 * x0`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c_x0 = libm::sqrt(ab_prev) * self.beta(t) / (1.0 - ab);
        let c_xt = libm::sqrt(self.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt)
    }

    /// Evenly spaced subsequence `t_i = floor(i * T / n)`, `i = 1..=n`.
    pub fn subsample_indices(total: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > total {
            return Err(Error::invalid(alloc::format!(
                "cannot take {n} steps from a {total}-step schedule"
            )));
        }
        Ok((1..=n).map(|i| i * total / n).collect())
    }

    /// Schedule over the evenly spaced subsequence of `n` steps, with betas
    /// re-derived so that the kept `alpha_bar` values are unchanged.
    /// `n == len()` returns an identical schedule.
    pub fn respace(&self, n: usize) -> Result<NoiseSchedule> {
        if n == self.len() {
            return Ok(self.clone());
        }
        let idx = Self::subsample_indices(self.len(), n)?;
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(n);
        for &t in &idx {
            let ab = self.alpha_bar(t);
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let timesteps = idx.iter().map(|&t| self.timestep(t)).collect();
        Ok(Self::from_betas(self.params, beta, timesteps))
    }
}
