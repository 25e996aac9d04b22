//! Forward-process variance schedule.
//!
//! Timesteps are 1-based throughout the public API: `t ∈ 1..=T`, with
//! `alpha_bar(0) = 1` by convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Diffusion coefficients `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly interpolated betas from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
    }
    let in_range = |b: f64| b > 0.0 && b < 1.0;
    if !in_range(beta_start) || !in_range(beta_end) {
        return Err(Error::InvalidArgument(format!(
            "betas must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidArgument(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..timesteps)
            .map(|i| beta_start + span * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            timesteps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) {
        assert!(
            (1..=self.timesteps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.timesteps()
        );
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check(t);
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check(t);
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.check(t);
            self.alpha_bars[t - 1]
        }
    }

    pub fn validate_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.timesteps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )))
        }
    }
}
