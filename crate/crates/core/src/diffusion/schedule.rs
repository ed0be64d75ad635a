use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Reverse-step noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `σ_t = √β_t`
    #[default]
    SqrtBeta,
    /// `σ_t = √β̃_t` with `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    TildeBeta,
}

/// Per-step tables, indexed by step `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    sigma_rule: SigmaRule,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_rule(&self) -> SigmaRule {
        self.sigma_rule
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    // Accessors take `t` in [1, T] and panic outside it.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    sigma_rule: SigmaRule,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = (0..steps)
        .map(|i| {
            if i == 0 {
                // final reverse step adds no noise
                return 0.0;
            }
            match sigma_rule {
                SigmaRule::SqrtBeta => beta[i].sqrt(),
                SigmaRule::TildeBeta => {
                    (beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])).sqrt()
                }
            }
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
        sigma_rule,
    })
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, sched: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            actual: eps.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// One ancestral step:
/// `x_{t−1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t + σ_t z`.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    for other in [eps_hat.len(), z.len()] {
        if other != x_t.len() {
            return Err(Error::DimensionMismatch {
                expected: x_t.len(),
                actual: other,
            });
        }
    }
    let mut out = x_t.to_vec();
    step_in_place(&mut out, t, eps_hat, sched, z);
    Ok(out)
}

#[inline]
pub(crate) fn step_in_place(x: &mut [f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule, z: &[f64]) {
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let sigma = sched.sigma(t);
    for ((xi, ei), zi) in x.iter_mut().zip(eps_hat).zip(z) {
        *xi = inv * (*xi - coef * ei) + sigma * zi;
    }
}
