//! Forward corruption and exact reverse posteriors for the Gaussian
//! (embedding) and absorbing-mask (token) diffusion processes.

use crate::rng::Rng;
use crate::seqcore::Sequence;
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("schedule needs at least one step, got {0}")]
    NoSteps(usize),
    #[error("timestep {t} outside 0..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("timesteps must satisfy s < t, got s={s} t={t}")]
    BadStepPair { s: usize, t: usize },
    #[error("position {position}: token {token} cannot be reached from clean token {clean}")]
    ImpossiblePair {
        position: usize,
        token: usize,
        clean: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    InverseLinear,
}

/// Cumulative signal levels `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
///
/// For the Gaussian process `alpha_bar` is the cumulative product of
/// `1 - beta`; for the mask process it is the probability that a token is
/// still unmasked at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self, NoiseError> {
        if steps < 1 {
            return Err(NoiseError::NoSteps(steps));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_raw = 1.0;
        for t in 1..=steps {
            let raw = f(t) / f0;
            let beta = (1.0 - raw / prev_raw).clamp(0.0, MAX_BETA);
            prev_raw = raw;
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - beta));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::Cosine,
            alpha_bar,
        })
    }

    pub fn inverse_linear(steps: usize) -> Result<Self, NoiseError> {
        if steps < 1 {
            return Err(NoiseError::NoSteps(steps));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::InverseLinear,
            alpha_bar: (0..=steps).map(|t| 1.0 / (1.0 + t as f64)).collect(),
        })
    }

    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self, NoiseError> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(steps),
            ScheduleKind::InverseLinear => Self::inverse_linear(steps),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn check(&self, t: usize) -> Result<(), NoiseError> {
        if t > self.steps() {
            return Err(NoiseError::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step signal retention `alpha_t = alpha_bar_t / alpha_bar_{t-1}`
    /// (also the per-step stay probability of the mask process).
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1);
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Cumulative probability that a clean token is masked by step `t`.
    pub fn mask_prob(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// Step whose cumulative mask probability is closest to `fraction`.
    pub fn step_for_mask_fraction(&self, fraction: f64) -> usize {
        let mut best = 0;
        let mut gap = f64::INFINITY;
        for t in 0..=self.steps() {
            let g = (self.mask_prob(t) - fraction).abs();
            if g < gap {
                gap = g;
                best = t;
            }
        }
        best
    }

    /// `count + 1` decreasing timesteps from `T` to 0, evenly strided.
    pub fn strided(&self, count: usize) -> Vec<usize> {
        let steps = self.steps();
        let count = count.clamp(1, steps);
        let mut ts: Vec<usize> = (0..=count)
            .rev()
            .map(|k| ((k * steps) as f64 / count as f64).round() as usize)
            .collect();
        ts.dedup();
        ts
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn gaussian_forward(
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor, NoiseError> {
    schedule.check(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let a = schedule.alpha_bar(t);
    let (m, s) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x0
        .data()
        .iter()
        .map(|x| m * x + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data).expect("same shape"))
}

/// Coefficients `(on x0, on x_t, variance)` of `q(x_s | x_t, x0)` for `s < t`.
pub fn gaussian_posterior_coefficients(
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(f64, f64, f64), NoiseError> {
    schedule.check(t)?;
    if s >= t {
        return Err(NoiseError::BadStepPair { s, t });
    }
    let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
    let alpha = ab_t / ab_s;
    let beta = 1.0 - alpha;
    let denom = 1.0 - ab_t;
    let c0 = ab_s.sqrt() * beta / denom;
    let ct = alpha.sqrt() * (1.0 - ab_s) / denom;
    let var = ((1.0 - ab_s) / denom * beta).max(0.0);
    Ok((c0, ct, var))
}

/// Mean and per-coordinate variance of `q(x_{t-1} | x_t, x0)`.
pub fn gaussian_posterior(
    xt: &Tensor,
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64), NoiseError> {
    if t == 0 {
        return Err(NoiseError::BadStepPair { s: 0, t });
    }
    gaussian_posterior_between(xt, x0, t - 1, t, schedule)
}

pub fn gaussian_posterior_between(
    xt: &Tensor,
    x0: &Tensor,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64), NoiseError> {
    if xt.numel() != x0.numel() {
        return Err(NoiseError::LengthMismatch {
            left: xt.numel(),
            right: x0.numel(),
        });
    }
    let (c0, ct, var) = gaussian_posterior_coefficients(s, t, schedule)?;
    let data = x0
        .data()
        .iter()
        .zip(xt.data())
        .map(|(a, b)| c0 * a + ct * b)
        .collect();
    let mean = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
    Ok((mean, var))
}

/// Masks each non-mask token independently with probability `1 - alpha_bar_t`.
pub fn mask_forward(
    w0: &Sequence,
    t: usize,
    schedule: &NoiseSchedule,
    mask_index: usize,
    rng: &mut Rng,
) -> Result<Sequence, NoiseError> {
    mask_forward_where(w0, t, schedule, mask_index, |_| true, rng)
}

/// [`mask_forward`] restricted to positions where `select` holds; other
/// positions are copied and consume no randomness.
pub fn mask_forward_where(
    w0: &Sequence,
    t: usize,
    schedule: &NoiseSchedule,
    mask_index: usize,
    select: impl Fn(usize) -> bool,
    rng: &mut Rng,
) -> Result<Sequence, NoiseError> {
    schedule.check(t)?;
    let p = schedule.mask_prob(t);
    let mut out = w0.clone();
    if t == 0 {
        return Ok(out);
    }
    for i in 0..w0.len() {
        if !select(i) || w0.get(i) == mask_index {
            continue;
        }
        if rng.gen::<f64>() < p {
            out.set(i, mask_index);
        }
    }
    Ok(out)
}

/// Probability that a position masked at step `t` is unmasked at step `s < t`.
pub fn unmask_probability(s: usize, t: usize, schedule: &NoiseSchedule) -> Result<f64, NoiseError> {
    schedule.check(t)?;
    if s >= t {
        return Err(NoiseError::BadStepPair { s, t });
    }
    let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
    Ok(((ab_s - ab_t) / (1.0 - ab_t)).clamp(0.0, 1.0))
}

/// Per-position distributions over `vocab + 1` tokens (mask last) of
/// `q(w_{t-1} | w_t, w0)`.
pub fn categorical_posterior(
    wt: &Sequence,
    w0: &Sequence,
    t: usize,
    schedule: &NoiseSchedule,
    mask_index: usize,
) -> Result<Vec<Vec<f64>>, NoiseError> {
    if t == 0 {
        return Err(NoiseError::BadStepPair { s: 0, t });
    }
    categorical_posterior_between(wt, w0, t - 1, t, schedule, mask_index)
}

/// `q(w_s | w_t, w0)` for any `s < t`.
pub fn categorical_posterior_between(
    wt: &Sequence,
    w0: &Sequence,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
    mask_index: usize,
) -> Result<Vec<Vec<f64>>, NoiseError> {
    if wt.len() != w0.len() {
        return Err(NoiseError::LengthMismatch {
            left: wt.len(),
            right: w0.len(),
        });
    }
    let p_unmask = unmask_probability(s, t, schedule)?;
    let mut out = Vec::with_capacity(wt.len());
    for i in 0..wt.len() {
        let (tok, clean) = (wt.get(i), w0.get(i));
        let mut row = vec![0.0; mask_index + 1];
        if tok == mask_index {
            if clean == mask_index {
                row[mask_index] = 1.0;
            } else {
                row[clean] = p_unmask;
                row[mask_index] = 1.0 - p_unmask;
            }
        } else if tok == clean {
            row[tok] = 1.0;
        } else {
            return Err(NoiseError::ImpossiblePair {
                position: i,
                token: tok,
                clean,
            });
        }
        out.push(row);
    }
    Ok(out)
}
