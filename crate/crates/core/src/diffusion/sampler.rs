use crate::error::{Error, Result};
use crate::rng::RandomnessContext;

use super::{LatentTensor, NoiseSchedule};

/// A noise-prediction model `ε_θ(z_t, t, c)`.
///
/// Implementations must return a tensor with the shape of `z_t` and must be
/// callable concurrently.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&LatentTensor>) -> LatentTensor;
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, z_t: &LatentTensor, _t: usize, _cond: Option<&LatentTensor>) -> LatentTensor {
        LatentTensor::zeros(z_t.shape().to_vec())
    }
}

/// Minimum-mean-squared-error noise predictor for data drawn elementwise from
/// `N(mean, variance)`:
///
/// `E[ε | z_t] = sqrt(1 - ᾱ_t)·(z_t - sqrt(ᾱ_t)·mean) / (ᾱ_t·variance + 1 - ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    mean: f64,
    variance: f64,
    alpha_bars: Vec<f64>,
}

impl GaussianPriorDenoiser {
    pub fn new(mean: f64, variance: f64, sched: &NoiseSchedule) -> Result<Self> {
        if !(mean.is_finite() && variance.is_finite() && variance >= 0.0) {
            return Err(Error::config(format!(
                "gaussian prior needs finite mean and variance >= 0, got {mean}, {variance}"
            )));
        }
        Ok(Self {
            mean,
            variance,
            alpha_bars: sched.alpha_bars().to_vec(),
        })
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn predict(&self, z_t: &LatentTensor, t: usize, _cond: Option<&LatentTensor>) -> LatentTensor {
        let ab = self.alpha_bars[t - 1];
        let gain = (1.0 - ab).sqrt() / (ab * self.variance + 1.0 - ab);
        let shift = ab.sqrt() * self.mean;
        LatentTensor {
            shape: z_t.shape().to_vec(),
            values: z_t.values().iter().map(|z| gain * (z - shift)).collect(),
        }
    }
}

/// Variance of the noise injected at each reverse step from `t` to `s < t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosteriorVariance {
    /// `β_{t|s} = 1 - ᾱ_t/ᾱ_s`.
    #[default]
    FixedLarge,
    /// `β̃_{t|s} = (1 - ᾱ_s)/(1 - ᾱ_t)·β_{t|s}`.
    FixedSmall,
}

/// `num_steps` timesteps evenly spaced from `T` down to `1`, both included.
pub fn jump_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::contract(format!(
            "need 1 <= num_steps <= T, got {num_steps} with T = {total}"
        )));
    }
    if num_steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) as f64 / (num_steps - 1) as f64;
    Ok((0..num_steps)
        .map(|k| (total as f64 - k as f64 * stride).round() as usize)
        .collect())
}

/// Strided ancestral sampling with the default (`FixedLarge`) variance.
pub fn jump_sample(
    z_t: &LatentTensor,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    num_steps: usize,
    ctx: &RandomnessContext,
) -> Result<LatentTensor> {
    jump_sample_with(z_t, denoiser, sched, num_steps, PosteriorVariance::default(), None, ctx)
}

/// Runs the DDPM posterior update over [`jump_timesteps`]. At each visited
/// step `t` with successor `s` (`0` after the last):
///
/// ```text
/// x0   = (z_t - sqrt(1 - ᾱ_t)·ε̂) / sqrt(ᾱ_t)
/// mean = sqrt(ᾱ_s)·β_{t|s}/(1 - ᾱ_t)·x0 + sqrt(α_{t|s})·(1 - ᾱ_s)/(1 - ᾱ_t)·z_t
/// z_s  = mean + σ·n,  n ~ N(0, I)
/// ```
///
/// No noise is added on the final step.
pub fn jump_sample_with(
    z_start: &LatentTensor,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    num_steps: usize,
    variance: PosteriorVariance,
    cond: Option<&LatentTensor>,
    ctx: &RandomnessContext,
) -> Result<LatentTensor> {
    let steps = jump_timesteps(sched.len(), num_steps)?;
    let mut rng = ctx.rng();
    let mut z = z_start.clone();

    for (i, &t) in steps.iter().enumerate() {
        let s = steps.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser.predict(&z, t, cond);
        if eps.shape() != z.shape() {
            return Err(Error::contract(format!(
                "denoiser returned shape {:?} for input {:?} at t = {t}",
                eps.shape(),
                z.shape()
            )));
        }

        let ab_t = sched.alpha_bar(t);
        let ab_s = sched.alpha_bar(s);
        let one_minus_t = 1.0 - ab_t;
        if one_minus_t <= 0.0 {
            // ᾱ_t rounds to 1: the step is the identity.
            continue;
        }
        let alpha_ts = ab_t / ab_s;
        let beta_ts = 1.0 - alpha_ts;

        let x0_coef = ab_s.sqrt() * beta_ts / one_minus_t;
        let zt_coef = alpha_ts.sqrt() * (1.0 - ab_s) / one_minus_t;
        let sigma = if s == 0 {
            0.0
        } else {
            match variance {
                PosteriorVariance::FixedLarge => beta_ts,
                PosteriorVariance::FixedSmall => (1.0 - ab_s) / one_minus_t * beta_ts,
            }
            .max(0.0)
            .sqrt()
        };

        let noise = if sigma > 0.0 {
            Some(LatentTensor::standard_normal(z.shape().to_vec(), &mut rng))
        } else {
            None
        };
        let (sqrt_ab, sqrt_1m) = (ab_t.sqrt(), one_minus_t.sqrt());
        let values = z
            .values()
            .iter()
            .zip(eps.values())
            .enumerate()
            .map(|(j, (&zt, &e))| {
                let x0 = (zt - sqrt_1m * e) / sqrt_ab;
                let mean = x0_coef * x0 + zt_coef * zt;
                match &noise {
                    Some(n) => mean + sigma * n.values()[j],
                    None => mean,
                }
            })
            .collect();
        z = LatentTensor::new(z.shape().to_vec(), values)?;
    }
    Ok(z)
}
