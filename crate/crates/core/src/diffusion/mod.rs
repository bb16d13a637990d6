//! Latent diffusion math: noise schedules, the forward noising process, the
//! two latent-space losses and strided ancestral sampling.
//!
//! Everything here is framework-free `f64` code. Denoisers plug in through the
//! [`Denoiser`] trait; the built-in ones are analytic and exist to verify the
//! sampler.

mod projector;
mod sampler;

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use projector::LatentProjector;
pub use sampler::{
    jump_sample, jump_sample_with, jump_timesteps, Denoiser, GaussianPriorDenoiser, PosteriorVariance, ZeroDenoiser,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// `β_t` for `t = 1..=T` with `α_t = 1 - β_t` and running products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
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

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::contract(format!("step {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    /// Two-column `t beta` table, one step per line, with a `#` header.
    pub fn export_table(&self) -> String {
        let mut out = String::from("# t beta\n");
        for (i, b) in self.betas.iter().enumerate() {
            let _ = writeln!(out, "{} {}", i + 1, b);
        }
        out
    }

    /// Parses the output of [`export_table`](Self::export_table). Steps must
    /// be listed as `1..=T` in order.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut betas = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(t), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Format(format!("bad schedule row `{line}`")));
            };
            let t: usize = t.parse().map_err(|_| Error::Format(format!("bad step `{t}`")))?;
            if t != betas.len() + 1 {
                return Err(Error::Format(format!("expected step {}, found {t}", betas.len() + 1)));
            }
            betas.push(b.parse().map_err(|_| Error::Format(format!("bad beta `{b}`")))?);
        }
        Self::from_betas(betas)
    }
}

/// Builds a schedule. `Constant` uses `beta_start` for every step; `Linear`
/// interpolates from `beta_start` at `t = 1` to `beta_end` at `t = T`.
pub fn build_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs T >= 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Constant => vec![beta_start; steps],
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// Dense real tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent values must be finite"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
        }
    }

    pub fn standard_normal(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn ensure_same_shape(&self, other: &LatentTensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Elementwise `a·self + b·other`.
    pub(crate) fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> LatentTensor {
        LatentTensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 - ᾱ_t)·eps`.
pub fn forward_noise(z0: &LatentTensor, t: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    sched.check_step(t)?;
    z0.ensure_same_shape(eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    Ok(z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

fn mean_squared(a: &LatentTensor, b: &LatentTensor, what: &str) -> Result<f64> {
    a.ensure_same_shape(b, what)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Noise-prediction loss, averaged over elements.
pub fn ldm_loss(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<f64> {
    mean_squared(eps_true, eps_pred, "ldm_loss")
}

/// Squared distance between the resampled and the clean latent, averaged over
/// elements.
pub fn resample_loss(z0_prime: &LatentTensor, z0: &LatentTensor) -> Result<f64> {
    mean_squared(z0_prime, z0, "resample_loss")
}
