//! Variance-exploding SDE: geometric noise schedule, forward perturbation,
//! Tweedie denoising and the predictor/corrector reverse updates.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::volume::{Slice2D, Volume3D};

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 378.0;
pub const DEFAULT_SNR: f64 = 0.16;

/// Geometric schedule `sigma(t) = sigma_min * (sigma_max / sigma_min)^t`,
/// discretised as `sigma_i = sigma(i / (n_steps - 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            n_steps: 2000,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            n_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_steps(n_steps: usize) -> Result<Self> {
        Self::new(DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_max must exceed sigma_min, got {}",
                self.sigma_max
            )));
        }
        if self.n_steps < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 steps, got {}",
                self.n_steps
            )));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(t))
    }

    #[inline]
    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        // pin the endpoints: powf rounding must not move them
        if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
        }
    }

    pub fn t_at(&self, i: usize) -> f64 {
        if i + 1 >= self.n_steps {
            1.0
        } else {
            i as f64 / (self.n_steps - 1) as f64
        }
    }

    pub fn sigma_at(&self, i: usize) -> f64 {
        self.sigma_unchecked(self.t_at(i))
    }
}

/// A flat field of values with a shape, shared by slices and volumes.
pub trait Field: Sized + Clone {
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    fn same_shape(&self, other: &Self) -> bool;
}

impl Field for Slice2D {
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
}

impl Field for Volume3D {
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
}

fn combine<F: Field>(x: &F, a: f64, u: &F, b: f64, v: &F) -> F {
    let mut out = x.clone();
    for ((o, &uu), &vv) in out.values_mut().iter_mut().zip(u.values()).zip(v.values()) {
        *o += a * uu + b * vv;
    }
    out
}

/// VE transition kernel sample `x0 + sigma(t) z`.
pub fn perturb<F: Field>(sched: &NoiseSchedule, x0: &F, t: f64, z: &F) -> Result<F> {
    if !x0.same_shape(z) {
        return dim_err("perturb: noise shape differs from x0");
    }
    let sigma = sched.sigma(t)?;
    let mut out = x0.clone();
    for (o, &zz) in out.values_mut().iter_mut().zip(z.values()) {
        *o += sigma * zz;
    }
    Ok(out)
}

/// Posterior-mean estimate `x_t + sigma^2 * score`.
pub fn tweedie_denoise<F: Field>(x_t: &F, sigma: f64, score: &F) -> F {
    debug_assert!(x_t.same_shape(score));
    let s2 = sigma * sigma;
    let mut out = x_t.clone();
    for (o, &s) in out.values_mut().iter_mut().zip(score.values()) {
        *o += s2 * s;
    }
    out
}

/// Reverse-diffusion (ancestral) VE update from `sigma_i` to `sigma_{i-1}`.
pub fn predictor_step<F: Field>(
    x: &F,
    i: usize,
    score: &F,
    z: &F,
    sched: &NoiseSchedule,
) -> Result<F> {
    if i == 0 || i >= sched.n_steps {
        return Err(Error::StepIndex(format!(
            "predictor step index {i} outside 1..={}",
            sched.n_steps - 1
        )));
    }
    if !x.same_shape(score) || !x.same_shape(z) {
        return dim_err("predictor_step: operand shapes differ");
    }
    let hi = sched.sigma_at(i);
    let lo = sched.sigma_at(i - 1);
    let var = hi * hi - lo * lo;
    Ok(combine(x, var, score, var.sqrt(), z))
}

/// Noise-free last step at `sigma_0`: the Tweedie estimate at the smallest
/// noise level. Nothing stochastic happens after the loop ends.
pub fn final_denoise_step<F: Field>(x: &F, score: &F, sched: &NoiseSchedule) -> F {
    tweedie_denoise(x, sched.sigma_min, score)
}

#[derive(Clone, Debug)]
pub struct CorrectorOutcome<F> {
    pub x: F,
    /// The score was identically zero; `x` is returned unchanged.
    pub zero_score: bool,
}

/// One Langevin step with `eps = 2 (snr |z| / |score|)^2`.
pub fn corrector_step<F: Field>(x: &F, score: &F, z: &F, snr: f64) -> Result<CorrectorOutcome<F>> {
    if !(snr > 0.0) {
        return Err(Error::Domain(format!(
            "corrector snr must be > 0, got {snr}"
        )));
    }
    if !x.same_shape(score) || !x.same_shape(z) {
        return dim_err("corrector_step: operand shapes differ");
    }
    let g: f64 = score.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if g == 0.0 {
        return Ok(CorrectorOutcome {
            x: x.clone(),
            zero_score: true,
        });
    }
    let n: f64 = z.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let eps = 2.0 * (snr * n / g).powi(2);
    Ok(CorrectorOutcome {
        x: combine(x, eps, score, (2.0 * eps).sqrt(), z),
        zero_score: false,
    })
}
