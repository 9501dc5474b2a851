//! Measurement-consistency gradient through the Tweedie estimate.
//!
//! For `x_hat0(x) = x + sigma^2 s(x, t)` the data term is
//! `|A x_hat0(x) - y|^2`. Its gradient in `x` is `J^T u` with
//! `u = 2 A^T (A x_hat0 - y)` and `J = I + sigma^2 ds/dx`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{Measurement2D, MeasurementOperator};
use crate::score::ScoreModel;
use crate::sde::tweedie_denoise;
use crate::volume::Slice2D;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Differentiate through the score model.
    #[default]
    ExactVjp,
    /// Treat `d x_hat0 / d x` as the identity.
    IdentityJacobian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f64,
    #[serde(default)]
    pub mode: GuidanceMode,
    #[serde(default)]
    pub normalize_residual: bool,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, mode: GuidanceMode) -> Result<Self> {
        let cfg = Self {
            lambda,
            mode,
            normalize_residual: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "guidance lambda must be finite and positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Gradient together with the residual norm it was computed from.
#[derive(Clone, Debug)]
pub struct GuidedGradient {
    pub grad: Slice2D,
    /// `|A x_hat0 - y|^2`.
    pub residual_sq: f64,
}

/// Shared core used by [`dps_grad`] and the sampler, which already holds the
/// score and the denoiser pullback at `x`.
pub(crate) fn dps_grad_parts(
    op: &dyn MeasurementOperator,
    y: &Measurement2D,
    x_hat0: &Slice2D,
    pullback: &dyn Fn(&Slice2D) -> Slice2D,
    cfg: &GuidanceConfig,
) -> Result<GuidedGradient> {
    let residual = op.apply(x_hat0)?.add_scaled(-1.0, y)?;
    let residual_sq = residual.norm_sq();
    let mut u = op.adjoint(&residual.scale(2.0))?;
    if cfg.normalize_residual {
        let norm = residual_sq.sqrt();
        if norm == 0.0 {
            return Ok(GuidedGradient {
                grad: Slice2D::zeros(x_hat0.shape()),
                residual_sq,
            });
        }
        u = u.scale(1.0 / norm);
    }
    let grad = match cfg.mode {
        GuidanceMode::IdentityJacobian => u,
        GuidanceMode::ExactVjp => pullback(&u),
    };
    Ok(GuidedGradient { grad, residual_sq })
}

/// Gradient of `|A x_hat0(x) - y|^2` with respect to `x` at time `t`.
pub fn dps_grad(
    model: &dyn ScoreModel,
    op: &dyn MeasurementOperator,
    x: &Slice2D,
    y: &Measurement2D,
    t: f64,
    cfg: &GuidanceConfig,
) -> Result<Slice2D> {
    op.check_input(x)?;
    let sigma = model.schedule().sigma(t)?;
    let (score, pullback) = model.eval_with_denoiser_pullback(x, t, sigma);
    let x_hat0 = tweedie_denoise(x, sigma, &score);
    Ok(dps_grad_parts(op, y, &x_hat0, &*pullback, cfg)?.grad)
}

/// `x' - lambda * grad`.
pub fn dps_update(x_prime: &Slice2D, grad: &Slice2D, lambda: f64) -> Slice2D {
    x_prime.add_scaled(-lambda, grad)
}
