//! Alternating two-axis reverse diffusion.
//!
//! Every step `i = N-1, ..., 0` updates the whole volume with one of two
//! sweeps. A primary sweep runs the primary model over the axis-3 slices and
//! adds measurement guidance; an auxiliary sweep runs the auxiliary model over
//! the axis-1 slices with no measurement term. Within a sweep each slice
//! first takes `corrector_steps` Langevin steps at `sigma_i`, then one
//! reverse-diffusion step to `sigma_{i-1}` (a noise-free denoise at `i = 0`).
//! All noise is drawn from counter-based streams keyed by
//! `(step, branch, slice)`, so results do not depend on the thread count.

pub mod manifest;
pub mod plan;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::guidance::{dps_grad_parts, dps_update, GuidanceConfig, GuidanceMode};
use crate::operators::{Measurement2D, MeasurementOperator, OperatorStack};
use crate::rng::{normal_slice, normal_vec, stream, Purpose, StreamKey};
use crate::score::ScoreModel;
use crate::sde::{
    corrector_step, final_denoise_step, predictor_step, tweedie_denoise, NoiseSchedule, DEFAULT_SNR,
};
use crate::volume::{Slice2D, SliceAxis, Volume3D};

pub use manifest::{PlanSummary, RunManifest};
pub use plan::{make_step_plan, AlternationRatio, Branch, StepPlan};

/// Steps between non-finite checks.
pub const DIVERGENCE_CHECK_INTERVAL: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub k: AlternationRatio,
    /// Guidance step size; `0` disables the measurement term.
    pub lambda: f64,
    pub snr: f64,
    pub corrector_steps: usize,
    pub seed: u64,
    pub guidance_mode: GuidanceMode,
    pub normalize_residual: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 2000,
            k: AlternationRatio::Integer(2),
            lambda: 1.0,
            snr: DEFAULT_SNR,
            corrector_steps: 1,
            seed: 0,
            guidance_mode: GuidanceMode::ExactVjp,
            normalize_residual: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        self.k.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.corrector_steps > 0 && !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        if self.corrector_steps > 200 {
            return Err(Error::Config("corrector_steps must be <= 200".into()));
        }
        Ok(())
    }

    /// Guidance settings, or `None` when `lambda == 0`.
    pub fn guidance(&self) -> Option<GuidanceConfig> {
        (self.lambda > 0.0).then_some(GuidanceConfig {
            lambda: self.lambda,
            mode: self.guidance_mode,
            normalize_residual: self.normalize_residual,
        })
    }

    /// Noise levels used by the loop: the model's sigma range with `n_steps`.
    pub fn schedule_for(&self, model: &dyn ScoreModel) -> Result<NoiseSchedule> {
        let s = model.schedule();
        NoiseSchedule::new(s.sigma_min, s.sigma_max, self.n_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub step: usize,
    /// `sum_j |A x_hat0_j - y_j|^2` over the primary slices.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub volume: Volume3D,
    pub plan: StepPlan,
    pub residual_trace: Vec<ResidualPoint>,
}

/// Reported once per completed step.
#[derive(Clone, Copy, Debug)]
pub struct StepEvent {
    pub step: usize,
    pub n_steps: usize,
    pub branch: Branch,
}

/// Measurements paired with the operators that produced them.
#[derive(Clone, Copy)]
pub struct Measurements<'a> {
    pub y: &'a [Measurement2D],
    pub ops: &'a OperatorStack,
}

impl<'a> Measurements<'a> {
    pub fn new(y: &'a [Measurement2D], ops: &'a OperatorStack) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyInput("no measurement slices".into()));
        }
        if !ops.is_shared() && ops.len() != y.len() {
            return dim_err(format!(
                "{} operators for {} measurement slices",
                ops.len(),
                y.len()
            ));
        }
        let input = ops.get(0).input_shape();
        for (j, yj) in y.iter().enumerate() {
            let op = ops.get(j);
            if op.input_shape() != input {
                return dim_err(format!("operator {j} has a different input shape"));
            }
            if yj.shape() != op.output_shape() || yj.is_complex() != op.is_complex() {
                return dim_err(format!(
                    "measurement {j} has shape {:?}, operator expects {:?}",
                    yj.shape(),
                    op.output_shape()
                ));
            }
        }
        Ok(Self { y, ops })
    }

    /// `(d1, d2, d3)` of the volume being reconstructed.
    pub fn volume_shape(&self) -> (usize, usize, usize) {
        let (d1, d2) = self.ops.get(0).input_shape();
        (d1, d2, self.y.len())
    }
}

struct SliceGuide<'a> {
    op: &'a dyn MeasurementOperator,
    y: &'a Measurement2D,
    cfg: GuidanceConfig,
}

fn key(i: usize, branch: Branch, j: usize, purpose: Purpose) -> StreamKey {
    StreamKey {
        step: i as u32,
        branch: branch.code(),
        slice: j as u16,
        purpose,
    }
}

/// One slice update: correctors at `sigma_i`, then predictor (or the final
/// denoise), then the guidance step if any. Returns the slice and its
/// squared residual (0 when unguided).
fn slice_step(
    model: &dyn ScoreModel,
    mut x: Slice2D,
    i: usize,
    j: usize,
    branch: Branch,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guide: Option<SliceGuide<'_>>,
) -> Result<(Slice2D, f64)> {
    let t = sched.t_at(i);
    let sigma = sched.sigma_at(i);
    if i >= 1 {
        for k in 0..cfg.corrector_steps {
            let s = model.eval(&x, t);
            let z = normal_slice(
                cfg.seed,
                key(i, branch, j, Purpose::Corrector(k as u8)),
                x.shape(),
            );
            x = corrector_step(&x, &s, &z, cfg.snr)?.x;
        }
    }
    let exact = matches!(
        &guide,
        Some(g) if g.cfg.mode == GuidanceMode::ExactVjp
    );
    let (score, pullback) = if exact {
        let (s, p) = model.eval_with_denoiser_pullback(&x, t, sigma);
        (s, Some(p))
    } else {
        (model.eval(&x, t), None)
    };
    let stepped = if i >= 1 {
        let z = normal_slice(cfg.seed, key(i, branch, j, Purpose::Predictor), x.shape());
        predictor_step(&x, i, &score, &z, sched)?
    } else {
        final_denoise_step(&x, &score, sched)
    };
    let Some(g) = guide else {
        return Ok((stepped, 0.0));
    };
    let x_hat0 = tweedie_denoise(&x, sigma, &score);
    let identity = |v: &Slice2D| v.clone();
    let pb: &dyn Fn(&Slice2D) -> Slice2D = match &pullback {
        Some(p) => &**p,
        None => &identity,
    };
    let gg = dps_grad_parts(g.op, g.y, &x_hat0, pb, &g.cfg)?;
    Ok((dps_update(&stepped, &gg.grad, g.cfg.lambda), gg.residual_sq))
}

fn sweep(
    x: &Volume3D,
    axis: SliceAxis,
    branch: Branch,
    i: usize,
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    meas: Option<(Measurements<'_>, GuidanceConfig)>,
) -> Result<(Volume3D, f64)> {
    if i >= sched.n_steps {
        return Err(Error::StepIndex(format!(
            "step {i} outside 0..{}",
            sched.n_steps
        )));
    }
    let count = x.slice_count(axis);
    if count > u16::MAX as usize + 1 {
        return dim_err(format!(
            "{count} slices exceed the noise-stream slice index"
        ));
    }
    let results: Vec<(Slice2D, f64)> = (0..count)
        .into_par_iter()
        .map(|j| {
            let guide = meas.map(|(m, cfg)| SliceGuide {
                op: m.ops.get(j),
                y: &m.y[j],
                cfg,
            });
            slice_step(
                model,
                x.slice_extract(axis, j)?,
                i,
                j,
                branch,
                sched,
                cfg,
                guide,
            )
        })
        .collect::<Result<_>>()?;
    let mut out = x.clone();
    let mut residual = 0.0;
    for (j, (s, r)) in results.iter().enumerate() {
        out.slice_insert_mut(axis, j, s)?;
        residual += r;
    }
    Ok((out, residual))
}

/// Primary-model sweep over the axis-3 slices with measurement guidance.
/// Returns the updated volume and `sum_j |A x_hat0_j - y_j|^2`.
pub fn primary_conditional_sweep(
    x: &Volume3D,
    i: usize,
    model_p: &dyn ScoreModel,
    meas: Measurements<'_>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Volume3D, f64)> {
    if meas.y.len() != x.slice_count(SliceAxis::Axis3) {
        return dim_err(format!(
            "{} measurement slices for {} axis-3 slices",
            meas.y.len(),
            x.slice_count(SliceAxis::Axis3)
        ));
    }
    if meas.ops.get(0).input_shape() != x.slice_shape(SliceAxis::Axis3) {
        return dim_err("operator input shape does not match the axis-3 slices");
    }
    let guidance = cfg.guidance();
    sweep(
        x,
        SliceAxis::Axis3,
        Branch::Primary,
        i,
        model_p,
        sched,
        cfg,
        guidance.map(|g| (meas, g)),
    )
}

/// Primary-model sweep over the axis-3 slices without guidance.
pub fn primary_unconditional_sweep(
    x: &Volume3D,
    i: usize,
    model_p: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume3D> {
    Ok(sweep(
        x,
        SliceAxis::Axis3,
        Branch::Primary,
        i,
        model_p,
        sched,
        cfg,
        None,
    )?
    .0)
}

/// Auxiliary-model sweep over the axis-1 slices.
pub fn auxiliary_sweep(
    x: &Volume3D,
    i: usize,
    model_a: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume3D> {
    Ok(sweep(
        x,
        SliceAxis::Axis1,
        Branch::Auxiliary,
        i,
        model_a,
        sched,
        cfg,
        None,
    )?
    .0)
}

/// `X_N ~ N(0, sigma_max^2 I)`.
pub fn initial_volume(shape: (usize, usize, usize), sigma_max: f64, seed: u64) -> Volume3D {
    let key = StreamKey {
        step: 0,
        branch: 0,
        slice: 0,
        purpose: Purpose::Init,
    };
    let mut rng = stream(seed, key.id());
    let n = shape.0 * shape.1 * shape.2;
    let data = normal_vec(&mut rng, n)
        .into_iter()
        .map(|v| sigma_max * v)
        .collect();
    Volume3D::new(shape, data).expect("shape matches")
}

fn run(
    shape: (usize, usize, usize),
    meas: Option<Measurements<'_>>,
    model_p: &dyn ScoreModel,
    model_a: &dyn ScoreModel,
    cfg: &SamplerConfig,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<SampleOutput> {
    cfg.validate()?;
    let sched = cfg.schedule_for(model_p)?;
    let aux_sched = cfg.schedule_for(model_a)?;
    if aux_sched != sched {
        return Err(Error::Config(
            "primary and auxiliary models use different noise ranges".into(),
        ));
    }
    if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
        return dim_err(format!("volume shape {shape:?} has a zero extent"));
    }
    let plan = make_step_plan(cfg.n_steps, cfg.k, cfg.seed)?;
    let mut x = initial_volume(shape, sched.sigma_max, cfg.seed);
    let mut trace = Vec::new();
    for (done, (i, branch)) in plan.steps().enumerate() {
        x = match (branch, meas) {
            (Branch::Auxiliary, _) => auxiliary_sweep(&x, i, model_a, &sched, cfg)?,
            (Branch::Primary, Some(m)) if cfg.lambda > 0.0 => {
                let (v, r) = primary_conditional_sweep(&x, i, model_p, m, &sched, cfg)?;
                trace.push(ResidualPoint {
                    step: i,
                    residual: r,
                });
                v
            }
            (Branch::Primary, _) => primary_unconditional_sweep(&x, i, model_p, &sched, cfg)?,
        };
        if ((done + 1) % DIVERGENCE_CHECK_INTERVAL == 0 || i == 0) && !x.all_finite() {
            return Err(Error::Divergence { step: i });
        }
        observer(StepEvent {
            step: i,
            n_steps: cfg.n_steps,
            branch,
        });
    }
    Ok(SampleOutput {
        volume: x,
        plan,
        residual_trace: trace,
    })
}

/// Reconstructs a volume from per-axis-3-slice measurements.
pub fn solve_inverse(
    meas: Measurements<'_>,
    model_p: &dyn ScoreModel,
    model_a: &dyn ScoreModel,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    solve_inverse_observed(meas, model_p, model_a, cfg, &mut |_| {})
}

pub fn solve_inverse_observed(
    meas: Measurements<'_>,
    model_p: &dyn ScoreModel,
    model_a: &dyn ScoreModel,
    cfg: &SamplerConfig,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<SampleOutput> {
    run(
        meas.volume_shape(),
        Some(meas),
        model_p,
        model_a,
        cfg,
        observer,
    )
}

/// Unconditional sampling. The guidance fields of `cfg` are not used.
pub fn generate(
    shape: (usize, usize, usize),
    model_p: &dyn ScoreModel,
    model_a: &dyn ScoreModel,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    generate_observed(shape, model_p, model_a, cfg, &mut |_| {})
}

pub fn generate_observed(
    shape: (usize, usize, usize),
    model_p: &dyn ScoreModel,
    model_a: &dyn ScoreModel,
    cfg: &SamplerConfig,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<SampleOutput> {
    run(shape, None, model_p, model_a, cfg, observer)
}
