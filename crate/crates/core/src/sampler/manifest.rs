use serde::{Deserialize, Serialize};

use super::plan::{AlternationRatio, Branch, StepPlan};
use super::{ResidualPoint, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub n_steps: usize,
    pub k: AlternationRatio,
    /// `"modular"`, `"bernoulli"` or `"primary_only"`.
    pub kind: String,
    pub primary_steps: usize,
    pub auxiliary_steps: usize,
    /// Branch letters in execution order, `P` primary and `A` auxiliary.
    pub branch_log: String,
}

impl PlanSummary {
    pub fn from_plan(plan: &StepPlan) -> Self {
        let kind = match plan.ratio() {
            AlternationRatio::Integer(_) => "modular",
            AlternationRatio::Real(k) if k.is_infinite() => "primary_only",
            AlternationRatio::Real(_) => "bernoulli",
        };
        Self {
            n_steps: plan.n_steps(),
            k: plan.ratio(),
            kind: kind.into(),
            primary_steps: plan.count(Branch::Primary),
            auxiliary_steps: plan.count(Branch::Auxiliary),
            branch_log: plan.log_string(),
        }
    }
}

/// JSON record written next to every sampled volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    /// True when no measurement term was applied.
    pub unconditional: bool,
    pub volume_shape: [usize; 3],
    pub sampler: SamplerConfig,
    pub plan: PlanSummary,
    pub residual_trace: Vec<ResidualPoint>,
}

impl RunManifest {
    pub fn new(
        mode: &str,
        unconditional: bool,
        shape: (usize, usize, usize),
        sampler: &SamplerConfig,
        plan: &StepPlan,
        residual_trace: &[ResidualPoint],
    ) -> Self {
        Self {
            mode: mode.into(),
            unconditional,
            volume_shape: [shape.0, shape.1, shape.2],
            sampler: sampler.clone(),
            plan: PlanSummary::from_plan(plan),
            residual_trace: residual_trace.to_vec(),
        }
    }
}
