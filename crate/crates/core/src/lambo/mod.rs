//! Saliency-guided sequence editing with discrete expected hypervolume
//! improvement as the acquisition value.

mod constraints;
mod edits;
mod pareto;
mod step;

pub use constraints::{ConstraintConfig, ConstraintSet, Violation, DEFAULT_SEQUON};
pub use edits::{edit_distribution, sample_edit_positions};
pub use pareto::{
    discrete_ehvi, dominates, hypervolume, monte_carlo_ehvi, pareto_extract, Acquisition, ParetoState, EHVI_CAP,
};
pub use step::{lambo2_optimize, lambo2_step, Design, StepOutcome};

use crate::model::ModelError;
use crate::noise::{NoiseError, ScheduleKind};
use crate::sample::{GuidanceConfig, SampleError};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LamboError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("{size} class combinations exceed the enumeration cap of {cap}")]
    EhviCap { size: usize, cap: usize },
    #[error("a point lies below the reference point")]
    BelowReference,
    #[error("expected {expected} objectives, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("edit budget {budget} exceeds the {available} editable positions")]
    Budget { budget: usize, available: usize },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid constraint: {0}")]
    Constraint(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl From<TensorError> for LamboError {
    fn from(e: TensorError) -> Self {
        LamboError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LamboConfig {
    /// Maximum Hamming distance from the seed.
    pub budget: usize,
    pub saliency_temperature: f64,
    pub saliency_floor: f64,
    pub diffusion_steps: usize,
    /// Corruption schedule over the generation steps.
    pub schedule: ScheduleKind,
    /// `steps` is the number of Langevin iterations per diffusion step and
    /// `lambda` must lie in `[0, 1]`.
    pub guidance: GuidanceConfig,
    pub constraints: ConstraintConfig,
    pub ehvi_cap: usize,
}

impl Default for LamboConfig {
    fn default() -> Self {
        LamboConfig {
            budget: 8,
            saliency_temperature: 0.1,
            saliency_floor: 1e-6,
            diffusion_steps: 16,
            schedule: ScheduleKind::InverseLinear,
            guidance: GuidanceConfig {
                eta: 0.1,
                lambda: 0.1,
                steps: 8,
                ..GuidanceConfig::default()
            },
            constraints: ConstraintConfig::default(),
            ehvi_cap: EHVI_CAP,
        }
    }
}

impl LamboConfig {
    pub fn validate(&self) -> Result<(), LamboError> {
        self.guidance.validate()?;
        if !(0.0..=1.0).contains(&self.guidance.lambda) {
            return Err(LamboError::Config("guidance.lambda must lie in [0, 1]".into()));
        }
        if !(self.saliency_temperature > 0.0) || !(self.saliency_floor > 0.0) {
            return Err(LamboError::Config("saliency temperature and floor must be positive".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(LamboError::Config("diffusion_steps must be at least 1".into()));
        }
        Ok(())
    }
}
