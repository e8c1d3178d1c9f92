use thiserror::Error;

use crate::cvae::CvaeError;
use crate::dataset::DatasetError;
use crate::engine::EngineError;
use crate::evalharness::EvalError;
use crate::masking::MaskError;
use crate::neural::NeuralError;
use crate::planner::PlanError;
use crate::selectivity::SelectivityError;
use crate::sqlfront::SqlError;
use crate::synthgen::SynthError;
use crate::transform::TransformError;

/// Umbrella error for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Selectivity(#[from] SelectivityError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl Error {
    /// True for errors caused by user input (bad SQL, bad files, bad config)
    /// as opposed to internal failures such as a diverging training run.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Sql(_) | Error::Plan(_) | Error::Dataset(_) | Error::Synth(_) => true,
            Error::Engine(e) => e.is_user_error(),
            Error::Transform(TransformError::UnknownCategory { .. }) => true,
            Error::Mask(MaskError::InvalidFactor(_) | MaskError::UnknownKind(_)) => true,
            Error::Cvae(CvaeError::InvalidConfig(_)) | Error::Selectivity(SelectivityError::InvalidConfig(_)) => true,
            Error::Eval(EvalError::InvalidSpec(_) | EvalError::UnsuitableTable) => true,
            Error::Eval(EvalError::Engine(e)) => e.is_user_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
