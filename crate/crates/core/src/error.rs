use thiserror::Error;

use crate::lifting::LiftError;
use crate::linalg::LinalgError;
use crate::model::SpecError;
use crate::moments::MomentError;
use crate::program::ProgramError;
use crate::rollout::RolloutError;
use crate::solve::SolveError;

/// Umbrella error for the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}
