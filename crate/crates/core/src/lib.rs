//! Finite-horizon optimal covariance steering for discrete-time stochastic
//! linear systems with state chance constraints and input hard constraints.
//!
//! The controller has the saturated disturbance-feedback form
//! `u_k = v_k + K_k z_k`, where `z_k` is driven by element-wise clamped
//! noise. Synthesis is a convex conic program (second-order and PSD cones)
//! solved through the [`solve`] adapter; [`rollout`] validates the result by
//! closed-loop Monte Carlo simulation.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the common double-precision case.

pub mod error;
pub mod lifting;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod program;
pub mod rollout;
pub mod sampling;
pub mod scalar;
pub mod solve;

// Links the system OpenBLAS/LAPACK used by the PSD cone.
use openblas_src as _;

pub use error::Error;
pub use lifting::{build_lift, selector_input, selector_state, BlockLift, Selector};
pub use model::{
    allocate_risk, validate_spec, CostWeights, Gaussian, InputHalfspace, ProblemSpec,
    RiskAllocation, Saturation, SplitWeights, StateHalfspace,
};
pub use moments::{
    build_moment_blocks, mc_moment_oracle, psd_sqrt, sat_cross_moment, sat_second_moment,
    saturate, MomentMatrices, MomentMode, SaturationSpec,
};
pub use program::{build_program, ConicProgram, DecisionLayout, LmiEncoding, ProgramOptions};
pub use rollout::{
    empirical_cantelli_check, estimate_cost, simulate_closed_loop, vertex_containment_oracle,
    NoiseModel, RolloutOptions, RolloutReport,
};
pub use scalar::Scalar;
pub use solve::{
    solve_program, synthesize, ControllerSolution, SolutionStatus, SolverSettings, Synthesis,
    SynthesisOptions,
};

pub type ProblemSpec64 = ProblemSpec<f64>;
pub type BlockLift64 = BlockLift<f64>;
pub type MomentMatrices64 = MomentMatrices<f64>;
pub type ConicProgram64 = ConicProgram<f64>;
pub type ControllerSolution64 = ControllerSolution<f64>;
pub type RolloutReport64 = RolloutReport<f64>;
pub type Synthesis64 = Synthesis<f64>;

pub type ProblemSpec32 = ProblemSpec<f32>;
pub type ControllerSolution32 = ControllerSolution<f32>;
