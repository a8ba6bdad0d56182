//! Rectified-flow ODE integration with a cached-midpoint solver.
//!
//! The cached-midpoint scheme ([`SolverKind::FireFlow`]) keeps the
//! second-order accuracy of the midpoint rule while spending one velocity
//! evaluation per step: the half-step predictor reuses the midpoint velocity
//! of the previous interval. Around it this crate provides:
//!
//! - analytic reference fields with exact flows ([`field`]),
//! - Euler, midpoint, Heun and cached-midpoint integrators with inversion and
//!   reconstruction drivers ([`solver`]),
//! - a small tanh MLP velocity model with exact gradients and Adam ([`mlp`]),
//! - 2D Gaussian-mixture data and rectified-flow / reflow training ([`mixture`], [`train`]),
//! - error and transport metrics ([`metrics`]).

pub mod error;
pub mod field;
pub mod format;
pub mod grid;
pub mod metrics;
pub mod mixture;
pub mod mlp;
pub mod solver;
pub mod state;
pub mod train;

pub use error::{FieldError, GridError, MixtureError, MlpError, StateError};
pub use field::{AnalyticField, CountingField, Evaluator, VelocityField};
pub use grid::{Direction, Schedule, TimeGrid};
pub use mixture::{ComponentSpec, GaussianMixture, MixtureSpec};
pub use mlp::{adam_step, Activation, Example, MlpGradient, MlpParams, OptState};
pub use solver::{
    integrate, invert, reconstruct, round_trip, RoundTrip, SolveError, SolverKind, SolverState,
    StepError, Trajectory,
};
pub use state::StateVec;
pub use train::{
    flow_matching_loss, generate_coupling, interpolate, reflow, train_from, train_rectified_flow,
    Coupling, CouplingSource, Provenance, ReflowOutcome, TrainConfig, TrainError, TrainOutcome,
};
