//! Fixed-grid ODE integrators for `dx/dt = v(x, t)`.
//!
//! Four schemes share one driver:
//!
//! | kind       | NFE per step            | global order |
//! |------------|-------------------------|--------------|
//! | `Euler`    | 1                       | 1            |
//! | `Midpoint` | 2                       | 2            |
//! | `Heun`     | 2                       | 2            |
//! | `FireFlow` | 2 on the first step, then 1 | 2        |
//!
//! `FireFlow` is the midpoint rule with the half-step predictor driven by the
//! midpoint velocity cached from the previous interval instead of a fresh
//! evaluation at `(x_i, t_i)`. The first step has no cache and runs a full
//! midpoint step.
//!
//! Reverse-time integration uses the same driver on a decreasing grid: the
//! signed step `dt_i = t_{i+1} - t_i` is negative, which is the same as
//! integrating the negated drift forward.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FieldError;
use crate::field::{Evaluator, VelocityField};
use crate::format::fmt_f64;
use crate::grid::TimeGrid;
use crate::state::StateVec;

/// Slack allowed when checking that step endpoints stay inside [0, 1].
const TIME_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Midpoint,
    Heun,
    #[serde(rename = "fireflow")]
    FireFlow,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Euler,
        SolverKind::Midpoint,
        SolverKind::Heun,
        SolverKind::FireFlow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
            SolverKind::Heun => "heun",
            SolverKind::FireFlow => "fireflow",
        }
    }

    /// Total NFE of an `steps`-step run.
    pub fn nfe(&self, steps: usize) -> u64 {
        let n = steps as u64;
        match self {
            SolverKind::Euler => n,
            SolverKind::Midpoint | SolverKind::Heun => 2 * n,
            SolverKind::FireFlow => n + 1,
        }
    }

    /// Step count whose run costs exactly `nfe` evaluations, if one exists.
    pub fn steps_for_nfe(&self, nfe: u64) -> Option<usize> {
        let steps = match self {
            SolverKind::Euler => nfe,
            SolverKind::Midpoint | SolverKind::Heun => {
                if !nfe.is_multiple_of(2) {
                    return None;
                }
                nfe / 2
            }
            SolverKind::FireFlow => nfe.checked_sub(1)?,
        };
        (steps >= 1).then_some(steps as usize)
    }

    /// Global order of accuracy on smooth fields.
    pub fn order(&self) -> u32 {
        match self {
            SolverKind::Euler => 1,
            _ => 2,
        }
    }

    /// Whether the trajectory records one midpoint velocity per step.
    pub fn records_mid_velocity(&self) -> bool {
        matches!(self, SolverKind::Midpoint | SolverKind::FireFlow)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                format!("unknown solver {s:?} (expected euler, midpoint, heun or fireflow)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("state left the finite range")]
    NonFinite,
    #[error("step from t = {t} by {dt} leaves [0, 1]")]
    TimeOutOfRange { t: f64, dt: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Error)]
pub enum SolveError {
    #[error("integration aborted at step {step}: {cause}")]
    Aborted {
        step: usize,
        cause: StepError,
        /// States computed before the failing step.
        partial: Box<Trajectory>,
    },
}

impl SolveError {
    pub fn step(&self) -> usize {
        match self {
            SolveError::Aborted { step, .. } => *step,
        }
    }
}

/// Running state of a cached-midpoint integration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: StateVec,
    /// Midpoint velocity of the previous interval; absent before the first step.
    pub cached_mid_velocity: Option<StateVec>,
    pub nfe: u64,
}

impl SolverState {
    pub fn new(x: StateVec) -> Self {
        Self {
            x,
            cached_mid_velocity: None,
            nfe: 0,
        }
    }
}

fn check_step(t: f64, dt: f64) -> Result<(), StepError> {
    let end = t + dt;
    let inside = |s: f64| (-TIME_SLACK..=1.0 + TIME_SLACK).contains(&s);
    if !(dt.is_finite() && inside(t) && inside(end)) {
        return Err(StepError::TimeOutOfRange { t, dt });
    }
    Ok(())
}

/// Clamps a time within [`TIME_SLACK`] of the unit interval onto it.
fn clamp_time(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

/// `x + dt * v(x, t)`. One NFE.
pub fn step_euler<F: VelocityField + ?Sized>(
    ev: &mut Evaluator<'_, F>,
    x: &StateVec,
    t: f64,
    dt: f64,
) -> Result<StateVec, StepError> {
    check_step(t, dt)?;
    let v = ev.evaluate(x, clamp_time(t))?;
    x.offset(dt, &v).ok_or(StepError::NonFinite)
}

/// Standard midpoint step. Returns the new state and the midpoint velocity.
/// Two NFE.
pub fn step_midpoint<F: VelocityField + ?Sized>(
    ev: &mut Evaluator<'_, F>,
    x: &StateVec,
    t: f64,
    dt: f64,
) -> Result<(StateVec, StateVec), StepError> {
    check_step(t, dt)?;
    let v = ev.evaluate(x, clamp_time(t))?;
    midpoint_from(ev, x, &v, t, dt)
}

/// Half step along `v_start`, one evaluation at the midpoint, full step
/// along the midpoint velocity. One NFE.
fn midpoint_from<F: VelocityField + ?Sized>(
    ev: &mut Evaluator<'_, F>,
    x: &StateVec,
    v_start: &StateVec,
    t: f64,
    dt: f64,
) -> Result<(StateVec, StateVec), StepError> {
    let x_mid = x.offset(0.5 * dt, v_start).ok_or(StepError::NonFinite)?;
    let v_mid = ev.evaluate(&x_mid, clamp_time(t + 0.5 * dt))?;
    let next = x.offset(dt, &v_mid).ok_or(StepError::NonFinite)?;
    Ok((next, v_mid))
}

/// Heun (explicit trapezoid) step. Two NFE.
pub fn step_heun<F: VelocityField + ?Sized>(
    ev: &mut Evaluator<'_, F>,
    x: &StateVec,
    t: f64,
    dt: f64,
) -> Result<StateVec, StepError> {
    check_step(t, dt)?;
    let v0 = ev.evaluate(x, clamp_time(t))?;
    let predictor = x.offset(dt, &v0).ok_or(StepError::NonFinite)?;
    let v1 = ev.evaluate(&predictor, clamp_time(t + dt))?;
    let mean: Vec<f64> = v0
        .as_slice()
        .iter()
        .zip(v1.as_slice())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mean = StateVec::new(mean).map_err(|_| StepError::NonFinite)?;
    x.offset(dt, &mean).ok_or(StepError::NonFinite)
}

/// Cached-midpoint step.
///
/// Without a cache this is a full midpoint step (two NFE). With a cache, the
/// cached velocity stands in for `v(x, t)` in the half-step predictor and
/// only the midpoint is evaluated (one NFE). Either way the new midpoint
/// velocity replaces the cache.
pub fn step_fireflow<F: VelocityField + ?Sized>(
    ev: &mut Evaluator<'_, F>,
    state: SolverState,
    t: f64,
    dt: f64,
) -> Result<SolverState, StepError> {
    check_step(t, dt)?;
    let before = ev.nfe();
    let v_hat = match state.cached_mid_velocity {
        Some(v) => v,
        None => ev.evaluate(&state.x, clamp_time(t))?,
    };
    let (x, v_mid) = midpoint_from(ev, &state.x, &v_hat, t, dt)?;
    Ok(SolverState {
        x,
        cached_mid_velocity: Some(v_mid),
        nfe: state.nfe + (ev.nfe() - before),
    })
}

/// States of one integration run, aligned with the grid points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub solver: SolverKind,
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    /// One midpoint velocity per completed step (midpoint-family solvers only).
    pub mid_velocities: Vec<StateVec>,
    /// NFE consumed up to and including each state; starts at 0.
    pub nfe_cumulative: Vec<u64>,
}

impl Trajectory {
    fn start(solver: SolverKind, t0: f64, x0: StateVec) -> Self {
        Self {
            solver,
            times: vec![t0],
            states: vec![x0],
            mid_velocities: Vec::new(),
            nfe_cumulative: vec![0],
        }
    }

    pub fn nfe_total(&self) -> u64 {
        *self
            .nfe_cumulative
            .last()
            .expect("trajectory has a start state")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn first(&self) -> &StateVec {
        &self.states[0]
    }

    pub fn last(&self) -> &StateVec {
        self.states.last().expect("trajectory has a start state")
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// CSV with columns `step,t,x_0..x_{d-1},nfe_cum`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let dims: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        writeln!(w, "step,t,{},nfe_cum", dims.join(","))?;
        for (i, ((t, x), nfe)) in self
            .times
            .iter()
            .zip(&self.states)
            .zip(&self.nfe_cumulative)
            .enumerate()
        {
            let xs: Vec<String> = x.as_slice().iter().map(|&c| fmt_f64(c)).collect();
            writeln!(w, "{i},{},{},{nfe}", fmt_f64(*t), xs.join(","))?;
        }
        Ok(())
    }
}

/// Integrates `x0` over every interval of `grid` with the chosen scheme.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &StateVec,
    grid: &TimeGrid,
    kind: SolverKind,
) -> Result<Trajectory, SolveError> {
    drive(field, x0, grid, kind, |_, _| {})
}

fn drive<F, H>(
    field: &F,
    x0: &StateVec,
    grid: &TimeGrid,
    kind: SolverKind,
    mut before_step: H,
) -> Result<Trajectory, SolveError>
where
    F: VelocityField + ?Sized,
    H: FnMut(usize, &SolverState),
{
    let mut ev = Evaluator::new(field);
    let mut traj = Trajectory::start(kind, grid.start(), x0.clone());
    let mut state = SolverState::new(x0.clone());

    for i in 0..grid.steps() {
        let t = grid.points()[i];
        let dt = grid.dt(i);
        before_step(i, &state);
        let result = match kind {
            SolverKind::Euler => step_euler(&mut ev, &state.x, t, dt).map(|x| (x, None)),
            SolverKind::Heun => step_heun(&mut ev, &state.x, t, dt).map(|x| (x, None)),
            SolverKind::Midpoint => {
                step_midpoint(&mut ev, &state.x, t, dt).map(|(x, v)| (x, Some(v)))
            }
            SolverKind::FireFlow => step_fireflow(&mut ev, state.clone(), t, dt).map(|s| {
                let v = s.cached_mid_velocity.clone();
                (s.x, v)
            }),
        };
        let (x, mid) = match result {
            Ok(r) => r,
            Err(cause) => {
                return Err(SolveError::Aborted {
                    step: i,
                    cause,
                    partial: Box::new(traj),
                })
            }
        };
        if let Some(v) = &mid {
            traj.mid_velocities.push(v.clone());
        }
        state = SolverState {
            x: x.clone(),
            cached_mid_velocity: if kind == SolverKind::FireFlow {
                mid
            } else {
                None
            },
            nfe: ev.nfe(),
        };
        traj.times.push(grid.points()[i + 1]);
        traj.states.push(x);
        traj.nfe_cumulative.push(ev.nfe());
    }
    Ok(traj)
}

/// Maps a data point to its structured-noise endpoint with the cached
/// midpoint scheme, keeping the full record of cached velocities.
pub fn invert<F: VelocityField + ?Sized>(
    field: &F,
    x_data: &StateVec,
    grid: &TimeGrid,
) -> Result<Trajectory, SolveError> {
    integrate(field, x_data, grid, SolverKind::FireFlow)
}

/// Integrates from structured noise back to the data end with the cached
/// midpoint scheme. Only the endpoint of the inversion is used.
pub fn reconstruct<F: VelocityField + ?Sized>(
    field: &F,
    x_noise: &StateVec,
    grid: &TimeGrid,
) -> Result<Trajectory, SolveError> {
    drive(
        field,
        x_noise,
        grid,
        SolverKind::FireFlow,
        feature_replacement_point,
    )
}

/// Where an editing pipeline would swap stored inversion features into the
/// model before the first denoising evaluation. Editing is not supported:
/// this is a no-op.
fn feature_replacement_point(_step: usize, _state: &SolverState) {}

/// An inversion followed by a reconstruction over the mirrored grid.
#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub inversion: Trajectory,
    pub reconstruction: Trajectory,
}

impl RoundTrip {
    pub fn nfe_total(&self) -> u64 {
        self.inversion.nfe_total() + self.reconstruction.nfe_total()
    }

    /// `||x_reconstructed - x_data||_2`.
    pub fn error(&self) -> f64 {
        self.reconstruction.last().distance(self.inversion.first())
    }
}

/// Inverts `x_data` over `inversion_grid` and reconstructs over its mirror,
/// both with `kind`.
pub fn round_trip<F: VelocityField + ?Sized>(
    field: &F,
    x_data: &StateVec,
    inversion_grid: &TimeGrid,
    kind: SolverKind,
) -> Result<RoundTrip, SolveError> {
    let back = inversion_grid.reversed();
    let (inversion, reconstruction) = match kind {
        SolverKind::FireFlow => {
            let inversion = invert(field, x_data, inversion_grid)?;
            let reconstruction = reconstruct(field, inversion.last(), &back)?;
            (inversion, reconstruction)
        }
        _ => {
            let inversion = integrate(field, x_data, inversion_grid, kind)?;
            let reconstruction = integrate(field, inversion.last(), &back, kind)?;
            (inversion, reconstruction)
        }
    };
    Ok(RoundTrip {
        inversion,
        reconstruction,
    })
}
