//! Error, transport and geometry metrics.
//!
//! Every function here is pure over its inputs. Per-sample work may run on
//! the rayon pool; results are collected in input order and reduced
//! sequentially so outputs do not depend on the thread count.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::error::{FieldError, GridError};
use crate::field::{evaluate, AnalyticField, VelocityField};
use crate::grid::{Schedule, TimeGrid};
use crate::solver::{integrate, round_trip, SolveError, SolverKind, Trajectory};
use crate::state::{euclidean, StateVec};

/// Errors at or below this are treated as exact and left out of order fits.
pub const NOISE_FLOOR: f64 = 1e-13;

/// Minimum number of usable points for an order fit.
pub const MIN_FIT_POINTS: usize = 4;

/// Steps of the reference midpoint solve in [`perturbation_propagation`].
pub const PERTURBATION_STEPS: usize = 512;

/// Relative slack on the perturbation bound, covering the reference solver's
/// discretization error.
pub const PERTURBATION_SLACK: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("error series: {0}")]
    Series(String),
    #[error("trajectory needs at least 3 states, got {0}")]
    TooFewStates(usize),
    #[error("trajectory endpoints coincide; straightness is undefined")]
    ZeroChord,
    #[error("sample set is empty")]
    EmptySamples,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub steps: usize,
    /// Largest step magnitude of the grid.
    pub dt: f64,
    pub error: f64,
    pub nfe: u64,
}

/// Errors over a refinement ladder. Step sizes strictly decrease.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSeries {
    pub solver: SolverKind,
    pub field: String,
    points: Vec<ErrorPoint>,
}

impl ErrorSeries {
    pub fn new(
        solver: SolverKind,
        field: String,
        points: Vec<ErrorPoint>,
    ) -> Result<Self, MetricsError> {
        if let Some(p) = points
            .iter()
            .find(|p| !(p.error.is_finite() && p.error >= 0.0))
        {
            return Err(MetricsError::Series(format!(
                "invalid error value {}",
                p.error
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.dt.is_finite() && p.dt > 0.0)) {
            return Err(MetricsError::Series(format!("invalid step size {}", p.dt)));
        }
        if points.windows(2).any(|w| w[1].dt >= w[0].dt) {
            return Err(MetricsError::Series(
                "step sizes must strictly decrease".into(),
            ));
        }
        Ok(Self {
            solver,
            field,
            points,
        })
    }

    pub fn points(&self) -> &[ErrorPoint] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Fewer than [`MIN_FIT_POINTS`] points above [`NOISE_FLOOR`]; the other
    /// fields are zero.
    pub degenerate: bool,
    pub points_used: usize,
}

impl OrderEstimate {
    fn degenerate(points_used: usize) -> Self {
        Self {
            slope: 0.0,
            intercept: 0.0,
            r_squared: 0.0,
            degenerate: true,
            points_used,
        }
    }
}

/// Least-squares slope of `log(error)` against `log(dt)`.
pub fn estimate_order(series: &ErrorSeries) -> OrderEstimate {
    let (dts, errs): (Vec<f64>, Vec<f64>) = series.points.iter().map(|p| (p.dt, p.error)).unzip();
    fit_log_log(&dts, &errs)
}

/// Log-log least squares over the pairs whose error is above the noise floor.
pub fn fit_log_log(dts: &[f64], errors: &[f64]) -> OrderEstimate {
    let pts: Vec<(f64, f64)> = dts
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > NOISE_FLOOR)
        .map(|(&h, &e)| (h.ln(), e.ln()))
        .collect();
    let n = pts.len();
    if n < MIN_FIT_POINTS {
        return OrderEstimate::degenerate(n);
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return OrderEstimate::degenerate(n);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    OrderEstimate {
        slope,
        intercept,
        r_squared,
        degenerate: false,
        points_used: n,
    }
}

/// Global error at `t = 1` of `kind` started from `x0` at `t = 0`, over each
/// grid size in `ladder` (ascending), against the closed-form flow.
pub fn convergence_series(
    field: &AnalyticField,
    x0: &StateVec,
    kind: SolverKind,
    ladder: &[usize],
    schedule: &Schedule,
) -> Result<ErrorSeries, MetricsError> {
    let exact = field.exact_solution(x0, 0.0, 1.0)?;
    let mut points = Vec::with_capacity(ladder.len());
    for &steps in ladder {
        let grid = schedule.grid(steps)?;
        let traj = integrate(field, x0, &grid, kind)?;
        points.push(ErrorPoint {
            steps,
            dt: grid.max_abs_dt(),
            error: traj.last().distance(&exact),
            nfe: traj.nfe_total(),
        });
    }
    ErrorSeries::new(kind, field.to_string(), points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReuseStep {
    pub step: usize,
    pub t: f64,
    pub error: f64,
}

/// `||v_hat - v||` at every step that reuses a cached velocity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityReuse {
    pub steps: usize,
    pub dt: f64,
    pub per_step: Vec<ReuseStep>,
    /// Evaluations spent by the solver itself.
    pub solver_nfe: u64,
    /// Extra evaluations spent on the comparison, outside the solver budget.
    pub instrumentation_evals: u64,
}

impl VelocityReuse {
    pub fn max(&self) -> f64 {
        self.per_step.iter().map(|s| s.error).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.per_step.is_empty() {
            return 0.0;
        }
        self.per_step.iter().map(|s| s.error).sum::<f64>() / self.per_step.len() as f64
    }
}

/// Runs the cached-midpoint solver over `grid` and compares, at each step
/// `i >= 1`, the cached midpoint velocity of interval `i - 1` with a fresh
/// evaluation `v(x_i, t_i)`. The first step evaluates `v(x_0, t_0)` itself
/// and has nothing to compare.
pub fn velocity_reuse_error<F: VelocityField + ?Sized>(
    field: &F,
    x0: &StateVec,
    grid: &TimeGrid,
) -> Result<VelocityReuse, MetricsError> {
    let traj = integrate(field, x0, grid, SolverKind::FireFlow)?;
    let mut per_step = Vec::with_capacity(grid.steps().saturating_sub(1));
    for i in 1..grid.steps() {
        let fresh = evaluate(field, &traj.states[i], traj.times[i])?;
        per_step.push(ReuseStep {
            step: i,
            t: traj.times[i],
            error: fresh.distance(&traj.mid_velocities[i - 1]),
        });
    }
    Ok(VelocityReuse {
        steps: grid.steps(),
        dt: grid.max_abs_dt(),
        instrumentation_evals: per_step.len() as u64,
        per_step,
        solver_nfe: traj.nfe_total(),
    })
}

/// Mean reuse error over many start points, each run on `grid`.
pub fn mean_velocity_reuse_error<F: VelocityField + ?Sized>(
    field: &F,
    starts: &[StateVec],
    grid: &TimeGrid,
) -> Result<f64, MetricsError> {
    if starts.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let means = starts
        .par_iter()
        .map(|x0| velocity_reuse_error(field, x0, grid).map(|r| r.mean()))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub delta_t_norm: f64,
    pub delta_0_norm: f64,
    pub lipschitz: f64,
    pub horizon: f64,
    /// `exp(-L T) * ||delta_T||`.
    pub bound: f64,
    /// `||delta_0|| <= bound` up to [`PERTURBATION_SLACK`].
    pub satisfied: bool,
    /// Same quantity from the closed-form flow.
    pub exact_delta_0_norm: f64,
    /// Separation at every grid point, from `t = horizon` down to 0.
    pub separation: Vec<SeparationPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationPoint {
    pub t: f64,
    pub norm: f64,
    /// `exp(-L (horizon - t)) * ||delta_T||`.
    pub reference: f64,
}

/// Integrates `x_T` and `x_T + delta_T` from `horizon` back to 0 with a fine
/// midpoint grid and compares the final separation with `exp(-L T)`.
pub fn perturbation_propagation(
    field: &AnalyticField,
    x_t: &StateVec,
    delta_t: &StateVec,
    horizon: f64,
) -> Result<PerturbationReport, MetricsError> {
    if x_t.dim() != delta_t.dim() {
        return Err(MetricsError::DimensionMismatch(x_t.dim(), delta_t.dim()));
    }
    let grid = TimeGrid::between(horizon, 0.0, PERTURBATION_STEPS)?;
    let shifted = x_t
        .offset(1.0, delta_t)
        .ok_or_else(|| MetricsError::Series("perturbed start is not finite".into()))?;
    let base = integrate(field, x_t, &grid, SolverKind::Midpoint)?;
    let pert = integrate(field, &shifted, &grid, SolverKind::Midpoint)?;
    let delta_0_norm = pert.last().distance(base.last());
    let exact_delta_0_norm = field
        .exact_solution(&shifted, horizon, 0.0)?
        .distance(&field.exact_solution(x_t, horizon, 0.0)?);
    let lipschitz = field.lipschitz();
    let delta_t_norm = delta_t.norm();
    let bound = (-lipschitz * horizon).exp() * delta_t_norm;
    let separation = base
        .times
        .iter()
        .zip(base.states.iter().zip(&pert.states))
        .map(|(&t, (a, b))| SeparationPoint {
            t,
            norm: a.distance(b),
            reference: (-lipschitz * (horizon - t)).exp() * delta_t_norm,
        })
        .collect();
    Ok(PerturbationReport {
        delta_t_norm,
        delta_0_norm,
        lipschitz,
        horizon,
        bound,
        satisfied: delta_0_norm <= bound * (1.0 + PERTURBATION_SLACK),
        exact_delta_0_norm,
        separation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFailure {
    pub index: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub solver: SolverKind,
    pub steps: usize,
    /// Inversion plus reconstruction NFE per sample.
    pub nfe: u64,
    /// Per-sample `||x_rec - x_data||`, in sample order, failures omitted.
    pub errors: Vec<f64>,
    pub failures: Vec<SampleFailure>,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Inverts every sample from `t = 1` to `t = 0` on the reversed schedule
/// grid and reconstructs on the forward grid, both with `kind`.
pub fn reconstruction_error<F: VelocityField + ?Sized>(
    field: &F,
    samples: &[StateVec],
    steps: usize,
    kind: SolverKind,
    schedule: &Schedule,
) -> Result<ReconstructionReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let inversion = schedule.grid(steps)?.reversed();
    let results: Vec<Result<f64, SolveError>> = samples
        .par_iter()
        .map(|x| round_trip(field, x, &inversion, kind).map(|rt| rt.error()))
        .collect();
    let mut errors = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => errors.push(e),
            Err(err) => failures.push(SampleFailure {
                index,
                step: err.step(),
                message: err.to_string(),
            }),
        }
    }
    let (mean, p50, p95) = summarize(&errors);
    Ok(ReconstructionReport {
        solver: kind,
        steps,
        nfe: 2 * kind.nfe(steps),
        errors,
        failures,
        mean,
        p50,
        p95,
    })
}

/// Mean and nearest-rank 50th / 95th percentiles; zeros when empty.
fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = |q: f64| {
        let k = (q * sorted.len() as f64).ceil() as usize;
        sorted[k.clamp(1, sorted.len()) - 1]
    };
    (mean, rank(0.5), rank(0.95))
}

/// Largest distance of an interior state from the chord between the first
/// and last states, relative to the chord length.
pub fn straightness(states: &[StateVec]) -> Result<f64, MetricsError> {
    if states.len() < 3 {
        return Err(MetricsError::TooFewStates(states.len()));
    }
    let a = states[0].as_slice();
    let b = states[states.len() - 1].as_slice();
    let chord: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
    let len2: f64 = chord.iter().map(|c| c * c).sum();
    if len2 == 0.0 {
        return Err(MetricsError::ZeroChord);
    }
    let mut worst = 0.0f64;
    for s in &states[1..states.len() - 1] {
        let p = s.as_slice();
        if p.len() != a.len() {
            return Err(MetricsError::DimensionMismatch(a.len(), p.len()));
        }
        let along: f64 = p
            .iter()
            .zip(a)
            .zip(&chord)
            .map(|((p, a), c)| (p - a) * c)
            .sum();
        let u = (along / len2).clamp(0.0, 1.0);
        let foot: Vec<f64> = a.iter().zip(&chord).map(|(a, c)| a + u * c).collect();
        worst = worst.max(euclidean(p, &foot));
    }
    Ok(worst / len2.sqrt())
}

/// Mean straightness over trajectories.
pub fn mean_straightness(trajectories: &[Trajectory]) -> Result<f64, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let values = trajectories
        .iter()
        .map(|t| straightness(&t.states))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sum over all ordered pairs of `||a_i - b_j||`, rows in parallel, reduced
/// in row order.
fn pair_distance_sum(a: &[StateVec], b: &[StateVec]) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| {
            b.iter()
                .map(|y| euclidean(x.as_slice(), y.as_slice()))
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum()
}

/// V-statistic energy distance `2 E|A - B| - E|A - A'| - E|B - B'|`.
///
/// Diagonal terms are included, so identical sets give exactly 0. The
/// statistic is non-negative; roundoff below zero is clamped.
pub fn energy_distance(a: &[StateVec], b: &[StateVec]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let d = a[0].dim();
    if let Some(x) = a.iter().chain(b).find(|x| x.dim() != d) {
        return Err(MetricsError::DimensionMismatch(d, x.dim()));
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let ab = pair_distance_sum(a, b) / (n * m);
    let aa = pair_distance_sum(a, a) / (n * n);
    let bb = pair_distance_sum(b, b) / (m * m);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Integrates every start point over `grid`, in parallel, in input order.
pub fn integrate_many<F: VelocityField + ?Sized>(
    field: &F,
    starts: &[StateVec],
    grid: &TimeGrid,
    kind: SolverKind,
) -> Result<Vec<Trajectory>, MetricsError> {
    let out = starts
        .par_iter()
        .map(|x0| integrate(field, x0, grid, kind))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

/// Mean over trajectories and their states of `||v(x_i, t_i) - v(x_0, t_0)||`.
/// Zero when the drift is constant along every path.
pub fn velocity_variation<F: VelocityField + ?Sized>(
    field: &F,
    trajectories: &[Trajectory],
) -> Result<f64, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let per_path = trajectories
        .par_iter()
        .map(|traj| -> Result<f64, MetricsError> {
            let v0 = evaluate(field, &traj.states[0], traj.times[0])?;
            let mut total = 0.0;
            for (x, &t) in traj.states.iter().zip(&traj.times).skip(1) {
                total += evaluate(field, x, t)?.distance(&v0);
            }
            Ok(total / traj.steps() as f64)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(per_path.iter().sum::<f64>() / per_path.len() as f64)
}
