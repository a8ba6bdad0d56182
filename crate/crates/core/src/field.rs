//! Velocity fields `v(x, t)` and their evaluation.
//!
//! A [`VelocityField`] is a raw drift. Solvers never call it directly: every
//! call goes through an [`Evaluator`], which validates the arguments and
//! counts function evaluations (NFE) for the run that owns it.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::FieldError;
use crate::state::StateVec;

/// Highest polynomial degree accepted by [`AnalyticField::TimeOnly`].
pub const MAX_TIME_DEGREE: usize = 4;

/// A drift `v: R^d x [0, 1] -> R^d`.
///
/// Implementations must be deterministic and return a vector of the same
/// dimension as `x`.
pub trait VelocityField: Send + Sync {
    /// The dimension the field is defined on, or `None` if it acts on any.
    fn dim(&self) -> Option<usize>;

    /// Raw drift at `(x, t)`. No validation, no counting.
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).velocity(x, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).velocity(x, t)
    }
}

/// Validated, uncounted evaluation. Used for instrumentation that must not
/// show up in a run's NFE budget.
pub fn evaluate<F: VelocityField + ?Sized>(
    field: &F,
    x: &StateVec,
    t: f64,
) -> Result<StateVec, FieldError> {
    check_arguments(field, x, t)?;
    into_velocity(field.velocity(x.as_slice(), t), x, t)
}

fn check_arguments<F: VelocityField + ?Sized>(
    field: &F,
    x: &StateVec,
    t: f64,
) -> Result<(), FieldError> {
    if let Some(expected) = field.dim() {
        if expected != x.dim() {
            return Err(FieldError::DimensionMismatch {
                expected,
                got: x.dim(),
            });
        }
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FieldError::TimeOutOfRange(t));
    }
    Ok(())
}

fn into_velocity(v: Vec<f64>, x: &StateVec, t: f64) -> Result<StateVec, FieldError> {
    if v.len() != x.dim() {
        return Err(FieldError::DimensionMismatch {
            expected: x.dim(),
            got: v.len(),
        });
    }
    StateVec::new(v).map_err(|_| FieldError::NonFiniteOutput { t })
}

/// Per-run evaluation handle that owns the NFE counter.
pub struct Evaluator<'f, F: VelocityField + ?Sized> {
    field: &'f F,
    nfe: u64,
}

impl<'f, F: VelocityField + ?Sized> Evaluator<'f, F> {
    pub fn new(field: &'f F) -> Self {
        Self { field, nfe: 0 }
    }

    /// Evaluates the drift and charges one NFE.
    ///
    /// The NFE is charged only when the field is actually called; argument
    /// validation failures cost nothing.
    pub fn evaluate(&mut self, x: &StateVec, t: f64) -> Result<StateVec, FieldError> {
        check_arguments(self.field, x, t)?;
        self.nfe += 1;
        into_velocity(self.field.velocity(x.as_slice(), t), x, t)
    }

    pub fn nfe(&self) -> u64 {
        self.nfe
    }

    pub fn field(&self) -> &'f F {
        self.field
    }
}

/// Wraps a field and counts every raw call, independently of any
/// [`Evaluator`]. Used to audit NFE bookkeeping.
pub struct CountingField<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.velocity(x, t)
    }
}

/// Polynomial in `t` with ascending coefficients, degree at most [`MAX_TIME_DEGREE`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimePolynomial {
    coefficients: Vec<f64>,
}

impl TimePolynomial {
    pub fn new(coefficients: Vec<f64>) -> Result<Self, FieldError> {
        if coefficients.is_empty() || coefficients.len() > MAX_TIME_DEGREE + 1 {
            return Err(FieldError::Invalid(format!(
                "time polynomial needs 1..={} coefficients, got {}",
                MAX_TIME_DEGREE + 1,
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::Invalid(
                "non-finite polynomial coefficient".into(),
            ));
        }
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * t + c)
    }

    /// Antiderivative vanishing at 0.
    pub fn integral(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, c)| acc * t + c / (k as f64 + 1.0))
            * t
    }

    pub fn is_constant(&self) -> bool {
        self.coefficients[1..].iter().all(|&c| c == 0.0)
    }
}

/// Reference fields with closed-form flows.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    /// `v(x, t) = c`.
    Constant(StateVec),
    /// `v(x, t) = a * x`, component-wise, in any dimension.
    LinearScalar(f64),
    /// `v(x, t) = p(t)` in every component, in any dimension.
    TimeOnly(TimePolynomial),
}

impl AnalyticField {
    pub fn constant(c: Vec<f64>) -> Result<Self, FieldError> {
        StateVec::new(c)
            .map(Self::Constant)
            .map_err(|e| FieldError::Invalid(e.to_string()))
    }

    pub fn linear(a: f64) -> Result<Self, FieldError> {
        if !a.is_finite() {
            return Err(FieldError::Invalid("non-finite rate".into()));
        }
        Ok(Self::LinearScalar(a))
    }

    pub fn time_only(coefficients: Vec<f64>) -> Result<Self, FieldError> {
        TimePolynomial::new(coefficients).map(Self::TimeOnly)
    }

    /// Lipschitz constant in `x`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Self::LinearScalar(a) => a.abs(),
            Self::Constant(_) | Self::TimeOnly(_) => 0.0,
        }
    }

    /// True when the drift depends on neither `x` nor `t`.
    pub fn is_uniform(&self) -> bool {
        match self {
            Self::Constant(_) => true,
            Self::LinearScalar(a) => *a == 0.0,
            Self::TimeOnly(p) => p.is_constant(),
        }
    }

    /// Exact flow map from `(x0, t0)` to time `t1`. `t1 < t0` runs backwards.
    pub fn exact_solution(&self, x0: &StateVec, t0: f64, t1: f64) -> Result<StateVec, FieldError> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(FieldError::Invalid("non-finite time".into()));
        }
        let out: Vec<f64> = match self {
            Self::Constant(c) => {
                if c.dim() != x0.dim() {
                    return Err(FieldError::DimensionMismatch {
                        expected: c.dim(),
                        got: x0.dim(),
                    });
                }
                let span = t1 - t0;
                x0.as_slice()
                    .iter()
                    .zip(c.as_slice())
                    .map(|(x, v)| x + v * span)
                    .collect()
            }
            Self::LinearScalar(a) => {
                let growth = (a * (t1 - t0)).exp();
                x0.as_slice().iter().map(|x| x * growth).collect()
            }
            Self::TimeOnly(p) => {
                let shift = p.integral(t1) - p.integral(t0);
                x0.as_slice().iter().map(|x| x + shift).collect()
            }
        };
        StateVec::new(out).map_err(|_| FieldError::NonFiniteOutput { t: t1 })
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> Option<usize> {
        match self {
            Self::Constant(c) => Some(c.dim()),
            Self::LinearScalar(_) | Self::TimeOnly(_) => None,
        }
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            Self::Constant(c) => c.as_slice().to_vec(),
            Self::LinearScalar(a) => x.iter().map(|xi| a * xi).collect(),
            Self::TimeOnly(p) => vec![p.eval(t); x.len()],
        }
    }
}

fn parse_list(params: &str) -> Result<Vec<f64>, FieldError> {
    params
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| FieldError::Invalid(format!("bad number {s:?}: {e}")))
        })
        .collect()
}

/// Parses `NAME:params`: `constant:1,-2`, `linear:-1`, `time:0,2`
/// (ascending polynomial coefficients).
impl FromStr for AnalyticField {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, params) = s
            .split_once(':')
            .ok_or_else(|| FieldError::Invalid(format!("expected NAME:params, got {s:?}")))?;
        let values = parse_list(params)?;
        match name.trim() {
            "constant" => Self::constant(values),
            "linear" => match values.as_slice() {
                [a] => Self::linear(*a),
                _ => Err(FieldError::Invalid("linear takes exactly one rate".into())),
            },
            "time" => Self::time_only(values),
            other => Err(FieldError::Invalid(format!("unknown field {other:?}"))),
        }
    }
}

impl fmt::Display for AnalyticField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            Self::Constant(c) => write!(f, "constant:{}", join(c.as_slice())),
            Self::LinearScalar(a) => write!(f, "linear:{a}"),
            Self::TimeOnly(p) => write!(f, "time:{}", join(p.coefficients())),
        }
    }
}
