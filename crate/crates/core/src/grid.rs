//! Monotone time grids on [0, 1].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::GridError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// How grid points are spaced over [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Uniform,
    /// `t_i = (i / N)^gamma`.
    Power(f64),
}

impl Schedule {
    /// Forward grid over [0, 1] with `steps` intervals.
    pub fn grid(&self, steps: usize) -> Result<TimeGrid, GridError> {
        match *self {
            Schedule::Uniform => TimeGrid::uniform(steps),
            Schedule::Power(gamma) => TimeGrid::power(steps, gamma),
        }
    }
}

impl FromStr for Schedule {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "uniform" => Ok(Schedule::Uniform),
            other => {
                let gamma = other
                    .strip_prefix("power:")
                    .ok_or_else(|| {
                        GridError::InvalidSchedule(format!("unknown schedule {other:?}"))
                    })?
                    .parse::<f64>()
                    .map_err(|e| GridError::InvalidSchedule(e.to_string()))?;
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(GridError::InvalidSchedule(format!(
                        "power exponent must be positive, got {gamma}"
                    )));
                }
                Ok(Schedule::Power(gamma))
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Uniform => f.write_str("uniform"),
            Schedule::Power(gamma) => write!(f, "power:{gamma}"),
        }
    }
}

/// Strictly monotone time points `t_0 .. t_N` in [0, 1], `N >= 1`.
///
/// Steps are signed: `dt_i = t_{i+1} - t_i` is negative on a reverse grid,
/// so one integration driver serves both directions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, GridError> {
        if points.len() < 2 {
            return Err(GridError::TooFewPoints);
        }
        for (index, &value) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(GridError::OutOfRange { index, value });
            }
        }
        let increasing = points[1] > points[0];
        for (index, w) in points.windows(2).enumerate() {
            let ok = if increasing { w[1] > w[0] } else { w[1] < w[0] };
            if !ok {
                return Err(GridError::NotMonotone { index: index + 1 });
            }
        }
        Ok(Self { points })
    }

    /// `steps` equal intervals from 0 to 1.
    pub fn uniform(steps: usize) -> Result<Self, GridError> {
        Self::between(0.0, 1.0, steps)
    }

    /// `steps` equal intervals from `start` to `end` (either order).
    pub fn between(start: f64, end: f64, steps: usize) -> Result<Self, GridError> {
        if steps == 0 {
            return Err(GridError::TooFewPoints);
        }
        let n = steps as f64;
        let points = (0..=steps)
            .map(|i| {
                if i == steps {
                    end
                } else {
                    start + (end - start) * (i as f64 / n)
                }
            })
            .collect();
        Self::new(points)
    }

    /// `t_i = (i / N)^gamma` from 0 to 1.
    pub fn power(steps: usize, gamma: f64) -> Result<Self, GridError> {
        if steps == 0 {
            return Err(GridError::TooFewPoints);
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(GridError::InvalidSchedule(format!(
                "power exponent must be positive, got {gamma}"
            )));
        }
        let n = steps as f64;
        Self::new((0..=steps).map(|i| (i as f64 / n).powf(gamma)).collect())
    }

    /// The same points traversed in the opposite direction.
    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn direction(&self) -> Direction {
        if self.end() > self.start() {
            Direction::Forward
        } else {
            Direction::Reverse
        }
    }

    /// Signed step `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    pub fn max_abs_dt(&self) -> f64 {
        (0..self.steps())
            .map(|i| self.dt(i).abs())
            .fold(0.0, f64::max)
    }

    /// `|t_N - t_0|`.
    pub fn span(&self) -> f64 {
        (self.end() - self.start()).abs()
    }
}

impl<'de> Deserialize<'de> for TimeGrid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            points: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        TimeGrid::new(raw.points).map_err(serde::de::Error::custom)
    }
}
